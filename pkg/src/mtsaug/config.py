"""Run configuration: mode defaults, flat key-value files and validation.

Precedence is command-line flags > config file > mode defaults.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import augmentation as aug
from .backtest import BacktestConfig
from .errors import ConfigError
from .synth import SynthSpec

MODES = ("stocks", "fx", "synth")

MODE_DEFAULTS = {
    "stocks": {"tau_star": 20, "q_count": 5, "restricted": True},
    "synth": {"tau_star": 20, "q_count": 5, "restricted": True},
    "fx": {"tau_star": 3, "q_count": 2, "restricted": False},
}


@dataclass(frozen=True)
class RunConfig:
    mode: str = "synth"
    data: str | None = None
    tau_star: int | None = None
    q_count: int | None = None
    regime: str = aug.MTS
    activation: str = "linear"
    compression_ratio: float = 50.0
    count: int = aug.DEFAULT_COUNT
    restricted: bool | None = None
    start: int | None = None
    end: int | None = None
    rebalances: int | None = None
    offsets: tuple[int, ...] | None = None
    seed: int = 0
    epochs: int = 50
    batch_size: int = 128
    warm_start: bool = False
    tau_max: int = 20
    test_start: int | None = None
    test_count: int = 20
    max_lag: int = 5
    out: str = "runs"
    # synthetic market (mode=synth)
    assets: int = 50
    days: int = 3000
    factors: int = 10
    loading_scale: float = 1.0
    factor_vol: float = 0.004
    idio_vol: float = 0.01
    mispricing_prob: float = 0.0
    mispricing_scale: float = 0.05
    rho: float = 0.0
    reversal_days: int | None = None
    synth_seed: int = 0

    def resolved(self) -> "RunConfig":
        """Fill mode-dependent defaults that were left unset."""
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        updates = {k: v for k, v in MODE_DEFAULTS[self.mode].items() if getattr(self, k) is None}
        cfg = replace(self, **updates)
        if cfg.reversal_days is None:
            cfg = replace(cfg, reversal_days=cfg.tau_star)
        return cfg

    def validate(self) -> "RunConfig":
        cfg = self.resolved()
        if cfg.mode in ("stocks", "fx"):
            if not cfg.data:
                raise ConfigError(f"mode {cfg.mode} needs a data file (--data)")
            if not Path(cfg.data).exists():
                raise ConfigError(f"data file not found: {cfg.data}")
        if cfg.tau_star < 1:
            raise ConfigError("tau_star must be >= 1")
        if cfg.q_count < 2:
            raise ConfigError("q_count must be >= 2")
        if cfg.regime not in aug.REGIMES:
            raise ConfigError(f"regime must be one of {aug.REGIMES}")
        if cfg.regime == aug.FT and cfg.tau_star < 2:
            raise ConfigError("fine-tuning needs tau_star >= 2")
        if cfg.activation not in ("linear", "tanh"):
            raise ConfigError("activation must be linear or tanh")
        if not 0 < cfg.compression_ratio <= 100:
            raise ConfigError("compression_ratio must lie in (0, 100]")
        for name in ("count", "epochs", "batch_size", "tau_max", "test_count", "max_lag"):
            if getattr(cfg, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if cfg.rebalances is not None and cfg.rebalances < 1:
            raise ConfigError("rebalances must be >= 1")
        if cfg.offsets is not None:
            bad = [o for o in cfg.offsets if not 0 <= o < cfg.tau_star]
            if bad or len(set(cfg.offsets)) != len(cfg.offsets):
                raise ConfigError(f"offsets must be distinct values in [0, {cfg.tau_star})")
        if cfg.seed < 0 or cfg.synth_seed < 0:
            raise ConfigError("seeds must be non-negative")
        if cfg.mode == "synth":
            cfg.synth_spec().validate()
        return cfg

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            n_assets=self.assets, n_days=self.days, n_factors=self.factors,
            loading_scale=self.loading_scale, factor_vol=self.factor_vol,
            idio_vol=self.idio_vol, mispricing_prob=self.mispricing_prob,
            mispricing_scale=self.mispricing_scale, reversal_coeff=self.rho,
            reversal_days=self.reversal_days or self.tau_star or 20, seed=self.synth_seed,
        )

    def backtest_config(self) -> BacktestConfig:
        return BacktestConfig(
            tau_star=self.tau_star, q_count=self.q_count, regime=self.regime,
            activation=self.activation, compression_ratio=self.compression_ratio,
            count=self.count, restricted=self.restricted, seed=self.seed, start=self.start,
            end=self.end, rebalances=self.rebalances, offsets=self.offsets,
            epochs=self.epochs, batch_size=self.batch_size, warm_start=self.warm_start,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["offsets"] is not None:
            d["offsets"] = list(d["offsets"])
        return d

    def digest(self, command: str) -> str:
        """Stable hash of the resolved configuration, used to name run directories."""
        d = self.to_dict()
        d.pop("out")
        if d.get("data"):
            d["data"] = os.path.abspath(d["data"])
        payload = json.dumps({"command": command, "config": d}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw):
    """Convert a string from a config file or flag into the field's type."""
    if raw is None or not isinstance(raw, str):
        return raw
    text = raw.strip()
    typ = str(_FIELDS[name].type)
    if text.lower() in ("none", "null", ""):
        if "None" in typ:
            return None
        raise ConfigError(f"{name} cannot be empty")
    try:
        if "bool" in typ:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "tuple" in typ:
            return tuple(int(x) for x in text.replace(";", ",").split(",") if x.strip())
        if typ.startswith("int"):
            return int(text)
        if typ.startswith("float"):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return text


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines (``#`` comments, blank lines ignored)."""
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def build_config(file_values: dict | None = None, flag_values: dict | None = None) -> RunConfig:
    merged = {}
    merged.update(file_values or {})
    merged.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    unknown = set(merged) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
    return RunConfig(**{k: _coerce(k, v) for k, v in merged.items()}).validate()
