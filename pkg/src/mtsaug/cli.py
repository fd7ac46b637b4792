"""Command-line front end.

Subcommands: ``synth``, ``eval-generalization``, ``sweep-compression``,
``backtest`` and ``diagnose``.  Every command writes delimited text reports
plus a ``manifest.json`` into a run directory named after the hash of its
resolved configuration.  Exit codes: 0 success, 1 usage or configuration
error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .autoencoder import hidden_width
from .backtest import config_dict, run_backtest, write_backtest
from .config import MODES, RunConfig, build_config, read_config_file
from .diagnostics import (
    SelectionHistory,
    abnormal_autocorr,
    jaccard_stats,
)
from .errors import ConfigError, MtsaugError, UndefinedStatisticError
from .experiments import (
    COMPRESSION_GRID,
    compression_sweep,
    default_test_times,
    generalization_grid,
)
from .market_data import PricePanel, load_price_panel, write_price_panel
from .synth import simulate, spec_dict, write_ledger

logger = logging.getLogger("mtsaug")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

BACKTEST_FILES = ("abnormal.csv", "regression.csv", "manifest.json")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# flag name -> (RunConfig field, type, help)
_COMMON = [
    ("--mode", "mode", str, f"data source, one of {', '.join(MODES)}"),
    ("--data", "data", str, "price panel file (stocks/fx modes)"),
    ("--seed", "seed", int, "model seed (default 0)"),
    ("--out", "out", str, "parent directory for run directories (default runs)"),
]
_MODEL = [
    ("--tau-star", "tau_star", int, "target timescale (default 20; 3 in fx mode)"),
    ("--regime", "regime", str, "MTS, STS or FT (default MTS)"),
    ("--activation", "activation", str, "hidden activation, linear or tanh (default linear)"),
    ("--compression", "compression_ratio", float, "middle-layer width in percent of inputs (default 50)"),
    ("--count", "count", int, "window count per timescale (default 1200)"),
    ("--epochs", "epochs", int, "training epochs (default 50)"),
    ("--batch-size", "batch_size", int, "minibatch size (default 128)"),
]
_SYNTH = [
    ("--assets", "assets", int, "number of assets (default 50)"),
    ("--days", "days", int, "number of trading days (default 3000)"),
    ("--factors", "factors", int, "number of latent factors (default 10)"),
    ("--loading-scale", "loading_scale", float, "loading standard deviation (default 1)"),
    ("--factor-vol", "factor_vol", float, "daily factor volatility (default 0.004)"),
    ("--idio-vol", "idio_vol", float, "daily idiosyncratic volatility (default 0.01)"),
    ("--mispricing-prob", "mispricing_prob", float, "shock probability per asset-day (default 0)"),
    ("--mispricing-scale", "mispricing_scale", float, "shock size in log-return (default 0.05)"),
    ("--rho", "rho", float, "share of each shock added back over the following days (default 0)"),
    ("--reversal-days", "reversal_days", int, "days over which the shock tail is spread (default tau*)"),
    ("--synth-seed", "synth_seed", int, "generator seed (default 0)"),
]
_TEST = [
    ("--tau-max", "tau_max", int, "largest timescale in the grid (default 20)"),
    ("--test-start", "test_start", int, "first test day (default: earliest with full history)"),
    ("--test-count", "test_count", int, "number of consecutive test days (default 20)"),
]
_BACKTEST = [
    ("--q", "q_count", int, "number of quantiles (default 5; 2 in fx mode)"),
    ("--start", "start", int, "first rebalance day index"),
    ("--end", "end", int, "last rebalance day index"),
    ("--rebalances", "rebalances", int, "cap on rebalances per offset"),
    ("--offsets", "offsets", str, "comma-separated offsets (default all tau*)"),
]


def _add(parser, specs):
    for flag, dest, typ, help_ in specs:
        parser.add_argument(flag, dest=dest, type=typ, default=None, help=help_)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mtsaug", description="Multi-timescale autoencoder mispricing toolkit.")
    parser.add_argument("--version", action="version", version=f"mtsaug {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    commands = {
        "synth": ("write a synthetic price panel and its shock ledger", [_SYNTH]),
        "eval-generalization": ("RMSE grid over regime, activation and tau*", [_SYNTH, _MODEL, _TEST]),
        "sweep-compression": ("RMSE against the compression ratio", [_SYNTH, _MODEL, _TEST]),
        "backtest": ("rolling long-short backtest over staggered offsets", [_SYNTH, _MODEL, _BACKTEST]),
    }
    for name, (help_, groups) in commands.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", dest="config_file", default=None, help="key = value config file")
        _add(p, _COMMON)
        for g in groups:
            _add(p, g)
        if name == "backtest":
            p.add_argument("--restricted", dest="restricted", action="store_true", default=None,
                           help="bar direct long/short reversals (default on; off in fx mode)")
            p.add_argument("--unrestricted", dest="restricted", action="store_false")
            p.add_argument("--warm-start", dest="warm_start", action="store_true", default=None,
                           help="start each fit from the previous rebalance's weights")

    p = sub.add_parser("diagnose", help="autocorrelation, Jaccard and cumulative-beta reports")
    p.add_argument("run_dir", help="backtest run directory")
    p.add_argument("--max-lag", dest="max_lag", type=int, default=5)
    p.add_argument("--out", dest="out", default=None, help="output directory (default: run_dir)")
    return parser


def _resolve(args) -> RunConfig:
    file_values = read_config_file(args.config_file) if args.config_file else {}
    flags = {k: v for k, v in vars(args).items()
             if k not in ("command", "config_file", "verbose") and v is not None}
    if args.command == "synth":
        flags["mode"] = "synth"
    return build_config(file_values, flags)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _run_dir(cfg: RunConfig, command: str) -> Path:
    d = Path(cfg.out) / f"{command}-{cfg.digest(command)}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_manifest(run_dir: Path, command: str, cfg: RunConfig, files, extra=None) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "numpy": np.__version__,
        "pandas": pd.__version__,
        # the output location is not part of a run's identity
        "config": {k: v for k, v in cfg.to_dict().items() if k != "out"},
        "files": {p.name: _sha256(p) for p in sorted(files)},
    }
    if extra:
        manifest.update(extra)
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_panel(cfg: RunConfig) -> PricePanel:
    if cfg.mode == "synth":
        return simulate(cfg.synth_spec()).panel
    return load_price_panel(cfg.data)


def _write_table(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    return path


def _f(x: float) -> str:
    return repr(float(x))


def cmd_synth(cfg: RunConfig) -> int:
    market = simulate(cfg.synth_spec())
    run_dir = _run_dir(cfg, "synth")
    files = [run_dir / "prices.csv", run_dir / "ledger.csv"]
    write_price_panel(market.panel, files[0])
    write_ledger(market.ledger, market.panel.asset_ids, files[1])
    _write_manifest(run_dir, "synth", cfg, files, {"synth_spec": spec_dict(cfg.synth_spec())})
    p = market.panel
    print(f"assets={p.n_assets} days={p.n_times} cells={p.n_assets * p.n_times} "
          f"missing={p.missing_cells} shocks={len(market.ledger)}")
    print(run_dir)
    return EXIT_OK


def _test_times(cfg: RunConfig, panel: PricePanel, tau_max: int):
    if cfg.test_start is None:
        return default_test_times(panel, tau_max, cfg.count, cfg.test_count)
    end = min(cfg.test_start + cfg.test_count - 1, panel.last_time)
    return tuple(range(cfg.test_start, end + 1))


def cmd_eval_generalization(cfg: RunConfig) -> int:
    panel = _load_panel(cfg)
    times = _test_times(cfg, panel, cfg.tau_max)
    results = generalization_grid(panel, range(2, cfg.tau_max + 1), times,
                                  compression_ratio=cfg.compression_ratio, count=cfg.count,
                                  seed=cfg.seed, epochs=cfg.epochs, batch_size=cfg.batch_size)
    run_dir = _run_dir(cfg, "eval-generalization")
    rows = [(r.regime, r.activation, r.tau_star, _f(r.rmse), r.n_times, r.n_assets) for r in results]
    path = _write_table(run_dir / "generalization.csv",
                        ["regime", "activation", "tau_star", "rmse", "n_times", "n_assets"], rows)
    _write_manifest(run_dir, "eval-generalization", cfg, [path],
                    {"test_times": [int(t) for t in times]})
    print(run_dir)
    return EXIT_OK


def cmd_sweep_compression(cfg: RunConfig) -> int:
    panel = _load_panel(cfg)
    times = _test_times(cfg, panel, cfg.tau_star)
    results = compression_sweep(panel, cfg.tau_star, times, COMPRESSION_GRID, cfg.regime,
                                cfg.activation, cfg.count, cfg.seed, cfg.epochs, cfg.batch_size)
    run_dir = _run_dir(cfg, "sweep-compression")
    rows = [(_f(r.compression_ratio), hidden_width(panel.n_assets, r.compression_ratio),
             _f(r.rmse), r.n_times) for r in results]
    path = _write_table(run_dir / "compression.csv",
                        ["compression_ratio", "hidden_dim", "rmse", "n_times"], rows)
    _write_manifest(run_dir, "sweep-compression", cfg, [path],
                    {"test_times": [int(t) for t in times]})
    print(run_dir)
    return EXIT_OK


def cmd_backtest(cfg: RunConfig) -> int:
    panel = _load_panel(cfg)
    bt_cfg = cfg.backtest_config()
    result = run_backtest(bt_cfg, panel)
    run_dir = _run_dir(cfg, "backtest")
    files = write_backtest(result, run_dir)
    failures = result.failures
    _write_manifest(run_dir, "backtest", cfg, files,
                    {"backtest": config_dict(bt_cfg), "asset_ids": list(result.asset_ids),
                     "failures": len(failures)})
    for f in failures:
        print(f"offset {f.offset} failed at t={f.time}: {f.error}: {f.message}", file=sys.stderr)
    print(run_dir)
    return EXIT_RUNTIME if failures else EXIT_OK


def _selection_history(group: pd.DataFrame, q_count: int) -> SelectionHistory:
    times, longs, shorts = [], [], []
    for t, g in group.groupby("time", sort=True):
        times.append(int(t))
        longs.append(frozenset(g.loc[g["label"] == 1, "asset"]))
        shorts.append(frozenset(g.loc[g["label"] == q_count, "asset"]))
    return SelectionHistory(tuple(times), tuple(longs), tuple(shorts))


def cmd_diagnose(run_dir: Path, max_lag: int, out_dir: Path | None) -> int:
    run_dir = Path(run_dir)
    missing = [name for name in BACKTEST_FILES if not (run_dir / name).exists()]
    if missing:
        raise MtsaugError(f"{run_dir} is not a backtest run directory; missing {', '.join(missing)} "
                          f"(expected {', '.join(BACKTEST_FILES)})")
    if max_lag < 1:
        raise ConfigError("max-lag must be >= 1")
    manifest = json.loads((run_dir / "manifest.json").read_text())
    q_count = int(manifest["backtest"]["q_count"])
    abnormal = pd.read_csv(run_dir / "abnormal.csv", dtype={"asset": str})
    regression = pd.read_csv(run_dir / "regression.csv")
    out = Path(out_dir) if out_dir is not None else run_dir
    out.mkdir(parents=True, exist_ok=True)
    written = []

    # autocorrelation of eps_dagger on each offset's rebalance grid, averaged per asset
    per_lag: dict[int, list[np.ndarray]] = {}
    for _, g in abnormal.groupby("offset", sort=True):
        hist = g.pivot(index="time", columns="asset", values="epsilon_dagger").sort_index(axis=1)
        for lag in range(1, max_lag + 1):
            if len(hist) < lag + 2:
                continue
            per_lag.setdefault(lag, []).append(abnormal_autocorr(hist.to_numpy(), lag).values)
    rows = []
    for lag in range(1, max_lag + 1):
        if lag not in per_lag:
            logger.warning("lag %d exceeds every offset's history; row omitted", lag)
            continue
        stacked = np.vstack(per_lag[lag])
        with np.errstate(invalid="ignore"):
            ok = ~np.isnan(stacked).all(axis=0)
        v = np.nanmean(stacked[:, ok], axis=0) if ok.any() else np.array([])
        if len(v) == 0:
            logger.warning("lag %d: no asset has a defined autocorrelation; row omitted", lag)
            continue
        q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
        rows.append([lag, len(v), int((~ok).sum())] + [_f(x) for x in q] + [_f(v.mean())])
    written.append(_write_table(out / "autocorr.csv",
                                ["lag", "n_assets", "excluded", "min", "q1", "median", "q3", "max",
                                 "mean"], rows))

    rows = []
    for offset, g in abnormal.groupby("offset", sort=True):
        hist = _selection_history(g, q_count)
        for n in range(1, max_lag + 1):
            try:
                a, b, c = jaccard_stats(hist, n)
            except UndefinedStatisticError as exc:
                logger.warning("offset %s n=%d: %s; row omitted", offset, n, exc)
                continue
            rows.append([int(offset), n, _f(a), _f(b), _f(c), _f(a - b - c)])
    written.append(_write_table(out / "jaccard.csv",
                                ["offset", "n", "A", "B", "C", "A_minus_B_minus_C"], rows))

    rows = []
    for offset, g in regression.groupby("offset", sort=True):
        g = g.sort_values("time")
        for t, b, cb in zip(g["time"], g["beta"], np.cumsum(g["beta"].to_numpy())):
            rows.append([int(offset), int(t), _f(b), _f(cb)])
    written.append(_write_table(out / "beta.csv", ["offset", "time", "beta", "cum_beta"], rows))

    total = float(regression["beta"].sum()) if len(regression) else 0.0
    summary = {"source": str(run_dir), "max_lag": max_lag, "cum_beta_total": total,
               "files": {p.name: _sha256(p) for p in written}}
    (out / "diagnose.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("mtsaug: a subcommand is required (see --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "diagnose":
            return cmd_diagnose(Path(args.run_dir), args.max_lag,
                                Path(args.out) if args.out else None)
        cfg = _resolve(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MtsaugError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    handlers = {
        "synth": cmd_synth,
        "eval-generalization": cmd_eval_generalization,
        "sweep-compression": cmd_sweep_compression,
        "backtest": cmd_backtest,
    }
    try:
        return handlers[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MtsaugError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
