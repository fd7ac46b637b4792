"""Abnormal returns and quantile grouping.

The abnormal return is the gap between a realized normalized cross-section and
the autoencoder's reconstruction of it, divided per asset by the model's
training restoration error so that hard-to-fit assets do not dominate the
ranking.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autoencoder import AEModel, RestorationError
from .errors import AssignmentError
from .market_data import NormalizedReturnVector

logger = logging.getLogger(__name__)

XI_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class AbnormalReturnPanel:
    time: int
    tau_star: int
    asset_ids: tuple[str, ...]
    epsilon: np.ndarray
    epsilon_dagger: np.ndarray
    xi_used: np.ndarray

    @property
    def scorable(self) -> np.ndarray:
        return ~np.isnan(self.epsilon_dagger)


@dataclass(frozen=True, eq=False)
class QuantileAssignment:
    """Quantile labels ``1..Q`` per asset (``0`` marks an unscorable asset)."""

    time: int
    q_count: int
    asset_ids: tuple[str, ...]
    labels: np.ndarray

    def members(self, q: int) -> tuple[str, ...]:
        return tuple(self.asset_ids[i] for i in np.flatnonzero(self.labels == q))

    @property
    def quantile_members(self) -> list[tuple[str, ...]]:
        return [self.members(q) for q in range(1, self.q_count + 1)]

    @property
    def sizes(self) -> list[int]:
        return [int((self.labels == q).sum()) for q in range(1, self.q_count + 1)]


def abnormal_returns(realized: NormalizedReturnVector, model: AEModel, xi: RestorationError,
                     asset_ids=None, tau_star: int | None = None) -> AbnormalReturnPanel:
    """``eps = r - r_hat`` in normalized space and ``eps_dagger = eps / xi``.

    Assets whose restoration error is below ``XI_FLOOR`` get a NaN
    ``eps_dagger`` and are left out of the quantiles.
    """
    x = np.asarray(realized.values, dtype=np.float64)
    recon = model.reconstruct(x)
    eps = x - recon
    xi_v = np.asarray(xi.xi, dtype=np.float64)
    ok = xi_v >= XI_FLOOR
    if not ok.all():
        logger.info("t=%d: %d assets unscorable (restoration error below floor)",
                    realized.time, int((~ok).sum()))
    dagger = np.full_like(eps, np.nan)
    dagger[ok] = eps[ok] / xi_v[ok]
    if asset_ids is None:
        asset_ids = tuple(str(i) for i in range(len(x)))
    return AbnormalReturnPanel(realized.time, int(tau_star or realized.tau), tuple(asset_ids),
                               eps, dagger, xi_v)


def quantile_sizes(n: int, q_count: int) -> list[int]:
    """Group sizes for ``n`` assets in ``q_count`` quantiles.

    The ``n mod Q`` extra assets go to the quantiles nearest the middle first,
    moving outward (the upper of two equidistant quantiles first), so the
    traded extremes keep the floor size whenever possible.
    """
    base, extra = divmod(n, q_count)
    sizes = [base] * q_count
    centre = (q_count + 1) / 2.0
    order = sorted(range(1, q_count + 1), key=lambda q: (abs(q - centre), -q))
    for q in order[:extra]:
        sizes[q - 1] += 1
    return sizes


def assign_quantiles(panel: AbnormalReturnPanel, q_count: int) -> QuantileAssignment:
    """Sort scorable assets by ``eps_dagger`` (ties by asset id) and cut into ``q_count`` groups."""
    if q_count < 1:
        raise ValueError("q_count must be >= 1")
    scorable = np.flatnonzero(panel.scorable)
    if len(scorable) < q_count:
        raise AssignmentError(
            f"t={panel.time}: {len(scorable)} scorable assets for {q_count} quantiles"
        )
    n = len(panel.asset_ids)
    id_rank = np.empty(n, dtype=np.int64)
    id_rank[sorted(range(n), key=panel.asset_ids.__getitem__)] = np.arange(n)
    order = np.lexsort((id_rank[scorable], panel.epsilon_dagger[scorable]))
    labels = np.zeros(len(panel.asset_ids), dtype=np.int64)
    start = 0
    for q, size in enumerate(quantile_sizes(len(scorable), q_count), start=1):
        labels[scorable[order[start:start + size]]] = q
        start += size
    return QuantileAssignment(panel.time, q_count, panel.asset_ids, labels)


def write_abnormal_returns(panels: list[AbnormalReturnPanel], target, offset: int | None = None) -> None:
    """Tabular export: one row per ``(time, asset)``."""
    head = ["offset"] if offset is not None else []
    lines = [",".join(head + ["time", "asset", "epsilon", "epsilon_dagger", "xi"])]
    for p in panels:
        for i, asset in enumerate(p.asset_ids):
            row = ([str(offset)] if offset is not None else []) + [
                str(p.time), asset, repr(float(p.epsilon[i])),
                repr(float(p.epsilon_dagger[i])), repr(float(p.xi_used[i]))]
            lines.append(",".join(row))
    text = "\n".join(lines) + "\n"
    if hasattr(target, "write"):
        target.write(text)
    else:
        with open(target, "w") as fh:
            fh.write(text)
