"""Putative nearest-neighbor descriptor matching and the two false-match
filters: the Lowe ratio test and neighbor-consistency geometric
verification.  The number of surviving matches is the match score g.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .detector import Keypoint
from .errors import ParameterError

INF = float("inf")


@dataclass(frozen=True)
class Match:
    query_index: int
    db_index: int
    d1: float  # squared distance to nearest
    d2: float  # squared distance to second nearest (inf if only 1 candidate)


@dataclass(frozen=True)
class GvParams:
    alpha: int = 15
    rho: float = 0.33

    def validate(self) -> None:
        if self.alpha < 1:
            raise ParameterError("alpha must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ParameterError("rho must be in [0, 1]")


def putative_matches(
    v_q: np.ndarray,
    v_i: np.ndarray,
    q_degenerate: np.ndarray | None = None,
    i_degenerate: np.ndarray | None = None,
) -> list[Match]:
    """One match per non-degenerate query descriptor: nearest and
    second-nearest non-degenerate database descriptor by squared l2,
    ties to the lowest db index."""
    v_q = np.asarray(v_q, dtype=np.float64).reshape(-1, 128)
    v_i = np.asarray(v_i, dtype=np.float64).reshape(-1, 128)
    q_mask = (
        ~np.asarray(q_degenerate, bool)
        if q_degenerate is not None
        else np.ones(len(v_q), bool)
    )
    i_mask = (
        ~np.asarray(i_degenerate, bool)
        if i_degenerate is not None
        else np.ones(len(v_i), bool)
    )
    q_idx = np.nonzero(q_mask)[0]
    i_idx = np.nonzero(i_mask)[0]
    if len(q_idx) == 0 or len(i_idx) == 0:
        return []
    qs = v_q[q_idx]
    ds = v_i[i_idx]
    d2 = (
        (qs**2).sum(axis=1)[:, None]
        - 2.0 * qs @ ds.T
        + (ds**2).sum(axis=1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    best = np.argmin(d2, axis=1)
    best_d = d2[np.arange(len(qs)), best]
    out = []
    if d2.shape[1] == 1:
        for row, qi in enumerate(q_idx):
            out.append(
                Match(int(qi), int(i_idx[0]), float(best_d[row]), INF)
            )
        return out
    d2[np.arange(len(qs)), best] = INF
    second_d = d2.min(axis=1)
    for row, qi in enumerate(q_idx):
        out.append(
            Match(
                int(qi),
                int(i_idx[best[row]]),
                float(best_d[row]),
                float(second_d[row]),
            )
        )
    return out


def lr_filter(matches: list[Match], ratio: float = 0.8) -> list[Match]:
    """Lowe ratio test on squared distances: keep iff d1 < ratio^2 * d2.

    A missing second neighbor (d2 = inf) keeps the match.
    """
    r2 = ratio * ratio
    return [m for m in matches if m.d2 == INF or m.d1 < r2 * m.d2]


def neighbor_table(kps: list[Keypoint], alpha: int) -> np.ndarray:
    """Indices of the alpha spatially nearest keypoints per keypoint
    (anchor excluded), ties broken by index.  Shape (n, min(alpha, n-1)).
    """
    n = len(kps)
    take = min(alpha, n - 1)
    if take <= 0:
        return np.zeros((n, 0), dtype=np.int64)
    pts = np.asarray([[kp.x, kp.y] for kp in kps])
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, INF)
    idx = np.arange(n)
    order = np.lexsort((np.broadcast_to(idx, (n, n)), d2), axis=1)
    return order[:, :take].astype(np.int64)


def gv_filter(
    matches: list[Match],
    k_q: list[Keypoint],
    k_i: list[Keypoint],
    params: GvParams = GvParams(),
    nq_table: np.ndarray | None = None,
    ni_table: np.ndarray | None = None,
) -> list[Match]:
    """Neighbor-consistency check.  A match (x -> y) is kept iff at least
    ceil(rho * |N_x|) of the alpha nearest keypoints around k_x have a
    putative match landing inside the alpha nearest around k_y.  The full
    putative set is used (GV and the ratio test are alternatives, not a
    chain)."""
    params.validate()
    if not matches:
        return []
    if nq_table is None:
        nq_table = neighbor_table(k_q, params.alpha)
    if ni_table is None:
        ni_table = neighbor_table(k_i, params.alpha)

    n_q, n_i = len(k_q), len(k_i)
    match_map = np.full(n_q, -1, dtype=np.int64)
    for m in matches:
        match_map[m.query_index] = m.db_index

    in_ny = np.zeros((n_i, n_i), dtype=bool)
    rows = np.repeat(np.arange(n_i), ni_table.shape[1])
    if ni_table.size:
        in_ny[rows, ni_table.ravel()] = True

    kept = []
    for m in matches:
        neigh = nq_table[m.query_index]
        if len(neigh) == 0:
            kept.append(m)  # no neighbors to check; threshold ceil(rho*0)=0
            continue
        mapped = match_map[neigh]
        valid = mapped >= 0
        count = int(np.count_nonzero(in_ny[m.db_index, mapped[valid]]))
        if count >= math.ceil(params.rho * len(neigh)):
            kept.append(m)
    return kept


def match_score(
    v_q: np.ndarray,
    k_q: list[Keypoint],
    v_i: np.ndarray,
    k_i: list[Keypoint],
    method: str,
    ratio: float = 0.8,
    gv_params: GvParams = GvParams(),
    q_degenerate: np.ndarray | None = None,
    i_degenerate: np.ndarray | None = None,
    nq_table: np.ndarray | None = None,
    ni_table: np.ndarray | None = None,
) -> int:
    """Match score g: number of putative matches surviving the filter."""
    matches = putative_matches(v_q, v_i, q_degenerate, i_degenerate)
    if method == "lr":
        return len(lr_filter(matches, ratio))
    if method == "gv":
        return len(
            gv_filter(matches, k_q, k_i, gv_params, nq_table, ni_table)
        )
    raise ParameterError(f"unknown match method {method!r}")
