"""Set-difference losses between extracted and reconstructed delay sets.

Hungarian assignment with smooth-L1, plus Chamfer, Hausdorff and
greedy-sorted baselines, optionally decomposed so the smallest extracted
delay is always paired with the physical anchor.  All losses return a
gradient with respect to the reconstructed set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import C
from .superres import FeatureSet

LOSS_KINDS = ("hungarian", "chamfer", "hausdorff", "greedy")


@dataclass(frozen=True)
class Assignment:
    """Matched (extracted index, reconstructed index) pairs, injective in
    both coordinates."""

    pairs: tuple

    def __post_init__(self):
        pairs = tuple((int(a), int(b)) for a, b in self.pairs)
        if len({a for a, _ in pairs}) != len(pairs) or \
                len({b for _, b in pairs}) != len(pairs):
            raise ValueError("assignment must be injective in both coordinates")
        object.__setattr__(self, "pairs", pairs)

    def total_cost(self, cost: np.ndarray) -> float:
        return float(sum(cost[a, b] for a, b in self.pairs))


@dataclass(frozen=True)
class LossValue:
    value: float
    gradient: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.gradient)) or not np.isfinite(self.value):
            raise ValueError("loss and gradient must be finite")


def _lsa(cost: np.ndarray):
    """Minimum-cost assignment of all rows (requires n <= m)."""
    rows, cols = linear_sum_assignment(cost)
    return rows, cols


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost assignment; ties broken by the lexicographically
    smallest pair list."""
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    n, m = cost.shape
    if n > m:
        raise ValueError("need n <= m; pad or transpose the cost matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("costs must be finite")
    rows, cols = _lsa(cost)
    best = float(cost[rows, cols].sum())
    tol = 1e-12 * (1.0 + abs(best))
    # lexicographic refinement: fix columns row by row, keeping optimality
    fixed_cols: list[int] = []
    big = cost.max() + 1.0
    work = cost.copy()
    for i in range(n):
        assigned = None
        for j in range(m):
            if j in fixed_cols:
                continue
            sub = np.delete(np.delete(work, i, axis=0), fixed_cols + [j], axis=1)
            rest = 0.0
            if sub.shape[0]:
                rr, cc = _lsa(sub)
                rest = float(sub[rr, cc].sum())
            forced = float(sum(cost[a, b] for a, b in zip(range(i), fixed_cols)))
            if forced + cost[i, j] + rest <= best + tol:
                assigned = j
                break
        if assigned is None:  # numerically unreachable; fall back
            assigned = int(cols[list(rows).index(i)])
        fixed_cols.append(assigned)
        work[i, :] = big  # row consumed
    return Assignment(pairs=tuple(zip(range(n), fixed_cols)))


def smooth_l1(x, beta: float = 1.0):
    """Huber-style loss: 0.5 x^2 / beta inside |x| < beta, |x| - beta/2
    outside.  Returns (value, derivative), elementwise."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    x = np.asarray(x, dtype=float)
    inside = np.abs(x) < beta
    value = np.where(inside, 0.5 * x * x / beta, np.abs(x) - 0.5 * beta)
    deriv = np.where(inside, x / beta, np.sign(x))
    return value, deriv


def _extracted_values(extracted) -> tuple[np.ndarray, str]:
    if isinstance(extracted, FeatureSet):
        return extracted.values, extracted.modality
    return np.asarray(extracted, dtype=float), "tof"


def set_loss(extracted, reconstructed, kind: str = "hungarian",
             los_decomposition: bool = True, beta: float = 1.0):
    """Loss between the extracted delay set and the reconstructed vector.

    Delays are rescaled by the speed of light into meters internally, so
    beta is in meters.  Returns (LossValue, Assignment); the gradient is
    with respect to the reconstructed vector in its input units (seconds).

    With los_decomposition the first extracted value is paired with
    reconstructed index 0 (the physical anchor) and the remainder matched
    by ``kind``; for TDoA features that leading zero pair is excluded from
    the mean.
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    e_s, modality = _extracted_values(extracted)
    r_s = np.asarray(reconstructed, dtype=float)
    n, m = e_s.size, r_s.size
    if n == 0:
        raise ValueError("empty extracted set")
    if n > m:
        raise ValueError("reconstructed set must be at least as large as "
                         "the extracted set")
    e = e_s * C
    r = r_s * C
    grad = np.zeros(m)
    pairs: list[tuple[int, int]] = []

    los_value = None
    if los_decomposition:
        pairs.append((0, 0))
        if modality != "tdoa":  # trivial 0-0 pair carries no information
            v, d = smooth_l1(e[0] - r[0], beta)
            los_value = float(v)
            los_grad = -float(d)
        eo, ro = e[1:], r[1:]
        off = 1
    else:
        eo, ro = e, r
        off = 0

    if eo.size == 0:
        value = los_value if los_value is not None else 0.0
        if los_value is not None:
            grad[0] = los_grad
        return (LossValue(value=value, gradient=grad * C),
                Assignment(tuple(pairs)))

    diffs = eo[:, None] - ro[None, :]
    vals, derivs = smooth_l1(diffs, beta)

    if kind in ("hungarian", "greedy"):
        # value = mean smooth-L1 over all matched pairs (LOS included)
        if kind == "hungarian":
            rows, cols = _lsa(vals)
        else:  # sort both ascending, pair positionally, truncate
            rows = np.argsort(eo, kind="stable")
            cols = np.argsort(ro, kind="stable")[: eo.size]
        total = 0.0
        for a, b in zip(rows, cols):
            total += float(vals[a, b])
            grad[b + off] += -float(derivs[a, b])
        n_terms = len(rows)
        if los_value is not None:
            total += los_value
            grad[0] += los_grad
            n_terms += 1
        value = total / n_terms
        grad /= n_terms
        pairs += [(int(a) + off, int(b) + off) for a, b in zip(rows, cols)]
        return (LossValue(value=value, gradient=grad * C),
                Assignment(tuple(pairs)))

    # chamfer / hausdorff: LOS term added on top, un-averaged
    near_r = np.argmin(np.abs(diffs), axis=1)
    near_e = np.argmin(np.abs(diffs), axis=0)
    fwd = vals[np.arange(eo.size), near_r]
    bwd = vals[near_e, np.arange(ro.size)]
    if kind == "chamfer":
        value = 0.5 * (float(fwd.mean()) + float(bwd.mean()))
        for a, b in enumerate(near_r):
            grad[b + off] += -0.5 * float(derivs[a, b]) / eo.size
        for b, a in enumerate(near_e):
            grad[b + off] += -0.5 * float(derivs[a, b]) / ro.size
    else:  # hausdorff: subgradient through the single active pair
        if fwd.max() >= bwd.max():
            a = int(np.argmax(fwd))
            b = int(near_r[a])
        else:
            b = int(np.argmax(bwd))
            a = int(near_e[b])
        value = float(vals[a, b])
        grad[b + off] += -float(derivs[a, b])
    if los_value is not None:
        value += los_value
        grad[0] += los_grad
    # report the min-cost matching for diagnostics / pruning
    rows, cols = _lsa(vals)
    pairs += [(int(a) + off, int(b) + off) for a, b in zip(rows, cols)]
    return (LossValue(value=float(value), gradient=grad * C),
            Assignment(tuple(pairs)))
