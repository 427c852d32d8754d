"""Evaluation up to isometry: alignment, error statistics, exports.

The trained map is identifiable only up to a global rotation/translation
(and possibly a reflection), so a single orthogonal alignment is fitted
on a small labeled subset and all metrics are reported after applying it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import Isometry
from .matchloss import hungarian

DEFAULT_LABELED = 32


@dataclass(frozen=True)
class ErrorStats:
    """Per-sample error summary (meters)."""

    mean: float
    median: float
    q90: float
    errors: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.errors, dtype=float)
        if e.size == 0 or np.any(e < 0):
            raise ValueError("need a nonempty nonnegative error vector")
        object.__setattr__(self, "errors", e)
        if not (0 <= self.median <= self.q90):
            raise ValueError("quantiles out of order")

    @classmethod
    def from_errors(cls, errors) -> "ErrorStats":
        e = np.asarray(errors, dtype=float)
        if e.size == 0:
            raise ValueError("need a nonempty nonnegative error vector")
        return cls(mean=float(e.mean()),
                   median=float(np.quantile(e, 0.5)),
                   q90=float(np.quantile(e, 0.9)),
                   errors=e)


@dataclass(frozen=True)
class AlignmentFit:
    isometry: Isometry
    residual: float  # RMS, meters
    reflected: bool

    def __post_init__(self):
        if self.residual < 0:
            raise ValueError("residual must be nonnegative")


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.sum(x * x, axis=1))))


def fit_isometry(predicted, truth, allow_reflection: bool = True
                 ) -> AlignmentFit:
    """Least-squares orthogonal alignment mapping predictions onto truth.

    Centroid subtraction followed by an SVD of the cross-covariance;
    with allow_reflection the sign of the weakest singular direction is
    chosen by residual, otherwise det(R) = +1 is enforced.
    """
    P = np.asarray(predicted, dtype=float)
    Q = np.asarray(truth, dtype=float)
    if P.shape != Q.shape or P.ndim != 2:
        raise ValueError("predicted/truth shape mismatch")
    k, d = P.shape
    if k < d + 1:
        raise ValueError(f"need at least {d + 1} labeled points")
    cp, cq = P.mean(axis=0), Q.mean(axis=0)
    Pc, Qc = P - cp, Q - cq
    if np.linalg.matrix_rank(Pc, tol=1e-9 * max(1.0, np.abs(Pc).max())) < d:
        raise ValueError("degenerate configuration: labeled predictions are "
                         "collinear/coplanar")
    H = Pc.T @ Qc
    U, _, Vt = np.linalg.svd(H)
    candidates = []
    for flip in (False, True):
        S = np.eye(d)
        S[-1, -1] = -1.0 if flip else 1.0
        R = Vt.T @ S @ U.T
        res = _rms(Pc @ R.T - Qc)
        candidates.append((res, R))
    if allow_reflection:
        res, R = min(candidates, key=lambda c: c[0])
    else:
        res, R = min(((r, R) for r, R in candidates
                      if np.linalg.det(R) > 0), key=lambda c: c[0])
    t = cq - R @ cp
    return AlignmentFit(isometry=Isometry(R=R, t=t),
                        residual=_rms(P @ R.T + t - Q),
                        reflected=bool(np.linalg.det(R) < 0))


def position_errors(predicted, truth, fit: AlignmentFit) -> ErrorStats:
    """Per-sample Euclidean error after applying the fitted isometry."""
    P = np.asarray(predicted, dtype=float)
    Q = np.asarray(truth, dtype=float)
    if P.size == 0:
        raise ValueError("empty test set")
    aligned = fit.isometry.apply(P)
    return ErrorStats.from_errors(np.linalg.norm(aligned - Q, axis=1))


def va_errors(retained_vas, true_vas, fit: AlignmentFit):
    """Mapping error of the retained virtual anchors.

    Applies the position-fitted isometry to the retained VA coordinates
    and Hungarian-matches them to the true image-source set on Euclidean
    cost.  Returns (ErrorStats over matched pairs, number of unmatched
    true VAs).
    """
    V = np.asarray(retained_vas, dtype=float)
    T = np.asarray(true_vas, dtype=float)
    if V.size == 0:
        raise ValueError("no retained virtual anchors")
    aligned = fit.isometry.apply(V)
    cost = np.linalg.norm(aligned[:, None, :] - T[None, :, :], axis=2)
    if cost.shape[0] <= cost.shape[1]:
        assignment = hungarian(cost)
        errs = [cost[a, b] for a, b in assignment.pairs]
        unmatched_true = T.shape[0] - len(assignment.pairs)
    else:
        assignment = hungarian(cost.T)
        errs = [cost[b, a] for a, b in assignment.pairs]
        unmatched_true = 0
    return ErrorStats.from_errors(np.asarray(errs)), int(unmatched_true)


def export_cdf(errors, path) -> None:
    """CSV of sorted error against the empirical CDF."""
    e = np.sort(np.asarray(errors, dtype=float))
    if e.size == 0:
        raise ValueError("empty error vector")
    with open(path, "w") as f:
        f.write("error_m,cdf\n")
        for i, v in enumerate(e):
            f.write(f"{v:.9g},{(i + 1) / e.size:.9g}\n")


def export_pointcloud(positions, magnitudes, va_coords, path) -> None:
    """JSON point cloud: test positions color-keyed by log CSI magnitude,
    with retained virtual anchors flagged separately."""
    positions = np.asarray(positions, dtype=float)
    cloud = {
        "n_points": int(positions.shape[0]),
        "points": [
            {"pos": list(map(float, p)), "log_magnitude": float(m)}
            for p, m in zip(positions, magnitudes)
        ],
        "virtual_anchors": [list(map(float, v))
                            for v in np.asarray(va_coords, dtype=float)],
    }
    with open(path, "w") as f:
        json.dump(cloud, f, indent=1)


def write_metrics(path, pos_stats: ErrorStats, va_stats: ErrorStats = None,
                  unmatched_true_vas: int = None, fit: AlignmentFit = None
                  ) -> dict:
    """metrics.json with the table columns used throughout."""
    metrics = {"mean": pos_stats.mean, "median": pos_stats.median,
               "q90": pos_stats.q90}
    if va_stats is not None:
        metrics["va_median"] = va_stats.median
        metrics["va_q90"] = va_stats.q90
        metrics["unmatched_true_vas"] = unmatched_true_vas
    if fit is not None:
        metrics["alignment_residual"] = fit.residual
        metrics["alignment_reflected"] = fit.reflected
    with open(path, "w") as f:
        json.dump(metrics, f, indent=2)
    return metrics
