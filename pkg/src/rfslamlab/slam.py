"""Encoder-decoder SLAM model and trainer.

The encoder maps its input (ToF set, CSI, or TDoA set) to a position; the
physics decoder maps that position plus learnable virtual-anchor
coordinates to a reconstructed delay vector.  Both are trained end-to-end
against extracted delay sets with a set-matching loss, under symmetry-
breaking coordinate constraints, with optional restarts and post-training
pruning of unused virtual anchors.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from .geometry import C
from .matchloss import set_loss
from .superres import FeatureSet

# positions closer than this to an anchor get a clamped (zero) gradient
MIN_ANCHOR_DISTANCE = 1e-9


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 64
    lr: float = 3e-3
    loss_kind: str = "hungarian"
    beta: float = 1.0
    n_vas: int = 8
    seed: int = 0
    modality: str = "tof"
    va_init_scale: float = 5.0
    n_restarts: int = 3
    va_lr: float | None = None  # anchor warmup rate; defaults to 10x lr
    pretrain_epochs: int = 40
    warmup_epochs: int = 100

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("invalid training configuration")
        if self.modality not in ("tof", "tdoa"):
            raise ValueError("modality must be 'tof' or 'tdoa'")


class SlamModel:
    """Encoder + M learnable virtual anchors with a frozen-coordinate mask.

    Row 0 of ``va`` is the physical anchor, pinned at the origin.  One VA
    is pinned to the last coordinate axis (2D: (0, y); 3D: (0, 0, z)) and,
    in 3D, a second VA to the (y, z) plane, removing the rotation group.
    Reflections remain and are resolved at evaluation time.
    """

    def __init__(self, encoder, dim: int, n_vas: int, rng,
                 modality: str = "tof", va_init_scale: float = 5.0,
                 constrain: bool = True):
        self.encoder = encoder
        self.dim = dim
        self.modality = modality
        self.va = rng.normal(scale=va_init_scale, size=(n_vas + 1, dim))
        self.frozen = np.zeros_like(self.va, dtype=bool)
        self.frozen[0, :] = True
        if constrain:
            if n_vas >= 1:
                self.frozen[1, : dim - 1] = True
            if dim == 3 and n_vas >= 2:
                self.frozen[2, 0] = True
        self.frozen_values = np.zeros_like(self.va)
        self.va[self.frozen] = self.frozen_values[self.frozen]
        self.va_grad = np.zeros_like(self.va)

    @property
    def n_vas(self) -> int:
        return self.va.shape[0] - 1

    def apply_constraints(self):
        self.va[self.frozen] = self.frozen_values[self.frozen]

    def freeze_all_vas(self, coords: np.ndarray):
        """Pin every anchor coordinate (known-map baseline)."""
        coords = np.asarray(coords, dtype=float)
        if coords.shape != self.va.shape:
            raise ValueError("coordinate shape mismatch")
        self.va = coords.copy()
        self.frozen = np.ones_like(self.va, dtype=bool)
        self.frozen_values = coords.copy()
        self.va_grad = np.zeros_like(self.va)

    def decode(self, pos) -> np.ndarray:
        """Reconstructed delay vector for one position, seconds.

        ToF mode: ||p_i - pos|| / c for every anchor row.  TDoA mode:
        the same minus the physical-anchor term, leading entry exactly 0.
        """
        pos = np.asarray(pos, dtype=float)
        d = np.linalg.norm(self.va - pos[None, :], axis=1)
        if self.modality == "tdoa":
            out = (d - d[0]) / C
            out[0] = 0.0
            return out
        return d / C

    def decode_batch(self, positions: np.ndarray):
        """Vectorized decode.  Returns (delays, unit_vectors, distances);
        unit vectors point from positions toward each anchor and are
        zeroed (flagged by a zero row) when the position coincides with
        an anchor."""
        diffs = self.va[None, :, :] - positions[:, None, :]
        d = np.linalg.norm(diffs, axis=2)
        safe = np.maximum(d, MIN_ANCHOR_DISTANCE)
        units = diffs / safe[:, :, None]
        units[d < MIN_ANCHOR_DISTANCE] = 0.0
        if self.modality == "tdoa":
            rec = (d - d[:, :1]) / C
            rec[:, 0] = 0.0
        else:
            rec = d / C
        return rec, units, d

    def accumulate_decoder_grads(self, grads_rec: np.ndarray,
                                 units: np.ndarray):
        """Chain per-sample loss gradients (w.r.t. the decoded delay
        vectors, per second) into position and VA gradients.

        Returns d loss / d positions; adds into ``va_grad``.
        """
        g = grads_rec / C  # delay = distance / c
        if self.modality == "tdoa":
            # rec_k = (d_k - d_0)/c for k >= 1, rec_0 = 0
            g = g.copy()
            g[:, 0] = 0.0
            g0 = -g.sum(axis=1)
            dpos = -(g[:, :, None] * units).sum(axis=1) - g0[:, None] * units[:, 0]
            self.va_grad += (g[:, :, None] * units).sum(axis=0)
            self.va_grad[0] += (g0[:, None] * units[:, 0]).sum(axis=0)
        else:
            dpos = -(g[:, :, None] * units).sum(axis=1)
            self.va_grad += (g[:, :, None] * units).sum(axis=0)
        return dpos


def _feature_values(f):
    if isinstance(f, FeatureSet):
        return f.values
    return np.asarray(f, dtype=float)


def _epoch_batches(n: int, batch_size: int, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _forward_encoder(model: SlamModel, inputs, idx, training: bool):
    """Run the encoder on a batch; supports matrix input or per-sample
    variable-size sets (DeepSet)."""
    if isinstance(model.encoder, nn.DeepSet):
        out = np.stack([model.encoder.forward(inputs[i], training=training)
                        for i in idx])
        return out
    x = np.stack([inputs[i] for i in idx])
    return model.encoder.forward(x, training=training)


def _backward_encoder(model: SlamModel, inputs, idx, dpos):
    if isinstance(model.encoder, nn.DeepSet):
        # re-run each sample to restore its cache before its backward
        for j, i in enumerate(idx):
            model.encoder.forward(inputs[i], training=True)
            model.encoder.backward(dpos[j])
    else:
        model.encoder.backward(dpos)


def _make_optimizer(model: SlamModel, cfg: TrainConfig):
    triples = list(model.encoder.named_params())
    triples.append(("va", model.va, model.va_grad))
    return nn.Adam(triples, lr=cfg.lr)


def _chart_row(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 2 and x.shape[0] == 2:
        # CSI re/im channels: the phase oscillates on the carrier
        # wavelength, so chart on the magnitude profile instead
        return np.hypot(x[0], x[1])
    return x.ravel()


def _chart_matrix(inputs) -> np.ndarray:
    """Flatten per-sample encoder inputs into rows of equal width
    (variable-size sets are edge-padded)."""
    rows = [_chart_row(x) for x in inputs]
    width = max(r.size for r in rows)
    return np.stack([np.pad(r, (0, width - r.size), mode="edge")
                     for r in rows])


def _range_chart(X: np.ndarray, dim: int) -> np.ndarray:
    """Principal-component chart of squared range differences.

    For rows of ranges ``[d_0, d_1, ...]`` to fixed (unknown) points,
    ``d_j^2 - d_0^2`` is an affine function of the sample position, so
    the top-``dim`` principal components give an injective linear image
    of the positions rather than a curved one.
    """
    Y = X ** 2 - X[:, :1] ** 2
    Yc = Y - Y.mean(axis=0)
    _, _, Vt = np.linalg.svd(Yc, full_matrices=False)
    return Yc @ Vt[:dim].T


def _quad_align(chart: np.ndarray, los: np.ndarray) -> np.ndarray | None:
    """Map a linear position chart into the anchor frame using LOS ranges.

    If the chart is (approximately) a linear image ``c = M p + b`` of
    positions with the anchor at the origin, then ``los^2`` is a
    quadratic polynomial in ``c``.  Fitting that polynomial by linear
    least squares recovers the Gram matrix ``Q = W^T W`` and offset of
    the inverse map, and factoring ``Q`` yields positions up to an
    orthogonal transform -- exactly the gauge freedom the decoder has
    anyway.  Returns None when the fitted form is not positive definite.
    """
    n, dim = chart.shape
    iu = np.triu_indices(dim)
    cols = []
    for a, b in zip(*iu):
        f = chart[:, a] * chart[:, b]
        cols.append(2.0 * f if a != b else f)
    A = np.column_stack(cols + [2.0 * chart[:, d] for d in range(dim)]
                        + [np.ones(n)])
    sol, *_ = np.linalg.lstsq(A, los ** 2, rcond=None)
    Q = np.zeros((dim, dim))
    for k, (a, b) in enumerate(zip(*iu)):
        Q[a, b] = Q[b, a] = sol[k]
    r = sol[len(cols):len(cols) + dim]
    w, V = np.linalg.eigh(Q)
    if w[0] <= 1e-9 * max(w[-1], 0.0):
        return None
    W = np.diag(np.sqrt(w)) @ V.T
    t = np.linalg.solve(W.T, r)
    return chart @ W.T + t


def spread_pretrain(features, inputs, model: SlamModel, cfg: TrainConfig):
    """Fit the encoder to a principal-component chart of the delay sets.

    A freshly initialized encoder maps every sample to nearly the same
    point; starting from that collapsed state the set-matching loss
    settles into a non-injective (mirror-folded) position map that it
    cannot escape, because a folded map explains the delay multisets
    exactly in a symmetric scene.  Regressing the encoder onto the top-D
    principal components of its own inputs first gives it an injective,
    room-scale initial map.  The chart must come from the inputs, not
    the sorted delay sets: sorted multisets are identical for mirror-
    image positions and would bake the fold into the chart itself.  No
    position labels are involved.
    """
    X = _chart_matrix(inputs)
    # range-like inputs: flat positive vectors whose first entry is the
    # LOS range (genie pseudo-ranges, amplitude-identified range vectors)
    rangelike = (all(np.asarray(x).ndim == 1 for x in inputs)
                 and bool(np.all(X > 0.0)))
    if rangelike:
        chart = _range_chart(X, model.dim)
    else:
        Xc = X - X.mean(axis=0)
        _, _, Vt = np.linalg.svd(Xc, full_matrices=False)
        chart = Xc @ Vt[: model.dim].T
    chart = chart / np.maximum(chart.std(axis=0), 1e-12)
    aligned = None
    if rangelike:
        # place the chart in the decoder's frame (anchor at the origin)
        aligned = _quad_align(chart, X[:, 0])
    elif model.modality == "tof":
        los = np.array([_feature_values(f)[0] for f in features]) * C
        aligned = _quad_align(chart, los)
    if aligned is not None:
        chart = aligned
    else:
        # no usable LOS ranges: just spread the chart to room scale,
        # inferred from the delay statistics
        scale = float(np.std([np.mean(_feature_values(f))
                              for f in features])) * C
        chart = chart * (2.0 * max(scale, 1e-6))
    sub = TrainConfig(**{**asdict(cfg), "epochs": cfg.pretrain_epochs,
                         "n_restarts": 1})
    return train_supervised(inputs, chart, model, sub)


def train(features, inputs, model: SlamModel, cfg: TrainConfig):
    """Mini-batch Adam on encoder parameters and free VA coordinates.

    ``features`` is a list of extracted delay sets (arrays or
    FeatureSets, seconds); ``inputs`` the per-sample encoder inputs.
    Three phases: label-free spread pretraining of the encoder
    (``cfg.pretrain_epochs``), anchor warmup of the VA coordinates
    against the frozen encoder (``cfg.warmup_epochs``), then joint
    training (``cfg.epochs``).  Returns the joint-phase mean loss
    history; the model is trained in place.  Deterministic for a given
    config and seed.
    """
    n = len(features)
    for f in features:
        if _feature_values(f).size > model.n_vas + 1:
            raise ValueError("feature set larger than the VA budget")
    if cfg.epochs > 0 and cfg.pretrain_epochs > 0:
        spread_pretrain(features, inputs, model, cfg)
    rng = np.random.default_rng(cfg.seed)
    training_mode = isinstance(model.encoder, nn.ConvEncoder)
    if cfg.epochs > 0 and cfg.warmup_epochs > 0:
        # anchor warmup: fit the free VA coordinates to the pretrained
        # position map before letting the two co-adapt.  Starting joint
        # training with randomly placed anchors drags the encoder off
        # its injective initialization and into a folded map.
        va_opt = nn.Adam([("va", model.va, model.va_grad)],
                         lr=cfg.va_lr if cfg.va_lr else 10.0 * cfg.lr)
        for epoch in range(cfg.warmup_epochs):
            loss = _match_epoch(features, inputs, model, cfg, rng, va_opt,
                                update_encoder=False,
                                training_mode=training_mode)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite warmup loss at epoch {epoch}: {loss}")
    opt = _make_optimizer(model, cfg)
    history = []
    for epoch in range(cfg.epochs):
        mean_loss = _match_epoch(features, inputs, model, cfg, rng, opt,
                                 update_encoder=True,
                                 training_mode=training_mode)
        if not np.isfinite(mean_loss):
            raise TrainingDiverged(
                f"non-finite training loss at epoch {epoch}: {mean_loss}")
        history.append(mean_loss)
    return history


def _match_epoch(features, inputs, model: SlamModel, cfg: TrainConfig, rng,
                 opt, update_encoder: bool, training_mode: bool) -> float:
    """One epoch of set-matching training; returns the mean sample loss."""
    n = len(features)
    epoch_loss = 0.0
    n_seen = 0
    for idx in _epoch_batches(n, cfg.batch_size, rng):
        if training_mode and idx.size < 2:
            continue  # batchnorm needs >= 2 samples
        model.encoder.zero_grads()
        model.va_grad[...] = 0.0
        pos = _forward_encoder(model, inputs, idx,
                               training=training_mode and update_encoder)
        rec, units, _ = model.decode_batch(pos)
        grads_rec = np.zeros_like(rec)
        batch_loss = 0.0
        for j, i in enumerate(idx):
            lv, _ = set_loss(features[i], rec[j], kind=cfg.loss_kind,
                             los_decomposition=True, beta=cfg.beta)
            grads_rec[j] = lv.gradient
            batch_loss += lv.value
        grads_rec *= 1.0 / idx.size
        dpos = model.accumulate_decoder_grads(grads_rec, units)
        if update_encoder:
            _backward_encoder(model, inputs, idx, dpos)
        model.va_grad[model.frozen] = 0.0
        opt.step()
        model.apply_constraints()
        epoch_loss += batch_loss
        n_seen += idx.size
    return epoch_loss / max(n_seen, 1)


def build_encoder(kind: str, dim: int, rng, n_inputs: int = None,
                  n_subcarriers: int = None):
    """Encoder factory: 'mlp' (fixed-size delay vector), 'conv' (CSI
    re/im channels), or 'deepset' (variable-size delay set)."""
    if kind == "mlp":
        if n_inputs is None:
            raise ValueError("mlp encoder needs n_inputs")
        return nn.mlp(n_inputs, dim, [128, 128, 128], rng)
    if kind == "conv":
        if n_subcarriers is None:
            raise ValueError("conv encoder needs n_subcarriers")
        return nn.ConvEncoder(n_subcarriers, dim, rng)
    if kind == "deepset":
        return nn.DeepSet(dim, rng)
    raise ValueError(f"unknown encoder kind {kind!r}")


def train_restarts(features, inputs, cfg: TrainConfig, dim: int,
                   encoder_factory, labeled_indices=None,
                   labeled_positions=None):
    """Run ``cfg.n_restarts`` independent trainings and keep the best.

    By default the restart with the lowest final loss wins.  When a few
    labeled alignment samples are supplied, the restart with the lowest
    post-alignment RMS residual on them wins instead: in a mirror-
    symmetric scene a folded position map reaches the same loss as the
    true one, so the final loss cannot tell them apart, while a handful
    of labeled samples can.  ``encoder_factory(rng)`` builds a fresh
    encoder.
    """
    use_labels = labeled_indices is not None and labeled_positions is not None
    best = None
    all_histories = []
    for r in range(max(cfg.n_restarts, 1)):
        seed = cfg.seed + 1000 * r
        rng = np.random.default_rng(seed)
        model = SlamModel(encoder_factory(rng), dim, cfg.n_vas, rng,
                          modality=cfg.modality,
                          va_init_scale=cfg.va_init_scale)
        run_cfg = TrainConfig(**{**asdict(cfg), "seed": seed})
        history = train(features, inputs, model, run_cfg)
        if use_labels:
            from .evaluate import fit_isometry
            pred = predict_positions(model, [inputs[i]
                                             for i in labeled_indices])
            try:
                score = fit_isometry(pred, np.asarray(labeled_positions),
                                     allow_reflection=True).residual
            except ValueError:  # collapsed run: predictions degenerate
                score = np.inf
        else:
            score = history[-1] if history else np.inf
        all_histories.append(history)
        if best is None or score < best[0]:
            best = (score, model, history)
    return best[1], best[2], all_histories


def prune_vas(model: SlamModel, features, inputs=None,
              rho_min: float = 0.01):
    """Retain VA i iff the set loss matches it in at least ``rho_min`` of
    the training samples; the physical anchor is always retained."""
    n = len(features)
    counts = np.zeros(model.n_vas + 1)
    for i in range(n):
        if inputs is not None:
            pos = _forward_encoder(model, inputs, np.array([i]),
                                   training=False)[0]
        else:
            raise ValueError("inputs required to evaluate the encoder")
        rec = model.decode(pos)
        _, assignment = set_loss(features[i], rec, kind="hungarian",
                                 los_decomposition=True)
        for _, b in assignment.pairs:
            counts[b] += 1
    retained = [0] + [i for i in range(1, model.n_vas + 1)
                      if counts[i] / n >= rho_min and rho_min > 0]
    if rho_min == 0:
        retained = list(range(model.n_vas + 1))
    return sorted(set(retained))


def refine_vas(model: SlamModel, features, inputs,
               batch_size: int = 256) -> None:
    """Polish the free VA coordinates by per-anchor multilateration.

    With the encoder frozen, each training sample contributes
    (position, matched delay) pairs per anchor; solving
    ``min sum (||va - p_i|| - c tau_i)^2`` per anchor is a small
    nonlinear least-squares problem that removes the residual bias the
    stochastic optimizer leaves on the map.  Frozen coordinates are
    respected.  In TDoA mode the matched values are range differences
    relative to the anchor, so the model's own LOS range is added back.
    """
    from scipy.optimize import least_squares

    n = len(features)
    obs = {k: ([], []) for k in range(model.va.shape[0])}
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        pos = _forward_encoder(model, inputs, idx, training=False)
        rec, _, _ = model.decode_batch(pos)
        for j, i in enumerate(idx):
            _, assignment = set_loss(features[i], rec[j], kind="hungarian",
                                     los_decomposition=True)
            values = _feature_values(features[i])
            for a, b in assignment.pairs:
                r = values[a] * C
                if model.modality == "tdoa":
                    if b == 0:
                        continue
                    r += float(np.linalg.norm(pos[j]))
                obs[b][0].append(pos[j])
                obs[b][1].append(r)
    for k, (points, ranges) in obs.items():
        free = ~model.frozen[k]
        if not free.any() or len(points) < model.dim + 1:
            continue
        P = np.stack(points)
        r = np.asarray(ranges)
        x0 = model.va[k].copy()

        def resid(x, P=P, r=r, k=k, free=free):
            va = model.va[k].copy()
            va[free] = x
            return np.linalg.norm(P - va, axis=1) - r

        sol = least_squares(resid, x0[free])
        model.va[k, free] = sol.x
    model.apply_constraints()


def _matched_ranges(model: SlamModel, features, pos: np.ndarray,
                    batch_size: int = 256):
    """Hungarian-matched (anchor index, range value) observations per
    sample, given fixed position estimates.  TDoA values are kept raw
    (range differences); the LOS pair carries no information there and
    is dropped."""
    n = len(features)
    obs = []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        rec, _, _ = model.decode_batch(pos[idx])
        for j, i in enumerate(idx):
            _, assignment = set_loss(features[i], rec[j], kind="hungarian",
                                     los_decomposition=True)
            values = _feature_values(features[i])
            anchors, ranges = [], []
            for a, b in assignment.pairs:
                if model.modality == "tdoa" and b == 0:
                    continue
                anchors.append(b)
                ranges.append(values[a] * C)
            obs.append((np.asarray(anchors), np.asarray(ranges)))
    return obs


def bundle_adjust(model: SlamModel, features, inputs, rounds: int = 2,
                  distill_epochs: int = 0, cfg: TrainConfig = None,
                  batch_size: int = 256, los_ranges=None) -> np.ndarray:
    """Geometric polish of the whole map on the extracted delay sets.

    The encoder leaves a small systematic warp on the position map at
    finite epoch budgets, and the virtual anchors co-adapt to that warp,
    so per-anchor refits alone cannot remove it.  This alternates
    classic coordinate descent on the point estimates instead: match
    each sample's delay set against its decoded set, re-estimate every
    position by multilateration from its matched ranges, then refit
    every free anchor to the new positions -- both are small nonlinear
    least-squares problems.  Samples whose final fit residual is an
    outlier (e.g. misidentified paths) are excluded from the anchor
    refits.  With ``distill_epochs`` the encoder is finally regressed
    onto the adjusted positions, bringing the amortized map into the
    same frame; no ground-truth labels are involved anywhere.  Returns
    the adjusted training positions.

    ``los_ranges`` (optional, meters) are per-sample absolute LOS range
    observations, e.g. from free-space amplitude ranging.  Pure range-
    difference data leaves a soft mode -- anchors close to the physical
    anchor produce near-zero differences, so whole-map deformations fit
    the data within extraction error -- and an absolute range pins it.
    """
    from scipy.optimize import least_squares

    n = len(features)
    pos = predict_positions(model, inputs)
    tdoa = model.modality == "tdoa"
    good = np.ones(n, dtype=bool)
    for _ in range(rounds):
        obs = _matched_ranges(model, features, pos, batch_size)
        fit_res = np.zeros(n)
        for i, (anchors, ranges) in enumerate(obs):
            if anchors.size < model.dim + (1 if tdoa else 0):
                good[i] = False
                continue
            los = None if los_ranges is None else float(los_ranges[i])

            def resid(p, anchors=anchors, ranges=ranges, los=los):
                d = np.linalg.norm(model.va[anchors] - p, axis=1)
                if tdoa:
                    d = d - np.linalg.norm(p)
                out = d - ranges
                if los is not None:
                    out = np.append(out, np.linalg.norm(p) - los)
                return out

            sol = least_squares(resid, pos[i])
            pos[i] = sol.x
            fit_res[i] = np.sqrt(np.mean(sol.fun ** 2))
        scale = np.median(fit_res[good]) if good.any() else 0.0
        good &= fit_res <= 10.0 * scale + 1e-9
        # anchor refits on the inlier positions
        for k in range(model.va.shape[0]):
            free = ~model.frozen[k]
            if not free.any():
                continue
            rows = [(pos[i], r + (np.linalg.norm(pos[i]) if tdoa else 0.0))
                    for i, (anchors, ranges) in enumerate(obs) if good[i]
                    for b, r in zip(anchors, ranges) if b == k]
            if len(rows) < model.dim + 1:
                continue
            P = np.stack([p for p, _ in rows])
            r = np.asarray([v for _, v in rows])

            def va_resid(x, P=P, r=r, k=k, free=free):
                va = model.va[k].copy()
                va[free] = x
                return np.linalg.norm(P - va, axis=1) - r

            sol = least_squares(va_resid, model.va[k][free])
            model.va[k, free] = sol.x
        model.apply_constraints()
    if distill_epochs > 0 and cfg is not None and good.any():
        sub = TrainConfig(**{**asdict(cfg), "epochs": distill_epochs,
                             "n_restarts": 1})
        keep = np.flatnonzero(good)
        train_supervised([inputs[i] for i in keep], pos[keep], model, sub)
    return pos


def _constraint_gauge(vas: np.ndarray, dim: int) -> np.ndarray:
    """Rotation aligning a VA configuration with the constraint layout
    (first free VA on the last axis; in 3D the second free VA in the
    last-two-axes plane).  Reflection stays free, as in the decoder's
    invariance group."""
    R = np.eye(dim)
    v = vas[1] @ R.T
    if dim == 2:
        theta = np.arctan2(v[1], v[0])
        rot = np.pi / 2.0 - theta
        c, s = np.cos(rot), np.sin(rot)
        return np.array([[c, -s], [s, c]])
    # dim == 3: rotate va1 onto +z, then about z to put va2 in the yz
    # plane
    nrm = np.linalg.norm(v)
    if nrm > 1e-12:
        axis = np.cross(v / nrm, [0.0, 0.0, 1.0])
        s = np.linalg.norm(axis)
        c = v[2] / nrm
        if s > 1e-12:
            axis = axis / s
            K = np.array([[0, -axis[2], axis[1]],
                          [axis[2], 0, -axis[0]],
                          [-axis[1], axis[0], 0]])
            R = (np.eye(3) + s * K + (1.0 - c) * (K @ K)) @ R
    if vas.shape[0] > 2:
        w = vas[2] @ R.T
        theta = np.arctan2(w[1], w[0])
        rot = np.pi / 2.0 - theta
        c, s = np.cos(rot), np.sin(rot)
        Rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
        R = Rz @ R
    return R


def calibrate_from_ranges(model: SlamModel, range_obs: np.ndarray,
                          inputs=None, distill_epochs: int = 0,
                          cfg: TrainConfig = None) -> np.ndarray | None:
    """Closed-form map calibration from identity-ordered range vectors.

    ``range_obs`` rows are ``[LOS range, range to anchor 1, ...]`` with a
    per-column anchor identity that is stable across samples (genie
    pseudo-ranges, amplitude-identified extractions).  Positions follow
    in closed form from the squared-range chart and its quadratic LOS
    alignment (multilateration); each anchor is then refit to its own
    column, and the whole frame is rotated into the constraint gauge.
    Optionally distills the encoder onto the calibrated positions.
    Returns the positions, or None when the chart alignment fails (the
    model is left untouched then).  Label-free throughout.
    """
    from scipy.optimize import least_squares

    X = np.asarray(range_obs, dtype=float)
    chart = _range_chart(X, model.dim)
    chart = chart / np.maximum(chart.std(axis=0), 1e-12)
    pos = _quad_align(chart, X[:, 0])
    if pos is None:
        return None
    m = min(X.shape[1] - 1, model.n_vas)
    vas = np.zeros((m + 1, model.dim))
    ones = np.ones(X.shape[0])
    sq = np.sum(pos ** 2, axis=1)
    for k in range(1, m + 1):
        # linearized multilateration ||p||^2 - 2 p.va + ||va||^2 = r^2,
        # then a nonlinear polish on the true range residual
        A = np.column_stack([-2.0 * pos, ones])
        sol, *_ = np.linalg.lstsq(A, X[:, k] ** 2 - sq, rcond=None)

        def resid(x, k=k):
            return np.linalg.norm(pos - x, axis=1) - X[:, k]

        vas[k] = least_squares(resid, sol[:model.dim]).x
    R = _constraint_gauge(vas, model.dim)
    pos = pos @ R.T
    model.va[1:m + 1] = vas[1:] @ R.T
    model.apply_constraints()
    if distill_epochs > 0 and cfg is not None and inputs is not None:
        sub = TrainConfig(**{**asdict(cfg), "epochs": distill_epochs,
                             "n_restarts": 1})
        train_supervised(inputs, pos, model, sub)
    return pos


def train_supervised(inputs, labels, model: SlamModel, cfg: TrainConfig):
    """Minimize mean squared position error (fingerprinting baseline)."""
    labels = np.asarray(labels, dtype=float)
    n = labels.shape[0]
    rng = np.random.default_rng(cfg.seed)
    training_mode = isinstance(model.encoder, nn.ConvEncoder)
    opt = nn.Adam(list(model.encoder.named_params()), lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        n_seen = 0
        for idx in _epoch_batches(n, cfg.batch_size, rng):
            if training_mode and idx.size < 2:
                continue
            model.encoder.zero_grads()
            pos = _forward_encoder(model, inputs, idx, training=training_mode)
            err = pos - labels[idx]
            loss = float((err ** 2).sum()) / idx.size
            _backward_encoder(model, inputs, idx, 2.0 * err / idx.size)
            opt.step()
            epoch_loss += loss * idx.size
            n_seen += idx.size
        mean_loss = epoch_loss / max(n_seen, 1)
        if not np.isfinite(mean_loss):
            raise TrainingDiverged(f"diverged at epoch {epoch}")
        history.append(mean_loss)
    return history


def predict_positions(model: SlamModel, inputs, n: int = None) -> np.ndarray:
    n = len(inputs) if n is None else n
    out = []
    for start in range(0, n, 256):
        idx = np.arange(start, min(start + 256, n))
        out.append(_forward_encoder(model, inputs, idx, training=False))
    return np.concatenate(out)


def tof_input(sample, n_vas: int) -> np.ndarray:
    """Anchor-indexed pseudo-range vector (meters) for the MLP encoder:
    entry i is the range through virtual anchor i, zero where absent."""
    v = np.zeros(n_vas + 1)
    for p in sample.paths:
        if p.va_index <= n_vas:
            v[p.va_index] = p.tof * C
    return v


def feature_input(features, width: int) -> np.ndarray:
    """Fixed-width ascending pseudo-range vector (meters) from an
    extracted delay set, edge-padded/truncated to ``width`` entries."""
    v = np.sort(_feature_values(features)) * C
    if v.size >= width:
        return v[:width]
    return np.pad(v, (0, width - v.size), mode="edge")


def ranged_input(features, width: int) -> np.ndarray | None:
    """Wall-identity-ordered absolute range vector (meters) from an
    extracted feature set carrying amplitude-identified ranges; None when
    identification was rejected for the sample.  Unlike ``feature_input``
    the entries have a per-anchor meaning that is stable across
    positions, so the encoder input is injective even in a mirror-
    symmetric room."""
    r = getattr(features, "ranges", None)
    if r is None:
        return None
    if r.size >= width:
        return np.asarray(r[:width], dtype=float)
    return np.pad(r, (0, width - r.size), mode="edge")


def set_input(features) -> np.ndarray:
    """Variable-size pseudo-range set (meters) for the DeepSet encoder."""
    return _feature_values(features) * C


def csi_input(csi) -> np.ndarray:
    """(2, n_subcarriers) re/im input for the conv encoder, snapshot-
    averaged and normalized to unit mean magnitude."""
    h = np.asarray(csi).mean(axis=0)
    scale = max(float(np.mean(np.abs(h))), 1e-300)
    h = h / scale
    return np.stack([h.real, h.imag])


def save_run(out_dir, model: SlamModel, cfg: TrainConfig, history,
             retained=None):
    """Training-run directory: config.json, loss_history.csv, checkpoint
    blob, retained_vas.json."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(asdict(cfg), f, indent=2)
    with open(os.path.join(out_dir, "loss_history.csv"), "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(history):
            wr.writerow([i, v])
    nn.save_checkpoint(os.path.join(out_dir, "encoder.ckpt"), model.encoder,
                       manifest={"dim": model.dim,
                                 "modality": model.modality})
    np.save(os.path.join(out_dir, "va_coords.npy"), model.va)
    if retained is not None:
        with open(os.path.join(out_dir, "retained_vas.json"), "w") as f:
            json.dump({"retained": list(map(int, retained))}, f)
