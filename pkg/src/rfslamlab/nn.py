"""Minimal differentiable-computation kernel.

Explicit forward/backward layers in float64 numpy: dense, ReLU/Tanh,
1D convolution, batch normalization, a skip-connection conv encoder, a
permutation-invariant set encoder, and a bias-corrected Adam optimizer.
Gradients are verified against central finite differences in the tests.
"""

from __future__ import annotations

import json

import numpy as np


class Layer:
    """Base layer: named parameters, matching gradient buffers, and a
    forward cache consumed by backward."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self.params[name] = np.asarray(value, dtype=float)
        self.grads[name] = np.zeros_like(self.params[name])
        return self.params[name]

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def named_params(self, prefix: str = ""):
        for name, p in self.params.items():
            yield prefix + name, p, self.grads[name]

    def named_buffers(self, prefix: str = ""):
        """Non-trainable state that still belongs in a checkpoint."""
        return iter(())

    def forward(self, x, training: bool = False):  # pragma: no cover
        raise NotImplementedError

    def backward(self, dy):  # pragma: no cover
        raise NotImplementedError


def _fan_in_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng):
        super().__init__()
        self.add_param("W", _fan_in_uniform(rng, (n_in, n_out), n_in))
        self.add_param("b", np.zeros(n_out))
        self._x = None

    def forward(self, x, training: bool = False):
        if x.shape[-1] != self.params["W"].shape[0]:
            raise ValueError("input width mismatch")
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy):
        self.grads["W"] += self._x.T @ dy
        self.grads["b"] += dy.sum(axis=0)
        return dy @ self.params["W"].T


class ReLU(Layer):
    def forward(self, x, training: bool = False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class Tanh(Layer):
    def forward(self, x, training: bool = False):
        self._y = np.tanh(x)
        return self._y

    def backward(self, dy):
        return dy * (1.0 - self._y ** 2)


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, training: bool = False):
        for layer in self.layers:
            x = layer.forward(x, training=training)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def named_params(self, prefix: str = ""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(prefix=f"{prefix}{i}.")

    def named_buffers(self, prefix: str = ""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_buffers(prefix=f"{prefix}{i}.")


def mlp(n_in: int, n_out: int, hidden, rng, activation=ReLU) -> Sequential:
    """Affine + activation chain; linear final layer."""
    widths = [n_in] + list(hidden)
    layers = []
    for a, b in zip(widths[:-1], widths[1:]):
        layers += [Dense(a, b, rng), activation()]
    layers.append(Dense(widths[-1], n_out, rng))
    return Sequential(layers)


class Conv1d(Layer):
    """Same-padded 1D convolution; input (batch, channels, width)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd for same padding")
        self.kernel = kernel
        self.add_param("W", _fan_in_uniform(rng, (c_out, c_in, kernel),
                                            c_in * kernel))
        self.add_param("b", np.zeros(c_out))

    def forward(self, x, training: bool = False):
        k = self.kernel
        pad = k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
        self._xp = xp
        n = x.shape[2]
        W = self.params["W"]
        y = np.zeros((x.shape[0], W.shape[0], n))
        for o in range(k):
            y += np.einsum("bci,oc->boi", xp[:, :, o:o + n], W[:, :, o])
        return y + self.params["b"][None, :, None]

    def backward(self, dy):
        k = self.kernel
        pad = k // 2
        n = dy.shape[2]
        W = self.params["W"]
        dxp = np.zeros_like(self._xp)
        for o in range(k):
            self.grads["W"][:, :, o] += np.einsum(
                "boi,bci->oc", dy, self._xp[:, :, o:o + n])
            dxp[:, :, o:o + n] += np.einsum("boi,oc->bci", dy, W[:, :, o])
        self.grads["b"] += dy.sum(axis=(0, 2))
        return dxp[:, :, pad:pad + n]


class BatchNorm1d(Layer):
    """Per-channel normalization over (batch, width); input (B, C, N).

    Batch statistics while training, running averages (momentum 0.1) in
    eval mode.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.add_param("gamma", np.ones(channels))
        self.add_param("beta", np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self._training = False

    def forward(self, x, training: bool = False):
        self._training = training
        if training:
            if x.shape[0] < 2:
                raise ValueError("batch normalization needs batch size >= 2 "
                                 "in training mode")
            mean = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            self.running_mean = ((1 - self.momentum) * self.running_mean
                                 + self.momentum * mean)
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * var)
        else:
            mean = self.running_mean
            var = self.running_var
        self._std = np.sqrt(var + self.eps)
        self._xhat = (x - mean[None, :, None]) / self._std[None, :, None]
        return (self.params["gamma"][None, :, None] * self._xhat
                + self.params["beta"][None, :, None])

    def backward(self, dy):
        g = self.params["gamma"]
        self.grads["gamma"] += (dy * self._xhat).sum(axis=(0, 2))
        self.grads["beta"] += dy.sum(axis=(0, 2))
        dxhat = dy * g[None, :, None]
        if not self._training:
            return dxhat / self._std[None, :, None]
        B = dy.shape[0] * dy.shape[2]
        s = self._std[None, :, None]
        return (dxhat - dxhat.mean(axis=(0, 2), keepdims=True)
                - self._xhat * (dxhat * self._xhat).mean(axis=(0, 2),
                                                         keepdims=True)) / s

    def named_buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var


class ConvEncoder(Layer):
    """Skip-connection 1D conv encoder for CSI input.

    conv(5-tap) -> batchnorm -> ReLU -> conv -> skip add -> flatten ->
    2-layer MLP -> D outputs.  Input (batch, 2, n_subcarriers).
    """

    def __init__(self, n_subcarriers: int, n_out: int, rng,
                 channels: int = 16, hidden: int = 74, kernel: int = 5):
        super().__init__()
        self.conv1 = Conv1d(2, channels, kernel, rng)
        self.bn = BatchNorm1d(channels)
        self.relu1 = ReLU()
        self.conv2 = Conv1d(channels, channels, kernel, rng)
        self.head = Sequential([
            Dense(channels * n_subcarriers, hidden, rng),
            ReLU(),
            Dense(hidden, n_out, rng),
        ])
        self._parts = [self.conv1, self.bn, self.relu1, self.conv2, self.head]

    def forward(self, x, training: bool = False):
        h = self.relu1.forward(self.bn.forward(self.conv1.forward(x),
                                               training=training))
        y = h + self.conv2.forward(h)
        self._shape = y.shape
        flat = y.reshape(y.shape[0], -1)
        return self.head.forward(flat, training=training)

    def backward(self, dy):
        dflat = self.head.backward(dy)
        dskip = dflat.reshape(self._shape)
        dh = dskip + self.conv2.backward(dskip)
        return self.conv1.backward(self.bn.backward(self.relu1.backward(dh)))

    def zero_grads(self):
        for part in self._parts:
            part.zero_grads()

    def named_params(self, prefix: str = ""):
        for name, part in (("conv1", self.conv1), ("bn", self.bn),
                           ("conv2", self.conv2), ("head", self.head)):
            yield from part.named_params(prefix=f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        for name, part in (("conv1", self.conv1), ("bn", self.bn),
                           ("conv2", self.conv2), ("head", self.head)):
            yield from part.named_buffers(prefix=f"{prefix}{name}.")


class DeepSet(Layer):
    """Permutation-invariant set encoder: per-element network, mean pool,
    post-pooling network.  forward takes a 1D array (one set).

    Inputs are sorted before the per-element network so the output is
    bitwise identical under permutation (mean pooling alone is invariant
    only up to floating-point summation order).
    """

    def __init__(self, n_out: int, rng, feat_dim: int = 64,
                 phi_hidden=(64,), rho_hidden=(64,)):
        super().__init__()
        self.phi = mlp(1, feat_dim, list(phi_hidden), rng)
        self.rho = mlp(feat_dim, n_out, list(rho_hidden), rng)

    def forward(self, x, training: bool = False):
        x = np.asarray(x, dtype=float).ravel()
        if x.size == 0:
            raise ValueError("empty input set")
        self._n = x.size
        self._order = np.argsort(x, kind="stable")
        feats = self.phi.forward(x[self._order, None], training=training)
        pooled = feats.mean(axis=0, keepdims=True)
        return self.rho.forward(pooled, training=training)[0]

    def backward(self, dy):
        dpooled = self.rho.backward(dy[None, :])
        dfeats = np.repeat(dpooled, self._n, axis=0) / self._n
        dx_sorted = self.phi.backward(dfeats)[:, 0]
        dx = np.empty_like(dx_sorted)
        dx[self._order] = dx_sorted
        return dx

    def zero_grads(self):
        self.phi.zero_grads()
        self.rho.zero_grads()

    def named_params(self, prefix: str = ""):
        yield from self.phi.named_params(prefix=prefix + "phi.")
        yield from self.rho.named_params(prefix=prefix + "rho.")


def param_count(model: Layer) -> int:
    return sum(p.size for _, p, _ in model.named_params())


class Adam:
    """Bias-corrected Adam over a list of (name, param, grad) triples."""

    def __init__(self, triples, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.triples = list(triples)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for _, p, _ in self.triples]
        self.v = [np.zeros_like(p) for _, p, _ in self.triples]

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, (name, p, g) in enumerate(self.triples):
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name}")
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            mhat = self.m[i] / b1t
            vhat = self.v[i] / b2t
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def finite_diff_check(model: Layer, x, step: float = 1e-6,
                      training: bool = False) -> float:
    """Max relative error between analytic parameter gradients of a fixed
    random scalarization of forward(x) and central finite differences.

    A weighted sum is used instead of a plain sum so that layers such as
    batch normalization (whose outputs are mean-free) do not reduce the
    scalarized objective to a constant.
    """
    model.zero_grads()
    y0 = model.forward(x, training=training)
    w = np.random.default_rng(12345).normal(size=y0.shape)
    model.backward(w)
    worst = 0.0
    for name, p, g in model.named_params():
        flat = p.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            yp = float((model.forward(x, training=training) * w).sum())
            flat[i] = orig - step
            ym = float((model.forward(x, training=training) * w).sum())
            flat[i] = orig
            fd = (yp - ym) / (2 * step)
            denom = max(abs(fd), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst


def _state_arrays(model: Layer):
    for name, p, _ in model.named_params():
        yield name, p
    yield from model.named_buffers()


def save_checkpoint(path, model: Layer, manifest: dict | None = None):
    """JSON manifest line (shapes, metadata) + little-endian float64 blob.

    Parameters and non-trainable buffers (e.g. batchnorm running stats)
    are both stored.
    """
    names, blobs = [], []
    for name, p in _state_arrays(model):
        names.append({"name": name, "shape": list(p.shape)})
        blobs.append(p.astype("<f8").tobytes())
    header = {"params": names, "manifest": manifest or {}}
    with open(path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode())
        for b in blobs:
            f.write(b)


def load_checkpoint(path, model: Layer) -> dict:
    """Load parameters and buffers into a structurally matching model;
    returns the manifest."""
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        raw = f.read()
    offset = 0
    state = dict(_state_arrays(model))
    specs = {d["name"]: tuple(d["shape"]) for d in header["params"]}
    for name, p in state.items():
        if name not in specs or specs[name] != p.shape:
            raise ValueError(f"checkpoint mismatch at {name}")
    for d in header["params"]:
        size = int(np.prod(d["shape"])) if d["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=offset)
        offset += size * 8
        if d["name"] in state:
            state[d["name"]][...] = arr.reshape(d["shape"])
    return header["manifest"]
