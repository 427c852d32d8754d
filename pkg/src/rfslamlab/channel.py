"""SISO OFDM channel synthesis.

Turns a set of propagation paths into a complex frequency response across
subcarriers, with optional per-entry circular Gaussian noise that is
independent across snapshots.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

MAGNITUDE_FLOOR = -12.0


@dataclass(frozen=True)
class OfdmConfig:
    carrier_hz: float
    bandwidth_hz: float
    n_subcarriers: int = 128
    snapshots: int = 16
    snr_db: float | None = None

    def __post_init__(self):
        if self.bandwidth_hz <= 0:
            raise ValueError("bandwidth must be positive")
        if self.n_subcarriers < 2:
            raise ValueError("need at least 2 subcarriers")
        if self.snapshots < 1:
            raise ValueError("need at least 1 snapshot")

    @property
    def subcarrier_spacing(self) -> float:
        return self.bandwidth_hz / self.n_subcarriers


def synthesize(paths, cfg: OfdmConfig, seed=None) -> np.ndarray:
    """CSI matrix of shape (snapshots, n_subcarriers).

    Noiseless entry: h[k] = sum_j g_j exp(-i 2 pi f_c tau_j)
    exp(-i 2 pi k df tau_j), identical across snapshots.  With snr_db set,
    adds i.i.d. circular complex Gaussian noise with per-entry variance
    mean(|h|^2) / 10^(snr/10), independent per snapshot.
    """
    if not paths:
        raise ValueError("need at least one path")
    tofs = np.array([p.tof for p in paths])
    gains = np.array([p.gain for p in paths], dtype=complex)
    k = np.arange(cfg.n_subcarriers)
    df = cfg.subcarrier_spacing
    phases = np.exp(-2j * np.pi * cfg.carrier_hz * tofs)
    steering = np.exp(-2j * np.pi * np.outer(tofs, k) * df)
    h_row = (gains * phases) @ steering
    h = np.tile(h_row, (cfg.snapshots, 1))
    if cfg.snr_db is not None:
        rng = np.random.default_rng(seed)
        var = float(np.mean(np.abs(h_row) ** 2)) / 10.0 ** (cfg.snr_db / 10.0)
        noise = rng.normal(scale=np.sqrt(var / 2.0), size=(2,) + h.shape)
        h = h + noise[0] + 1j * noise[1]
    return h


def magnitude_summary(csi: np.ndarray) -> float:
    """log10 of the mean |h| across all entries, floored at -12."""
    m = float(np.mean(np.abs(csi)))
    if m <= 10.0 ** MAGNITUDE_FLOOR:
        return MAGNITUDE_FLOOR
    return float(np.log10(m))


def write_csi(path, csi_list, cfg: OfdmConfig) -> None:
    """Binary CSI tensor file: one JSON header line, then little-endian
    float64 interleaved re/im for every sample in order."""
    header = {"n_samples": len(csi_list), "snapshots": cfg.snapshots,
              "n_sc": cfg.n_subcarriers, "cfg": asdict(cfg)}
    with open(path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode())
        for h in csi_list:
            buf = np.empty(h.shape + (2,))
            buf[..., 0] = h.real
            buf[..., 1] = h.imag
            f.write(buf.astype("<f8").tobytes())


def read_csi(path):
    """Returns (list of CSI matrices, OfdmConfig)."""
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        cfg = OfdmConfig(**header["cfg"])
        n, s, nsc = header["n_samples"], header["snapshots"], header["n_sc"]
        raw = np.frombuffer(f.read(), dtype="<f8")
    raw = raw.reshape(n, s, nsc, 2)
    return [raw[i, ..., 0] + 1j * raw[i, ..., 1] for i in range(n)], cfg
