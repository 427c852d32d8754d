"""Synthetic multipath dataset generation.

Samples user positions uniformly inside a room, traces specular paths via
the image-source construction, and packages ground-truth ToF/TDoA labels
with per-path amplitudes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import C, Scene, image_sources, tof, validate_path

# guards the 1/d amplitude against the near field
D_MIN = 0.1


@dataclass(frozen=True)
class PathRecord:
    """One propagation path: delay, amplitude, bounce count, source index.

    ``va_index`` points into the scene's image-source list; 0 is the
    physical anchor (LOS).
    """

    tof: float
    gain: complex
    bounces: int
    va_index: int

    def __post_init__(self):
        if self.tof <= 0:
            raise ValueError("path ToF must be positive")
        if (self.bounces == 0) != (self.va_index == 0):
            raise ValueError("bounces=0 iff va_index=0")


@dataclass(frozen=True)
class Sample:
    """A user position with its specular path set, sorted by delay."""

    user: np.ndarray
    paths: tuple

    def __post_init__(self):
        object.__setattr__(self, "user", np.asarray(self.user, dtype=float))
        object.__setattr__(self, "paths", tuple(self.paths))
        if not self.paths:
            raise ValueError("a sample needs at least the LOS path")
        if self.paths[0].bounces != 0:
            raise ValueError("first path must be LOS")
        tofs = [p.tof for p in self.paths]
        if any(b < a for a, b in zip(tofs, tofs[1:])):
            raise ValueError("paths must be sorted ascending by ToF")

    def tofs(self) -> np.ndarray:
        return np.array([p.tof for p in self.paths])

    def gains(self) -> np.ndarray:
        return np.array([p.gain for p in self.paths], dtype=complex)


@dataclass(frozen=True)
class Dataset:
    scene: Scene
    samples: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))

    @property
    def n_test(self) -> int:
        return len(self.samples) // 10

    @property
    def train(self) -> tuple:
        return self.samples[: len(self.samples) - self.n_test]

    @property
    def test(self) -> tuple:
        return self.samples[len(self.samples) - self.n_test:]


@dataclass(frozen=True)
class DatagenConfig:
    n_samples: int
    max_bounce: int = 1
    margin: float = 0.25
    seed: int = 0


def sample_positions(scene: Scene, n: int, margin: float, seed) -> np.ndarray:
    """n i.i.d. uniform points in the margin-shrunk room interior."""
    if n < 1:
        raise ValueError("need n >= 1")
    lo, hi = scene.bounding_box()
    lo = lo + margin
    hi = hi - margin
    if np.any(hi <= lo):
        raise ValueError("margin leaves an empty sampling region")
    rng = np.random.default_rng(seed)
    out = np.empty((n, scene.dim))
    filled = 0
    for _ in range(10_000):
        batch = rng.uniform(lo, hi, size=(max(n, 64), scene.dim))
        for p in batch:
            if scene.contains(p, margin=margin):
                out[filled] = p
                filled += 1
                if filled == n:
                    return out
    raise ValueError("sampling region appears to be empty")


def trace(scene: Scene, user, max_bounce: int) -> Sample:
    """LOS plus every physically-valid image-source path, sorted by ToF.

    Per-path amplitude is prod(gamma) / max(d, D_MIN); the carrier phase is
    applied later during CSI synthesis.
    """
    user = np.asarray(user, dtype=float)
    d0 = float(np.linalg.norm(user - scene.anchor))
    paths = [PathRecord(tof=d0 / C, gain=complex(1.0 / max(d0, D_MIN)),
                        bounces=0, va_index=0)]
    for idx, (va, seq) in enumerate(image_sources(scene, max_bounce)):
        if not validate_path(scene, user, va, seq):
            continue
        d = float(np.linalg.norm(user - va))
        g = float(np.prod([scene.walls[w].gamma for w in seq])) / max(d, D_MIN)
        paths.append(PathRecord(tof=d / C, gain=complex(g),
                                bounces=len(seq), va_index=idx + 1))
    paths.sort(key=lambda p: p.tof)
    return Sample(user=user, paths=tuple(paths))


def to_tdoa(sample: Sample) -> np.ndarray:
    """Delays relative to the LOS path; first element is 0."""
    t = sample.tofs()
    return t - t[0]


def generate_dataset(scene: Scene, config: DatagenConfig) -> Dataset:
    """Trace a full dataset; the last tenth of samples is the test split."""
    positions = sample_positions(scene, config.n_samples, config.margin,
                                 config.seed)
    samples = tuple(trace(scene, p, config.max_bounce) for p in positions)
    meta = {"seed": config.seed, "max_bounce": config.max_bounce,
            "margin": config.margin, "n_samples": config.n_samples}
    return Dataset(scene=scene, samples=samples, metadata=meta)


def write_dataset(path, dataset: Dataset) -> None:
    """JSON-lines: header with scene + metadata, then one sample per line."""
    with open(path, "w") as f:
        header = {"scene": dataset.scene.to_json(),
                  "metadata": dataset.metadata}
        f.write(json.dumps(header) + "\n")
        for s in dataset.samples:
            rec = {
                "user": s.user.tolist(),
                "paths": [
                    {"tof_s": p.tof, "gain_re": p.gain.real,
                     "gain_im": p.gain.imag, "bounces": p.bounces,
                     "va": p.va_index}
                    for p in s.paths
                ],
            }
            f.write(json.dumps(rec) + "\n")


def read_dataset(path) -> Dataset:
    with open(path) as f:
        header = json.loads(f.readline())
        scene = Scene.from_json(header["scene"])
        samples = []
        for line in f:
            rec = json.loads(line)
            paths = tuple(
                PathRecord(tof=p["tof_s"],
                           gain=complex(p["gain_re"], p["gain_im"]),
                           bounces=p["bounces"], va_index=p["va"])
                for p in rec["paths"]
            )
            samples.append(Sample(user=np.asarray(rec["user"]), paths=paths))
    return Dataset(scene=scene, samples=tuple(samples),
                   metadata=header["metadata"])


def true_virtual_anchors(scene: Scene, max_bounce: int) -> np.ndarray:
    """Anchor followed by all image sources, one per row (no visibility
    filtering; row index matches PathRecord.va_index)."""
    rows = [scene.anchor]
    rows += [p for p, _ in image_sources(scene, max_bounce)]
    return np.asarray(rows)
