"""Exact specular-reflection geometry.

Mirror images of an anchor across planar walls, physical validation of
reflection paths against finite wall patches, time-of-flight, and rigid
isometries of the plane / space.  All functions are pure and operate on
immutable inputs, so they are safe to call concurrently.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

# speed of light in vacuum, m/s
C = 299_792_458.0

_UNIT_TOL = 1e-12


def _as_vec(p) -> np.ndarray:
    v = np.asarray(p, dtype=float)
    if v.ndim != 1 or v.shape[0] not in (2, 3):
        raise ValueError(f"expected a 2D or 3D point, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("point coordinates must be finite")
    return v


@dataclass(frozen=True)
class Wall:
    """Planar reflecting patch.

    ``origin`` is a point on the plane, ``normal`` the unit normal, and
    ``extents`` bounds the patch in the wall's own tangent frame: one
    (lo, hi) pair in 2D, two pairs (u and v axes) in 3D.  ``gamma`` is the
    amplitude reflection coefficient applied per bounce.
    """

    origin: np.ndarray
    normal: np.ndarray
    extents: np.ndarray  # shape (1, 2) in 2D, (2, 2) in 3D
    gamma: float = 0.7

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_vec(self.origin))
        n = _as_vec(self.normal)
        if abs(np.linalg.norm(n) - 1.0) > _UNIT_TOL:
            raise ValueError("wall normal must be unit length")
        object.__setattr__(self, "normal", n)
        ext = np.asarray(self.extents, dtype=float).reshape(-1, 2)
        if ext.shape[0] != self.origin.shape[0] - 1:
            raise ValueError("extents must give one (lo, hi) pair per tangent axis")
        if np.any(ext[:, 1] <= ext[:, 0]):
            raise ValueError("wall patch is empty")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("reflection coefficient must be in (0, 1]")
        object.__setattr__(self, "extents", ext)

    @property
    def dim(self) -> int:
        return self.origin.shape[0]

    def tangent_frame(self) -> np.ndarray:
        """Deterministic orthonormal tangent basis, one row per axis."""
        n = self.normal
        if self.dim == 2:
            return np.array([[-n[1], n[0]]])
        # pick the coordinate axis least aligned with the normal
        k = int(np.argmin(np.abs(n)))
        e = np.zeros(3)
        e[k] = 1.0
        u = np.cross(n, e)
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        return np.stack([u, v])

    def contains_point(self, p, tol: float = 1e-9) -> bool:
        """True if ``p`` lies on the plane and inside the patch extents."""
        p = _as_vec(p)
        rel = p - self.origin
        if abs(rel @ self.normal) > max(tol, 1e-9 * (1.0 + np.abs(rel).max())):
            return False
        coords = self.tangent_frame() @ rel
        lo, hi = self.extents[:, 0], self.extents[:, 1]
        return bool(np.all(coords >= lo - tol) and np.all(coords <= hi + tol))

    def corners(self) -> np.ndarray:
        """Patch corner points, one per row."""
        frame = self.tangent_frame()
        pts = []
        for combo in itertools.product(*self.extents):
            pts.append(self.origin + np.asarray(combo) @ frame)
        return np.asarray(pts)


@dataclass(frozen=True)
class Scene:
    """Convex room: inward-normal walls enclosing a single fixed anchor."""

    walls: tuple
    anchor: np.ndarray
    dim: int = field(default=0)

    def __post_init__(self):
        object.__setattr__(self, "walls", tuple(self.walls))
        object.__setattr__(self, "anchor", _as_vec(self.anchor))
        d = self.anchor.shape[0]
        object.__setattr__(self, "dim", d)
        if not self.walls:
            raise ValueError("scene needs at least one wall")
        for w in self.walls:
            if w.dim != d:
                raise ValueError("wall / anchor dimensionality mismatch")
        if not self.contains(self.anchor, margin=1e-9):
            raise ValueError("anchor must lie strictly inside the room")

    def contains(self, p, margin: float = 0.0) -> bool:
        """True if ``p`` is at least ``margin`` inside every wall plane."""
        p = _as_vec(p)
        for w in self.walls:
            if (p - w.origin) @ w.normal < margin:
                return False
        return True

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        pts = np.concatenate([w.corners() for w in self.walls])
        return pts.min(axis=0), pts.max(axis=0)

    def diameter(self) -> float:
        pts = np.concatenate([w.corners() for w in self.walls])
        d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
        return float(np.sqrt(d2.max()))

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "anchor": self.anchor.tolist(),
            "walls": [
                {
                    "origin": w.origin.tolist(),
                    "normal": w.normal.tolist(),
                    "extents": w.extents.tolist(),
                    "gamma": w.gamma,
                }
                for w in self.walls
            ],
        }

    @staticmethod
    def from_json(obj: dict) -> "Scene":
        walls = [
            Wall(
                origin=np.asarray(w["origin"]),
                normal=np.asarray(w["normal"]),
                extents=np.asarray(w["extents"]),
                gamma=float(w["gamma"]),
            )
            for w in obj["walls"]
        ]
        return Scene(walls=tuple(walls), anchor=np.asarray(obj["anchor"]))

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @staticmethod
    def loads(s: str) -> "Scene":
        return Scene.from_json(json.loads(s))


@dataclass(frozen=True)
class Isometry:
    """Rigid map p -> R p + t with R orthogonal (det = +-1)."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        t = _as_vec(self.t)
        if R.shape != (t.shape[0], t.shape[0]):
            raise ValueError("R / t dimensionality mismatch")
        if np.abs(R.T @ R - np.eye(R.shape[0])).max() > 1e-10:
            raise ValueError("R must be orthogonal")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity(dim: int) -> "Isometry":
        return Isometry(np.eye(dim), np.zeros(dim))

    def apply(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.t

    def compose(self, other: "Isometry") -> "Isometry":
        """self after other: (self o other)(p) = self(other(p))."""
        return Isometry(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Isometry":
        return Isometry(self.R.T, -self.R.T @ self.t)


def mirror_point(p, wall: Wall) -> np.ndarray:
    """Reflect ``p`` across the wall's plane (an involution)."""
    p = _as_vec(p)
    n = wall.normal
    return p - 2.0 * ((p - wall.origin) @ n) * n


def apply_isometry(T: Isometry, p) -> np.ndarray:
    return T.apply(p)


def tof(a, b) -> float:
    """Free-space time of flight between two points, seconds."""
    a = _as_vec(a)
    b = _as_vec(b)
    if a.shape != b.shape:
        raise ValueError("points must share a dimension")
    return float(np.linalg.norm(a - b) / C)


def wall_sequences(n_walls: int, max_bounce: int):
    """Ordered wall-index sequences of length 1..max_bounce without
    immediate repeats, sorted by (length, lexicographic)."""
    for length in range(1, max_bounce + 1):
        for seq in itertools.product(range(n_walls), repeat=length):
            if any(seq[i] == seq[i + 1] for i in range(length - 1)):
                continue
            yield seq


def image_sources(scene: Scene, max_bounce: int):
    """All mirror images of the anchor across ordered wall sequences.

    Returns ``[(point, wall_index_sequence), ...]`` in deterministic
    (length, lexicographic) order.  No visibility filtering is applied
    here; see :func:`validate_path`.
    """
    if max_bounce not in (1, 2):
        raise ValueError("max_bounce must be 1 or 2")
    out = []
    for seq in wall_sequences(len(scene.walls), max_bounce):
        p = scene.anchor
        for wi in seq:
            p = mirror_point(p, scene.walls[wi])
        out.append((p, seq))
    return out


def _plane_hit(a, b, wall: Wall):
    """Intersection of open segment (a, b) with the wall's plane, or None."""
    n = wall.normal
    da = (a - wall.origin) @ n
    db = (b - wall.origin) @ n
    denom = da - db
    if abs(denom) < 1e-15:
        return None
    t = da / denom
    if not (1e-12 < t < 1.0 - 1e-12):
        return None
    return a + t * (b - a)


def validate_path(scene: Scene, user, va, walls_seq) -> bool:
    """Check that the specular path user -> ... -> anchor physically exists.

    Unfolds the straight segment from the user to the image source and
    checks that every reflection point lands inside the corresponding
    wall patch, visited in sequence order.
    """
    user = _as_vec(user)
    walls_seq = tuple(walls_seq)
    if not walls_seq:
        return True  # LOS in a convex room
    # images of the anchor after the first j mirrors
    imgs = []
    p = scene.anchor
    for wi in walls_seq:
        p = mirror_point(p, scene.walls[wi])
        imgs.append(p)
    va = _as_vec(va)
    if np.linalg.norm(va - imgs[-1]) > 1e-9:
        return False
    q = user
    for j in range(len(walls_seq) - 1, -1, -1):
        w = scene.walls[walls_seq[j]]
        hit = _plane_hit(q, imgs[j], w)
        if hit is None or not w.contains_point(hit, tol=1e-9):
            return False
        q = hit
    return True


def folded_path_length(scene: Scene, user, walls_seq) -> float:
    """Total length of the folded polyline anchor -> walls -> user, meters.

    Independent of the unfolded image-source distance; used as an oracle.
    """
    user = _as_vec(user)
    walls_seq = tuple(walls_seq)
    if not walls_seq:
        return float(np.linalg.norm(user - scene.anchor))
    imgs = []
    p = scene.anchor
    for wi in walls_seq:
        p = mirror_point(p, scene.walls[wi])
        imgs.append(p)
    pts = [user]
    q = user
    for j in range(len(walls_seq) - 1, -1, -1):
        w = scene.walls[walls_seq[j]]
        hit = _plane_hit(q, imgs[j], w)
        if hit is None:
            raise ValueError("path does not intersect wall plane")
        pts.append(hit)
        q = hit
    pts.append(scene.anchor)
    pts = np.asarray(pts)
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def rectangle_room(width: float, height: float, anchor, gamma=0.7,
                   lower=(0.0, 0.0)) -> Scene:
    """Axis-aligned 2D rectangular room with full-face walls.

    ``gamma`` may be a scalar or one reflection coefficient per wall in
    (-x, +x, -y, +y) order.
    """
    x0, y0 = lower
    x1, y1 = x0 + width, y0 + height
    g = np.broadcast_to(np.asarray(gamma, dtype=float), (4,))
    walls = (
        Wall(origin=np.array([x0, y0]), normal=np.array([1.0, 0.0]),
             extents=np.array([[0.0, height]]), gamma=float(g[0])),
        Wall(origin=np.array([x1, y0]), normal=np.array([-1.0, 0.0]),
             extents=np.array([[-height, 0.0]]), gamma=float(g[1])),
        Wall(origin=np.array([x0, y0]), normal=np.array([0.0, 1.0]),
             extents=np.array([[-width, 0.0]]), gamma=float(g[2])),
        Wall(origin=np.array([x0, y1]), normal=np.array([0.0, -1.0]),
             extents=np.array([[0.0, width]]), gamma=float(g[3])),
    )
    return Scene(walls=walls, anchor=np.asarray(anchor, dtype=float))


def box_room(lower, upper, anchor, gamma=0.7) -> Scene:
    """Axis-aligned 3D box room with full-face walls (4 walls + floor +
    ceiling).

    ``gamma`` may be a scalar or one reflection coefficient per wall in
    (-x, +x, -y, +y, -z, +z) order.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    size = upper - lower
    g = np.broadcast_to(np.asarray(gamma, dtype=float), (6,))
    walls = []
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        # extents in the deterministic tangent frame of each face
        for sign, offset in ((1.0, lower[axis]), (-1.0, upper[axis])):
            gw = float(g[len(walls)])
            n = np.zeros(3)
            n[axis] = sign
            origin = 0.5 * (lower + upper)
            origin[axis] = offset
            w = Wall(origin=origin, normal=n,
                     extents=np.array([[-10 * size.max(), 10 * size.max()]] * 2),
                     gamma=gw)
            frame = w.tangent_frame()
            # tighten extents to the actual face
            ext = []
            for t in frame:
                spans = [abs(t[o]) * size[o] / 2.0 for o in others]
                half = sum(spans)
                ext.append([-half, half])
            w = Wall(origin=origin, normal=n, extents=np.array(ext), gamma=gw)
            walls.append(w)
    return Scene(walls=tuple(walls), anchor=np.asarray(anchor, dtype=float))
