"""Planar room geometry: walls, obstacle, linear arrays and image-method tracing.

Points are plain ``numpy`` arrays of shape ``(2,)`` (or ``(..., 2)`` for the
vectorised helpers). All coordinates are in meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

# Relative slack used when deciding whether an intersection parameter lies on
# a closed segment.
_SEGMENT_EPS = 1e-12


class GeometryError(ValueError):
    """Raised for degenerate or inconsistent geometry."""


def as_point(p) -> np.ndarray:
    arr = np.asarray(p, dtype=float)
    if arr.shape != (2,) or not np.all(np.isfinite(arr)):
        raise GeometryError(f"expected a finite 2-D point, got {p!r}")
    return arr


@dataclass(frozen=True)
class Wall:
    """A straight, specularly reflecting wall segment."""

    start: np.ndarray
    end: np.ndarray
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "start", as_point(self.start))
        object.__setattr__(self, "end", as_point(self.end))
        if np.allclose(self.start, self.end, rtol=0.0, atol=1e-15):
            raise GeometryError(f"wall {self.label!r} has identical endpoints")

    @property
    def direction(self) -> np.ndarray:
        d = self.end - self.start
        return d / np.linalg.norm(d)

    @property
    def normal(self) -> np.ndarray:
        d = self.direction
        return np.array([-d[1], d[0]])

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))

    def side(self, p) -> np.ndarray:
        """Signed distance of point(s) ``p`` to the wall's supporting line."""
        return (np.asarray(p, dtype=float) - self.start) @ self.normal

    def grid(self, step: float) -> np.ndarray:
        """Points along the wall anchored at ``start``, spaced by ``step``.

        The end point is included whenever the length is an integer multiple
        of ``step`` (up to rounding).
        """
        if step <= 0:
            raise GeometryError("grid step must be positive")
        count = int(np.floor(self.length / step + 1e-9)) + 1
        offsets = np.arange(count) * step
        return self.start + offsets[:, None] * self.direction


@dataclass(frozen=True)
class Obstacle:
    """Closed convex polygon. Vertices are stored counter-clockwise."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise GeometryError("obstacle needs at least three 2-D vertices")
        if not np.all(np.isfinite(v)):
            raise GeometryError("obstacle vertices must be finite")
        area = _signed_area(v)
        if abs(area) < 1e-15:
            raise GeometryError("obstacle polygon has zero area")
        if area < 0:
            v = v[::-1].copy()
        edges = np.roll(v, -1, axis=0) - v
        nxt = np.roll(edges, -1, axis=0)
        cross = edges[:, 0] * nxt[:, 1] - edges[:, 1] * nxt[:, 0]
        if np.any(cross < -1e-12):
            raise GeometryError("obstacle polygon must be convex")
        object.__setattr__(self, "vertices", v)

    @classmethod
    def rectangle(cls, x0: float, y0: float, x1: float, y1: float) -> "Obstacle":
        return cls(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float))

    @property
    def outward_normals(self) -> np.ndarray:
        edges = np.roll(self.vertices, -1, axis=0) - self.vertices
        return np.stack([edges[:, 1], -edges[:, 0]], axis=1)


def _signed_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform linear array; element 1 sits on the reference point."""

    reference_point: np.ndarray
    element_count: int
    element_spacing: float
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "reference_point", as_point(self.reference_point))
        if int(self.element_count) < 1:
            raise GeometryError("element_count must be >= 1")
        object.__setattr__(self, "element_count", int(self.element_count))
        if not self.element_spacing > 0:
            raise GeometryError("element_spacing must be > 0")
        o = as_point(self.orientation)
        norm = np.linalg.norm(o)
        if norm == 0:
            raise GeometryError("orientation must be non-zero")
        object.__setattr__(self, "orientation", o / norm)

    @property
    def positions(self) -> np.ndarray:
        """Element coordinates, shape ``(element_count, 2)``."""
        idx = np.arange(self.element_count)[:, None]
        return self.reference_point + idx * self.element_spacing * self.orientation


@dataclass(frozen=True)
class Scene:
    walls: tuple
    tx: ArrayGeometry
    rx: ArrayGeometry
    room_bounds: tuple = (6.5, 6.5)
    obstacle: Optional[Obstacle] = None

    def __post_init__(self):
        object.__setattr__(self, "walls", tuple(self.walls))
        labels = [w.label for w in self.walls]
        if len(set(labels)) != len(labels):
            raise GeometryError("wall labels must be unique")
        width, height = self.room_bounds

        def inside(pts, what):
            pts = np.atleast_2d(pts)
            ok = (pts[:, 0] >= -1e-9) & (pts[:, 0] <= width + 1e-9)
            ok &= (pts[:, 1] >= -1e-9) & (pts[:, 1] <= height + 1e-9)
            if not np.all(ok):
                raise GeometryError(f"{what} lies outside the room bounds {self.room_bounds}")

        inside(self.tx.positions, "tx")
        inside(self.rx.positions, "rx")
        for w in self.walls:
            inside(np.stack([w.start, w.end]), f"wall {w.label!r}")
        if self.obstacle is not None:
            inside(self.obstacle.vertices, "obstacle")

    def wall(self, label: str) -> Wall:
        for w in self.walls:
            if w.label == label:
                return w
        raise KeyError(label)

    def without_obstacle(self) -> "Scene":
        return Scene(self.walls, self.tx, self.rx, self.room_bounds, None)


def mirror_point(p, wall: Wall) -> np.ndarray:
    """Reflect ``p`` across the infinite line through the wall's endpoints.

    Accepts a single point or an array of points with trailing dimension 2.
    """
    p = np.asarray(p, dtype=float)
    n = wall.normal
    dist = (p - wall.start) @ n
    return p - 2.0 * dist[..., None] * n


def _intersect_with_wall(a: np.ndarray, b: np.ndarray, wall: Wall):
    """Intersect segments a->b with the wall's line.

    Returns ``(point, t, u)`` where ``t`` is the parameter along a->b and
    ``u`` the parameter along the wall (0 at start, 1 at end). Parallel
    segments get ``nan`` parameters.
    """
    d = b - a
    w = wall.end - wall.start
    denom = d[..., 0] * w[1] - d[..., 1] * w[0]
    rel = wall.start - a
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rel[..., 0] * w[1] - rel[..., 1] * w[0]) / denom
        u = (rel[..., 0] * d[..., 1] - rel[..., 1] * d[..., 0]) / denom
    t = np.where(np.abs(denom) < 1e-300, np.nan, t)
    u = np.where(np.abs(denom) < 1e-300, np.nan, u)
    point = a + t[..., None] * d
    return point, t, u


def _on_closed_unit(u) -> np.ndarray:
    return (u >= -_SEGMENT_EPS) & (u <= 1.0 + _SEGMENT_EPS)


def one_bounce_points(tx, rx, wall: Wall):
    """Vectorised specular points for broadcastable ``tx``/``rx`` arrays.

    Returns ``(points, valid)``; invalid entries hold ``nan`` coordinates.
    """
    tx = np.asarray(tx, dtype=float)
    rx = np.asarray(rx, dtype=float)
    tx, rx = np.broadcast_arrays(tx, rx)
    same_side = wall.side(tx) * wall.side(rx) > 0
    image = mirror_point(tx, wall)
    point, t, u = _intersect_with_wall(image, rx, wall)
    valid = same_side & _on_closed_unit(u) & (t > 0) & (t < 1)
    point = np.where(valid[..., None], point, np.nan)
    return point, valid


def two_bounce_points(tx, rx, wall1: Wall, wall2: Wall):
    """Vectorised double-image tracing tx -> wall1 -> wall2 -> rx."""
    if wall1 is wall2 or (np.allclose(wall1.start, wall2.start) and np.allclose(wall1.end, wall2.end)):
        raise GeometryError("two-bounce tracing needs two distinct walls")
    tx = np.asarray(tx, dtype=float)
    rx = np.asarray(rx, dtype=float)
    tx, rx = np.broadcast_arrays(tx, rx)
    image1 = mirror_point(tx, wall1)
    image2 = mirror_point(image1, wall2)
    s2, t2, u2 = _intersect_with_wall(rx, image2, wall2)
    s1, t1, u1 = _intersect_with_wall(image1, s2, wall1)
    valid = _on_closed_unit(u2) & (t2 > 0) & (t2 < 1)
    valid &= _on_closed_unit(u1) & (t1 > 0) & (t1 < 1)
    with np.errstate(invalid="ignore"):
        # each leg must approach its wall from the side it leaves on
        valid &= wall1.side(tx) * wall1.side(s2) > 0
        valid &= wall2.side(s1) * wall2.side(rx) > 0
    s1 = np.where(valid[..., None], s1, np.nan)
    s2 = np.where(valid[..., None], s2, np.nan)
    return s1, s2, valid


def trace_one_bounce(tx_el, rx_el, wall: Wall) -> Optional[np.ndarray]:
    """Specular reflection point on ``wall`` for a single Tx/Rx pair, or None."""
    point, valid = one_bounce_points(as_point(tx_el), as_point(rx_el), wall)
    return point if bool(valid) else None


def trace_two_bounce(tx_el, rx_el, wall1: Wall, wall2: Wall):
    """Ordered pair of specular points (on wall1, then wall2), or None."""
    s1, s2, valid = two_bounce_points(as_point(tx_el), as_point(rx_el), wall1, wall2)
    return (s1, s2) if bool(valid) else None


def path_length(tx_el, scatterers: Sequence, rx_el) -> float:
    pts = [as_point(tx_el)] + [as_point(s) for s in scatterers] + [as_point(rx_el)]
    return float(sum(np.linalg.norm(b - a) for a, b in zip(pts[:-1], pts[1:])))


def polyline_lengths(tx, scatterers: Sequence[np.ndarray], rx) -> np.ndarray:
    """Broadcast version of :func:`path_length` over leading dimensions."""
    pts = [np.asarray(tx, dtype=float)] + [np.asarray(s, dtype=float) for s in scatterers]
    pts.append(np.asarray(rx, dtype=float))
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        total = total + np.linalg.norm(b - a, axis=-1)
    return total


def segments_blocked(a, b, obstacle: Obstacle) -> np.ndarray:
    """Closed-segment / closed-polygon intersection test (Cyrus-Beck clipping).

    Grazing contact with the boundary counts as blocked.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    d = b - a
    t_lo = np.zeros(a.shape[:-1])
    t_hi = np.ones(a.shape[:-1])
    outside = np.zeros(a.shape[:-1], dtype=bool)
    tol = 1e-12
    for v, n in zip(obstacle.vertices, obstacle.outward_normals):
        num = (a - v) @ n
        den = d @ n
        parallel = np.abs(den) <= 1e-15
        outside |= parallel & (num > tol)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -num / den
        entering = (~parallel) & (den < 0)
        leaving = (~parallel) & (den > 0)
        t_lo = np.where(entering, np.maximum(t_lo, t), t_lo)
        t_hi = np.where(leaving, np.minimum(t_hi, t), t_hi)
    return (~outside) & (t_lo <= t_hi + 1e-12)


def segment_blocked(a, b, obstacle: Obstacle) -> bool:
    return bool(segments_blocked(as_point(a), as_point(b), obstacle))


def path_blockage_mask(scene: Scene, path_scatterers, valid=None) -> np.ndarray:
    """Per-channel visibility mask of one path.

    Args:
        scene: the scene holding the arrays and the (optional) obstacle.
        path_scatterers: array of shape ``(M, N, K, 2)`` with the specular
            points of every (tx element, rx element) channel; ``K`` may be 0.
        valid: optional boolean ``(M, N)`` array; channels whose tracing
            failed are reported as blocked.

    Returns:
        ``uint8`` array of shape ``(M, N)``; 1 = unblocked, 0 = blocked.
    """
    tx = scene.tx.positions
    rx = scene.rx.positions
    m, n = len(tx), len(rx)
    scat = np.asarray(path_scatterers, dtype=float).reshape(m, n, -1, 2)
    mask = np.ones((m, n), dtype=bool)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
        mask &= np.all(np.isfinite(scat), axis=(2, 3))
    if scene.obstacle is None:
        return mask.astype(np.uint8)
    start = np.broadcast_to(tx[:, None, :], (m, n, 2))
    nodes = [start] + [scat[:, :, k, :] for k in range(scat.shape[2])]
    nodes.append(np.broadcast_to(rx[None, :, :], (m, n, 2)))
    for a, b in zip(nodes[:-1], nodes[1:]):
        with np.errstate(invalid="ignore"):
            hit = segments_blocked(np.nan_to_num(a), np.nan_to_num(b), scene.obstacle)
        mask &= ~hit
    return mask.astype(np.uint8)
