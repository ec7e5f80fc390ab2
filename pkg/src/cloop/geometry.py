"""SE(2) frames, oriented-box collision and time-to-collision primitives.

Everything here is pure and numpy-based; all angles are radians, all
distances meters, all times seconds.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def rotation_from_heading(heading: float) -> np.ndarray:
    """2x2 rotation matrix [[cos, -sin], [sin, cos]] for a heading angle."""
    if not np.isfinite(heading):
        raise ValueError(f"heading must be finite, got {heading}")
    c, s = np.cos(heading), np.sin(heading)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class LocalFrame:
    """An agent's reference frame: origin position and heading rotation."""

    origin: np.ndarray
    heading: float
    rotation: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=float)
        if origin.shape != (2,):
            raise ValueError(f"frame origin must be a 2-vector, got shape {origin.shape}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "rotation", rotation_from_heading(self.heading))


def to_local(frame: LocalFrame, p: np.ndarray) -> np.ndarray:
    """Express global point(s) p in the frame: R^T (p - origin).

    p may be a single 2-vector or an array [..., 2].
    """
    p = np.asarray(p, dtype=float)
    return (p - frame.origin) @ frame.rotation


def from_local(frame: LocalFrame, p: np.ndarray) -> np.ndarray:
    """Inverse of to_local: R p + origin."""
    p = np.asarray(p, dtype=float)
    return p @ frame.rotation.T + frame.origin


def restore_between_frames(frame_i: LocalFrame, frame_j: LocalFrame, y_j: np.ndarray) -> np.ndarray:
    """Re-express point(s) given in frame_j directly in frame_i."""
    return to_local(frame_i, from_local(frame_j, y_j))


def rotate_between_frames(frame_i: LocalFrame, frame_j: LocalFrame, dy_j: np.ndarray) -> np.ndarray:
    """Displacement variant of restore_between_frames: rotation only, no translation."""
    dy_j = np.asarray(dy_j, dtype=float)
    return dy_j @ frame_j.rotation.T @ frame_i.rotation


def frame_pair_transform(frame_i: LocalFrame, frame_j: LocalFrame) -> tuple[np.ndarray, np.ndarray]:
    """(M, c) with restore_between_frames(frame_i, frame_j, y) == y @ M.T + c."""
    m = frame_i.rotation.T @ frame_j.rotation
    c = frame_i.rotation.T @ (frame_j.origin - frame_i.origin)
    return m, c


@dataclass(frozen=True)
class OrientedBox:
    """Axis-agnostic rectangle footprint (closed set)."""

    center: np.ndarray
    heading: float
    length: float
    width: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError(f"box extents must be positive, got {self.length} x {self.width}")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))

    def corners(self) -> np.ndarray:
        """The 4 corner points, counterclockwise, shape [4, 2]."""
        return box_corners(self.center[None], np.array([self.heading]),
                           self.length, self.width)[0]


def box_corners(centers: np.ndarray, headings: np.ndarray,
                length: float, width: float) -> np.ndarray:
    """Corners for a batch of same-extent boxes: [T, 2], [T] -> [T, 4, 2]."""
    c, s = np.cos(headings), np.sin(headings)
    hl, hw = 0.5 * length, 0.5 * width
    # local corner offsets (ccw), rotated per heading
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # [T, 2, 2]
    return centers[:, None, :] + local[None] @ np.swapaxes(rot, -1, -2)


def _separation_margin(corners_a: np.ndarray, corners_b: np.ndarray,
                       axes: np.ndarray) -> np.ndarray:
    """Max over candidate axes of the projection gap; > 0 means separated.

    corners_*: [T, 4, 2]; axes: [T, A, 2]. Returns [T].
    """
    proj_a = corners_a @ np.swapaxes(axes, -1, -2)  # [T, 4, A]
    proj_b = corners_b @ np.swapaxes(axes, -1, -2)
    gap_ab = proj_b.min(axis=1) - proj_a.max(axis=1)  # [T, A]
    gap_ba = proj_a.min(axis=1) - proj_b.max(axis=1)
    return np.maximum(gap_ab, gap_ba).max(axis=1)


def _box_axes(headings: np.ndarray) -> np.ndarray:
    c, s = np.cos(headings), np.sin(headings)
    return np.stack([np.stack([c, s], -1), np.stack([-s, c], -1)], -2)  # [T, 2, 2]


def separation_margin(a: OrientedBox, b: OrientedBox) -> float:
    """Best separating-axis gap between two boxes; <= 0 iff they overlap (closed)."""
    ca = box_corners(a.center[None], np.array([a.heading]), a.length, a.width)
    cb = box_corners(b.center[None], np.array([b.heading]), b.length, b.width)
    axes = np.concatenate([_box_axes(np.array([a.heading])),
                           _box_axes(np.array([b.heading]))], axis=1)
    return float(_separation_margin(ca, cb, axes)[0])


def boxes_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis test over the 4 edge normals; tangency counts as overlap."""
    return separation_margin(a, b) <= 0.0


@dataclass(frozen=True)
class TimedPath:
    """Uniformly sampled pose trajectory: times [T], positions [T, 2], headings [T]."""

    times: np.ndarray
    positions: np.ndarray
    headings: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        positions = np.asarray(self.positions, dtype=float)
        headings = np.asarray(self.headings, dtype=float)
        if times.ndim != 1 or positions.shape != (len(times), 2) or headings.shape != times.shape:
            raise ValueError("TimedPath arrays disagree: "
                             f"times {times.shape}, positions {positions.shape}, headings {headings.shape}")
        if len(times) >= 2:
            steps = np.diff(times)
            if np.any(steps <= 0):
                raise ValueError("TimedPath timestamps must be strictly increasing")
            if not np.allclose(steps, steps[0], rtol=0, atol=1e-9):
                raise ValueError("TimedPath timestamps must be uniformly spaced")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "headings", headings)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def step(self) -> float:
        if len(self.times) < 2:
            return 0.0
        return float(self.times[1] - self.times[0])

    @property
    def start_time(self) -> float:
        return float(self.times[0])

    @property
    def end_time(self) -> float:
        return float(self.times[-1])

    def speeds(self) -> np.ndarray:
        """Per-sample speed from forward differences (last repeats)."""
        if len(self) < 2:
            return np.zeros(len(self))
        d = np.linalg.norm(np.diff(self.positions, axis=0), axis=1) / self.step
        return np.append(d, d[-1])

    def interpolate(self, t: float) -> tuple[np.ndarray, float, float]:
        """Linear pose interpolation at time t -> (position, heading, speed).

        t must lie within [start_time, end_time].
        """
        if t < self.times[0] - 1e-9 or t > self.times[-1] + 1e-9:
            raise ValueError(f"time {t} outside path range "
                             f"[{self.times[0]}, {self.times[-1]}]")
        if len(self) == 1:
            return self.positions[0].copy(), float(self.headings[0]), 0.0
        u = np.clip((t - self.times[0]) / self.step, 0.0, len(self) - 1)
        i0 = int(min(np.floor(u), len(self) - 2))
        w = u - i0
        pos = (1 - w) * self.positions[i0] + w * self.positions[i0 + 1]
        h0, h1 = self.headings[i0], self.headings[i0 + 1]
        heading = h0 + w * wrap_angle(h1 - h0)
        speed = float(np.linalg.norm(self.positions[i0 + 1] - self.positions[i0]) / self.step)
        return pos, float(heading), speed

    def suffix_from(self, t: float) -> "TimedPath":
        """Samples at times >= t - 1e-9 (grid-aligned suffix)."""
        keep = self.times >= t - 1e-9
        return TimedPath(self.times[keep], self.positions[keep], self.headings[keep])

    def resample(self, times: np.ndarray) -> "TimedPath":
        """Linear resampling onto a new uniform grid within the path's span."""
        samples = [self.interpolate(float(t)) for t in times]
        return TimedPath(np.asarray(times, dtype=float),
                         np.array([s[0] for s in samples]),
                         np.array([s[1] for s in samples]))


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - a, 2 * np.pi)


def time_to_collision(path_a: TimedPath, extent_a: tuple[float, float],
                      path_b: TimedPath, extent_b: tuple[float, float]) -> float | None:
    """First sample time at which the two box footprints overlap; None if never.

    Both paths must share the same sample grid. Discrete check at the path
    step; no continuous-time root finding.
    """
    if len(path_a) != len(path_b) or not np.allclose(path_a.times, path_b.times, atol=1e-9):
        raise ValueError(f"time_to_collision requires matching horizons: "
                         f"{len(path_a)} samples vs {len(path_b)}")
    ca = box_corners(path_a.positions, path_a.headings, *extent_a)
    cb = box_corners(path_b.positions, path_b.headings, *extent_b)
    axes = np.concatenate([_box_axes(path_a.headings), _box_axes(path_b.headings)], axis=1)
    margins = _separation_margin(ca, cb, axes)
    hits = np.nonzero(margins <= 0.0)[0]
    if len(hits) == 0:
        return None
    return float(path_a.times[hits[0]])


# ---------------------------------------------------------------------------
# Polyline helpers (lane centerlines, route progress)

def polyline_arclengths(points: np.ndarray) -> np.ndarray:
    """Cumulative arc length at each vertex of a polyline [P, 2] -> [P]."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def project_to_polyline(p: np.ndarray, points: np.ndarray) -> tuple[float, float]:
    """Project point(s) onto a polyline -> (arc length s, unsigned lateral distance).

    p: [2] or [M, 2]. Returns floats for a single point, arrays for a batch.
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = p[None] if single else p
    a = points[:-1]          # [S, 2]
    d = points[1:] - a       # [S, 2]
    seg_len2 = np.maximum((d * d).sum(axis=1), 1e-12)
    rel = pts[:, None, :] - a[None]                       # [M, S, 2]
    t = np.clip((rel * d[None]).sum(-1) / seg_len2, 0.0, 1.0)
    closest = a[None] + t[..., None] * d[None]            # [M, S, 2]
    dist = np.linalg.norm(pts[:, None, :] - closest, axis=-1)
    idx = dist.argmin(axis=1)
    rows = np.arange(len(pts))
    base_s = polyline_arclengths(points)[:-1]
    s = base_s[idx] + t[rows, idx] * np.sqrt(seg_len2[idx])
    lat = dist[rows, idx]
    if single:
        return float(s[0]), float(lat[0])
    return s, lat


def point_at_arclength(points: np.ndarray, s: float) -> tuple[np.ndarray, float]:
    """Position and tangent heading at arc length s along a polyline (clamped)."""
    arcs = polyline_arclengths(points)
    s = float(np.clip(s, 0.0, arcs[-1]))
    i = int(np.searchsorted(arcs, s, side="right") - 1)
    i = min(max(i, 0), len(points) - 2)
    seg = points[i + 1] - points[i]
    seg_len = max(float(np.linalg.norm(seg)), 1e-12)
    w = (s - arcs[i]) / seg_len
    pos = points[i] + w * seg
    return pos, float(np.arctan2(seg[1], seg[0]))
