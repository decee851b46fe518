"""Path localization, reference-window extraction and the safe driving corridor.

The planner owns the global path and all obstacle geometry.  Per control
cycle it localizes the car on the path (nearest-sample search with an
incremental hint), cuts the receding reference window, and narrows the
lane's lateral bounds around every revealed obstacle: each obstacle is
inflated longitudinally by ``safe_duration * speed`` fore and aft and
laterally by a configured margin, forming a no-go box the corridor must
exclude on the chosen passing side.  When the original reference line
would leave the corridor, the reference is shifted to the middle of the
remaining free band, which is what turns a blocked lane into a lane-change
command for the tracking OCP.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .ocp import ReferenceWindow

__all__ = [
    "GlobalPath",
    "Obstacle",
    "Corridor",
    "CorridorEmptyError",
    "localize_closest_point",
    "extract_reference_window",
    "gate_obstacles",
    "obstacle_clearance",
    "build_corridor",
]

# minimum drivable band and the clearance the adjusted reference keeps to it
MIN_CORRIDOR_WIDTH = 0.2
REF_CLEARANCE = 0.1

# hinted localization searches this many samples around the previous match
HINT_WINDOW = 50


class CorridorEmptyError(RuntimeError):
    """Raised when a no-go box spans the whole lane and no corridor remains."""


@dataclass(frozen=True)
class GlobalPath:
    """Sampled reference path with cumulative arclength and a speed profile."""

    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray
    v: np.ndarray
    s: np.ndarray
    lane_half_width: float = 2.0

    def __post_init__(self):
        for name in ("x", "y", "psi", "v", "s"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.x.shape[0]
        if n < 2:
            raise ValueError("path needs at least two samples")
        if any(getattr(self, k).shape != (n,) for k in ("y", "psi", "v", "s")):
            raise ValueError("path arrays must share one length")
        if np.any(np.diff(self.s) <= 0.0):
            raise ValueError("arclength must be strictly increasing")

    def __len__(self):
        return self.x.shape[0]

    @classmethod
    def from_arrays(cls, x, y, psi, v, lane_half_width=2.0):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ds = np.hypot(np.diff(x), np.diff(y))
        s = np.concatenate([[0.0], np.cumsum(ds)])
        return cls(x=x, y=y, psi=np.asarray(psi, float), v=np.asarray(v, float), s=s,
                   lane_half_width=lane_half_width)

    @classmethod
    def from_csv(cls, path, lane_half_width=2.0):
        """Load a path from CSV rows of (x, y, psi, v_ref), header optional."""
        arr = np.genfromtxt(path, delimiter=",", comments="#", names=True)
        if arr.dtype.names is None or len(arr.dtype.names) < 4:
            arr = np.genfromtxt(path, delimiter=",", comments="#")
            cols = [arr[:, i] for i in range(4)]
        else:
            names = arr.dtype.names
            cols = [arr[n] for n in names[:4]]
        return cls.from_arrays(*cols, lane_half_width=lane_half_width)

    def point_at(self, s_query):
        """Interpolated (x, y, psi, v) at arclength(s), clamped to the ends."""
        sq = np.clip(np.asarray(s_query, dtype=float), self.s[0], self.s[-1])
        return (
            np.interp(sq, self.s, self.x),
            np.interp(sq, self.s, self.y),
            np.interp(sq, self.s, self.psi),
            np.interp(sq, self.s, self.v),
        )


@dataclass(frozen=True)
class Obstacle:
    """Static box obstacle revealed by distance (and optionally by time)."""

    x: float
    y: float
    length: float
    width: float
    detection_range: float
    heading: float = 0.0
    appear_time: Optional[float] = None
    active: bool = False

    def __post_init__(self):
        if self.length <= 0.0 or self.width <= 0.0:
            raise ValueError("obstacle extents must be positive")


def localize_closest_point(path: GlobalPath, x, y, hint: Optional[int] = None) -> int:
    """Index of the nearest path sample; ties resolve to the lowest index.

    With a ``hint`` the search runs over +-HINT_WINDOW samples around it and
    falls back to a full scan whenever the local optimum sits on the window
    edge (the hint was stale).
    """
    if hint is not None:
        lo = max(0, int(hint) - HINT_WINDOW)
        hi = min(len(path), int(hint) + HINT_WINDOW + 1)
        d2 = (path.x[lo:hi] - x) ** 2 + (path.y[lo:hi] - y) ** 2
        k = int(np.argmin(d2)) + lo
        interior = (k > lo or lo == 0) and (k < hi - 1 or hi == len(path))
        if interior:
            return k
    d2 = (path.x - x) ** 2 + (path.y - y) ** 2
    return int(np.argmin(d2))


def extract_reference_window(path: GlobalPath, k_star: int, n_horizon: int, dt: float) -> ReferenceWindow:
    """Receding reference: advance by v_ref*dt per stage along arclength.

    Past the path end the terminal point repeats with zero reference speed.
    """
    s_pts = np.empty(n_horizon + 1)
    s_cur = path.s[int(k_star)]
    s_end = path.s[-1]
    for j in range(n_horizon + 1):
        s_pts[j] = min(s_cur, s_end)
        v_here = np.interp(min(s_cur, s_end), path.s, path.v)
        s_cur = s_cur + max(v_here, 0.0) * dt
    xs, ys, psis, vs = path.point_at(s_pts)
    vs = np.where(s_pts >= s_end - 1e-12, 0.0, vs)
    return ReferenceWindow(v=vs, x=xs, y=ys, psi=psis)


def _point_box_distance(px, py, ob: Obstacle) -> float:
    """Euclidean distance from a point to the obstacle rectangle (0 inside)."""
    c, s = np.cos(ob.heading), np.sin(ob.heading)
    dx, dy = px - ob.x, py - ob.y
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    ex = max(abs(lx) - 0.5 * ob.length, 0.0)
    ey = max(abs(ly) - 0.5 * ob.width, 0.0)
    return float(np.hypot(ex, ey))


def gate_obstacles(obstacles: Sequence[Obstacle], ego, t: float = 0.0):
    """Reveal obstacles whose distance-to-collision reached their gate.

    Activation latches: once seen, an obstacle stays active, so the corridor
    cannot snap back while the car is alongside.  Returns the updated list.
    """
    ex, ey = (ego.x, ego.y) if hasattr(ego, "x") else (ego[3], ego[4])
    out = []
    for ob in obstacles:
        if ob.active:
            out.append(ob)
            continue
        if ob.appear_time is not None and t < ob.appear_time:
            out.append(ob)
            continue
        if _point_box_distance(ex, ey, ob) <= ob.detection_range:
            out.append(replace(ob, active=True))
        else:
            out.append(ob)
    return out


def obstacle_clearance(ego_xy, ego_psi, ego_length, ego_width, ob: Obstacle) -> float:
    """Separation between the ego footprint box and the obstacle box.

    Largest separating-axis gap over both boxes' face normals: exact for
    edge-to-edge separation, a conservative underestimate at corner-corner
    cases, and 0 whenever the footprints overlap.
    """

    def corners(cx, cy, heading, length, width):
        c, s = np.cos(heading), np.sin(heading)
        hx, hy = 0.5 * length, 0.5 * width
        local = np.array([[hx, hy], [hx, -hy], [-hx, -hy], [-hx, hy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([cx, cy])

    a = corners(ego_xy[0], ego_xy[1], ego_psi, ego_length, ego_width)
    b = corners(ob.x, ob.y, ob.heading, ob.length, ob.width)
    gaps = []
    for poly, other in ((a, b), (b, a)):
        edges = np.roll(poly, -1, axis=0) - poly
        normals = np.column_stack([edges[:, 1], -edges[:, 0]])
        normals = normals / np.linalg.norm(normals, axis=1)[:, None]
        for nvec in normals:
            pa = poly @ nvec
            pb = other @ nvec
            gaps.append(max(pb.min() - pa.max(), pa.min() - pb.max()))
    return float(max(max(gaps), 0.0))


@dataclass(frozen=True)
class Corridor:
    """Per-stage drivable band around the adjusted reference window.

    ``left``/``right`` are lateral offsets measured from the *adjusted*
    reference line (left > 0 > right), ``shift`` records how far that line
    was moved from the original one.
    """

    left: np.ndarray
    right: np.ndarray
    shift: np.ndarray
    window: ReferenceWindow

    def __post_init__(self):
        for name in ("left", "right", "shift"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.left <= self.right):
            raise ValueError("corridor must have positive width at every stage")
        margin = min(np.min(self.left), np.min(-self.right))
        if margin < REF_CLEARANCE - 1e-9:
            raise ValueError("adjusted reference too close to a corridor bound")


def build_corridor(
    window: ReferenceWindow,
    active_obstacles: Sequence[Obstacle],
    safe_duration: float,
    speed: float,
    lane_half_width: float,
    lateral_margin: float,
) -> Corridor:
    """Narrow the lane around every no-go box and re-center the reference.

    ``safe_duration * speed`` extends each obstacle fore and aft along the
    window; ``lateral_margin`` inflates it sideways.  The passing side is
    the one with more free width (ties go left).  Raises
    :class:`CorridorEmptyError` when no drivable band remains.
    """
    if safe_duration <= 0.0:
        raise ValueError("safe_duration must be positive")
    n_pts = len(window)
    left = np.full(n_pts, lane_half_width)
    right = np.full(n_pts, -lane_half_width)
    safe_distance = safe_duration * max(speed, 0.0)

    cpsi, spsi = np.cos(window.psi), np.sin(window.psi)
    for ob in active_obstacles:
        if not ob.active:
            continue
        dx = ob.x - window.x
        dy = ob.y - window.y
        lon = dx * cpsi + dy * spsi
        lat = -dx * spsi + dy * cpsi
        hit = np.abs(lon) <= 0.5 * ob.length + safe_distance
        if not np.any(hit):
            continue
        d_lo = lat - 0.5 * ob.width - lateral_margin
        d_hi = lat + 0.5 * ob.width + lateral_margin
        # pick the passing side once per obstacle, at its nearest stage
        j0 = int(np.argmin(np.abs(lon)))
        free_left = lane_half_width - d_hi[j0]
        free_right = d_lo[j0] + lane_half_width
        go_left = free_left >= free_right
        if go_left:
            right[hit] = np.maximum(right[hit], d_hi[hit])
        else:
            left[hit] = np.minimum(left[hit], d_lo[hit])
        if np.any(left[hit] - right[hit] < MIN_CORRIDOR_WIDTH):
            raise CorridorEmptyError(
                f"no-go box of obstacle at ({ob.x:.1f}, {ob.y:.1f}) spans the lane"
            )

    # shift the reference to the middle of the free band wherever the
    # original line would sit too close to (or beyond) a moved bound
    shift = np.zeros(n_pts)
    crowded = (left - REF_CLEARANCE < 0.0) | (right + REF_CLEARANCE > 0.0)
    shift[crowded] = 0.5 * (left[crowded] + right[crowded])
    adjusted = window.shifted_laterally(shift)
    return Corridor(left=left - shift, right=right - shift, shift=shift, window=adjusted)
