"""Closed-centerline track geometry parameterized by arc length.

A track is built from a closed loop of waypoints (the last implicitly connects
back to the first).  Construction fits periodic cubic splines through the
waypoints in a chord-length parameter, measures arc length by dense sampling,
and refits periodic splines directly in the arc-length coordinate theta.  All
queries (centerline point, heading, curvature, progress projection, border
halfspaces) evaluate those splines, so positions are C2 in theta and the
reported derivatives are the exact derivatives of what is evaluated.

Half-widths are interpolated linearly in arc length between waypoints, which
keeps them inside the input range (no spline overshoot).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline

GOLDEN_RATIO = (math.sqrt(5.0) - 1.0) / 2.0

TRACK_CSV_HEADER = ["x_m", "y_m", "half_width_m"]


class TrackError(ValueError):
    """Invalid track input (open, self-intersecting, or degenerate)."""


class ProjectionError(RuntimeError):
    """Progress projection failed: off-track position or ambiguous window."""


@dataclass(frozen=True)
class Waypoint:
    x: float
    y: float
    half_width: float

    def __post_init__(self):
        if not self.half_width > 0.0:
            raise ValueError("half_width must be positive")


@dataclass(frozen=True)
class CenterlinePoint:
    """Centerline sample at a given progress theta."""

    x: float
    y: float
    heading: float  # rad
    curvature: float  # 1/m, signed (positive = turning left)
    half_width: float  # m


@dataclass(frozen=True)
class BorderHalfspaces:
    """Two linear inequalities A @ (X, Y) <= b bounding the drivable corridor."""

    A: np.ndarray  # (2, 2)
    b: np.ndarray  # (2,)
    normal: np.ndarray  # (2,) unit left normal at theta


def _segments_properly_intersect(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(p3, p4, p1)
    d2 = orient(p3, p4, p2)
    d3 = orient(p1, p2, p3)
    d4 = orient(p1, p2, p4)
    if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and (
        (d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)
    ):
        return True

    def on_segment(a, b, c):
        return (
            min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12
            and min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12
        )

    if d1 == 0 and on_segment(p3, p4, p1):
        return True
    if d2 == 0 and on_segment(p3, p4, p2):
        return True
    if d3 == 0 and on_segment(p1, p2, p3):
        return True
    if d4 == 0 and on_segment(p1, p2, p4):
        return True
    return False


def _validate_waypoints(pts: np.ndarray) -> None:
    n = len(pts)
    if n < 4:
        raise TrackError(f"need at least 4 waypoints, got {n}")
    closed = np.vstack([pts, pts[0]])
    seg = np.diff(closed, axis=0)
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    if np.any(lengths < 1e-9):
        raise TrackError("consecutive waypoints coincide")
    # O(n^2) simple-polygon check over the implicit closed loop.
    for i in range(n):
        for j in range(i + 1, n):
            if j == i or abs(i - j) == 1 or (i == 0 and j == n - 1):
                continue
            if _segments_properly_intersect(
                closed[i], closed[i + 1], closed[j], closed[j + 1]
            ):
                raise TrackError(
                    f"waypoint loop self-intersects (segments {i} and {j})"
                )


class Track:
    """Immutable arc-length-parameterized closed centerline.

    Safe for concurrent reads; nothing is mutated after construction.
    """

    def __init__(
        self,
        spline_x: CubicSpline,
        spline_y: CubicSpline,
        total_length: float,
        ds: float,
        hw_theta: np.ndarray,
        hw_values: np.ndarray,
    ):
        self._sx = spline_x
        self._sy = spline_y
        self.total_length = float(total_length)
        self.ds = float(ds)
        # Periodic half-width knots; last knot duplicates the first at theta=L.
        self._hw_theta = hw_theta
        self._hw_values = hw_values
        self._build_table()

    def _build_table(self):
        n = max(8, round(self.total_length / self.ds))
        theta = np.arange(n) * (self.total_length / n)
        dx = self._sx(theta, 1)
        dy = self._sy(theta, 1)
        norm = np.hypot(dx, dy)
        heading_raw = np.arctan2(dy, dx)
        # Extend by the wrap point so winding per lap is observable.
        dx_l = self._sx(self.total_length, 1)
        dy_l = self._sy(self.total_length, 1)
        heading_ext = np.unwrap(np.append(heading_raw, np.arctan2(dy_l, dx_l)))
        ddx = self._sx(theta, 2)
        ddy = self._sy(theta, 2)

        self.theta_grid = theta
        self.xy = np.column_stack([self._sx(theta), self._sy(theta)])
        self.tangent = np.column_stack([dx / norm, dy / norm])
        self.heading = heading_ext[:-1]
        self._heading_ext = heading_ext
        self._theta_ext = np.append(theta, self.total_length)
        self.curvature = (dx * ddy - dy * ddx) / norm**3
        self.half_width = self.half_width_at(theta)
        self.winding = round((heading_ext[-1] - heading_ext[0]) / (2 * math.pi))

    # -- continuous queries ------------------------------------------------

    def wrap(self, theta):
        return np.mod(theta, self.total_length)

    def position_at(self, theta):
        t = self.wrap(theta)
        return self._sx(t), self._sy(t)

    def derivatives_at(self, theta):
        """First and second spline derivatives at theta (x', y', x'', y'')."""
        t = self.wrap(theta)
        return self._sx(t, 1), self._sy(t, 1), self._sx(t, 2), self._sy(t, 2)

    def half_width_at(self, theta):
        t = self.wrap(theta)
        return np.interp(t, self._hw_theta, self._hw_values)

    def heading_at(self, theta):
        """Heading continuous in theta within one lap (lifted near the table)."""
        t = self.wrap(theta)
        dx = self._sx(t, 1)
        dy = self._sy(t, 1)
        raw = np.arctan2(dy, dx)
        lifted_ref = np.interp(t, self._theta_ext, self._heading_ext)
        return raw + 2 * math.pi * np.round((lifted_ref - raw) / (2 * math.pi))

    def curvature_at(self, theta):
        dx, dy, ddx, ddy = self.derivatives_at(theta)
        return (dx * ddy - dy * ddx) / np.hypot(dx, dy) ** 3


def build_track(waypoints: Sequence[Waypoint], ds: float = 0.05) -> Track:
    """Fit a periodic centerline through a closed waypoint loop.

    Rejects loops with fewer than 4 points, coincident neighbors,
    self-intersections, and ds >= loop_length / 8.
    """
    if not ds > 0.0:
        raise TrackError("ds must be positive")
    pts = np.array([[w.x, w.y] for w in waypoints], dtype=float)
    hw = np.array([w.half_width for w in waypoints], dtype=float)
    _validate_waypoints(pts)

    closed = np.vstack([pts, pts[0]])
    chord = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(closed, axis=0).T))])
    sx_c = CubicSpline(chord, closed[:, 0], bc_type="periodic")
    sy_c = CubicSpline(chord, closed[:, 1], bc_type="periodic")

    # Dense arc-length measurement along the chord-parameter spline.
    m = max(4096, 64 * len(pts))
    t_dense = np.linspace(0.0, chord[-1], m + 1)
    xd = sx_c(t_dense)
    yd = sy_c(t_dense)
    sigma = np.concatenate(
        [[0.0], np.cumsum(np.hypot(np.diff(xd), np.diff(yd)))]
    )
    total_length = float(sigma[-1])
    if ds >= total_length / 8.0:
        raise TrackError(
            f"ds={ds} too coarse for loop length {total_length:.3f} (need < L/8)"
        )
    if np.any(np.diff(sigma) <= 0.0):
        raise TrackError("degenerate centerline: arc length not increasing")

    # Refit periodic splines directly in the arc-length coordinate.
    sx = CubicSpline(sigma, xd, bc_type="periodic")
    sy = CubicSpline(sigma, yd, bc_type="periodic")

    hw_theta = np.append(np.interp(chord[:-1], t_dense, sigma), total_length)
    hw_values = np.append(hw, hw[0])
    return Track(sx, sy, total_length, ds, hw_theta, hw_values)


def centerline_point(track: Track, theta: float) -> CenterlinePoint:
    """Interpolated centerline sample; theta is wrapped modulo total_length."""
    x, y = track.position_at(theta)
    return CenterlinePoint(
        x=float(x),
        y=float(y),
        heading=float(track.heading_at(theta)),
        curvature=float(track.curvature_at(theta)),
        half_width=float(track.half_width_at(theta)),
    )


def _grid_argmin_prefer_larger(d2: np.ndarray) -> int:
    # Ties broken toward larger index (larger theta).
    return len(d2) - 1 - int(np.argmin(d2[::-1]))


def project_progress(
    track: Track,
    position: tuple[float, float],
    theta_hint: float,
    window: float = 2.0,
    tol: float = 1e-4,
) -> float:
    """Locally project a position onto the centerline near theta_hint.

    Searches a +-window band around the hint on the sampled grid, then refines
    with golden-section search on the continuous spline to `tol` meters.
    Raises ProjectionError when the minimizer sits on the window edge (the true
    projection is outside the window) or the point is far off-track.
    """
    px, py = position
    n_off = max(2, int(math.ceil(window / (track.total_length / len(track.theta_grid)))))
    offsets = np.arange(-n_off, n_off + 1) * (track.total_length / len(track.theta_grid))
    thetas = theta_hint + offsets
    cx, cy = track.position_at(thetas)
    d2 = (cx - px) ** 2 + (cy - py) ** 2
    best = _grid_argmin_prefer_larger(d2)
    if best == 0 or best == len(thetas) - 1:
        raise ProjectionError(
            f"projection ambiguous: minimizer at window edge (hint={theta_hint:.3f})"
        )

    def dist2(th):
        x, y = track.position_at(th)
        return (x - px) ** 2 + (y - py) ** 2

    lo, hi = thetas[best - 1], thetas[best + 1]
    a, b = lo, hi
    c = b - GOLDEN_RATIO * (b - a)
    d = a + GOLDEN_RATIO * (b - a)
    fc, fd = dist2(c), dist2(d)
    while (b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN_RATIO * (b - a)
            fc = dist2(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN_RATIO * (b - a)
            fd = dist2(d)
    theta_star = 0.5 * (a + b)
    dist = math.sqrt(dist2(theta_star))
    if dist > 5.0 * float(track.half_width_at(theta_star)):
        raise ProjectionError(
            f"position {position} is {dist:.3f} m off the centerline near the hint"
        )
    return float(track.wrap(theta_star))


def global_project(track: Track, position: tuple[float, float]) -> float:
    """Coarse global projection over the whole sampled table (cold start)."""
    px, py = position
    d2 = (track.xy[:, 0] - px) ** 2 + (track.xy[:, 1] - py) ** 2
    best = _grid_argmin_prefer_larger(d2)
    hint = track.theta_grid[best]
    step = track.total_length / len(track.theta_grid)
    # Refine locally around the grid minimum (it cannot sit on a window edge).
    thetas = hint + np.arange(-2, 3) * step

    def dist2(th):
        x, y = track.position_at(th)
        return (x - px) ** 2 + (y - py) ** 2

    a, b = thetas[0], thetas[-1]
    c = b - GOLDEN_RATIO * (b - a)
    d = a + GOLDEN_RATIO * (b - a)
    fc, fd = dist2(c), dist2(d)
    while (b - a) > 1e-4:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN_RATIO * (b - a)
            fc = dist2(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN_RATIO * (b - a)
            fd = dist2(d)
    return float(track.wrap(0.5 * (a + b)))


def border_halfspaces(
    track: Track, theta: float, margin: float = 0.1
) -> BorderHalfspaces:
    """Linearized corridor constraints at theta: |n . (p - c)| <= hw - margin."""
    x, y = track.position_at(theta)
    h = track.heading_at(theta)
    n = np.array([-math.sin(h), math.cos(h)])
    hw = float(track.half_width_at(theta))
    c = np.array([float(x), float(y)])
    slack = hw - margin
    A = np.vstack([n, -n])
    b = np.array([slack + n @ c, slack - n @ c])
    return BorderHalfspaces(A=A, b=b, normal=n)


def generate_oval(
    length: float, width: float, half_width: float, n_points: int
) -> list[Waypoint]:
    """Stadium-shaped loop: two straights joined by two semicircles.

    `length` and `width` are the overall bounding-box dimensions; waypoints are
    spaced uniformly in arc length, counterclockwise.
    """
    if n_points < 8:
        raise TrackError(f"need at least 8 points for an oval, got {n_points}")
    if not (length > 0 and width > 0 and half_width > 0):
        raise TrackError("oval dimensions must be positive")
    if length < width:
        raise TrackError("oval length must be >= width")
    r = width / 2.0
    straight = length - width
    perimeter = 2.0 * straight + 2.0 * math.pi * r

    pts = []
    for k in range(n_points):
        s = k * perimeter / n_points
        if s < straight:  # bottom straight, heading +x
            x, y = -straight / 2.0 + s, -r
        elif s < straight + math.pi * r:  # right semicircle
            a = -math.pi / 2.0 + (s - straight) / r
            x, y = straight / 2.0 + r * math.cos(a), r * math.sin(a)
        elif s < 2.0 * straight + math.pi * r:  # top straight, heading -x
            x, y = straight / 2.0 - (s - straight - math.pi * r), r
        else:  # left semicircle
            a = math.pi / 2.0 + (s - 2.0 * straight - math.pi * r) / r
            x, y = -straight / 2.0 + r * math.cos(a), r * math.sin(a)
        pts.append(Waypoint(x=x, y=y, half_width=half_width))
    return pts


def save_waypoints_csv(waypoints: Sequence[Waypoint], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACK_CSV_HEADER)
        for w in waypoints:
            writer.writerow([repr(w.x), repr(w.y), repr(w.half_width)])


def load_waypoints_csv(path: str | Path) -> list[Waypoint]:
    """Read the track CSV (header x_m,y_m,half_width_m; loop implicitly closed)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != TRACK_CSV_HEADER:
            raise TrackError(
                f"bad track CSV header {header!r}, expected {TRACK_CSV_HEADER}"
            )
        return [
            Waypoint(x=float(r[0]), y=float(r[1]), half_width=float(r[2]))
            for r in reader
            if r
        ]
