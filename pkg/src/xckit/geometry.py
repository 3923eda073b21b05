"""Bird's-eye-view box geometry on a metric pixel grid.

Boxes live in a metric frame (meters, yaw about the vertical axis); the grid
maps them onto pixels. Everything here is pure float64 arithmetic: margin
enlargement, corner projection, pixel-center membership rasterization, convex
polygon clipping, and 3D IoU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NegativeMargin, XckitError


def wrap_angle(theta: float) -> float:
    """Map an angle in radians into (-pi, pi]."""
    t = math.fmod(theta, 2.0 * math.pi)
    if t <= -math.pi:
        t += 2.0 * math.pi
    elif t > math.pi:
        t -= 2.0 * math.pi
    return t


@dataclass(frozen=True)
class GridMeta:
    """Pixel grid over a metric BEV window.

    ``origin_x, origin_y`` give the meter coordinates of the corner of pixel
    (0, 0); ``pixel_size`` is meters per (square) pixel.
    """

    height: int
    width: int
    origin_x: float
    origin_y: float
    pixel_size: float

    def __post_init__(self):
        if self.pixel_size <= 0:
            raise XckitError(f"pixel_size must be positive, got {self.pixel_size}")
        if self.height < 1 or self.width < 1:
            raise XckitError(f"grid needs at least one pixel, got {self.height}x{self.width}")


@dataclass(frozen=True)
class Box3D:
    """An upright 3D box: center (cx, cy, cz), extents (dx, dy, dz), yaw."""

    cx: float
    cy: float
    cz: float
    dx: float
    dy: float
    dz: float
    yaw: float

    def __post_init__(self):
        if self.dx <= 0 or self.dy <= 0 or self.dz <= 0:
            raise XckitError(f"box extents must be positive, got ({self.dx}, {self.dy}, {self.dz})")
        if not (-math.pi < self.yaw <= math.pi):
            raise XckitError(f"yaw must lie in (-pi, pi], got {self.yaw}; wrap_angle() normalizes")

    @property
    def volume(self) -> float:
        return self.dx * self.dy * self.dz


class BevPolygon:
    """Convex quad in BEV meters, corners counter-clockwise, area > 0."""

    __slots__ = ("corners",)

    def __init__(self, corners):
        pts = np.asarray(corners, dtype=np.float64)
        if pts.shape != (4, 2):
            raise XckitError(f"polygon needs 4 corner points, got shape {pts.shape}")
        if _signed_area(pts) <= 0:
            raise XckitError("polygon corners must be counter-clockwise with positive area")
        e_in = pts - np.roll(pts, 1, axis=0)
        e_out = np.roll(pts, -1, axis=0) - pts
        cross = e_in[:, 0] * e_out[:, 1] - e_in[:, 1] * e_out[:, 0]
        if np.any(cross < 0):
            raise XckitError("polygon must be convex")
        self.corners = pts

    @property
    def area(self) -> float:
        return _signed_area(self.corners)

    @property
    def perimeter(self) -> float:
        d = np.roll(self.corners, -1, axis=0) - self.corners
        return float(np.hypot(d[:, 0], d[:, 1]).sum())


def _signed_area(pts) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def enlarge(box: Box3D, m: float) -> Box3D:
    """Grow a box by margin ``m`` meters on every side (extents gain 2m)."""
    if m < 0:
        raise NegativeMargin(f"margin must be >= 0, got {m}")
    return Box3D(
        cx=box.cx, cy=box.cy, cz=box.cz,
        dx=box.dx + 2.0 * m, dy=box.dy + 2.0 * m, dz=box.dz + 2.0 * m,
        yaw=box.yaw,
    )


def project_to_bev(box: Box3D) -> BevPolygon:
    """Corners of the box footprint: center +/- (dx/2, dy/2) rotated by yaw."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hx, hy = 0.5 * box.dx, 0.5 * box.dy
    local = np.array([(hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy)])
    rot = np.array([[c, -s], [s, c]])
    return BevPolygon(local @ rot.T + np.array([box.cx, box.cy]))


def pixel_center_coords(grid: GridMeta):
    """Meter coordinates of every pixel center, as (H, W) arrays (xs, ys)."""
    xs = grid.origin_x + (np.arange(grid.width) + 0.5) * grid.pixel_size
    ys = grid.origin_y + (np.arange(grid.height) + 0.5) * grid.pixel_size
    return np.broadcast_to(xs, (grid.height, grid.width)), np.broadcast_to(
        ys[:, None], (grid.height, grid.width)
    )


def membership_mask(poly: BevPolygon, grid: GridMeta) -> np.ndarray:
    """(H, W) boolean mask of pixels whose center lies in or on the polygon."""
    px, py = pixel_center_coords(grid)
    inside = np.ones((grid.height, grid.width), dtype=bool)
    pts = poly.corners
    for i in range(4):
        x1, y1 = pts[i]
        x2, y2 = pts[(i + 1) % 4]
        # CCW edges: inside is the non-negative side of each edge normal
        inside &= (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1) >= 0.0
    return inside


_SLIVER_AREA = 1e-10  # m^2; below this a clipped region counts as empty


def intersection_area(a: BevPolygon, b: BevPolygon) -> float:
    """Overlap area of two convex quads (Sutherland-Hodgman clipping)."""
    subject = [tuple(p) for p in a.corners]
    clip = b.corners
    for i in range(4):
        if not subject:
            return 0.0
        cx1, cy1 = clip[i]
        cx2, cy2 = clip[(i + 1) % 4]
        ex, ey = cx2 - cx1, cy2 - cy1

        def side(p):
            return ex * (p[1] - cy1) - ey * (p[0] - cx1)

        clipped = []
        prev = subject[-1]
        prev_side = side(prev)
        for cur in subject:
            cur_side = side(cur)
            if cur_side >= 0:
                if prev_side < 0:
                    clipped.append(_edge_cross(prev, cur, prev_side, cur_side))
                clipped.append(cur)
            elif prev_side >= 0:
                clipped.append(_edge_cross(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
        subject = clipped
    if len(subject) < 3:
        return 0.0
    pts = np.asarray(subject)
    area = abs(_signed_area_any(pts))
    return 0.0 if area < _SLIVER_AREA else area


def _edge_cross(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def _signed_area_any(pts) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU of two upright boxes.

    The footprint overlap comes from rotated polygon clipping; the vertical
    overlap from the [cz - dz/2, cz + dz/2] interval intersection. Disjoint
    boxes give exactly 0.0.
    """
    bev = intersection_area(project_to_bev(a), project_to_bev(b))
    if bev == 0.0:
        return 0.0
    z_lo = max(a.cz - 0.5 * a.dz, b.cz - 0.5 * b.dz)
    z_hi = min(a.cz + 0.5 * a.dz, b.cz + 0.5 * b.dz)
    if z_hi <= z_lo:
        return 0.0
    inter = bev * (z_hi - z_lo)
    union = a.volume + b.volume - inter
    iou = inter / union
    return min(max(iou, 0.0), 1.0)
