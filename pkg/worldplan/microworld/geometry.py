"""Planar geometry helpers: polylines, oriented boxes, frame transforms."""

import math
from typing import Tuple

import numpy as np


def wrap_angle(angle: float) -> float:
    """Wrap an angle to the half-open interval (-pi, pi]."""
    return math.pi - (math.pi - angle) % (2.0 * math.pi)


def rotation(angle: float) -> np.ndarray:
    """Return the 2x2 counter-clockwise rotation matrix for `angle`."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def to_local(points: np.ndarray, origin: np.ndarray, heading: float) -> np.ndarray:
    """Express world points in a frame at `origin` whose x axis points along `heading`.

    x is forward, y is to the left.
    """
    points = np.asarray(points, dtype=np.float64)
    return (points - np.asarray(origin, dtype=np.float64)) @ rotation(heading)


def to_world(points: np.ndarray, origin: np.ndarray, heading: float) -> np.ndarray:
    """Inverse of `to_local`."""
    points = np.asarray(points, dtype=np.float64)
    return points @ rotation(heading).T + np.asarray(origin, dtype=np.float64)


def box_corners(
    center: np.ndarray, heading: float, length: float, width: float
) -> np.ndarray:
    """Return the 4 corners (counter-clockwise) of an oriented rectangle."""
    half_l, half_w = length / 2.0, width / 2.0
    local = np.array(
        [[half_l, half_w], [-half_l, half_w], [-half_l, -half_w], [half_l, -half_w]]
    )
    return to_world(local, center, heading)


def polygons_overlap(poly_a: np.ndarray, poly_b: np.ndarray) -> bool:
    """Separating-axis test for two convex polygons given as (N, 2) corner arrays."""
    for poly in (poly_a, poly_b):
        edges = np.roll(poly, -1, axis=0) - poly
        for edge in edges:
            axis = np.array([-edge[1], edge[0]])
            norm = np.linalg.norm(axis)
            if norm == 0.0:
                continue
            axis = axis / norm
            proj_a = poly_a @ axis
            proj_b = poly_b @ axis
            if proj_a.max() < proj_b.min() or proj_b.max() < proj_a.min():
                return False
    return True


def _cross(a: np.ndarray, b: np.ndarray) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def segments_intersect(
    p1: np.ndarray, p2: np.ndarray, q1: np.ndarray, q2: np.ndarray
) -> bool:
    """Return whether closed segments p1-p2 and q1-q2 intersect."""
    p1, p2, q1, q2 = (np.asarray(v, dtype=np.float64) for v in (p1, p2, q1, q2))
    r, s = p2 - p1, q2 - q1
    denom = _cross(r, s)
    qp = q1 - p1
    if denom == 0.0:
        if _cross(qp, r) != 0.0:
            return False
        rr = float(r @ r)
        if rr == 0.0:
            return bool(np.allclose(p1, q1))
        t0 = float(qp @ r) / rr
        t1 = t0 + float(s @ r) / rr
        lo, hi = min(t0, t1), max(t0, t1)
        return hi >= 0.0 and lo <= 1.0
    t = _cross(qp, s) / denom
    u = _cross(qp, r) / denom
    return 0.0 <= t <= 1.0 and 0.0 <= u <= 1.0


class Polyline:
    """A piecewise-linear curve with arc-length parameterization."""

    def __init__(self, points: np.ndarray):
        """Initialize the polyline from an (N, 2) array of meters-coordinates."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if len(points) < 2:
            raise ValueError(f"A polyline needs at least 2 points, got {len(points)}")
        self.points = points
        seg = np.diff(points, axis=0)
        self.segment_lengths = np.linalg.norm(seg, axis=1)
        self.cumulative = np.concatenate([[0.0], np.cumsum(self.segment_lengths)])

    @property
    def length(self) -> float:
        """Return the total arc length."""
        return float(self.cumulative[-1])

    def project(self, point: np.ndarray) -> Tuple[float, float]:
        """Return (arc length of the nearest curve point, signed lateral offset).

        The lateral offset is positive when `point` lies left of the curve.
        """
        point = np.asarray(point, dtype=np.float64)
        starts = self.points[:-1]
        seg = self.points[1:] - starts
        lengths_sq = np.maximum(self.segment_lengths**2, 1e-12)
        t = np.clip(np.einsum("ij,ij->i", point - starts, seg) / lengths_sq, 0.0, 1.0)
        nearest = starts + seg * t[:, None]
        dist = np.linalg.norm(nearest - point, axis=1)
        idx = int(np.argmin(dist))
        s = float(self.cumulative[idx] + t[idx] * self.segment_lengths[idx])
        side = _cross(seg[idx], point - starts[idx])
        lateral = float(dist[idx]) * (1.0 if side >= 0.0 else -1.0)
        return s, lateral

    def point_at(self, s: float) -> Tuple[np.ndarray, float]:
        """Return (position, heading) at arc length `s`, extrapolating past the ends."""
        if s <= 0.0:
            idx = 0
        elif s >= self.length:
            idx = len(self.segment_lengths) - 1
        else:
            idx = int(np.searchsorted(self.cumulative, s, side="right") - 1)
            idx = min(idx, len(self.segment_lengths) - 1)
        seg = self.points[idx + 1] - self.points[idx]
        seg_len = max(float(self.segment_lengths[idx]), 1e-12)
        direction = seg / seg_len
        position = self.points[idx] + direction * (s - self.cumulative[idx])
        return position, math.atan2(direction[1], direction[0])
