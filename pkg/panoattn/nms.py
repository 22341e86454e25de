"""Rotated bird's-eye-view IoU and class-wise greedy NMS."""

import logging

import numpy as np
from shapely import affinity
from shapely.errors import GEOSException
from shapely.geometry import Point, Polygon

from panoattn.errors import ArgumentError
from panoattn.queries import Detection, DetectionSet

logger = logging.getLogger("panoattn.nms")

MIN_AREA = 1e-12


def bev_corners(x: float, y: float, w: float, l: float, yaw: float) -> np.ndarray:
    """(4, 2) footprint corners, counterclockwise; length runs along the heading."""
    c, s = np.cos(yaw), np.sin(yaw)
    local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) / 2.0
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def bev_polygon(box) -> Polygon:
    return Polygon(bev_corners(*box))


def box_iou_bev(a, b) -> float:
    """IoU of two (x, y, w, l, yaw) footprints; zero-area boxes give 0."""
    xa, ya, wa, la, _ = a
    xb, yb, wb, lb, _ = b
    area_a, area_b = wa * la, wb * lb
    if area_a <= MIN_AREA or area_b <= MIN_AREA:
        return 0.0
    # Circumscribed circles that do not touch cannot overlap.
    if np.hypot(xa - xb, ya - yb) > (np.hypot(wa, la) + np.hypot(wb, lb)) / 2.0:
        return 0.0
    try:
        inter = bev_polygon(a).intersection(bev_polygon(b)).area
    except GEOSException:
        logger.warning(f"polygon clipping failed for {a} vs {b}, IoU set to 0")
        return 0.0
    union = area_a + area_b - inter
    return float(min(1.0, max(0.0, inter / union))) if union > MIN_AREA else 0.0


def rotated_iou_bev(a: Detection, b: Detection) -> float:
    return box_iou_bev(a.bev_box, b.bev_box)


def rotate_box(box, angle: float, origin=(0.0, 0.0)):
    """Rotate a footprint about `origin` (used by the joint-rotation property)."""
    x, y, w, l, yaw = box
    point = affinity.rotate(Point(x, y), angle, origin=origin, use_radians=True)
    return point.x, point.y, w, l, yaw + angle


def nms_order(dets: DetectionSet) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))


def nms(dets: DetectionSet, tau: float) -> DetectionSet:
    """Greedy class-wise suppression of IoU > tau; survivors keep the visiting order."""
    if not 0.0 <= tau <= 1.0:
        raise ArgumentError(f"NMS threshold must lie in [0, 1], got {tau}")
    kept: list[int] = []
    kept_by_class: dict[int, list[int]] = {}
    for i in nms_order(dets):
        det = dets[i]
        peers = kept_by_class.setdefault(det.class_id, [])
        if any(rotated_iou_bev(det, dets[j]) > tau for j in peers):
            continue
        peers.append(i)
        kept.append(i)
    logger.debug(f"nms(tau={tau}): {len(dets)} → {len(kept)}")
    return DetectionSet(tuple(dets[i] for i in kept))


def nms_reference(dets: DetectionSet, tau: float) -> DetectionSet:
    """Exhaustive formulation: a box survives iff no higher-ranked survivor of its class overlaps it.

    Computes the full pairwise IoU matrix up front and resolves survivors in
    rank order; used as the brute-force oracle for `nms`.
    """
    n = len(dets)
    order = nms_order(dets)
    rank = {idx: r for r, idx in enumerate(order)}
    iou = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if dets[i].class_id == dets[j].class_id:
                iou[i, j] = iou[j, i] = rotated_iou_bev(dets[i], dets[j])
    alive = np.zeros(n, dtype=bool)
    for i in order:
        alive[i] = not any(alive[j] and rank[j] < rank[i] and iou[i, j] > tau for j in range(n))
    return DetectionSet(tuple(dets[i] for i in order if alive[i]))
