"""Multi-representation object queries: floating 3D queries and a dense BEV grid.

Floating queries decode a bounded reference point, sample the panoramic
pyramid wherever that point projects into a camera, and predict a box from
embedding + sampled feature. BEV queries are anchored to fixed grid cells and
predict a bounded offset from the cell center. The two sets are fused after
top-k selection on the BEV side.

Ego frame: x forward, y left, z up, metres. Yaw is measured from +x towards +y.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from panoattn.errors import ArgumentError
from panoattn.geometry import FeaturePyramid, PanoramaLayout

logger = logging.getLogger("panoattn.queries")

CLASS_NAMES = (
    "car",
    "truck",
    "bus",
    "trailer",
    "construction_vehicle",
    "pedestrian",
    "motorcycle",
    "bicycle",
    "traffic_cone",
    "barrier",
)
NUM_CLASSES = len(CLASS_NAMES)
SOURCES = ("floating", "bev", "gt")

# (lo, hi) per axis, metres
SCENE_BOUNDS = ((-51.2, 51.2), (-51.2, 51.2), (-5.0, 3.0))


@dataclass(frozen=True)
class Detection:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # w, l, h
    yaw: float
    velocity: tuple[float, float]
    class_id: int
    confidence: float
    source: str
    query_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        object.__setattr__(self, "yaw", float(self.yaw))
        object.__setattr__(self, "confidence", float(self.confidence))
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "query_index", int(self.query_index))
        if len(self.center) != 3 or len(self.size) != 3 or len(self.velocity) != 2:
            raise ArgumentError("detection needs a 3-D center, 3-D size and 2-D velocity")
        if min(self.size) <= 0:
            raise ArgumentError(f"detection sizes must be positive, got {self.size}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ArgumentError(f"confidence {self.confidence} outside [0, 1]")
        if not 0 <= self.class_id < NUM_CLASSES:
            raise ArgumentError(f"class id {self.class_id} outside [0, {NUM_CLASSES})")
        if self.source not in SOURCES:
            raise ArgumentError(f"unknown detection source '{self.source}'")

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]

    @property
    def bev_box(self) -> tuple[float, float, float, float, float]:
        """(x, y, w, l, yaw) footprint."""
        return self.center[0], self.center[1], self.size[0], self.size[1], self.yaw

    def to_record(self) -> dict:
        return {
            "source": self.source,
            "class": self.class_name,
            "confidence": self.confidence,
            "box": [*self.center, *self.size, self.yaw],
            "velocity": list(self.velocity),
            "query_index": self.query_index,
        }

    @classmethod
    def from_record(cls, record: dict) -> "Detection":
        try:
            x, y, z, w, l, h, yaw = record["box"]
            return cls(
                center=(x, y, z),
                size=(w, l, h),
                yaw=yaw,
                velocity=tuple(record.get("velocity", (0.0, 0.0))),
                class_id=CLASS_NAMES.index(record["class"]),
                confidence=record["confidence"],
                source=record["source"],
                query_index=record.get("query_index", 0),
            )
        except (KeyError, ValueError, TypeError) as e:
            raise ArgumentError(f"malformed detection record {record!r}: {e}")


@dataclass(frozen=True)
class DetectionSet:
    detections: tuple[Detection, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))

    def __len__(self) -> int:
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)

    def __getitem__(self, index: int) -> Detection:
        return self.detections[index]

    def confidences(self) -> np.ndarray:
        return np.array([d.confidence for d in self.detections], dtype=np.float64)

    def count(self, source: str) -> int:
        return sum(1 for d in self.detections if d.source == source)

    def of_class(self, class_id: int) -> "DetectionSet":
        return DetectionSet(tuple(d for d in self.detections if d.class_id == class_id))


# ── Cameras ───────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class Camera:
    name: str
    projection: np.ndarray  # (3, 4), ego frame → homogeneous pixels
    image_height: int
    image_width: int


@dataclass(frozen=True, eq=False)
class CameraRig:
    cameras: tuple[Camera, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)


def camera_yaw(ring_position: int, num_cameras: int) -> float:
    """Optical-axis yaw of the camera at a panoramic slot; slots run counterclockwise to clockwise."""
    deg = 360.0 / num_cameras * (1 - ring_position)
    return float(np.deg2rad((deg + 180.0) % 360.0 - 180.0))


def pinhole_projection(yaw: float, height: float, fx: float, cx: float, cy: float) -> np.ndarray:
    """P = K [R | -R t] for a level camera at (0, 0, height) looking along `yaw`."""
    k = np.array([[fx, 0.0, cx], [0.0, fx, cy], [0.0, 0.0, 1.0]])
    s, c = np.sin(yaw), np.cos(yaw)
    r = np.array([
        [s, -c, 0.0],    # image right
        [0.0, 0.0, -1.0],  # image down
        [c, s, 0.0],     # optical axis
    ])
    t = np.array([0.0, 0.0, height])
    return k @ np.hstack([r, (-r @ t)[:, None]])


def build_camera_rig(layout: PanoramaLayout, fov_deg: float = 70.0, height: float = 1.5) -> CameraRig:
    """Ring of pinhole cameras, evenly spaced in yaw, matching the panorama order."""
    rig = layout.rig
    width, img_h = rig.image_width, rig.image_height
    fx = (width / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
    cameras = []
    for cam in range(rig.num_cameras):
        yaw = camera_yaw(layout.ring_position(cam), rig.num_cameras)
        cameras.append(Camera(
            name=rig.camera_names[cam],
            projection=pinhole_projection(yaw, height, fx, width / 2.0, img_h / 2.0),
            image_height=img_h,
            image_width=width,
        ))
    return CameraRig(tuple(cameras))


def project_points(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project (N, 3) ego points; returns u, v and a validity flag per point."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    homo = np.hstack([points, np.ones((len(points), 1))]) @ camera.projection.T
    depth = homo[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = homo[:, 0] / depth
        v = homo[:, 1] / depth
    valid = (depth > 0) & np.isfinite(u) & np.isfinite(v)
    valid &= (u >= 0) & (u < camera.image_width) & (v >= 0) & (v < camera.image_height)
    return u, v, valid


def project_point(camera: Camera, point) -> tuple[float, float, bool]:
    u, v, valid = project_points(camera, np.asarray(point, dtype=np.float64)[None])
    return float(u[0]), float(v[0]), bool(valid[0])


# ── Sampling ──────────────────────────────────────────────────


def bilinear_sample_many(feature_map: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample a (C, H, W) map at N points; coordinates clamp to the border. Returns (N, C)."""
    _, h, w = feature_map.shape
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, w - 1)
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, h - 1)
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (u - x0)[:, None]
    wy = (v - y0)[:, None]
    top = (1 - wx) * feature_map[:, y0, x0].T + wx * feature_map[:, y0, x1].T
    bottom = (1 - wx) * feature_map[:, y1, x0].T + wx * feature_map[:, y1, x1].T
    return (1 - wy) * top + wy * bottom


def bilinear_sample(feature_map: np.ndarray, u: float, v: float) -> np.ndarray:
    return bilinear_sample_many(feature_map, np.array([u]), np.array([v]))[0]


def sample_points(pyramid: FeaturePyramid, rig: CameraRig, layout: PanoramaLayout,
                  points: np.ndarray, batch: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Average pyramid features over every (camera, level) pair each point projects into.

    Returns (N, C) features and an (N,) validity flag; points seen by no
    camera get a zero vector.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(points)
    total = np.zeros((n, pyramid.channels), dtype=np.float64)
    hits = np.zeros(n, dtype=np.int64)

    for cam_index, camera in enumerate(rig):
        u, v, valid = project_points(camera, points)
        if not valid.any():
            continue
        idx = np.flatnonzero(valid)
        for level in range(layout.num_levels):
            lv = layout.level(level)
            fu = np.clip((u[idx] + 0.5) / lv.stride - 0.5, 0.0, lv.per_view_w - 1)
            fv = np.clip((v[idx] + 0.5) / lv.stride - 0.5, 0.0, lv.per_view_h - 1)
            fu = fu + layout.camera_column(level, cam_index)
            total[idx] += bilinear_sample_many(pyramid[level][batch], fu, fv)
        hits[idx] += layout.num_levels

    valid = hits > 0
    total[valid] /= hits[valid, None]
    return total, valid


def sample_multiview(pyramid: FeaturePyramid, rig: CameraRig, layout: PanoramaLayout,
                     point, batch: int = 0) -> tuple[np.ndarray, bool]:
    features, valid = sample_points(pyramid, rig, layout, np.asarray(point, dtype=np.float64)[None], batch)
    return features[0], bool(valid[0])


# ── Heads ─────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class FloatingQuerySet:
    embeddings: np.ndarray   # (N_f, C)
    ref_weight: np.ndarray   # (3, C)
    ref_bias: np.ndarray
    box_weight: np.ndarray   # (10, C): dx dy dz, log w l h, sin cos, vx vy
    box_bias: np.ndarray
    cls_weight: np.ndarray   # (NUM_CLASSES, C)
    cls_bias: np.ndarray

    def __len__(self) -> int:
        return len(self.embeddings)


@dataclass(frozen=True, eq=False)
class BevQueryGrid:
    grid_size: int
    extent: float
    embeddings: np.ndarray     # (G², C), row-major over (iy, ix)
    offset_weight: np.ndarray  # (2, C)
    offset_bias: np.ndarray
    box_weight: np.ndarray     # (8, C): z, log w l h, sin cos, vx vy
    box_bias: np.ndarray
    cls_weight: np.ndarray
    cls_bias: np.ndarray

    @property
    def cell_size(self) -> float:
        return 2.0 * self.extent / self.grid_size

    def cell_centers(self) -> np.ndarray:
        """(G², 2) cell-center (x, y); cell index = iy * G + ix."""
        c = -self.extent + (np.arange(self.grid_size) + 0.5) * self.cell_size
        ys, xs = np.meshgrid(c, c, indexing="ij")
        return np.stack([xs.ravel(), ys.ravel()], axis=1)


def _uniform(rng: np.random.Generator, shape: tuple, channels: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(channels)
    return rng.uniform(-bound, bound, size=shape)


def init_floating_queries(rng: np.random.Generator, num_queries: int, channels: int) -> FloatingQuerySet:
    return FloatingQuerySet(
        embeddings=rng.standard_normal((num_queries, channels)),
        ref_weight=_uniform(rng, (3, channels), channels),
        ref_bias=np.zeros(3),
        box_weight=_uniform(rng, (10, channels), channels),
        box_bias=np.zeros(10),
        cls_weight=_uniform(rng, (NUM_CLASSES, channels), channels),
        cls_bias=np.zeros(NUM_CLASSES),
    )


def init_bev_grid(rng: np.random.Generator, grid_size: int, extent: float, channels: int) -> BevQueryGrid:
    return BevQueryGrid(
        grid_size=grid_size,
        extent=extent,
        embeddings=rng.standard_normal((grid_size * grid_size, channels)),
        offset_weight=_uniform(rng, (2, channels), channels),
        offset_bias=np.zeros(2),
        box_weight=_uniform(rng, (8, channels), channels),
        box_bias=np.zeros(8),
        cls_weight=_uniform(rng, (NUM_CLASSES, channels), channels),
        cls_bias=np.zeros(NUM_CLASSES),
    )


def reference_points(queries: FloatingQuerySet) -> np.ndarray:
    """(N_f, 3) reference points squashed into SCENE_BOUNDS."""
    lo = np.array([b[0] for b in SCENE_BOUNDS])
    hi = np.array([b[1] for b in SCENE_BOUNDS])
    return lo + (hi - lo) * expit(queries.embeddings @ queries.ref_weight.T + queries.ref_bias)


def _class_confidence(hidden: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probs = expit(hidden @ weight.T + bias)
    # argmax returns the lowest class id on ties
    labels = probs.argmax(axis=1)
    return labels, probs[np.arange(len(probs)), labels]


def decode_floating(queries: FloatingQuerySet, pyramid: FeaturePyramid, rig: CameraRig,
                    layout: PanoramaLayout, batch: int = 0) -> DetectionSet:
    """One decode round: reference point → multi-view sample → box and class heads."""
    if queries.embeddings.shape[1] != pyramid.channels:
        raise ArgumentError(f"query width {queries.embeddings.shape[1]} != pyramid channels {pyramid.channels}")
    ref = reference_points(queries)
    features, valid = sample_points(pyramid, rig, layout, ref, batch)
    hidden = queries.embeddings + features
    box = hidden @ queries.box_weight.T + queries.box_bias
    labels, conf = _class_confidence(hidden, queries.cls_weight, queries.cls_bias)

    centers = ref + box[:, 0:3]
    sizes = np.exp(box[:, 3:6])
    yaws = np.arctan2(box[:, 6], box[:, 7])
    dets = tuple(
        Detection(
            center=centers[i],
            size=sizes[i],
            yaw=yaws[i],
            velocity=box[i, 8:10],
            class_id=labels[i],
            confidence=conf[i],
            source="floating",
            query_index=i,
        )
        for i in range(len(queries))
    )
    logger.debug(f"decoded {len(dets)} floating queries, {int(valid.sum())} with camera support")
    return DetectionSet(dets)


def global_context(pyramid: FeaturePyramid, batch: int = 0) -> np.ndarray:
    """Mean over levels of each level's spatial mean, (C,)."""
    return np.mean([level[batch].mean(axis=(1, 2)) for level in pyramid], axis=0)


def decode_bev(grid: BevQueryGrid, pyramid: FeaturePyramid, batch: int = 0) -> DetectionSet:
    """One proposal per grid cell; the center offset is bounded to half a cell."""
    if grid.embeddings.shape[1] != pyramid.channels:
        raise ArgumentError(f"grid width {grid.embeddings.shape[1]} != pyramid channels {pyramid.channels}")
    hidden = grid.embeddings + global_context(pyramid, batch)
    offsets = np.tanh(hidden @ grid.offset_weight.T + grid.offset_bias) * (grid.cell_size / 2.0)
    centers = grid.cell_centers() + offsets
    box = hidden @ grid.box_weight.T + grid.box_bias
    labels, conf = _class_confidence(hidden, grid.cls_weight, grid.cls_bias)

    sizes = np.exp(box[:, 1:4])
    yaws = np.arctan2(box[:, 4], box[:, 5])
    dets = tuple(
        Detection(
            center=(centers[i, 0], centers[i, 1], box[i, 0]),
            size=sizes[i],
            yaw=yaws[i],
            velocity=box[i, 6:8],
            class_id=labels[i],
            confidence=conf[i],
            source="bev",
            query_index=i,
        )
        for i in range(len(hidden))
    )
    return DetectionSet(dets)


def topk_select(dets: DetectionSet, k: int) -> DetectionSet:
    """The k most confident detections; ties go to the lower query index."""
    if not 0 <= k <= len(dets):
        raise ArgumentError(f"cannot select top {k} of {len(dets)} detections")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].query_index, i))
    return DetectionSet(tuple(dets[i] for i in order[:k]))


def aggregate(floating: DetectionSet, bev: DetectionSet) -> DetectionSet:
    return DetectionSet(floating.detections + bev.detections)
