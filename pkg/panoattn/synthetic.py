"""Seeded stand-ins for the image backbone and the annotated dataset."""

import logging
from dataclasses import dataclass

import numpy as np

from panoattn.config import RunConfig
from panoattn.geometry import FeaturePyramid
from panoattn.queries import CLASS_NAMES, CameraRig, Detection, DetectionSet, build_camera_rig
from panoattn.seeding import make_rng

logger = logging.getLogger("panoattn.synthetic")

# Typical (w, l, h) per class, metres.
CLASS_SIZES = {
    "car": (1.9, 4.6, 1.7),
    "truck": (2.5, 7.0, 3.0),
    "bus": (2.9, 11.0, 3.5),
    "trailer": (2.9, 12.0, 3.9),
    "construction_vehicle": (2.8, 6.4, 3.2),
    "pedestrian": (0.7, 0.7, 1.8),
    "motorcycle": (0.8, 2.1, 1.5),
    "bicycle": (0.6, 1.7, 1.3),
    "traffic_cone": (0.4, 0.4, 1.0),
    "barrier": (2.5, 0.5, 1.0),
}
STATIC_CLASSES = ("traffic_cone", "barrier")
# Ground-truth centres stay in this radial band so every box is in front of some camera.
SCENE_RANGE = (10.0, 45.0)
SCENE_Z = (-1.0, 1.0)


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    ground_truth: DetectionSet
    rig: CameraRig
    seed: int


def synth_pyramid(config: RunConfig, seed: int) -> FeaturePyramid:
    """Standard-normal features with the configured batch, width and level shapes."""
    rng = make_rng(seed, "pyramid")
    b, c = config.encoder.batch, config.encoder.channels
    levels = tuple(
        rng.standard_normal((b, c, lv.pano_h, lv.pano_w)).astype(config.dtype)
        for lv in config.layout.levels
    )
    return FeaturePyramid(levels)


def synth_scene(config: RunConfig, seed: int, num_boxes: int | None = None) -> SyntheticScene:
    """Uniformly scattered boxes with class-typical sizes around a ring camera rig."""
    rng = make_rng(seed, "scene")
    count = config.num_boxes if num_boxes is None else num_boxes
    rig = build_camera_rig(config.layout, config.horizontal_fov_deg, config.camera_height)

    boxes = []
    for i in range(count):
        class_id = int(rng.integers(len(CLASS_NAMES)))
        name = CLASS_NAMES[class_id]
        radius = rng.uniform(*SCENE_RANGE)
        azimuth = rng.uniform(-np.pi, np.pi)
        z = rng.uniform(*SCENE_Z)
        size = np.array(CLASS_SIZES[name]) * rng.uniform(0.9, 1.1, size=3)
        yaw = rng.uniform(-np.pi, np.pi)
        velocity = (0.0, 0.0) if name in STATIC_CLASSES else tuple(rng.normal(0.0, 2.0, size=2))
        boxes.append(Detection(
            center=(radius * np.cos(azimuth), radius * np.sin(azimuth), z),
            size=size,
            yaw=yaw,
            velocity=velocity,
            class_id=class_id,
            confidence=1.0,
            source="gt",
            query_index=i,
        ))
    logger.debug(f"synthetic scene: {count} boxes, seed {seed}")
    return SyntheticScene(ground_truth=DetectionSet(tuple(boxes)), rig=rig, seed=seed)
