"""Layout emission: the serialized layout file and colour-coded window images.

Each image stacks the unshifted partition of one level and kind above its
shifted partition. Cells are coloured by window; cells that wrapped across
the top/bottom seam are drawn darker, and camera boundaries are black lines.
"""

import json
import logging
from pathlib import Path

import cv2
import numpy as np
import yaml

from panoattn.geometry import KINDS, PanoramaLayout, layout_to_dict, partition_windows

logger = logging.getLogger("panoattn.render")

PPM_COMMENT = b"# panoattn/layout v1"
GOLDEN = 0.618033988749895


def window_colors(partition) -> np.ndarray:
    """(H, W, 3) BGR image, one hue per window."""
    groups = partition.group_ids().reshape(partition.pano_h, partition.pano_w)
    window = groups // 2
    wrapped = groups % 2 == 1
    hsv = np.empty((partition.pano_h, partition.pano_w, 3), dtype=np.uint8)
    hsv[..., 0] = ((window * GOLDEN) % 1.0 * 180).astype(np.uint8)
    hsv[..., 1] = 200
    hsv[..., 2] = np.where(wrapped, 140, 235)
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2BGR)


def render_partition_image(layout: PanoramaLayout, level: int, kind: str, cell_px: int = 4) -> np.ndarray:
    lv = layout.level(level)
    panels = []
    for shifted in (False, True):
        colors = window_colors(partition_windows(layout, level, kind, shifted))
        panel = np.repeat(np.repeat(colors, cell_px, axis=0), cell_px, axis=1)
        for cam in range(1, layout.num_cameras):
            x = cam * lv.per_view_w * cell_px
            cv2.line(panel, (x, 0), (x, panel.shape[0] - 1), (0, 0, 0), 1)
        panels.append(panel)
    gap = np.full((cell_px, panels[0].shape[1], 3), 255, dtype=np.uint8)
    return np.vstack([panels[0], gap, panels[1]])


def encode_ppm(image: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(".ppm", image)
    if not ok:
        raise RuntimeError("PPM encoding failed")
    magic, rest = buf.tobytes().split(b"\n", 1)
    return magic + b"\n" + PPM_COMMENT + b"\n" + rest


def write_layout_images(layout: PanoramaLayout, out_dir: str | Path, cell_px: int = 4) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for lv in layout.levels:
        for kind in KINDS:
            path = out_dir / f"layout_L{lv.index}_{kind}.ppm"
            path.write_bytes(encode_ppm(render_partition_image(layout, lv.index, kind, cell_px)))
            paths.append(path)
    logger.info(f"wrote {len(paths)} layout images to {out_dir}")
    return paths


def write_layout_yaml(layout: PanoramaLayout, path: str | Path) -> Path:
    """Layout as a config fragment (loadable with --config), with derived sizes per level."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = layout_to_dict(layout)
    doc = {
        "rig": {k: d[k] for k in ("cameras", "image_size", "ring_order")},
        "levels": d["levels"],
    }
    header = json.dumps({"schema": "panoattn/layout", "version": 1})
    with open(path, "w") as f:
        f.write(f"# {header}\n")
        yaml.safe_dump(doc, f, sort_keys=False, default_flow_style=None)
    return path
