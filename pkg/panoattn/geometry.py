"""Panoramic multi-camera layout, feature pyramid and window partitioning.

Cameras are laid side by side in ring order, so every pyramid level is a single
panoramic map of shape (B, C, H_l, M * W_l). Windows tile that map row-major;
a shifted partition tiles a cyclically displaced copy of it.

Layout key set (shared with the YAML config):
  cameras      list of camera names, in dataset order
  image_size   [height, width] per camera, pixels
  ring_order   ring_order[k] = camera index placed at panoramic position k
  levels       list of {stride, mv_window, mv_shift, roi_window, roi_shift}
"""

import functools
import logging
from dataclasses import dataclass

import numpy as np

from panoattn.errors import ArgumentError, ConfigError

logger = logging.getLogger("panoattn.geometry")

KINDS = ("mv_axis", "roi")

# Dataset order; RING_ORDER below puts them left-to-right around the vehicle.
NUSCENES_CAMERAS = (
    "CAM_FRONT",
    "CAM_FRONT_RIGHT",
    "CAM_FRONT_LEFT",
    "CAM_BACK",
    "CAM_BACK_LEFT",
    "CAM_BACK_RIGHT",
)
# front-left, front, front-right, back-right, back, back-left
RING_ORDER = (2, 0, 1, 5, 3, 4)


def _pair(value, name: str) -> tuple[int, int]:
    try:
        a, b = value
        return int(a), int(b)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a pair of integers, got {value!r}")


@dataclass(frozen=True)
class LevelSpec:
    """Window and shift tables for one pyramid level, in feature cells."""

    stride: int
    mv_window: tuple[int, int]
    roi_window: tuple[int, int]
    mv_shift: tuple[int, int] = (0, 0)
    roi_shift: tuple[int, int] = (0, 0)

    def __post_init__(self):
        for name in ("mv_window", "roi_window", "mv_shift", "roi_shift"):
            object.__setattr__(self, name, _pair(getattr(self, name), name))
        object.__setattr__(self, "stride", int(self.stride))

    def window(self, kind: str) -> tuple[int, int]:
        return self.mv_window if _check_kind(kind) == "mv_axis" else self.roi_window

    def shift(self, kind: str) -> tuple[int, int]:
        return self.mv_shift if _check_kind(kind) == "mv_axis" else self.roi_shift


@dataclass(frozen=True)
class RigConfig:
    num_cameras: int
    image_height: int
    image_width: int
    levels: tuple[LevelSpec, ...]
    ring_order: tuple[int, ...] = ()
    camera_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        ring = tuple(int(c) for c in self.ring_order) or tuple(range(self.num_cameras))
        object.__setattr__(self, "ring_order", ring)
        names = tuple(self.camera_names) or tuple(f"CAM_{i}" for i in range(self.num_cameras))
        object.__setattr__(self, "camera_names", names)


@dataclass(frozen=True)
class LevelLayout:
    index: int
    spec: LevelSpec
    per_view_h: int
    per_view_w: int
    pano_h: int
    pano_w: int
    r_mv: int
    r_roi: int

    @property
    def stride(self) -> int:
        return self.spec.stride

    @property
    def num_cells(self) -> int:
        return self.pano_h * self.pano_w

    def window_count(self, kind: str) -> int:
        return self.r_mv if _check_kind(kind) == "mv_axis" else self.r_roi


@dataclass(frozen=True)
class PanoramaLayout:
    rig: RigConfig
    levels: tuple[LevelLayout, ...]

    @property
    def num_cameras(self) -> int:
        return self.rig.num_cameras

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def level(self, index: int) -> LevelLayout:
        if not 0 <= index < len(self.levels):
            raise ArgumentError(f"level {index} out of range (layout has {len(self.levels)} levels)")
        return self.levels[index]

    def ring_position(self, camera: int) -> int:
        """Panoramic slot (0 = leftmost) of a camera index."""
        return self.rig.ring_order.index(camera)

    def camera_column(self, level: int, camera: int) -> int:
        """First panoramic column of `camera` at `level`."""
        return self.ring_position(camera) * self.level(level).per_view_w


def _check_kind(kind: str) -> str:
    if kind not in KINDS:
        raise ArgumentError(f"unknown window kind '{kind}', expected one of {KINDS}")
    return kind


def build_layout(rig: RigConfig) -> PanoramaLayout:
    """Validate a rig and derive per-level panoramic geometry and window counts."""
    m = rig.num_cameras
    if m < 1:
        raise ConfigError(f"num_cameras must be >= 1, got {m}")
    if sorted(rig.ring_order) != list(range(m)):
        raise ConfigError(f"ring_order {list(rig.ring_order)} is not a permutation of 0..{m - 1}")
    if len(rig.camera_names) != m:
        raise ConfigError(f"{len(rig.camera_names)} camera names given for {m} cameras")
    if not rig.levels:
        raise ConfigError("at least one pyramid level is required")

    levels = []
    previous_stride = 0
    for i, spec in enumerate(rig.levels):
        if spec.stride <= previous_stride:
            raise ConfigError(f"level {i}: strides must be strictly increasing ({spec.stride} after {previous_stride})")
        previous_stride = spec.stride
        for axis, size in (("height", rig.image_height), ("width", rig.image_width)):
            if size % spec.stride:
                raise ConfigError(f"level {i}: image {axis} {size} is not divisible by stride {spec.stride}")

        per_view_h = rig.image_height // spec.stride
        per_view_w = rig.image_width // spec.stride
        pano_h, pano_w = per_view_h, m * per_view_w

        counts = {}
        for kind in KINDS:
            wh, ww = spec.window(kind)
            dy, dx = spec.shift(kind)
            if wh < 1 or ww < 1:
                raise ConfigError(f"level {i}: {kind} window ({wh}, {ww}) must be positive")
            if pano_h % wh:
                raise ConfigError(f"level {i}: {kind} window height {wh} does not divide panoramic height {pano_h}")
            if pano_w % ww:
                raise ConfigError(f"level {i}: {kind} window width {ww} does not divide panoramic width {pano_w}")
            if not 0 <= dy < wh:
                raise ConfigError(f"level {i}: {kind} shift height {dy} must lie in [0, {wh})")
            if not 0 <= dx < ww:
                raise ConfigError(f"level {i}: {kind} shift width {dx} must lie in [0, {ww})")
            counts[kind] = (pano_h // wh) * (pano_w // ww)

        levels.append(LevelLayout(
            index=i,
            spec=spec,
            per_view_h=per_view_h,
            per_view_w=per_view_w,
            pano_h=pano_h,
            pano_w=pano_w,
            r_mv=counts["mv_axis"],
            r_roi=counts["roi"],
        ))
        logger.debug(f"level {i}: pano {pano_h}x{pano_w}, r_mv={counts['mv_axis']}, r_roi={counts['roi']}")

    return PanoramaLayout(rig=rig, levels=tuple(levels))


# ── Serialization ─────────────────────────────────────────────


def rig_from_dict(config: dict) -> RigConfig:
    """Build a RigConfig from the `rig` + `levels` sections of a config dict."""
    rig = config.get("rig", {})
    names = tuple(rig.get("cameras") or NUSCENES_CAMERAS)
    try:
        height, width = rig.get("image_size", (576, 1024))
    except (TypeError, ValueError):
        raise ConfigError(f"rig.image_size must be [height, width], got {rig.get('image_size')!r}")
    ring = rig.get("ring_order")
    if ring is None:
        ring = RING_ORDER if names == NUSCENES_CAMERAS else tuple(range(len(names)))
    try:
        levels = tuple(
            LevelSpec(
                stride=lv["stride"],
                mv_window=lv["mv_window"],
                roi_window=lv["roi_window"],
                mv_shift=lv.get("mv_shift", (0, 0)),
                roi_shift=lv.get("roi_shift", (0, 0)),
            )
            for lv in config.get("levels", [])
        )
    except KeyError as e:
        raise ConfigError(f"level entry is missing key {e}")
    return RigConfig(
        num_cameras=len(names),
        image_height=int(height),
        image_width=int(width),
        levels=levels,
        ring_order=tuple(ring),
        camera_names=names,
    )


def layout_to_dict(layout: PanoramaLayout) -> dict:
    rig = layout.rig
    return {
        "cameras": list(rig.camera_names),
        "image_size": [rig.image_height, rig.image_width],
        "ring_order": list(rig.ring_order),
        "levels": [
            {
                "stride": lv.stride,
                "mv_window": list(lv.spec.mv_window),
                "mv_shift": list(lv.spec.mv_shift),
                "roi_window": list(lv.spec.roi_window),
                "roi_shift": list(lv.spec.roi_shift),
                "pano_size": [lv.pano_h, lv.pano_w],
                "r_mv": lv.r_mv,
                "r_roi": lv.r_roi,
            }
            for lv in layout.levels
        ],
    }


# ── Feature pyramid ───────────────────────────────────────────


def dtype_for_mode(mode: str) -> np.dtype:
    """64-bit floats for oracle comparisons, 32-bit for benchmarking."""
    if mode == "verify":
        return np.dtype(np.float64)
    if mode == "bench":
        return np.dtype(np.float32)
    raise ArgumentError(f"unknown mode '{mode}', expected 'verify' or 'bench'")


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """Per-level panoramic feature maps, each (B, C, H_l, W_l). Read-only."""

    levels: tuple[np.ndarray, ...]

    def __post_init__(self):
        frozen = []
        for i, level in enumerate(self.levels):
            arr = np.asarray(level).view()
            if arr.ndim != 4:
                raise ArgumentError(f"pyramid level {i} must be 4-D (B, C, H, W), got shape {arr.shape}")
            if not np.isfinite(arr).all():
                raise ArgumentError(f"pyramid level {i} contains non-finite values")
            arr.flags.writeable = False
            frozen.append(arr)
        if not frozen:
            raise ArgumentError("a pyramid needs at least one level")
        b, c = frozen[0].shape[:2]
        for i, arr in enumerate(frozen[1:], start=1):
            if arr.shape[:2] != (b, c):
                raise ArgumentError(f"pyramid level {i} has (B, C) = {arr.shape[:2]}, level 0 has {(b, c)}")
        object.__setattr__(self, "levels", tuple(frozen))

    @property
    def batch(self) -> int:
        return self.levels[0].shape[0]

    @property
    def channels(self) -> int:
        return self.levels[0].shape[1]

    @property
    def dtype(self) -> np.dtype:
        return self.levels[0].dtype

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, index: int) -> np.ndarray:
        return self.levels[index]

    def __iter__(self):
        return iter(self.levels)

    def check_layout(self, layout: PanoramaLayout):
        if len(self.levels) != layout.num_levels:
            raise ArgumentError(f"pyramid has {len(self.levels)} levels, layout has {layout.num_levels}")
        for lv, arr in zip(layout.levels, self.levels):
            if arr.shape[2:] != (lv.pano_h, lv.pano_w):
                raise ArgumentError(
                    f"pyramid level {lv.index} is {arr.shape[2:]}, layout expects {(lv.pano_h, lv.pano_w)}"
                )


# ── Shifts and partitions ─────────────────────────────────────


def cyclic_shift(tensor: np.ndarray, dy: int, dx: int, layout: PanoramaLayout | None = None,
                 level: int | None = None) -> np.ndarray:
    """Move the element at (y, x) to ((y + dy) mod H, (x + dx) mod W) on the last two axes."""
    tensor = np.asarray(tensor)
    if tensor.ndim < 2:
        raise ArgumentError(f"cyclic_shift needs at least 2 dimensions, got shape {tensor.shape}")
    h, w = tensor.shape[-2:]
    if (layout is None) != (level is None):
        raise ArgumentError("cyclic_shift needs layout and level together")
    if layout is not None:
        lv = layout.level(level)
        if (h, w) != (lv.pano_h, lv.pano_w):
            raise ArgumentError(f"map is {h}x{w}, level {level} is {lv.pano_h}x{lv.pano_w}")
    if abs(dy) > h or abs(dx) > w:
        raise ArgumentError(f"shift ({dy}, {dx}) exceeds map size {h}x{w}")
    return np.roll(tensor, shift=(int(dy), int(dx)), axis=(-2, -1))


@dataclass(frozen=True, eq=False)
class WindowPartition:
    """Bijection between panoramic cells and (window, slot) pairs.

    `order[w * n + s]` is the flat cell index held by window w, slot s;
    `inverse` is its inverse. `wrapped[w, s]` marks slots whose cell came
    across the top/bottom seam in a vertically shifted partition.
    """

    level: int
    kind: str
    window: tuple[int, int]
    shift: tuple[int, int]
    pano_h: int
    pano_w: int
    order: np.ndarray
    inverse: np.ndarray
    wrapped: np.ndarray

    @property
    def num_windows(self) -> int:
        return self.order.size // self.window_size

    @property
    def window_size(self) -> int:
        return self.window[0] * self.window[1]

    @property
    def has_wrap(self) -> bool:
        return bool(self.wrapped.any())

    def locate(self, y: int, x: int) -> tuple[int, int]:
        """(window_id, slot) of panoramic cell (y, x)."""
        return divmod(int(self.inverse[y * self.pano_w + x]), self.window_size)

    def cell(self, window_id: int, slot: int) -> tuple[int, int]:
        """Panoramic (y, x) held by a window slot."""
        return divmod(int(self.order[window_id * self.window_size + slot]), self.pano_w)

    def attention_mask(self) -> np.ndarray | None:
        """(r, n, n) slot-pair mask forbidding attention across the vertical seam, or None."""
        if not self.has_wrap:
            return None
        return self.wrapped[:, :, None] == self.wrapped[:, None, :]

    def group_ids(self) -> np.ndarray:
        """Per-cell id of the set of cells that may exchange information in this partition."""
        flat_wrapped = np.empty(self.order.size, dtype=np.int64)
        flat_wrapped[self.order] = self.wrapped.ravel()
        window_of_cell = self.inverse // self.window_size
        return window_of_cell * 2 + flat_wrapped


@functools.lru_cache(maxsize=256)
def partition_windows(layout: PanoramaLayout, level: int, kind: str, shifted: bool) -> WindowPartition:
    """Tile `level` with its `kind` windows, after the level's cyclic shift if `shifted`."""
    lv = layout.level(level)
    _check_kind(kind)
    wh, ww = lv.spec.window(kind)
    dy, dx = lv.spec.shift(kind) if shifted else (0, 0)
    h, w = lv.pano_h, lv.pano_w

    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # Coordinates of each cell in the shifted map, where tiling happens.
    sy = (ys - dy) % h
    sx = (xs - dx) % w
    window_id = (sy // wh) * (w // ww) + sx // ww
    slot = (sy % wh) * ww + sx % ww
    n = wh * ww

    inverse = (window_id * n + slot).ravel().astype(np.int64)
    order = np.empty_like(inverse)
    order[inverse] = np.arange(h * w, dtype=np.int64)
    wrapped = (ys < dy).ravel()[order].reshape(-1, n)

    for arr in (inverse, order, wrapped):
        arr.flags.writeable = False
    return WindowPartition(
        level=level,
        kind=kind,
        window=(wh, ww),
        shift=(dy, dx),
        pano_h=h,
        pano_w=w,
        order=order,
        inverse=inverse,
        wrapped=wrapped,
    )


def gather_windows(tensor: np.ndarray, partition: WindowPartition) -> np.ndarray:
    """(B, C, H, W) map → (B * r, n, C) window tensor, batch-major."""
    tensor = np.asarray(tensor)
    if tensor.ndim != 4 or tensor.shape[2:] != (partition.pano_h, partition.pano_w):
        raise ArgumentError(
            f"map shape {tensor.shape} does not match partition {partition.pano_h}x{partition.pano_w}"
        )
    b, c = tensor.shape[:2]
    flat = tensor.reshape(b, c, -1)[:, :, partition.order]
    flat = flat.reshape(b, c, partition.num_windows, partition.window_size)
    return np.ascontiguousarray(flat.transpose(0, 2, 3, 1)).reshape(-1, partition.window_size, c)


def scatter_windows(windows: np.ndarray, partition: WindowPartition) -> np.ndarray:
    """Inverse of gather_windows: (B * r, n, C) → (B, C, H, W)."""
    windows = np.asarray(windows)
    r, n = partition.num_windows, partition.window_size
    if windows.ndim != 3 or windows.shape[1] != n or windows.shape[0] % r:
        raise ArgumentError(f"window tensor shape {windows.shape} does not match partition (r={r}, n={n})")
    b = windows.shape[0] // r
    c = windows.shape[2]
    flat = windows.reshape(b, r * n, c).transpose(0, 2, 1)
    out = np.empty((b, c, r * n), dtype=windows.dtype)
    out[:, :, partition.order] = flat
    return out.reshape(b, c, partition.pano_h, partition.pano_w)
