"""Configuration loader for panoattn.

Builds a nested dict from in-code defaults, a named profile, an optional YAML
file and environment variables, then validates it into a RunConfig.
Environment variables always take precedence.
"""

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from panoattn.errors import ConfigError
from panoattn.geometry import (
    NUSCENES_CAMERAS,
    RING_ORDER,
    PanoramaLayout,
    build_layout,
    dtype_for_mode,
    rig_from_dict,
)

REPRESENTATIONS = ("floating", "bev", "both")

DEFAULTS = {
    "profile": "paper",
    "seed": 0,
    "mode": "verify",
    "rig": {
        "cameras": list(NUSCENES_CAMERAS),
        "image_size": [576, 1024],
        "ring_order": list(RING_ORDER),
        "horizontal_fov_deg": 70.0,
        "camera_height": 1.5,
    },
    "levels": [
        {"stride": 8, "mv_window": [3, 32], "mv_shift": [0, 16], "roi_window": [12, 12], "roi_shift": [6, 6]},
        {"stride": 16, "mv_window": [3, 32], "mv_shift": [0, 16], "roi_window": [12, 12], "roi_shift": [6, 6]},
        {"stride": 32, "mv_window": [3, 32], "mv_shift": [0, 16], "roi_window": [6, 6], "roi_shift": [3, 3]},
        {"stride": 64, "mv_window": [3, 24], "mv_shift": [0, 12], "roi_window": [9, 12], "roi_shift": [0, 0]},
    ],
    "encoder": {
        "channels": 256,
        "heads": 8,
        "blocks": 6,
        "batch": 1,
        "ffn_placement": "block",
        "mv_attention": True,
        "roi_attention": True,
        "shift_windows": True,
    },
    "queries": {
        "num_floating": 900,
        "bev_grid": 128,
        "bev_extent": 51.2,
        "top_k": 500,
        "representation": "both",
    },
    "scene": {"num_boxes": 40},
    "nms": {"threshold": 0.2},
    "eval": {"dist_thresholds": [0.5, 1.0, 2.0, 4.0], "tp_threshold": 2.0},
    "output": {"dir": None},
    "runtime": {"threads": 1, "log_level": "INFO"},
}

PROFILES = {
    "paper": {},
    "desk": {
        "rig": {"image_size": [48, 64]},
        "levels": [
            {"stride": 4, "mv_window": [3, 32], "mv_shift": [0, 16], "roi_window": [6, 8], "roi_shift": [3, 4]},
            {"stride": 8, "mv_window": [3, 16], "mv_shift": [0, 8], "roi_window": [3, 4], "roi_shift": [1, 2]},
        ],
        "encoder": {"channels": 16, "heads": 2},
        "queries": {"num_floating": 32, "bev_grid": 16, "top_k": 8},
        "scene": {"num_boxes": 12},
    },
}

# Runtime knobs that never change results; left out of the config hash.
_UNHASHED_KEYS = ("runtime", "output")


def _deep_merge(base: dict, override: dict) -> dict:
    """Recursively merge override into base."""
    result = base.copy()
    for key, value in override.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = _deep_merge(result[key], value)
        else:
            result[key] = value
    return result


def _load_yaml(path: str | Path | None) -> dict:
    """Load a YAML file, return empty dict if not found."""
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        return {}
    with open(path) as f:
        try:
            data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping at top level")
    return data


def _apply_env_overrides(config: dict) -> dict:
    """Override config values with environment variables."""
    env_map = {
        "PANOATTN_SEED": ("seed",),
        "PANOATTN_MODE": ("mode",),
        "PANOATTN_THREADS": ("runtime", "threads"),
        "PANOATTN_LOG_LEVEL": ("runtime", "log_level"),
        "PANOATTN_OUT": ("output", "dir"),
    }
    int_vars = {"PANOATTN_SEED", "PANOATTN_THREADS"}

    for env_var, path in env_map.items():
        value = os.getenv(env_var)
        if value is None:
            continue
        if env_var in int_vars:
            try:
                value = int(value)
            except ValueError:
                raise ConfigError(f"{env_var} must be an integer, got '{value}'")
        current = config
        for key in path[:-1]:
            current = current.setdefault(key, {})
        current[path[-1]] = value

    return config


def load_config(path: str | Path | None = None, profile: str | None = None,
                overrides: dict | None = None) -> dict:
    """Load full configuration from profile + YAML file + environment.

    Precedence (highest to lowest):
    1. Environment variables (PANOATTN_PROFILE selects the base profile)
    2. `overrides` (command-line flags)
    3. YAML file
    4. Profile table
    5. Defaults
    """
    file_config = _load_yaml(path)
    name = os.getenv("PANOATTN_PROFILE") or profile or file_config.get("profile") or "paper"
    if name not in PROFILES:
        raise ConfigError(f"unknown profile '{name}', expected one of {sorted(PROFILES)}")

    config = _deep_merge(copy.deepcopy(DEFAULTS), copy.deepcopy(PROFILES[name]))
    config = _deep_merge(config, file_config)
    if overrides:
        config = _deep_merge(config, overrides)
    config["profile"] = name

    return _apply_env_overrides(config)


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON form of the result-affecting keys."""
    hashed = {k: v for k, v in config.items() if k not in _UNHASHED_KEYS}
    blob = json.dumps(hashed, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def thread_count() -> int:
    """Worker threads for level-parallel encoder work (PANOATTN_THREADS, default 1)."""
    raw = os.getenv("PANOATTN_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"PANOATTN_THREADS must be an integer, got '{raw}'")


# ── Validated view ────────────────────────────────────────────


@dataclass(frozen=True)
class EncoderSettings:
    channels: int
    heads: int
    blocks: int
    batch: int
    ffn_placement: str
    mv_attention: bool
    roi_attention: bool
    shift_windows: bool


@dataclass(frozen=True)
class QuerySettings:
    num_floating: int
    bev_grid: int
    bev_extent: float
    top_k: int | None
    representation: str


@dataclass(frozen=True)
class RunConfig:
    profile: str
    seed: int
    mode: str
    layout: PanoramaLayout
    encoder: EncoderSettings
    queries: QuerySettings
    num_boxes: int
    nms_threshold: float
    dist_thresholds: tuple[float, ...]
    tp_threshold: float
    horizontal_fov_deg: float
    camera_height: float
    output_dir: str | None
    threads: int
    log_level: str
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def dtype(self) -> np.dtype:
        return dtype_for_mode(self.mode)

    @classmethod
    def from_dict(cls, config: dict) -> "RunConfig":
        """Validate a config dict; every failure surfaces as ConfigError."""
        try:
            return cls._from_dict(config)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid configuration: {e}")

    @classmethod
    def _from_dict(cls, config: dict) -> "RunConfig":
        layout = build_layout(rig_from_dict(config))

        seed = int(config["seed"])
        if not 0 <= seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
        mode = config["mode"]
        if mode not in ("verify", "bench"):
            raise ConfigError(f"mode must be 'verify' or 'bench', got '{mode}'")

        enc = config["encoder"]
        encoder = EncoderSettings(
            channels=int(enc["channels"]),
            heads=int(enc["heads"]),
            blocks=int(enc["blocks"]),
            batch=int(enc["batch"]),
            ffn_placement=str(enc["ffn_placement"]),
            mv_attention=bool(enc["mv_attention"]),
            roi_attention=bool(enc["roi_attention"]),
            shift_windows=bool(enc["shift_windows"]),
        )
        if encoder.channels < 1 or encoder.heads < 1 or encoder.channels % encoder.heads:
            raise ConfigError(f"encoder.heads {encoder.heads} must divide encoder.channels {encoder.channels}")
        if encoder.blocks < 0 or encoder.batch < 1:
            raise ConfigError("encoder.blocks must be >= 0 and encoder.batch >= 1")
        if encoder.ffn_placement not in ("block", "sublayer"):
            raise ConfigError(f"encoder.ffn_placement must be 'block' or 'sublayer', got '{encoder.ffn_placement}'")

        q = config["queries"]
        top_k = q.get("top_k")
        queries = QuerySettings(
            num_floating=int(q["num_floating"]),
            bev_grid=int(q["bev_grid"]),
            bev_extent=float(q["bev_extent"]),
            top_k=None if top_k is None else int(top_k),
            representation=str(q["representation"]),
        )
        if queries.num_floating < 0 or queries.bev_grid < 1 or queries.bev_extent <= 0:
            raise ConfigError("queries.num_floating >= 0, queries.bev_grid >= 1 and queries.bev_extent > 0 required")
        if queries.top_k is not None and not 0 <= queries.top_k <= queries.bev_grid ** 2:
            raise ConfigError(f"queries.top_k {queries.top_k} must lie in [0, {queries.bev_grid ** 2}]")
        if queries.representation not in REPRESENTATIONS:
            raise ConfigError(f"queries.representation must be one of {REPRESENTATIONS}")

        threshold = float(config["nms"]["threshold"])
        if not 0.0 <= threshold <= 1.0:
            raise ConfigError(f"nms.threshold must lie in [0, 1], got {threshold}")
        dists = tuple(float(d) for d in config["eval"]["dist_thresholds"])
        if not dists or min(dists) <= 0:
            raise ConfigError("eval.dist_thresholds must be a nonempty list of positive distances")
        num_boxes = int(config["scene"]["num_boxes"])
        if num_boxes < 0:
            raise ConfigError(f"scene.num_boxes must be >= 0, got {num_boxes}")
        fov = float(config["rig"].get("horizontal_fov_deg", 70.0))
        if not 0.0 < fov < 180.0:
            raise ConfigError(f"rig.horizontal_fov_deg must lie in (0, 180), got {fov}")

        runtime = config.get("runtime", {})
        return cls(
            profile=str(config.get("profile", "paper")),
            seed=seed,
            mode=mode,
            layout=layout,
            encoder=encoder,
            queries=queries,
            num_boxes=num_boxes,
            nms_threshold=threshold,
            dist_thresholds=dists,
            tp_threshold=float(config["eval"]["tp_threshold"]),
            horizontal_fov_deg=fov,
            camera_height=float(config["rig"].get("camera_height", 1.5)),
            output_dir=config.get("output", {}).get("dir"),
            threads=max(1, int(runtime.get("threads", 1))),
            log_level=str(runtime.get("log_level", "INFO")).upper(),
            raw=copy.deepcopy(config),
        )
