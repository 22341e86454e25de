"""Workspace: resolves every output file of a run to the output directory.

  workspace.path("manifest.json")        → <out>/manifest.json
  workspace.path("layout_L0_roi.ppm")    → <out>/layout_L0_roi.ppm

Configure via (highest first):
  - env var:     PANOATTN_OUT=/tmp/run
  - CLI flag:    --out /tmp/run
  - config:      output: {dir: /tmp/run}
Falls back to the current directory.
"""

import logging
import os
from pathlib import Path

logger = logging.getLogger("panoattn.workspace")

_workspace_root: Path | None = None


def init(config: dict, cli_out: str | None = None) -> Path:
    """Initialize the output directory. Call once per command."""
    global _workspace_root

    out = os.environ.get("PANOATTN_OUT") or cli_out or (config.get("output") or {}).get("dir") or "."
    _workspace_root = Path(out).expanduser().resolve()
    _workspace_root.mkdir(parents=True, exist_ok=True)

    logger.info(f"Output directory: {_workspace_root}")
    return _workspace_root


def root() -> Path:
    if _workspace_root is None:
        return Path.cwd()
    return _workspace_root


def path(*parts: str) -> Path:
    return root() / Path(*parts)
