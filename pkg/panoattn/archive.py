"""Schema-tagged file I/O: tensor archives, detection records, reports and manifests.

Every output names its schema:
  .npz    a `__schema__` entry plus tensors stored as little-endian float64
  .jsonl  first line {"schema": "panoattn/<kind>", "version": 1}
  .json   "schema" and "version" as the leading keys of the document
  .txt    first line is the JSON header, then free text
"""

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from panoattn.encoder import EncoderStack, block_parameters
from panoattn.errors import ArgumentError
from panoattn.geometry import FeaturePyramid
from panoattn.queries import Detection, DetectionSet

logger = logging.getLogger("panoattn.archive")

SCHEMA_VERSION = 1
SCHEMA_KEY = "__schema__"


def schema_header(kind: str) -> dict:
    return {"schema": f"panoattn/{kind}", "version": SCHEMA_VERSION}


def _check_header(header: dict, kind: str | None, path: Path):
    if header.get("version") != SCHEMA_VERSION or not str(header.get("schema", "")).startswith("panoattn/"):
        raise ArgumentError(f"{path} has no panoattn schema header")
    if kind is not None and header["schema"] != f"panoattn/{kind}":
        raise ArgumentError(f"{path} holds {header['schema']}, expected panoattn/{kind}")


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ── Tensors ───────────────────────────────────────────────────


def write_npz(path: str | Path, kind: str, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: np.asarray(t, dtype="<f8") for name, t in tensors.items()}
    if SCHEMA_KEY in arrays:
        raise ArgumentError(f"tensor name {SCHEMA_KEY} is reserved")
    arrays[SCHEMA_KEY] = np.array(json.dumps(schema_header(kind)))
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def read_npz(path: str | Path, kind: str | None = None) -> dict[str, np.ndarray]:
    path = Path(path)
    with np.load(path, allow_pickle=False) as data:
        if SCHEMA_KEY not in data.files:
            raise ArgumentError(f"{path} has no {SCHEMA_KEY} entry")
        _check_header(json.loads(str(data[SCHEMA_KEY])), kind, path)
        return {name: data[name] for name in data.files if name != SCHEMA_KEY}


def pyramid_tensors(pyramid: FeaturePyramid) -> dict[str, np.ndarray]:
    return {f"level{i}": level for i, level in enumerate(pyramid)}


def encoder_tensors(stack: EncoderStack) -> dict[str, np.ndarray]:
    tensors = {}
    for block in stack.blocks:
        for name, value in block_parameters(block).items():
            tensors[f"block{block.stage}.{name}"] = value
    return tensors


# ── Text records ──────────────────────────────────────────────


def write_jsonl(path: str | Path, kind: str, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(json.dumps(schema_header(kind)) + "\n")
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def read_jsonl(path: str | Path, kind: str | None = None) -> list[dict]:
    path = Path(path)
    with open(path) as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise ArgumentError(f"{path} is empty")
    try:
        _check_header(json.loads(lines[0]), kind, path)
        return [json.loads(line) for line in lines[1:]]
    except json.JSONDecodeError as e:
        raise ArgumentError(f"{path}: {e}")


def write_json(path: str | Path, kind: str, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump({**schema_header(kind), **payload}, f, indent=2, sort_keys=False)
        f.write("\n")
    return path


def read_json(path: str | Path, kind: str | None = None) -> dict:
    path = Path(path)
    with open(path) as f:
        data = json.load(f)
    _check_header(data, kind, path)
    return {k: v for k, v in data.items() if k not in ("schema", "version")}


def write_text(path: str | Path, kind: str, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(json.dumps(schema_header(kind)) + "\n")
        f.write(text)
    return path


# ── Detections ────────────────────────────────────────────────


def write_detections(path: str | Path, dets: DetectionSet) -> Path:
    return write_jsonl(path, "detections", (d.to_record() for d in dets))


def read_detections(path: str | Path) -> DetectionSet:
    return DetectionSet(tuple(Detection.from_record(r) for r in read_jsonl(path, "detections")))
