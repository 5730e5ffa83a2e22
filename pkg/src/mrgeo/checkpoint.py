"""Self-describing JSON checkpoints.

Layout::

    {"format": "mrgeo-checkpoint/1",
     "seed": <int>,
     "config": {<key>: <value text>, ...},
     "params": {<dotted name>: {"shape": [...], "dtype": "<f8",
                                "data": <base64 of row-major little-endian doubles>}}}

Keys are sorted and values stored bit-exactly, so equal models give equal bytes.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .config import RunConfig, apply_overrides
from .encoder import Encoder
from .tensor import ShapeError, Tensor

FORMAT = "mrgeo-checkpoint/1"


class CheckpointError(ValueError):
    pass


def _encode_array(arr: np.ndarray) -> dict:
    raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return {"shape": list(arr.shape), "dtype": "<f8", "data": base64.b64encode(raw).decode()}


def _decode_array(name: str, entry: dict) -> np.ndarray:
    if entry.get("dtype") != "<f8":
        raise CheckpointError(f"{name}: unsupported dtype {entry.get('dtype')!r}")
    shape = tuple(int(d) for d in entry["shape"])
    arr = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8")
    if arr.size != int(np.prod(shape)):
        raise CheckpointError(f"{name}: {arr.size} values do not fill shape {shape}")
    return arr.reshape(shape).astype(np.float64)


def dumps(encoder: Encoder, cfg: RunConfig, seed: int) -> str:
    doc = {
        "format": FORMAT,
        "seed": int(seed),
        "config": cfg.to_dict(),
        "params": {name: _encode_array(t.data) for name, t in sorted(encoder.params.items())},
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def save(path: str | Path, encoder: Encoder, cfg: RunConfig, seed: int) -> None:
    Path(path).write_text(dumps(encoder, cfg, seed))


def loads(text: str) -> tuple[Encoder, RunConfig, int]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"not a JSON checkpoint: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"unknown checkpoint format {doc.get('format')!r}")
    missing = [k for k in ("seed", "config", "params") if k not in doc]
    if missing:
        raise CheckpointError(f"checkpoint lacks {', '.join(missing)}")
    cfg = apply_overrides(RunConfig(), doc["config"])
    params = {name: Tensor(_decode_array(name, entry), requires_grad=True, name=name)
              for name, entry in doc["params"].items()}
    try:
        encoder = Encoder(cfg.encoder, params)
    except ShapeError as exc:
        raise CheckpointError(f"checkpoint does not match its config: {exc}") from exc
    return encoder, cfg, int(doc["seed"])


def load(path: str | Path) -> tuple[Encoder, RunConfig, int]:
    return loads(Path(path).read_text())
