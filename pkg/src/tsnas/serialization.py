"""Deterministic JSON, config hashing and versioned checkpoint files."""

from __future__ import annotations

import enum
import hashlib
import io
import json
import math
from pathlib import Path

import numpy as np

from .errors import ConfigError

CHECKPOINT_FORMAT = "tsnas-checkpoint"
CHECKPOINT_VERSION = 1


def _format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite float {x}")
    if x.is_integer() and abs(x) < 1e16:
        return f"{x:.1f}"
    return format(x, ".17g")


def _encode(obj) -> str:
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, enum.Enum):
        return _encode(obj.value)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _format_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_encode(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ",".join(_encode(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    """Compact JSON with floats written to 17 significant digits."""
    return _encode(obj)


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj) + "\n")


def config_hash(obj) -> str:
    canonical = json.dumps(json.loads(dumps(obj)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict) -> None:
    """``.npz`` archive holding every parameter plus a JSON metadata record."""
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **meta}
    arrays = {f"param/{k}": v for k, v in state.items()}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(dumps(meta).encode(), dtype=np.uint8), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            state = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a checkpoint file")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return state, meta
