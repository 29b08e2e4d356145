"""Named-array archive: an 8-byte little-endian header length, a JSON index
mapping each name to dtype/shape/byte offsets, then the raw little-endian
payload. This is the safetensors layout, so files written elsewhere in that
format (or converted into it) load directly.
"""
from __future__ import annotations

import json
from pathlib import Path

import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from ucssl.errors import ValidationError


def save_arrays(path: str | Path, arrays: dict[str, torch.Tensor], metadata: dict | None = None) -> None:
    """Write tensors plus a JSON-serializable ``metadata`` dict."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().cpu().contiguous().clone() for k, v in arrays.items()}
    meta = {"ucssl": json.dumps(metadata or {}, sort_keys=True)}
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_file(tensors, str(tmp), metadata=meta)
    tmp.replace(path)


def load_arrays(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"weight archive not found: {path}")
    if path.stat().st_size == 0:
        raise ValidationError(f"weight archive is empty: {path}")
    try:
        tensors = load_file(str(path))
    except (SafetensorError, OSError, ValueError) as exc:
        raise ValidationError(f"unreadable weight archive {path}: {exc}") from exc
    with open(path, "rb") as fh:
        n = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(n))
    meta = json.loads(header.get("__metadata__", {}).get("ucssl", "{}"))
    return tensors, meta
