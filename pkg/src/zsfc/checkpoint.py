"""Binary checkpoint files.

Layout::

    b"ZSFC" | u32 version | u32 manifest length | manifest (UTF-8 JSON) | payload

The manifest records the variant, dimension, vocabulary sizes and seed plus
one entry per tensor (name, shape, byte offset into the payload). Tensors are
stored row-major as little-endian float32. Encoding is canonical, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict

import numpy as np

from zsfc import DataError
from zsfc.model import PARAM_SHAPES, ModelParams, Variant

MAGIC = b"ZSFC"
VERSION = 1
_LE_F32 = np.dtype("<f4")


def to_bytes(params: ModelParams) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in PARAM_SHAPES:
        arr = np.ascontiguousarray(params[name], dtype=_LE_F32)
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "variant": params.variant.value,
        "d": params.d,
        "n_items": params.n_items,
        "n_categories": params.n_categories,
        "seed": int(params.seed),
        "dtype": "float32",
        "tensors": entries,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(head)) + head + b"".join(chunks)


def from_bytes(blob: bytes, source="<bytes>") -> ModelParams:
    if blob[:4] != MAGIC:
        raise DataError("not a checkpoint (bad magic)", source)
    if len(blob) < 12:
        raise DataError("truncated header", source)
    version, head_len = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}", source)
    try:
        manifest = json.loads(blob[12 : 12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt manifest: {exc}", source) from None
    payload = memoryview(blob)[12 + head_len :]
    tensors = OrderedDict()
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        stop = start + 4 * count
        if stop > len(payload):
            raise DataError(f"tensor {entry['name']} runs past end of file", source)
        tensors[entry["name"]] = np.frombuffer(payload[start:stop], dtype=_LE_F32).reshape(shape).astype(np.float32)
    missing = set(PARAM_SHAPES) - set(tensors)
    if missing:
        raise DataError(f"missing tensors: {sorted(missing)}", source)
    params = ModelParams(tensors, Variant(manifest["variant"]), int(manifest["seed"]))
    try:
        params.check()
    except ValueError as exc:
        raise DataError(str(exc), source) from None
    return params


def save(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(params))


def load(path) -> ModelParams:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), path)
