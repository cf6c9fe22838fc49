"""Self-describing checkpoint files.

Layout::

    MRNET-CKPT\\n
    <header byte length>\\n
    <JSON header: format version, spec, parameter names/shapes, dtype, seed, payload digest>
    <raw little-endian parameter buffers in declaration order>
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .models import ModelInstance, ModelSpec, param_shapes

MAGIC = b"MRNET-CKPT\n"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint."""


def save_checkpoint(model: ModelInstance, path, meta: dict | None = None) -> Path:
    path = Path(path)
    dtype = np.dtype(model.dtype)
    if dtype.name not in _DTYPES:
        raise CheckpointError(f"unsupported parameter dtype {dtype}")
    le = np.dtype(_DTYPES[dtype.name])
    payload = b"".join(np.ascontiguousarray(t.data, dtype=le).tobytes() for t in model.params.values())
    header = {
        "format_version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "params": [{"name": n, "shape": list(t.shape)} for n, t in model.params.items()],
        "dtype": dtype.name,
        "seed": model.seed,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(head)}\n".encode("ascii"))
        fh.write(head)
        fh.write(payload)
    os.replace(tmp, path)
    return path


def read_header(path) -> tuple[dict, bytes]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    rest = blob[len(MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0 or not rest[:nl].isdigit():
        raise CheckpointError(f"{path}: missing header length")
    n = int(rest[:nl])
    head_bytes = rest[nl + 1:nl + 1 + n]
    if len(head_bytes) != n:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(head_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    return header, rest[nl + 1 + n:]


def load_checkpoint(path) -> ModelInstance:
    model, _ = load_checkpoint_with_meta(path)
    return model


def load_checkpoint_with_meta(path) -> tuple[ModelInstance, dict]:
    header, payload = read_header(path)
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})")
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header says {header.get('payload_bytes')}"
                              " (truncated or padded file)")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    try:
        spec = ModelSpec.from_dict(header["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid spec in header: {exc}") from None
    if header.get("dtype") not in _DTYPES:
        raise CheckpointError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    le = np.dtype(_DTYPES[header["dtype"]])
    expected = param_shapes(spec)
    listed = [(p["name"], tuple(p["shape"])) for p in header["params"]]
    if listed != list(expected.items()):
        raise CheckpointError(f"{path}: parameter list does not match the spec-derived shapes")
    params, offset = {}, 0
    for name, shape in listed:
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype=le, count=count, offset=offset).reshape(shape)
        offset += count * le.itemsize
        params[name] = Tensor(arr.astype(np.dtype(header["dtype"])), name=name)
    return ModelInstance(spec, params, int(header.get("seed", 0))), header.get("meta", {})
