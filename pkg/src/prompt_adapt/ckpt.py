"""Portable tensor record files.

Layout (UTF-8 text, ``\\n`` line endings)::

    PROMPTADAPT-CKPT v1
    meta {"kind": "classifier", ...}
    tensor <name> <d0,d1,...> <hex-float> <hex-float> ...
    ...
    checksum sha256:<digest of every preceding byte>

Values are written with ``float.hex`` so a round trip is bit-exact. Paths
ending in ``.gz`` are gzip-compressed with a zeroed header timestamp, so
identical content gives identical bytes.
"""

from __future__ import annotations

import gzip
import hashlib
import io
import json
from pathlib import Path

import numpy as np

HEADER = "PROMPTADAPT-CKPT v1"


class CheckpointError(Exception):
    """A record file could not be read or does not match what was expected."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


def encode(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.StringIO()
    buf.write(HEADER + "\n")
    buf.write("meta " + json.dumps(meta, sort_keys=True, separators=(",", ":")) + "\n")
    for name, arr in tensors.items():
        if not name or any(ch.isspace() for ch in name):
            raise ValueError(f"invalid tensor name {name!r}")
        arr = np.asarray(arr, dtype=np.float64)
        shape = ",".join(str(d) for d in arr.shape)
        values = " ".join(map(float.hex, arr.ravel().tolist()))
        buf.write(f"tensor {name} {shape} {values}\n")
    body = buf.getvalue().encode("utf-8")
    return body + b"checksum sha256:" + hashlib.sha256(body).hexdigest().encode() + b"\n"


def decode(raw: bytes, path="<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    cut = raw.rfind(b"checksum sha256:")
    if cut < 0 or not raw.endswith(b"\n"):
        raise CheckpointError(path, "missing checksum line (truncated file?)")
    body, digest = raw[:cut], raw[cut + len(b"checksum sha256:") : -1].decode("ascii", "replace")
    if hashlib.sha256(body).hexdigest() != digest:
        raise CheckpointError(path, "checksum mismatch")
    lines = body.decode("utf-8").split("\n")
    if lines[0] != HEADER:
        raise CheckpointError(path, f"bad header {lines[0][:40]!r}, expected {HEADER!r}")
    if len(lines) < 2 or not lines[1].startswith("meta "):
        raise CheckpointError(path, "missing meta record")
    try:
        meta = json.loads(lines[1][5:])
    except json.JSONDecodeError as exc:
        raise CheckpointError(path, f"malformed meta record: {exc}") from None
    tensors: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        parts = line.split(" ", 3)
        if len(parts) < 3 or parts[0] != "tensor":
            raise CheckpointError(path, f"line {lineno}: malformed tensor record")
        name, shape_txt = parts[1], parts[2]
        try:
            shape = tuple(int(d) for d in shape_txt.split(",")) if shape_txt else ()
            values = [float.fromhex(v) for v in parts[3].split(" ")] if len(parts) == 4 else []
        except ValueError as exc:
            raise CheckpointError(path, f"line {lineno}: {exc}") from None
        if len(values) != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(path, f"tensor {name}: {len(values)} values for shape {shape}")
        tensors[name] = np.array(values, dtype=np.float64).reshape(shape)
    return meta, tensors


def write(path, meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    path = Path(path)
    raw = encode(meta, tensors)
    if path.suffix == ".gz":
        out = io.BytesIO()
        with gzip.GzipFile(fileobj=out, mode="wb", mtime=0, filename="") as gz:
            gz.write(raw)
        data = out.getvalue()
    else:
        data = raw
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise CheckpointError(path, f"cannot write: {exc}") from None
    return data


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        data = path.read_bytes()
        if path.suffix == ".gz":
            data = gzip.decompress(data)
    except (OSError, EOFError) as exc:
        raise CheckpointError(path, f"cannot read: {exc}") from None
    return decode(data, path)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
