"""Binary tensor container with a JSON metadata sidecar.

Layout (all integers little-endian):

    magic    4 bytes   b"CMCF"
    version  uint32    currently 1
    count    uint32    number of tensors
    then per tensor:
        name_len  uint16
        name      name_len bytes, UTF-8
        dtype     uint8   code from _DTYPE_CODES
        ndim      uint8
        dims      ndim * uint64
        data      row-major (C order) little-endian bytes

The sidecar lives at ``<path>.json`` and carries free-form metadata plus a
shape/dtype index of the tensors, so a file can be inspected without
parsing the binary stream.
"""

import json
import os
import struct
from pathlib import Path

import numpy as np

from cmc_forge.errors import ContractError

MAGIC = b"CMCF"
VERSION = 1

_DTYPE_CODES = {
    "<f8": 0,
    "<f4": 1,
    "<i8": 2,
    "<i4": 3,
    "|u1": 4,
}
_CODE_DTYPES = {v: np.dtype(k) for k, v in _DTYPE_CODES.items()}


def _canonical_dtype(arr: np.ndarray) -> np.dtype:
    kind, size = arr.dtype.kind, arr.dtype.itemsize
    if kind == "f":
        return np.dtype("<f8") if size == 8 else np.dtype("<f4")
    if kind == "i":
        return np.dtype("<i8") if size == 8 else np.dtype("<i4")
    if kind in ("u", "b"):
        return np.dtype("|u1")
    raise ContractError(f"unsupported dtype for container: {arr.dtype}")


def save_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named arrays plus metadata atomically (temp file + rename)."""
    path = Path(path)
    blobs = []
    index = {}
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dtype = _canonical_dtype(arr)
        arr = arr.astype(dtype, copy=False)
        name_bytes = name.encode("utf-8")
        header = struct.pack("<H", len(name_bytes)) + name_bytes
        header += struct.pack("<BB", _DTYPE_CODES[dtype.str], arr.ndim)
        header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blobs.append(header + arr.tobytes(order="C"))
        index[name] = {"dtype": dtype.str, "shape": list(arr.shape)}

    payload = MAGIC + struct.pack("<II", VERSION, len(blobs)) + b"".join(blobs)
    sidecar = {"format": f"cmcf-v{VERSION}", "meta": meta or {}, "tensors": index}

    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    tmp_json = path.with_name(path.name + ".json.tmp")
    tmp_json.write_text(json.dumps(sidecar, sort_keys=True, indent=1))
    os.replace(tmp_json, Path(str(path) + ".json"))


def load_tensors(path) -> tuple[dict, dict]:
    """Read a container; returns (tensors, meta)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ContractError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported container version {version}")

    tensors = {}
    offset = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        code, ndim = struct.unpack_from("<BB", raw, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}Q", raw, offset)
        offset += 8 * ndim
        dtype = _CODE_DTYPES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=offset)
        tensors[name] = data.reshape(shape).copy()
        offset += n_bytes

    sidecar_path = Path(str(path) + ".json")
    meta = {}
    if sidecar_path.exists():
        meta = json.loads(sidecar_path.read_text()).get("meta", {})
    return tensors, meta
