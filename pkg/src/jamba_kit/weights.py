"""``JMB1`` weight archive.

Layout (little-endian): magic ``b"JMB1"``, u32 tensor count, then per tensor
u16 name length, UTF-8 name, u8 dtype code (0 = f32, 1 = i8), u8 rank,
``rank`` x u64 dims, raw row-major data. A quantized weight ``W`` is stored
as int8 ``W`` plus an f32 sidecar ``W.scales``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .config import JambaConfig
from .errors import ConfigError, InputError
from .quant import QuantizedLinear
from .tensor import Tensor

MAGIC = b"JMB1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("i1")}
CODES = {np.dtype("float32"): 0, np.dtype("int8"): 1}
SCALES_SUFFIX = ".scales"


def write_archive(path: Union[str, Path], tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in CODES:
                arr = arr.astype(np.float32)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=DTYPES[CODES[arr.dtype]]).tobytes())


def read_archive(path: Union[str, Path]) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise InputError(f"{path}: not a JMB1 archive")
    pos = 4
    try:
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", data, pos)
            pos += 2
            if code not in DTYPES:
                raise InputError(f"{path}: tensor {name!r} has unknown dtype code {code}")
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            dtype = DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(data):
                raise InputError(f"{path}: truncated data for {name!r}")
            out[name] = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as exc:
        raise InputError(f"{path}: truncated archive ({exc})") from None
    return out


def save_weights(model, path: Union[str, Path]) -> None:
    tensors = {}
    for name, w in model.named_weights().items():
        if isinstance(w, QuantizedLinear):
            tensors[name] = w.q_weight
            tensors[name + SCALES_SUFFIX] = w.scales
        else:
            tensors[name] = w.data.astype(np.float32)
    write_archive(path, tensors)


def load_weights(path: Union[str, Path], config: JambaConfig, dtype=np.float32):
    """Rebuild a model from an archive; every shape is checked against
    ``config`` and int8 tensors must come with their scales."""
    from .model import model_from_weights

    raw = read_archive(path)
    weights = {}
    for name, arr in raw.items():
        if name.endswith(SCALES_SUFFIX) and name[: -len(SCALES_SUFFIX)] in raw:
            continue
        if arr.dtype == np.int8:
            scales = raw.get(name + SCALES_SUFFIX)
            if scales is None or scales.shape != (arr.shape[0],):
                raise ConfigError(f"int8 tensor {name!r} needs an f32 sidecar {name + SCALES_SUFFIX!r} of shape ({arr.shape[0]},)")
            weights[name] = QuantizedLinear(arr, scales.astype(np.float32))
        else:
            weights[name] = arr.astype(dtype)
    return model_from_weights(config, weights, dtype)
