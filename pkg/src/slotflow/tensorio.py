"""Binary tensor file format used for datasets, checkpoints and goldens.

Layout (little-endian throughout):

    magic   4 bytes  b"SLID"
    version u16      currently 1
    dtype   u8       0 = float32, 1 = float64
    ndim    u8
    dims    ndim * u64
    payload product(dims) * itemsize bytes, row-major

Round trips are bit-exact.
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SLID"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorFileError(ValueError):
    pass


def write_tensor(path, array) -> None:
    array = np.ascontiguousarray(array)
    dtype = array.dtype.newbyteorder("<")
    if dtype not in _DTYPE_CODES:
        raise TensorFileError(f"unsupported dtype {array.dtype}; use float32 or float64")
    header = MAGIC + struct.pack("<HBB", VERSION, _DTYPE_CODES[dtype], array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(array.astype(dtype, copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise TensorFileError(f"{path}: bad magic {raw[:4]!r}")
    version, dtype_code, ndim = struct.unpack_from("<HBB", raw, 4)
    if version != VERSION:
        raise TensorFileError(f"{path}: unsupported version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise TensorFileError(f"{path}: unknown dtype code {dtype_code}")
    dims = struct.unpack_from(f"<{ndim}Q", raw, 8)
    dtype = _CODE_DTYPES[dtype_code]
    offset = 8 + 8 * ndim
    count = int(np.prod(dims)) if ndim else 1
    expected = offset + count * dtype.itemsize
    if len(raw) != expected:
        raise TensorFileError(f"{path}: payload length {len(raw) - offset}, expected {expected - offset}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return data.reshape(dims).copy()
