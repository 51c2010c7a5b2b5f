"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MTPSLAB1"            magic
    u32 version            currently 1
    u32 n, n bytes         model config, canonical JSON (sorted keys)
    u32 count              number of parameter records
    per record:
        u16 n, n bytes     parameter name (UTF-8)
        u8  dtype code     1 = f32, 2 = f64
        u8  rank
        u32 x rank         dims
        u64 nbytes         payload length
        payload            little-endian, row-major
        u32 crc32          of the payload
"""

import struct
import zlib
from collections import OrderedDict

import numpy as np

from ..errors import MTPSLabError
from ..numerics import Tensor
from .config import ModelConfig
from .decoder import DecoderModel

MAGIC = b"MTPSLAB1"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class CheckpointError(MTPSLabError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class LayoutError(CheckpointError):
    """Dims, dtype or parameter names disagree with the stored config."""


def dumps(model):
    cfg = model.config.to_json().encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg,
           struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
        code = DTYPE_CODES[arr.dtype]
        raw = name.encode("utf-8")
        payload = arr.tobytes()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(struct.pack("<Q", len(payload)))
        out.append(payload)
        out.append(struct.pack("<I", zlib.crc32(payload)))
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"checkpoint truncated while reading {what} at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf):
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise BadMagicError("not an mtpslab checkpoint (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    (n,) = r.unpack("<I", "config length")
    try:
        cfg = ModelConfig.from_json(r.take(n, "config").decode("utf-8"))
    except (ValueError, TypeError) as exc:
        raise LayoutError(f"unreadable model config: {exc}") from exc
    (count,) = r.unpack("<I", "record count")
    expected = DecoderModel.parameter_specs(cfg)
    if count != len(expected):
        raise LayoutError(f"checkpoint holds {count} parameters, config implies {len(expected)}")
    want_dtype = np.dtype("<f4") if cfg.dtype == "f32" else np.dtype("<f8")
    params = OrderedDict()
    for exp_name, exp_shape, _ in expected:
        (ln,) = r.unpack("<H", "name length")
        try:
            name = r.take(ln, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise LayoutError(f"unreadable parameter name where {exp_name!r} was expected") from exc
        if name != exp_name:
            raise LayoutError(f"parameter {name!r} found where {exp_name!r} was expected")
        code, rank = r.unpack("<BB", f"{name} header")
        if code not in CODE_DTYPES:
            raise LayoutError(f"{name}: unknown dtype code {code}")
        dtype = CODE_DTYPES[code]
        if dtype != want_dtype:
            raise LayoutError(f"{name}: dtype {dtype} does not match config dtype {cfg.dtype}")
        dims = r.unpack(f"<{rank}I", f"{name} dims")
        if tuple(dims) != tuple(exp_shape):
            raise LayoutError(f"{name}: dims {tuple(dims)} do not match expected {tuple(exp_shape)}")
        (nbytes,) = r.unpack("<Q", f"{name} length")
        if nbytes != int(np.prod(dims, dtype=np.int64)) * dtype.itemsize:
            raise LayoutError(f"{name}: payload length {nbytes} inconsistent with dims {tuple(dims)}")
        payload = r.take(nbytes, f"{name} payload")
        (crc,) = r.unpack("<I", f"{name} checksum")
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"{name}: payload checksum mismatch")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        params[name] = Tensor(arr, requires_grad=True, name=name)
    if r.pos != len(buf):
        raise LayoutError(f"{len(buf) - r.pos} trailing bytes after the last record")
    return DecoderModel(cfg, params)


def save_checkpoint(model, path):
    data = dumps(model)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)
