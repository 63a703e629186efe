"""Binary checkpoint format.

All integers little-endian::

    b"ATMC"  u32 version
    u32 len  config text (UTF-8, the ``[model]`` section)
    u32 entry count
    per entry: u32 len + UTF-8 name, u8 dtype code, u8 rank,
               rank x u64 extents, u64 byte offset into the payload
    u64 payload length, payload bytes (raw little-endian tensors)
    u32 CRC32 of the payload
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .backbone import Model, param_shapes
from .config import VariantConfig, get_variant, variant_from_text
from .engine import Array
from .errors import ChecksumError, ConfigError, FormatError, NameSetError, VersionError

MAGIC = b"ATMC"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def encode_checkpoint(model: Model) -> bytes:
    header = [MAGIC, struct.pack("<I", VERSION)]
    cfg_text = model.cfg.to_text().encode("utf-8")
    header += [struct.pack("<I", len(cfg_text)), cfg_text, struct.pack("<I", len(model.params))]
    payload = bytearray()
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data, dtype=p.dtype.newbyteorder("<"))
        if arr.dtype not in DTYPE_CODES:
            raise FormatError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        header.append(struct.pack("<I", len(raw)) + raw)
        header.append(struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        header.append(struct.pack("<Q", len(payload)))
        payload += arr.tobytes()
    payload = bytes(payload)
    return b"".join(header) + struct.pack("<Q", len(payload)) + payload + \
        struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(encode_checkpoint(model))


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.source}: unexpected end of file at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def _expected_config(expected) -> VariantConfig | None:
    if expected is None or isinstance(expected, VariantConfig):
        return expected
    return get_variant(expected)


def decode_checkpoint(buf: bytes, expected: VariantConfig | str | None = None,
                      source: str = "<bytes>") -> Model:
    """Parse and validate checkpoint bytes.

    ``expected`` (a variant or its name) fixes the parameter name set the
    file must contain; otherwise the set implied by the stored config is used.
    """
    r = _Reader(buf, source)
    if r.take(4) != MAGIC:
        raise FormatError(f"{source}: bad magic, not a checkpoint")
    (version,) = r.unpack("I")
    if version != VERSION:
        raise VersionError(f"{source}: format version {version}, this build reads {VERSION}")
    (n,) = r.unpack("I")
    try:
        cfg = variant_from_text(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise FormatError(f"{source}: unreadable config block ({exc})") from None
    (count,) = r.unpack("I")
    entries = []
    for _ in range(count):
        (ln,) = r.unpack("I")
        name = r.take(ln).decode("utf-8")
        code, rank = r.unpack("BB")
        if code not in CODE_DTYPES:
            raise FormatError(f"{source}: unknown dtype code {code} for {name}")
        shape = r.unpack(f"{rank}Q") if rank else ()
        (offset,) = r.unpack("Q")
        entries.append((name, CODE_DTYPES[code], tuple(shape), offset))
    (plen,) = r.unpack("Q")
    payload = r.take(plen)
    (crc,) = r.unpack("I")
    if r.pos != len(buf):
        raise FormatError(f"{source}: {len(buf) - r.pos} trailing bytes after checksum")
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{source}: payload CRC32 mismatch (stored {crc:#010x}, computed {zlib.crc32(payload):#010x})")

    want_cfg = _expected_config(expected) or cfg
    want = param_shapes(want_cfg)
    names = [e[0] for e in entries]
    if len(set(names)) != len(names):
        dup = next(x for x in names if names.count(x) > 1)
        raise NameSetError(f"{source}: duplicate tensor {dup!r}")
    present = set(names)
    extra = [x for x in names if x not in want]
    missing = [x for x in want if x not in present]
    if extra or missing:
        first = f"missing {missing[0]!r}" if missing else f"unexpected {extra[0]!r}"
        raise NameSetError(f"{source}: tensor names do not match variant {want_cfg.name!r}: first mismatch "
                           f"{first} ({len(missing)} missing, {len(extra)} extra)")

    params = {}
    for name, dtype, shape, offset in entries:
        if shape != tuple(want[name]):
            raise NameSetError(f"{source}: {name} has shape {shape}, expected {tuple(want[name])}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(payload):
            raise FormatError(f"{source}: tensor {name} overruns the payload")
        arr = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        params[name] = Array(arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True), requires_grad=True)
    ordered = {k: params[k] for k in want}
    return Model(want_cfg if expected is not None else cfg, ordered)


def load_checkpoint(path, expected: VariantConfig | str | None = None) -> Model:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror or exc}") from exc
    return decode_checkpoint(buf, expected, str(path))
