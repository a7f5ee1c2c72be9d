"""Tensor codecs for the inter-cluster link.

Every encoder produces a :class:`CompressedPayload` whose wire layout is::

    magic "NBL1" | version u8 | method id u8 | m u32 | n u32 | r u32 |
    step u64 | body length u64 | crc32(body) u32 | body

All integers are little-endian, body values row-major little-endian.

Byte accounting follows the 32-bit dense convention: full-precision values
are charged 4 bytes (they travel as float64 so the identity path stays
bit-exact), half-precision 2 bytes, int8 1 byte.  Per-tensor metadata (the
header and the int8 scale) is overhead and is kept out of the ratio.
"""

from __future__ import annotations

import re
import struct
import zlib
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .matrix import (
    TruncatedFactors,
    as_matrix,
    compression_ratio,
    rank_for_fraction,
    reconstruct,
    svd,
    truncate,
)

MAGIC = b"NBL1"
VERSION = 1
_HEADER = struct.Struct("<4sBBIIIQQI")
HEADER_SIZE = _HEADER.size
FP16_MAX = 65504.0
BASELINE_BYTES_PER_ELEMENT = 4


class CodecError(Exception):
    pass


class CorruptPayloadError(CodecError):
    pass


class ProtocolError(CodecError):
    pass


class Fp16OverflowError(CodecError, OverflowError):
    pass


# ---------------------------------------------------------------- methods


@dataclass(frozen=True)
class Identity:
    @property
    def name(self) -> str:
        return "IDENTITY"


@dataclass(frozen=True)
class Fp16:
    @property
    def name(self) -> str:
        return "FP16"


@dataclass(frozen=True)
class Int8:
    @property
    def name(self) -> str:
        return "INT8"


@dataclass(frozen=True)
class Svd:
    keep: float

    def __post_init__(self):
        if not 0.0 < self.keep <= 1.0:
            raise ValueError(f"SVD keep fraction must lie in (0, 1], got {self.keep}")

    @property
    def name(self) -> str:
        return f"SVD({self.keep:g})"


@dataclass(frozen=True)
class Nested:
    """``outer`` applied to the factors produced by ``inner`` (e.g. FP16 over SVD)."""

    outer: "CodecMethod"
    inner: "CodecMethod"

    def __post_init__(self):
        if not isinstance(self.inner, Svd) or not isinstance(self.outer, (Fp16, Int8)):
            raise ValueError(
                "nesting supports a quantizer (FP16/INT8) over SVD only, "
                f"got {self.outer!r} over {self.inner!r}"
            )

    @property
    def name(self) -> str:
        return f"{self.outer.name}({self.inner.name})"


@dataclass(frozen=True)
class TokenIds:
    """Unsigned 16-bit token ids; used for sampled tokens in the pre-training protocol."""

    @property
    def name(self) -> str:
        return "IDS16"


CodecMethod = Union[Identity, Fp16, Int8, Svd, Nested, TokenIds]

IDENTITY = Identity()
FP16 = Fp16()
INT8 = Int8()

_QUANT_CODES = {Fp16: 0x1, Int8: 0x2}
_METHOD_IDS = {Identity: 0x00, Fp16: 0x01, Int8: 0x02, Svd: 0x03, TokenIds: 0x05}


def nested(outer: CodecMethod, inner: CodecMethod) -> CodecMethod:
    """Compose two methods; Identity on either side is a unit."""
    if isinstance(outer, Identity):
        return inner
    if isinstance(inner, Identity):
        return outer
    return Nested(outer, inner)


def method_id(method: CodecMethod) -> int:
    if isinstance(method, Nested):
        return (_QUANT_CODES[type(method.outer)] << 4) | _METHOD_IDS[Svd]
    return _METHOD_IDS[type(method)]


_NAME_RE = re.compile(r"^(FP16|INT8)\((SVD\(([0-9.eE+-]+)\))\)$")


def parse_method(name: str) -> CodecMethod:
    """Inverse of ``method.name``; accepts e.g. ``FP16(SVD(0.6))``."""
    text = name.strip().upper().replace(" ", "")
    simple = {"IDENTITY": IDENTITY, "NONE": IDENTITY, "BASELINE": IDENTITY, "FP16": FP16, "INT8": INT8, "IDS16": TokenIds()}
    if text in simple:
        return simple[text]
    m = re.match(r"^SVD\(([0-9.eE+-]+)\)$", text)
    if m:
        return Svd(float(m.group(1)))
    m = _NAME_RE.match(text)
    if m:
        outer = FP16 if m.group(1) == "FP16" else INT8
        return Nested(outer, Svd(float(m.group(3))))
    raise ValueError(f"unknown codec method {name!r}")


# ---------------------------------------------------------------- payload


@dataclass(frozen=True)
class CompressedPayload:
    method_id: int
    shape: tuple[int, int]
    rank: int
    step: int
    body: bytes
    checksum: int
    value_bytes: int = field(compare=False)

    @property
    def byte_count(self) -> int:
        return len(self.body)

    @property
    def wire_bytes(self) -> int:
        return HEADER_SIZE + len(self.body)

    @property
    def overhead_bytes(self) -> int:
        """Header plus metadata bytes that are not tensor values."""
        return HEADER_SIZE + _metadata_bytes(self.method_id)

    @property
    def accounted_bytes(self) -> int:
        """Bytes charged to the link: tensor values at the 32-bit convention plus overhead."""
        return self.value_bytes + self.overhead_bytes

    @property
    def baseline_bytes(self) -> int:
        m, n = self.shape
        return BASELINE_BYTES_PER_ELEMENT * m * n

    @property
    def ratio(self) -> float:
        return self.value_bytes / self.baseline_bytes

    @property
    def nominal_ratio(self) -> float:
        """Element-count ratio (1.0, or the SVD factor ratio) ignoring precision."""
        m, n = self.shape
        if self.method_id & 0x0F == _METHOD_IDS[Svd]:
            return compression_ratio(m, n, self.rank)
        return 1.0

    @property
    def compressive(self) -> bool:
        return self.ratio < 1.0

    def to_bytes(self) -> bytes:
        m, n = self.shape
        head = _HEADER.pack(
            MAGIC, VERSION, self.method_id, m, n, self.rank, self.step, len(self.body), self.checksum
        )
        return head + self.body

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedPayload":
        if len(data) < HEADER_SIZE:
            raise ProtocolError(f"payload truncated: {len(data)} < {HEADER_SIZE} header bytes")
        magic, version, mid, m, n, r, step, blen, crc = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ProtocolError(f"bad payload magic {magic!r}")
        if version != VERSION:
            raise ProtocolError(f"unsupported payload version {version}")
        body = bytes(data[HEADER_SIZE:])
        if len(body) != blen:
            raise CorruptPayloadError(f"body length {len(body)} != declared {blen}")
        if mid not in _DECODERS:
            raise ProtocolError(f"unknown codec method id 0x{mid:02x}")
        return cls(mid, (m, n), r, step, body, crc, _value_bytes(mid, m, n, r))


def _metadata_bytes(mid: int) -> int:
    # int8 tensors carry one float64 scale per quantized tensor
    if mid == _METHOD_IDS[Int8]:
        return 8
    if mid == (_QUANT_CODES[Int8] << 4) | _METHOD_IDS[Svd]:
        return 24
    return 0


def _value_bytes(mid: int, m: int, n: int, r: int) -> int:
    if mid == _METHOD_IDS[TokenIds]:
        return 2 * m * n
    inner = mid & 0x0F
    quant = mid >> 4
    count = (m * r + r + r * n) if inner == _METHOD_IDS[Svd] else m * n
    if inner == _METHOD_IDS[Fp16] or quant == _QUANT_CODES[Fp16]:
        width = 2
    elif inner == _METHOD_IDS[Int8] or quant == _QUANT_CODES[Int8]:
        width = 1
    else:
        width = BASELINE_BYTES_PER_ELEMENT
    return count * width


def _make(mid: int, shape, rank: int, step: int, body: bytes) -> CompressedPayload:
    m, n = shape
    return CompressedPayload(mid, (m, n), rank, step, body, zlib.crc32(body), _value_bytes(mid, m, n, rank))


# ---------------------------------------------------------------- primitives


def _fp16_bytes(x: np.ndarray) -> bytes:
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if peak > FP16_MAX:
        raise Fp16OverflowError(
            f"magnitude {peak:.6g} exceeds the half-precision range ({FP16_MAX:g})"
        )
    return x.astype("<f2").tobytes()


def _int8_bytes(x: np.ndarray) -> bytes:
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    scale = peak / 127.0 if peak > 0 else 1.0
    q = np.clip(np.rint(x / scale), -127, 127).astype("<i1")
    return struct.pack("<d", scale) + q.tobytes()


def _read_int8(buf: bytes, offset: int, count: int) -> tuple[np.ndarray, int]:
    (scale,) = struct.unpack_from("<d", buf, offset)
    q = np.frombuffer(buf, dtype="<i1", count=count, offset=offset + 8)
    return q.astype(np.float64) * scale, offset + 8 + count


def encode_identity(X, step: int = 0) -> CompressedPayload:
    X = as_matrix(X)
    return _make(0x00, X.shape, 0, step, X.astype("<f8").tobytes())


def encode_fp16(X, step: int = 0) -> CompressedPayload:
    X = as_matrix(X)
    return _make(0x01, X.shape, 0, step, _fp16_bytes(X))


def encode_int8(X, step: int = 0) -> CompressedPayload:
    """Symmetric per-tensor INT8: scale = max|X| / 127, values in [-127, 127]."""
    X = as_matrix(X)
    return _make(0x02, X.shape, 0, step, _int8_bytes(X))


def _factors(X: np.ndarray, keep: float) -> TruncatedFactors:
    m, n = X.shape
    return truncate(svd(X), rank_for_fraction(m, n, keep))


def encode_svd(X, keep: float, step: int = 0) -> CompressedPayload:
    X = as_matrix(X)
    t = _factors(X, keep)
    body = b"".join(a.astype("<f8").tobytes() for a in (t.Ur, t.sigma_r, t.Vr))
    return _make(0x03, X.shape, t.r, step, body)


def _encode_nested(X: np.ndarray, method: Nested, step: int) -> CompressedPayload:
    t = _factors(X, method.inner.keep)
    quant = _fp16_bytes if isinstance(method.outer, Fp16) else _int8_bytes
    body = b"".join(quant(a) for a in (t.Ur, t.sigma_r, t.Vr))
    return _make(method_id(method), X.shape, t.r, step, body)


def encode_token_ids(ids, step: int = 0) -> CompressedPayload:
    a = np.asarray(ids)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"token ids must be a non-empty 1-D or 2-D array, got {a.shape}")
    if a.min() < 0 or a.max() > 0xFFFF:
        raise ValueError("token ids must fit in an unsigned 16-bit integer")
    return _make(0x05, a.shape, 0, step, a.astype("<u2").tobytes())


def encode(X, method: CodecMethod, step: int = 0) -> CompressedPayload:
    if isinstance(method, Identity):
        return encode_identity(X, step)
    if isinstance(method, Fp16):
        return encode_fp16(X, step)
    if isinstance(method, Int8):
        return encode_int8(X, step)
    if isinstance(method, Svd):
        return encode_svd(X, method.keep, step)
    if isinstance(method, Nested):
        return _encode_nested(as_matrix(X), method, step)
    if isinstance(method, TokenIds):
        return encode_token_ids(X, step)
    raise ProtocolError(f"unsupported codec method {method!r}")


# ---------------------------------------------------------------- decoding


def _dec_identity(p, m, n, r):
    return np.frombuffer(p.body, dtype="<f8").reshape(m, n).astype(np.float64)


def _dec_fp16(p, m, n, r):
    return np.frombuffer(p.body, dtype="<f2").reshape(m, n).astype(np.float64)


def _dec_int8(p, m, n, r):
    x, _ = _read_int8(p.body, 0, m * n)
    return x.reshape(m, n)


def _split_factors(arrays, m, n, r):
    u, s, v = arrays
    return reconstruct(TruncatedFactors(u.reshape(m, r), s, v.reshape(n, r)))


def _dec_svd(p, m, n, r):
    flat = np.frombuffer(p.body, dtype="<f8").astype(np.float64)
    return _split_factors((flat[: m * r], flat[m * r : m * r + r], flat[m * r + r :]), m, n, r)


def _dec_fp16_svd(p, m, n, r):
    flat = np.frombuffer(p.body, dtype="<f2").astype(np.float64)
    return _split_factors((flat[: m * r], flat[m * r : m * r + r], flat[m * r + r :]), m, n, r)


def _dec_int8_svd(p, m, n, r):
    u, off = _read_int8(p.body, 0, m * r)
    s, off = _read_int8(p.body, off, r)
    v, _ = _read_int8(p.body, off, n * r)
    return _split_factors((u, s, v), m, n, r)


def _dec_ids(p, m, n, r):
    return np.frombuffer(p.body, dtype="<u2").reshape(m, n).astype(np.int64)


_DECODERS = {
    0x00: _dec_identity,
    0x01: _dec_fp16,
    0x02: _dec_int8,
    0x03: _dec_svd,
    0x13: _dec_fp16_svd,
    0x23: _dec_int8_svd,
    0x05: _dec_ids,
}


def decode(p: CompressedPayload) -> np.ndarray:
    """Verify the checksum and invert the encoding stages in reverse order."""
    if zlib.crc32(p.body) != p.checksum:
        raise CorruptPayloadError(
            f"CRC-32 mismatch on {p.byte_count}-byte body "
            f"(expected {p.checksum:08x}, got {zlib.crc32(p.body):08x})"
        )
    dec = _DECODERS.get(p.method_id)
    if dec is None:
        raise ProtocolError(f"unknown codec method id 0x{p.method_id:02x}")
    m, n = p.shape
    if len(p.body) != _body_size(p.method_id, m, n, p.rank):
        raise ProtocolError(
            f"body of {len(p.body)} bytes does not match method 0x{p.method_id:02x} for {m}x{n} r={p.rank}"
        )
    return dec(p, m, n, p.rank)


def _body_size(mid: int, m: int, n: int, r: int) -> int:
    if mid == 0x00:
        return 8 * m * n
    if mid == 0x03:
        return 8 * (m * r + r + r * n)
    return _value_bytes(mid, m, n, r) + _metadata_bytes(mid)


# ---------------------------------------------------------------- schedules


@dataclass(frozen=True)
class CodecSchedule:
    """Forward/backward methods that switch on at ``start_step`` (Identity before)."""

    forward: CodecMethod = IDENTITY
    backward: CodecMethod = IDENTITY
    start_step: int = 0

    def __post_init__(self):
        if self.start_step < 0:
            raise ValueError(f"start_step must be >= 0, got {self.start_step}")

    @property
    def label(self) -> str:
        if isinstance(self.forward, Identity) and isinstance(self.backward, Identity):
            return "baseline"
        return f"{self.forward.name}+{self.backward.name}"


def select_method(schedule: CodecSchedule, step: int, direction: str) -> CodecMethod:
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    if step < schedule.start_step:
        return IDENTITY
    return schedule.forward if direction == "forward" else schedule.backward


def sweep_schedules(start_step: int = 0) -> list[CodecSchedule]:
    """Baseline, FP16+INT8 and FP16(SVD(rho))+INT8 for rho = 0.9 ... 0.2."""
    rows = [CodecSchedule(IDENTITY, IDENTITY, 0), CodecSchedule(FP16, INT8, start_step)]
    for tenth in range(9, 1, -1):
        rows.append(CodecSchedule(Nested(FP16, Svd(tenth / 10)), INT8, start_step))
    return rows
