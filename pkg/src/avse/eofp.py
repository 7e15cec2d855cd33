"""Exponent-only 4-bit quantization of real tensors, with a binary container.

Each 32-bit float (1 sign + 8 exponent + 23 mantissa bits) is reduced to a
4-bit code: 1 sign bit and 3 exponent bits, no mantissa.  A code therefore
represents a signed power of two; the compression ratio per element is
(1+8+23)/(1+3+0) = 8 exactly.

Code layout (one nibble)::

    bit 3   sign (1 = negative)
    bit 2..0  exponent index, 0..7

Three exponent bits cover only 8 octaves, so every encoded array carries an
*exponent window*: an integer ``base`` such that exponent index ``k`` means
the magnitude ``2**(base + k)``.  The window is anchored to the array's
largest magnitude (``base = floor(log2(max|v|)) - 7``), which maps the
maximum element to index 7 and preserves the top of the value distribution.

Quantization rules:

* ``x == 0`` or ``|x| < 2**base`` encodes as 0b0000 (flush to zero, sign
  dropped).
* Otherwise the mantissa is truncated to an implicit 1.0 and the exponent
  index is ``clamp(floor(log2|x|) - base, 0, 7)``.
* Code 0b0000 always decodes to exactly 0.0.  A consequence of reserving
  that code for zero is that a *positive* value in the window's bottom
  octave ``[2**base, 2**(base+1))`` also lands on 0b0000 and decodes to
  zero; ``-2**base`` (code 0b1000) survives.  All other in-window values
  round trip with sign intact and ``1 <= |x|/|decoded| < 2``.

Container format (little-endian)::

    offset  size  field
    0       4     magic "EOFP"
    4       1     version (1)
    5       1     rank
    6       4*r   dimension sizes, uint32 each
    6+4r    2     window base, int16
    8+4r    n/2   packed codes, two per byte, low nibble first,
                  rounded up; a trailing pad nibble must be zero

Quantization is defined against 32-bit floats: ``encode_array`` casts its
input to float32 before deriving the window or any code.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"EOFP"
VERSION = 1

_MAX_ELEMENTS = 1 << 40  # sanity bound on decoded tensor size


class CodecError(Exception):
    """Base class for quantizer and container errors."""


class WindowError(CodecError):
    """No exponent window can be derived (empty or all-zero input)."""


class ContainerError(CodecError):
    """Malformed serialized container."""


@dataclass(frozen=True)
class EofpFormat:
    """Bit budget of the code and of the source float layout."""

    sign_bits: int = 1
    exponent_bits: int = 3
    mantissa_bits: int = 0
    source_sign_bits: int = 1
    source_exponent_bits: int = 8
    source_mantissa_bits: int = 23

    def __post_init__(self):
        if self.sign_bits + self.exponent_bits + self.mantissa_bits != 4:
            raise ValueError("code must be exactly 4 bits")

    @property
    def code_bits(self) -> int:
        return self.sign_bits + self.exponent_bits + self.mantissa_bits

    @property
    def source_bits(self) -> int:
        return (self.source_sign_bits + self.source_exponent_bits
                + self.source_mantissa_bits)

    @property
    def ratio(self) -> float:
        """Per-element compression ratio, 32/4 = 8."""
        return self.source_bits / self.code_bits


FORMAT = EofpFormat()


@dataclass(frozen=True)
class ExponentWindow:
    """Power-of-two window: index k stands for the magnitude 2**(base+k)."""

    base: int

    @property
    def min_magnitude(self) -> float:
        return math.ldexp(1.0, self.base)

    @property
    def max_magnitude(self) -> float:
        return math.ldexp(1.0, self.base + 7)


@dataclass(frozen=True)
class EofpArray:
    """A quantized tensor: shape, exponent window, packed 4-bit codes."""

    shape: tuple[int, ...]
    window: ExponentWindow
    payload: bytes

    def __post_init__(self):
        expect = (self.count + 1) // 2
        if len(self.payload) != expect:
            raise ContainerError(
                f"payload holds {len(self.payload)} bytes, "
                f"shape {self.shape} needs {expect}")

    @property
    def count(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1


@dataclass(frozen=True)
class CompressionReport:
    """Size accounting for the two-stage visual compression chain."""

    r_ae: float
    r_qua: float
    r_comp: float
    input_bytes: int
    output_bytes: int


def choose_window(values) -> ExponentWindow:
    """Derive the exponent window anchored at the array's largest magnitude.

    ``base = floor(log2(max|v|)) - 7`` so the maximum-magnitude element maps
    to exponent index 7.  Raises WindowError for empty or all-zero input and
    ValueError for non-finite input.
    """
    v = np.asarray(values, dtype=np.float32)
    if v.size == 0:
        raise WindowError("empty input: no window derivable")
    if not np.isfinite(v).all():
        raise ValueError("non-finite values in input")
    peak = float(np.max(np.abs(v)))
    if peak == 0.0:
        raise WindowError("all-zero input: no window derivable")
    # frexp: |peak| = m * 2**e with m in [0.5, 1), so floor(log2) == e - 1
    _, e = math.frexp(peak)
    return ExponentWindow(base=e - 1 - 7)


def quantize_value(x: float, window: ExponentWindow) -> int:
    """Quantize one finite real to a 4-bit code under the given window."""
    if not math.isfinite(x):
        raise ValueError(f"cannot quantize non-finite value {x!r}")
    ax = abs(x)
    if ax < math.ldexp(1.0, window.base):  # covers x == 0
        return 0
    _, e = math.frexp(ax)
    eidx = min(max(e - 1 - window.base, 0), 7)
    return ((1 if x < 0 else 0) << 3) | eidx


def dequantize_value(code: int, window: ExponentWindow) -> float:
    """Decode a 4-bit code: 0b0000 is 0.0, else (-1)**sign * 2**(base+idx)."""
    code &= 0xF
    if code == 0:
        return 0.0
    mag = math.ldexp(1.0, window.base + (code & 0x7))
    return -mag if code & 0x8 else mag


def quantize_array(values, window: ExponentWindow) -> np.ndarray:
    """Vectorized quantize: float array -> uint8 code array (same shape)."""
    v = np.asarray(values, dtype=np.float32)
    if not np.isfinite(v).all():
        raise ValueError("non-finite values in input")
    x = v.astype(np.float64)
    ax = np.abs(x)
    _, e = np.frexp(ax)
    eidx = np.clip(e.astype(np.int64) - 1 - window.base, 0, 7)
    sign = (x < 0).astype(np.uint8) << 3
    codes = (sign | eidx.astype(np.uint8)).astype(np.uint8)
    codes[ax < math.ldexp(1.0, window.base)] = 0
    return codes


def dequantize_array(codes, window: ExponentWindow) -> np.ndarray:
    """Vectorized decode: uint8 code array -> float32 array (same shape)."""
    c = np.asarray(codes, dtype=np.uint8)
    mag = np.ldexp(1.0, window.base + (c & 0x7).astype(np.int64))
    out = np.where(c & 0x8, -mag, mag)
    out[c == 0] = 0.0
    return out.astype(np.float32)


def pack_codes(codes) -> bytes:
    """Pack 4-bit codes two per byte, low nibble first; odd tail pads zero."""
    c = np.ascontiguousarray(codes, dtype=np.uint8).ravel()
    if c.size % 2:
        c = np.concatenate([c, np.zeros(1, dtype=np.uint8)])
    packed = c[0::2] | (c[1::2] << 4)
    return packed.astype(np.uint8).tobytes()


def unpack_codes(payload: bytes, count: int) -> np.ndarray:
    """Inverse of pack_codes; validates length and a zero pad nibble."""
    expect = (count + 1) // 2
    if len(payload) != expect:
        raise ContainerError(
            f"payload holds {len(payload)} bytes, expected {expect}")
    b = np.frombuffer(payload, dtype=np.uint8)
    codes = np.empty(2 * len(b), dtype=np.uint8)
    codes[0::2] = b & 0x0F
    codes[1::2] = b >> 4
    if count % 2 and len(b) and codes[-1] != 0:
        raise ContainerError("nonzero pad nibble in final byte")
    return codes[:count]


def encode_array(values) -> EofpArray:
    """Quantize a finite tensor with at least one nonzero element."""
    v = np.asarray(values, dtype=np.float32)
    window = choose_window(v)
    codes = quantize_array(v, window)
    return EofpArray(shape=tuple(v.shape), window=window,
                     payload=pack_codes(codes))


def decode_array(arr: EofpArray) -> np.ndarray:
    """Decode a quantized tensor back to float32 values."""
    codes = unpack_codes(arr.payload, arr.count)
    return dequantize_array(codes, arr.window).reshape(arr.shape)


def roundtrip(values) -> np.ndarray:
    """encode_array followed by decode_array, without serialization."""
    return decode_array(encode_array(values))


def to_bytes(arr: EofpArray) -> bytes:
    """Serialize to the container format documented in the module docstring."""
    if not -32768 <= arr.window.base <= 32767:
        raise ContainerError(f"window base {arr.window.base} out of int16 range")
    if len(arr.shape) > 255:
        raise ContainerError("rank exceeds 255")
    head = MAGIC + struct.pack("<BB", VERSION, len(arr.shape))
    dims = struct.pack(f"<{len(arr.shape)}I", *arr.shape)
    base = struct.pack("<h", arr.window.base)
    return head + dims + base + arr.payload


def from_bytes(buf: bytes) -> EofpArray:
    """Parse a serialized container, validating every structural field."""
    if len(buf) < 6:
        raise ContainerError("truncated header")
    if buf[:4] != MAGIC:
        raise ContainerError(f"bad magic {buf[:4]!r}")
    version, rank = struct.unpack_from("<BB", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}")
    need = 6 + 4 * rank + 2
    if len(buf) < need:
        raise ContainerError("truncated shape header")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    count = int(np.prod(shape, dtype=np.float64)) if rank else 1
    if count > _MAX_ELEMENTS:
        raise ContainerError(f"implausible element count {count}")
    (base,) = struct.unpack_from("<h", buf, 6 + 4 * rank)
    payload = buf[need:]
    if len(payload) != (count + 1) // 2:
        raise ContainerError(
            f"payload holds {len(payload)} bytes, "
            f"shape {shape} needs {(count + 1) // 2}")
    return EofpArray(shape=tuple(shape), window=ExponentWindow(base),
                     payload=payload)


def encode_to_bytes(values) -> bytes:
    return to_bytes(encode_array(values))


def decode_from_bytes(buf: bytes) -> np.ndarray:
    return decode_array(from_bytes(buf))


def header_size(rank: int) -> int:
    """Container bytes preceding the payload for a tensor of given rank."""
    return 6 + 4 * rank + 2


def compression_report(lip_bytes: int, latent_count: int) -> CompressionReport:
    """Compression ratios for lip images of ``lip_bytes`` float32 payload
    reduced to ``latent_count`` 4-bit codes.

    r_ae compares float32 image bytes with float32 latent bytes; r_qua is
    the 32->4 bit reduction; r_comp is their product.
    """
    if lip_bytes <= 0 or latent_count <= 0:
        raise ValueError("byte and element counts must be positive")
    r_ae = lip_bytes / (latent_count * 4)
    r_qua = FORMAT.ratio
    return CompressionReport(
        r_ae=r_ae,
        r_qua=r_qua,
        r_comp=r_ae * r_qua,
        input_bytes=lip_bytes,
        output_bytes=(latent_count + 1) // 2,
    )
