"""Bit-exact scale-word codec and the per-layer integer-shift search.

A scale word is a small floating-point container ``SwExMy``: ``w`` sign
bits (0 or 1), ``x`` exponent bits, ``y`` mantissa bits, and
``m = b - w - x - y`` metabits in a ``b``-bit word.  Bit placement
(MSB to LSB): the sign occupies the top bit when present; with no sign
bit the top bit is the first metabit; exponent then mantissa fill the
middle; all remaining metabits sit at the LSB end.

Unlike element grids, every exponent code decodes to a finite value
(exponent field 0 is subnormal, nothing is reserved), so encode/decode is
a total bijection on the raw word.

Width conventions reproduced from the worked-example layouts:

* explicit ``S{w}E{x}M{y}`` names round ``w+x+y`` up to an {8, 12, 16}-bit
  container and turn the spare bits into metabits (``S1E5M4`` = 12 bits
  with 2 metabits);
* bare ``E..``/``UE..`` names at or below a byte are byte words with the
  slack as metabits (``UE4M3`` = 8 bits, 1 metabit); wider bare names are
  their natural width (``UE4M6`` = 10 bits, no metabits) and only pad to
  a half-byte-aligned container in deployed accounting.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels

__all__ = [
    "ScaleWordFormat",
    "ScaleWord",
    "LayerShift",
    "ScaleCodecError",
    "parse_scale_format",
    "encode_scale",
    "decode_scale",
    "f_layer_search",
    "pack_words",
    "unpack_words",
    "ALIGNED_CONTAINERS",
]

ALIGNED_CONTAINERS = (8, 12, 16)

_NAME_RE = re.compile(r"^(?:S(?P<w>[01])|(?P<u>U?))E(?P<x>\d+)M(?P<y>\d+)$")


class ScaleCodecError(ValueError):
    pass


def _align_up(bits: int) -> int:
    for c in ALIGNED_CONTAINERS:
        if bits <= c:
            return c
    raise ScaleCodecError(f"scale word of {bits} bits exceeds the largest container")


@dataclass(frozen=True)
class ScaleWordFormat:
    name: str
    w: int
    x: int
    y: int
    m: int

    def __post_init__(self):
        if self.x < 1:
            raise ScaleCodecError("scale format needs at least one exponent bit")
        if self.w not in (0, 1) or self.y < 0 or self.m < 0:
            raise ScaleCodecError(f"bad scale format fields in {self.name}")

    @property
    def bits(self) -> int:
        return self.w + self.x + self.y + self.m

    @property
    def deployed_bits(self) -> int:
        return _align_up(self.bits)

    @property
    def bias(self) -> int:
        return 2 ** (self.x - 1) - 1

    @property
    def signed(self) -> bool:
        return self.w == 1

    # -- field offsets (LSB bit positions) --------------------------------
    @property
    def _mant_shift(self) -> int:
        return self.m if self.w == 1 else max(self.m - 1, 0)

    @property
    def _exp_shift(self) -> int:
        return self._mant_shift + self.y

    def layout(self) -> str:
        """MSB-to-LSB layout string, 's'=sign, 'e'=exponent, 'm'=mantissa, 'u'=metabit."""
        bits = ["?"] * self.bits
        for i in range(self.y):
            bits[self._mant_shift + i] = "m"
        for i in range(self.x):
            bits[self._exp_shift + i] = "e"
        if self.w == 1:
            bits[self.bits - 1] = "s"
            for i in range(self.m):
                bits[i] = "u"
        else:
            if self.m >= 1:
                bits[self.bits - 1] = "u"
                for i in range(self.m - 1):
                    bits[i] = "u"
        return "".join(reversed(bits))

    # -- magnitude table ---------------------------------------------------
    @lru_cache(maxsize=None)
    def _magnitudes(self) -> np.ndarray:
        """Decoded magnitude of every (exponent, mantissa) code, ascending."""
        e = np.arange(2**self.x)
        f = np.arange(2**self.y) if self.y else np.zeros(1)
        ee, ff = np.meshgrid(e, f, indexing="ij")
        mags = np.where(
            ee == 0,
            ff * 2.0 ** float(1 - self.bias - self.y),
            (2**self.y + ff) * 2.0 ** (ee.astype(np.float64) - self.bias - self.y),
        )
        return mags.ravel()

    @property
    def min_normal(self) -> float:
        return 2.0 ** (1 - self.bias)

    @property
    def max_value(self) -> float:
        return float(self._magnitudes()[-1])

    @property
    def metabit_capacity(self) -> int:
        """Bits available for per-block metadata: metabits plus a sign bit."""
        return self.m + self.w

    def __str__(self) -> str:
        return self.name


@lru_cache(maxsize=None)
def parse_scale_format(name: str) -> ScaleWordFormat:
    mo = _NAME_RE.match(name)
    if mo is None:
        raise ScaleCodecError(f"unrecognized scale format name {name!r}")
    x, y = int(mo.group("x")), int(mo.group("y"))
    if mo.group("w") is not None:
        w = int(mo.group("w"))
        body = w + x + y
        m = _align_up(body) - body
    else:
        w = 0 if mo.group("u") == "U" else 1
        body = w + x + y
        if body <= 8:
            m = 8 - body
        elif body <= 16:
            m = 0
        else:
            raise ScaleCodecError(f"scale format {name!r} wider than 16 bits")
    return ScaleWordFormat(name=name, w=w, x=x, y=y, m=m)


@dataclass(frozen=True)
class ScaleWord:
    """One encoded scale word plus its decoded view."""

    raw: int
    fmt: ScaleWordFormat
    sign: int  # +1 / -1
    magnitude: float
    metabits: int
    saturated: bool = False

    @property
    def value(self) -> float:
        return self.sign * self.magnitude


@dataclass(frozen=True)
class LayerShift:
    """Per-layer power-of-two pre-shift; dequantization multiplies by 2^-k."""

    k_star: int


def _split_meta(fmt: ScaleWordFormat, raw: int) -> int:
    if fmt.m == 0:
        return 0
    if fmt.w == 1:
        return raw & ((1 << fmt.m) - 1)
    top = (raw >> (fmt.bits - 1)) & 1
    low = raw & ((1 << (fmt.m - 1)) - 1) if fmt.m > 1 else 0
    return (top << (fmt.m - 1)) | low


def _merge_meta(fmt: ScaleWordFormat, meta: int) -> int:
    if fmt.m == 0:
        return 0
    if fmt.w == 1:
        return meta
    top = (meta >> (fmt.m - 1)) & 1
    low = meta & ((1 << (fmt.m - 1)) - 1) if fmt.m > 1 else 0
    return (top << (fmt.bits - 1)) | low


def encode_scale(s: float, meta: int, fmt: ScaleWordFormat) -> ScaleWord:
    """Round a scale to the format and assemble the word.

    Magnitude rounds half-to-even over the representable set (subnormals
    included) and clamps at the format max, flagged in ``saturated``.
    """
    if not (0 <= meta < (1 << fmt.m)):
        raise ScaleCodecError(f"metabits value {meta} does not fit {fmt.m} metabit(s)")
    if not np.isfinite(s):
        raise ScaleCodecError("scale must be finite")
    if s < 0 and fmt.w == 0:
        raise ScaleCodecError(f"negative scale into unsigned format {fmt.name}")
    mags = fmt._magnitudes()
    code = int(_kernels.nearest_index(np.array([abs(s)]), mags)[0])
    saturated = abs(s) > mags[-1]
    sign_bit = 1 if (s < 0 or (s == 0 and np.signbit(s))) and fmt.w == 1 else 0
    raw = (
        (sign_bit << (fmt.bits - 1) if fmt.w == 1 else 0)
        | (code << fmt._mant_shift)
        | _merge_meta(fmt, meta)
    )
    return ScaleWord(
        raw=raw,
        fmt=fmt,
        sign=-1 if sign_bit else 1,
        magnitude=float(mags[code]),
        metabits=meta,
        saturated=bool(saturated),
    )


def decode_scale(raw: int, fmt: ScaleWordFormat) -> ScaleWord:
    if raw < 0 or raw >= (1 << fmt.bits):
        raise ScaleCodecError(f"raw word {raw:#x} out of range for {fmt.bits}-bit format")
    code = (raw >> fmt._mant_shift) & ((1 << (fmt.x + fmt.y)) - 1)
    sign_bit = (raw >> (fmt.bits - 1)) & 1 if fmt.w == 1 else 0
    return ScaleWord(
        raw=raw,
        fmt=fmt,
        sign=-1 if sign_bit else 1,
        magnitude=float(fmt._magnitudes()[code]),
        metabits=_split_meta(fmt, raw),
    )


def reencode(word: ScaleWord) -> int:
    """Assemble the raw word from decoded fields (bijection check helper)."""
    fmt = word.fmt
    mags = fmt._magnitudes()
    code = int(np.searchsorted(mags, word.magnitude))
    # subnormal zero and e=1..: magnitudes are strictly increasing, so the
    # searchsorted hit is the exact code
    sign_bit = 1 if (word.sign < 0 and fmt.w == 1) else 0
    return (
        (sign_bit << (fmt.bits - 1) if fmt.w == 1 else 0)
        | (code << fmt._mant_shift)
        | _merge_meta(fmt, word.metabits)
    )


def f_layer_search(block_scales, fmt: ScaleWordFormat, k_range=(-32, 32)) -> LayerShift:
    """Integer shift k* maximizing the count of scales in the normal range.

    Ties break toward the smallest |k|, then the smaller k.  Scales must
    be positive.
    """
    scales = np.abs(np.asarray(block_scales, dtype=np.float64)).ravel()
    scales = scales[scales > 0]
    if scales.size == 0:
        raise ScaleCodecError("f_layer_search needs at least one non-zero scale")
    lo, hi = fmt.min_normal, fmt.max_value
    best_k = None
    best_count = -1
    for k in range(int(k_range[0]), int(k_range[1]) + 1):
        shifted = scales * 2.0**k
        count = int(np.count_nonzero((shifted >= lo) & (shifted <= hi)))
        if (
            count > best_count
            or (count == best_count and abs(k) < abs(best_k))
            or (count == best_count and abs(k) == abs(best_k) and k < best_k)
        ):
            best_count = count
            best_k = k
    return LayerShift(k_star=int(best_k))


# ---------------------------------------------------------------------------
# stream packing
# ---------------------------------------------------------------------------


def pack_words(raws, width: int) -> bytes:
    """Pack raw words into bytes: 8-bit words byte-per-word, 16-bit as
    little-endian pairs, 12-bit as two words per 3 bytes with the first
    word in the low 12 bits."""
    raws = [int(r) for r in raws]
    if width == 8:
        return bytes(raws)
    if width == 16:
        out = bytearray()
        for r in raws:
            out += r.to_bytes(2, "little")
        return bytes(out)
    if width == 12:
        out = bytearray()
        for i in range(0, len(raws), 2):
            v = raws[i] | ((raws[i + 1] if i + 1 < len(raws) else 0) << 12)
            out += v.to_bytes(3, "little")
        return bytes(out)
    raise ScaleCodecError(f"unsupported stream width {width}")


def unpack_words(data: bytes, width: int, count: int) -> list[int]:
    if width == 8:
        return [data[i] for i in range(count)]
    if width == 16:
        return [int.from_bytes(data[2 * i : 2 * i + 2], "little") for i in range(count)]
    if width == 12:
        out = []
        for i in range(count):
            group = int.from_bytes(data[3 * (i // 2) : 3 * (i // 2) + 3], "little")
            out.append((group >> 12) & 0xFFF if i % 2 else group & 0xFFF)
        return out
    raise ScaleCodecError(f"unsupported stream width {width}")
