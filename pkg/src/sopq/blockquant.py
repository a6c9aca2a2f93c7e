"""Block-scaled quantization: scaling rules, LUT placement, the packed
layer blob, and exact reconstruction.

A layer is quantized per block of ``g`` consecutive elements along the
contracted dimension.  Each block gets one scale word; elements are
rounded onto the reconstruction table (a hosted codebook or the raw
element grid) in the scaled domain.  The scale itself is quantized
*before* elements are rounded, so rounding targets exactly what the
decoder will reconstruct.

Scaling rules:

* ``absmax``: s = max(max(x)/t+, max(-x)/(-t-)), non-negative; no value
  saturates.  With symmetric endpoints this is max|x| / t+.
* ``argmax``: the dominant excursion maps exactly onto the
  larger-magnitude endpoint; the scale is signed.

The per-layer shift k* (found by ``scalewords.f_layer_search``) centers
block scales in the scale format's normal range; reconstruction undoes it
by 2^-k*.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .atoms import Atom
from .grids import ElementGrid, hosting_report
from .scalewords import (
    ScaleWordFormat,
    f_layer_search,
    pack_words,
    parse_scale_format,
    unpack_words,
)

__all__ = [
    "BlockQuantConfig",
    "QuantizedLayer",
    "OutlierStream",
    "ResidualStream",
    "QuantizeError",
    "absmax_scale",
    "argmax_scale",
    "normalize_lut_for_lfmt",
    "place_atom",
    "quantize_layer",
    "reconstruct",
    "serialize_layer",
    "deserialize_layer",
    "pack_bits",
    "unpack_bits",
    "to_bf16_bits",
    "from_bf16_bits",
]

BLOB_MAGIC = b"SOPQ1"


class QuantizeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scaling rules
# ---------------------------------------------------------------------------


def absmax_scale(block, t_plus: float, t_minus: float) -> float:
    """Non-negative scale such that no value in the block saturates."""
    block = np.asarray(block, dtype=np.float64)
    if block.size == 0:
        raise QuantizeError("empty block")
    hi = float(block.max())
    lo = float(block.min())
    s = max(hi / t_plus, lo / t_minus)  # == max(max(x)/t+, max(-x)/(-t-))
    return max(s, 0.0)


def argmax_scale(block, t_plus: float, t_minus: float) -> float:
    """Signed scale mapping the dominant excursion exactly onto the
    larger-magnitude endpoint."""
    block = np.asarray(block, dtype=np.float64)
    if block.size == 0:
        raise QuantizeError("empty block")
    r_star = int(np.argmax(np.abs(block)))
    x_star = float(block[r_star])
    t_star = t_plus if abs(t_plus) >= abs(t_minus) else t_minus
    return x_star / t_star


def _absmax_scales(blocks: np.ndarray, t_plus: float, t_minus: float) -> np.ndarray:
    s = np.maximum(blocks.max(axis=-1) / t_plus, blocks.min(axis=-1) / t_minus)
    return np.maximum(s, 0.0)


def _argmax_scales(blocks: np.ndarray, t_plus: float, t_minus: float) -> np.ndarray:
    idx = np.argmax(np.abs(blocks), axis=-1)
    x_star = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    t_star = t_plus if abs(t_plus) >= abs(t_minus) else t_minus
    return x_star / t_star


# ---------------------------------------------------------------------------
# LUT placement in a hosting grid
# ---------------------------------------------------------------------------


def _exp2_floor(v: float) -> int:
    # frexp gives v = m * 2^e with m in [0.5, 1), so floor(log2 |v|) = e - 1
    _, e = math.frexp(abs(v))
    return e - 1


def normalize_lut_for_lfmt(values, lfmt: ElementGrid, snap: bool = True) -> np.ndarray:
    """Pin the table's smallest non-zero magnitude at the grid's smallest
    normal exponent: multiply by 2^((2 - 2^(x-1)) - exp(l_min)), then snap
    every value onto the grid.

    The multiplier recovers the precision below the naive full-range
    normalization; tables whose dynamic range exceeds the grid's normal
    capacity will overflow the top and clamp on snap (callers host those
    via ``place_atom``, which pins the max instead).
    """
    vals = np.asarray(values, dtype=np.float64)
    nz = np.abs(vals[vals != 0])
    if nz.size == 0:
        raise QuantizeError("cannot place an all-zero table")
    if lfmt.spec.kind != "exmy":
        raise QuantizeError("exponent-pinned placement is defined for exmy grids")
    x = lfmt.spec.x
    smallest_normal_exp = 2 - 2 ** (x - 1)
    delta = smallest_normal_exp - _exp2_floor(nz.min())
    placed = vals * 2.0**delta
    if snap:
        placed = lfmt.values[_kernels.nearest_index(placed, lfmt.values)]
    return placed


def place_atom(atom: Atom, lfmt: ElementGrid | None) -> np.ndarray:
    """Host an atom's values in a grid, choosing placement by hosting class.

    native: pin the smallest magnitude at the smallest normal exponent;
    subnormal / unhostable: pin the largest magnitude into the top binade
    (the bottom falls into subnormals or clamps, and the loss registers in
    reconstruction quality).  Grid-aligned (fitted) atoms pass through.
    """
    if lfmt is None or atom.grid_aligned:
        return atom.values.copy()
    report = hosting_report(atom.values, lfmt)
    vals = atom.values
    nz = np.abs(vals[vals != 0])
    if report.hosting_class == "native" and lfmt.spec.kind == "exmy":
        placed = normalize_lut_for_lfmt(vals, lfmt, snap=False)
    else:
        # ceiling placement: largest power-of-two multiple keeping both
        # endpoints inside the grid
        delta = math.floor(math.log2(lfmt.t_plus / nz.max()))
        if vals.min() < 0 and lfmt.t_minus < 0:
            delta = min(delta, math.floor(math.log2(lfmt.t_minus / vals.min())))
        placed = vals * 2.0**delta
    return lfmt.values[_kernels.nearest_index(placed, lfmt.values)]


# ---------------------------------------------------------------------------
# correction streams
# ---------------------------------------------------------------------------


def to_bf16_bits(values) -> np.ndarray:
    """Round float values to bfloat16, returned as the raw high-16 bits."""
    u = np.asarray(values, dtype=np.float32).view(np.uint32)
    rounded = (u + 0x7FFF + ((u >> 16) & 1)) >> 16
    return rounded.astype(np.uint16)


def from_bf16_bits(bits) -> np.ndarray:
    u = np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16
    return u.view(np.float32).astype(np.float64)


@dataclass(frozen=True)
class OutlierStream:
    """Exact-valued escapes from the codebook path: positions whose
    magnitude exceeded m sigma of their block, stored as bf16 and zeroed
    before codebook fitting.  Reconstruction writes the stored value back."""

    rows: np.ndarray  # int32
    cols: np.ndarray  # int32
    values_bf16: np.ndarray  # uint16
    threshold: float
    quantile: float | None = None
    max_order: int | None = None

    @property
    def count(self) -> int:
        return len(self.rows)

    def values(self) -> np.ndarray:
        return from_bf16_bits(self.values_bf16)

    def bpw(self, n_elems: int) -> float:
        return 32.0 * self.count / n_elems


@dataclass(frozen=True)
class ResidualStream:
    """Sparse activation-weighted residual correction: top entries of
    |W - What| * c stored as an 8-bit exponent/mantissa code under a
    stream-level power-of-two shift.  Reconstruction adds the decoded
    values."""

    rows: np.ndarray
    cols: np.ndarray
    codes: np.ndarray  # uint8, E3M4 codec words
    k_shift: int
    sigma: float

    @property
    def count(self) -> int:
        return len(self.rows)

    def values(self) -> np.ndarray:
        from .corrections import decode_residual_values

        return decode_residual_values(self.codes, self.k_shift)

    def bpw(self, n_elems: int) -> float:
        return 32.0 * self.count / n_elems


# ---------------------------------------------------------------------------
# layer quantization
# ---------------------------------------------------------------------------


@dataclass
class BlockQuantConfig:
    """Resolved parameters for quantizing one layer.

    ``tables`` holds one reconstruction table, or two for pair formats
    (selection rides in the scale word's metabits).  ``assignments`` and
    ``sign_flips`` are per-(row, block) and normally come from the pair
    search; both default to table 0 / no flip.
    """

    format_text: str
    g: int
    tables: tuple
    sfmt: ScaleWordFormat | None = None
    rule: str = "absmax"
    assignments: np.ndarray | None = None
    sign_flips: np.ndarray | None = None
    sign_in_metabit: bool = True
    k_range: tuple = (-32, 32)

    def __post_init__(self):
        if self.rule not in ("absmax", "argmax"):
            raise QuantizeError(f"unknown scaling rule {self.rule!r}")
        if self.g not in (0, 8, 16, 32):
            raise QuantizeError(f"inadmissible block size {self.g}")
        if not self.tables:
            raise QuantizeError("need at least one reconstruction table")
        self.tables = tuple(np.sort(np.asarray(t, dtype=np.float64)) for t in self.tables)

    @property
    def is_pair(self) -> bool:
        return len(self.tables) > 1

    def sign_mode(self) -> str:
        """Where the per-block scale sign lives: scale word sign bit, a
        metabit, or nowhere (non-negative scales only)."""
        needs_sign = self.rule == "argmax" or self.sign_flips is not None
        if self.sfmt is None:
            if needs_sign:
                raise QuantizeError("signed scales need a scale format")
            return "none"
        if self.sfmt.signed:
            return "scale"
        if not needs_sign:
            return "none"
        meta_needed = 1 + (1 if self.is_pair else 0)
        if self.sign_in_metabit and self.sfmt.m >= meta_needed:
            return "metabit"
        raise QuantizeError(
            f"scale format {self.sfmt.name} cannot carry a scale sign "
            f"(unsigned, {self.sfmt.m} metabit(s))"
        )


@dataclass
class QuantizedLayer:
    format_text: str
    shape: tuple
    g: int
    k_star: int
    sfmt_name: str | None
    rule: str
    sign_mode: str
    tables: tuple
    scale_raws: np.ndarray  # (M, NB) uint32
    codes: np.ndarray  # (M, K_padded) int16 table indices
    outliers: OutlierStream | None = None
    residuals: ResidualStream | None = None
    saturation_count: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_blocks(self) -> int:
        return self.scale_raws.size

    @property
    def code_bits(self) -> int:
        return max(1, int(np.ceil(np.log2(max(len(t) for t in self.tables)))))

    def stored_bits(self) -> dict:
        """Exact stream sizes in bits, plus the amortized-convention totals
        used in bpw reports (32 bits per correction entry)."""
        m, k = self.shape
        n = m * k
        scale_width = parse_scale_format(self.sfmt_name).deployed_bits if self.sfmt_name else 0
        out = {
            "codes": int(self.codes.size) * self.code_bits,
            "scales": int(self.scale_raws.size) * scale_width,
            "outliers": 32 * (self.outliers.count if self.outliers else 0),
            "residuals": 32 * (self.residuals.count if self.residuals else 0),
            "elements": n,
        }
        out["total"] = out["codes"] + out["scales"] + out["outliers"] + out["residuals"]
        return out


def _blocks_view(W: np.ndarray, g: int) -> tuple[np.ndarray, int]:
    """Pad the contracted dim to a block multiple and reshape to
    (rows, n_blocks, g).  g == 0 treats the whole tensor as one block."""
    m, k = W.shape
    if g == 0:
        return W.reshape(1, 1, m * k), m * k
    pad = (-k) % g
    if pad:
        W = np.concatenate([W, np.zeros((m, pad))], axis=1)
    return W.reshape(m, (k + pad) // g, g), g


def _meta_value(selector, sign_neg, mode, is_pair):
    meta = np.zeros_like(selector)
    if mode == "metabit":
        meta = sign_neg.astype(np.int64)
        if is_pair:
            meta |= selector.astype(np.int64) << 1
    elif is_pair:
        meta = selector.astype(np.int64)
    return meta


def _meta_split(meta, mode, is_pair):
    if mode == "metabit":
        sign_neg = meta & 1
        selector = (meta >> 1) & 1 if is_pair else np.zeros_like(meta)
    else:
        sign_neg = np.zeros_like(meta)
        selector = meta & 1 if is_pair else np.zeros_like(meta)
    return selector, sign_neg


def quantize_layer(W, cfg: BlockQuantConfig) -> QuantizedLayer:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise QuantizeError("expected a 2-D weight tensor")
    if not np.all(np.isfinite(W)):
        bad = np.argwhere(~np.isfinite(W))[0]
        raise QuantizeError(f"non-finite weight at {tuple(int(i) for i in bad)}")
    if cfg.sfmt is None:
        raise QuantizeError(
            "layer quantization needs a scale format; formats without an "
            "explicit one resolve to a per-layer power-of-two scale upstream"
        )
    mode = cfg.sign_mode()

    blocks, g_eff = _blocks_view(W, cfg.g)
    m_rows, nb, _ = blocks.shape

    table0 = cfg.tables[0]
    selector = (
        np.zeros((m_rows, nb), dtype=np.int64)
        if cfg.assignments is None
        else np.asarray(cfg.assignments, dtype=np.int64).reshape(m_rows, nb)
    )
    flips = (
        np.ones((m_rows, nb))
        if cfg.sign_flips is None
        else np.where(np.asarray(cfg.sign_flips).reshape(m_rows, nb), -1.0, 1.0)
    )

    # raw scales per block against the assigned table's endpoints
    s_raw = np.zeros((m_rows, nb))
    for ti, tab in enumerate(cfg.tables):
        mask = selector == ti
        if not mask.any():
            continue
        t_plus, t_minus = float(tab[-1]), float(tab[0])
        if cfg.rule == "absmax":
            s = _absmax_scales(blocks, t_plus, t_minus)
        else:
            s = _argmax_scales(blocks, t_plus, t_minus)
        s_raw[mask] = s[mask]
    s_raw = s_raw * flips

    fmt = cfg.sfmt
    nonzero = np.abs(s_raw[s_raw != 0])
    k_star = f_layer_search(nonzero, fmt, cfg.k_range).k_star if nonzero.size else 0
    shifted = np.abs(s_raw) * 2.0**k_star
    mags = fmt._magnitudes()
    mag_codes = _kernels.nearest_index(shifted, mags)
    mag_codes[s_raw == 0] = 0
    sat = int(np.count_nonzero(shifted > mags[-1]))
    sign_neg = s_raw < 0
    meta = _meta_value(selector, sign_neg, mode, cfg.is_pair)
    raw = (mag_codes.astype(np.int64) << fmt._mant_shift) | _merge_meta_arr(fmt, meta)
    if mode == "scale":
        raw |= sign_neg.astype(np.int64) << (fmt.bits - 1)
    scale_raws = raw.astype(np.uint32)
    dec_mag = mags[mag_codes]
    sign = np.where(sign_neg, -1.0, 1.0) if mode in ("scale", "metabit") else 1.0
    s_eff = sign * dec_mag * 2.0 ** (-k_star)

    # element codes against the decoded scale
    codes = np.zeros(blocks.shape, dtype=np.int32)
    safe = np.where(s_eff == 0, 1.0, s_eff)
    u = blocks / safe[:, :, None]
    for ti, tab in enumerate(cfg.tables):
        mask = selector == ti
        if not mask.any():
            continue
        idx = _kernels.nearest_index(u[mask], tab)
        codes[mask] = idx.astype(np.int32)
    codes[s_eff == 0] = 0

    return QuantizedLayer(
        format_text=cfg.format_text,
        shape=tuple(W.shape),
        g=cfg.g,
        k_star=int(k_star),
        sfmt_name=cfg.sfmt.name if cfg.sfmt else None,
        rule=cfg.rule,
        sign_mode=mode,
        tables=cfg.tables,
        scale_raws=scale_raws,
        codes=codes.reshape(m_rows, nb * g_eff),
        saturation_count=sat,
        meta={"selector_histogram": np.bincount(selector.ravel(), minlength=len(cfg.tables)).tolist()},
    )


def _merge_meta_arr(fmt: ScaleWordFormat, meta: np.ndarray) -> np.ndarray:
    if fmt.m == 0:
        return np.zeros_like(meta)
    if fmt.w == 1:
        return meta
    top = (meta >> (fmt.m - 1)) & 1
    low = meta & ((1 << (fmt.m - 1)) - 1) if fmt.m > 1 else np.zeros_like(meta)
    return (top << (fmt.bits - 1)) | low


def _split_meta_arr(fmt: ScaleWordFormat, raw: np.ndarray) -> np.ndarray:
    if fmt.m == 0:
        return np.zeros_like(raw)
    if fmt.w == 1:
        return raw & ((1 << fmt.m) - 1)
    top = (raw >> (fmt.bits - 1)) & 1
    low = raw & ((1 << (fmt.m - 1)) - 1) if fmt.m > 1 else np.zeros_like(raw)
    return (top << (fmt.m - 1)) | low


def reconstruct(layer: QuantizedLayer) -> np.ndarray:
    """Invert the stored streams exactly: decode scales, look up codes,
    write back outliers, add residuals."""
    m, k = layer.shape
    g = layer.g
    nb = layer.scale_raws.shape[1]
    g_eff = g if g else m * k
    codes = layer.codes.reshape(layer.scale_raws.shape[0], nb, g_eff)

    if layer.sfmt_name is None:
        raise QuantizeError("layer carries no scale stream; cannot reconstruct")
    fmt = parse_scale_format(layer.sfmt_name)
    raw = layer.scale_raws.astype(np.int64)
    mag_codes = (raw >> fmt._mant_shift) & ((1 << (fmt.x + fmt.y)) - 1)
    mags = fmt._magnitudes()[mag_codes]
    meta = _split_meta_arr(fmt, raw)
    selector, meta_sign = _meta_split(meta, layer.sign_mode, len(layer.tables) > 1)
    if layer.sign_mode == "scale":
        sign = np.where((raw >> (fmt.bits - 1)) & 1, -1.0, 1.0)
    elif layer.sign_mode == "metabit":
        sign = np.where(meta_sign, -1.0, 1.0)
    else:
        sign = 1.0
    s_eff = sign * mags * 2.0 ** (-layer.k_star)

    out = np.zeros_like(codes, dtype=np.float64)
    for ti, tab in enumerate(layer.tables):
        mask = selector == ti
        if not mask.any():
            continue
        out[mask] = tab[codes[mask]]
    out = out * s_eff[:, :, None]
    out[mags == 0] = 0.0  # zero-scale sentinel overrides codes

    if g == 0:
        W_hat = out.reshape(m, k)
    else:
        W_hat = out.reshape(out.shape[0], -1)[:, :k]

    if layer.outliers is not None and layer.outliers.count:
        W_hat[layer.outliers.rows, layer.outliers.cols] = layer.outliers.values()
    if layer.residuals is not None and layer.residuals.count:
        np.add.at(W_hat, (layer.residuals.rows, layer.residuals.cols), layer.residuals.values())
    return W_hat


# ---------------------------------------------------------------------------
# bit packing and the layer blob
# ---------------------------------------------------------------------------


def pack_bits(codes, width: int) -> bytes:
    """Little-endian bit packing: code i occupies bits [i*width, (i+1)*width),
    bit j of the stream is bit j%8 of byte j//8 (4-bit codes: element 0 in
    the low nibble of byte 0)."""
    codes = np.asarray(codes, dtype=np.int64).ravel()
    total = len(codes) * width
    out = np.zeros((total + 7) // 8, dtype=np.uint8)
    pos = np.arange(len(codes), dtype=np.int64) * width
    for b in range(width):
        p = pos + b
        np.bitwise_or.at(out, p // 8, ((codes >> b) & 1).astype(np.uint8) << (p % 8))
    return out.tobytes()


def unpack_bits(data: bytes, width: int, count: int) -> np.ndarray:
    arr = np.frombuffer(data, dtype=np.uint8)
    pos = np.arange(count, dtype=np.int64) * width
    out = np.zeros(count, dtype=np.int64)
    for b in range(width):
        p = pos + b
        out |= ((arr[p // 8] >> (p % 8)) & 1).astype(np.int64) << b
    return out


def serialize_layer(layer: QuantizedLayer) -> bytes:
    fmt = parse_scale_format(layer.sfmt_name) if layer.sfmt_name else None
    scale_width = fmt.deployed_bits if fmt else 8
    code_bits = layer.code_bits

    streams: list[tuple[str, bytes]] = []
    streams.append(
        ("tables", b"".join(np.asarray(t, dtype="<f8").tobytes() for t in layer.tables))
    )
    streams.append(("scales", pack_words(layer.scale_raws.ravel().tolist(), scale_width)))
    streams.append(("codes", pack_bits(layer.codes, code_bits)))
    if layer.outliers is not None:
        o = layer.outliers
        body = bytearray()
        body += np.uint32(o.count).tobytes()
        body += np.asarray(o.rows, dtype="<u2").tobytes()
        body += np.asarray(o.cols, dtype="<u2").tobytes()
        body += np.asarray(o.values_bf16, dtype="<u2").tobytes()
        streams.append(("outliers", bytes(body)))
    if layer.residuals is not None:
        r = layer.residuals
        body = bytearray()
        body += np.uint32(r.count).tobytes()
        body += np.int32(r.k_shift).tobytes()
        body += np.asarray(r.rows, dtype="<u2").tobytes()
        body += np.asarray(r.cols, dtype="<u2").tobytes()
        body += np.asarray(r.codes, dtype="<u1").tobytes()
        streams.append(("residuals", bytes(body)))

    offsets = {}
    off = 0
    for name, body in streams:
        offsets[name] = [off, len(body)]
        off += len(body)
    header = {
        "format": layer.format_text,
        "shape": list(layer.shape),
        "g": layer.g,
        "k_star": layer.k_star,
        "sfmt": layer.sfmt_name,
        "rule": layer.rule,
        "sign_mode": layer.sign_mode,
        "n_tables": len(layer.tables),
        "table_sizes": [len(t) for t in layer.tables],
        "code_bits": code_bits,
        "code_count": int(layer.codes.size),
        "scale_width": scale_width,
        "scale_shape": list(layer.scale_raws.shape),
        "saturation_count": layer.saturation_count,
        "outlier_params": (
            [layer.outliers.threshold, layer.outliers.quantile, layer.outliers.max_order]
            if layer.outliers is not None
            else None
        ),
        "residual_sigma": layer.residuals.sigma if layer.residuals is not None else None,
        "streams": offsets,
        "meta": layer.meta,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = bytearray()
    blob += BLOB_MAGIC
    blob += np.uint32(len(hdr)).tobytes()
    blob += hdr
    for _, body in streams:
        blob += body
    return bytes(blob)


def deserialize_layer(data: bytes) -> QuantizedLayer:
    if data[:5] != BLOB_MAGIC:
        raise QuantizeError("bad magic; not a quantized-layer blob")
    hlen = int(np.frombuffer(data[5:9], dtype=np.uint32)[0])
    header = json.loads(data[9 : 9 + hlen].decode())
    payload = data[9 + hlen :]

    def stream(name):
        off, ln = header["streams"][name]
        return payload[off : off + ln]

    tables = []
    tbytes = stream("tables")
    pos = 0
    for size in header["table_sizes"]:
        tables.append(np.frombuffer(tbytes[pos : pos + 8 * size], dtype="<f8").copy())
        pos += 8 * size
    scale_shape = tuple(header["scale_shape"])
    raws = np.array(
        unpack_words(stream("scales"), header["scale_width"], int(np.prod(scale_shape))),
        dtype=np.uint32,
    ).reshape(scale_shape)
    codes = unpack_bits(stream("codes"), header["code_bits"], header["code_count"]).astype(
        np.int32
    )
    codes = codes.reshape(scale_shape[0], -1)

    outliers = None
    if "outliers" in header["streams"]:
        body = stream("outliers")
        count = int(np.frombuffer(body[:4], dtype=np.uint32)[0])
        rows = np.frombuffer(body[4 : 4 + 2 * count], dtype="<u2").astype(np.int32)
        cols = np.frombuffer(body[4 + 2 * count : 4 + 4 * count], dtype="<u2").astype(np.int32)
        vals = np.frombuffer(body[4 + 4 * count : 4 + 6 * count], dtype="<u2").copy()
        thr, q, mo = header["outlier_params"]
        outliers = OutlierStream(
            rows=rows, cols=cols, values_bf16=vals, threshold=thr, quantile=q, max_order=mo
        )
    residuals = None
    if "residuals" in header["streams"]:
        body = stream("residuals")
        count = int(np.frombuffer(body[:4], dtype=np.uint32)[0])
        k_shift = int(np.frombuffer(body[4:8], dtype=np.int32)[0])
        rows = np.frombuffer(body[8 : 8 + 2 * count], dtype="<u2").astype(np.int32)
        cols = np.frombuffer(body[8 + 2 * count : 8 + 4 * count], dtype="<u2").astype(np.int32)
        codes_r = np.frombuffer(body[8 + 4 * count : 8 + 5 * count], dtype="<u1").copy()
        residuals = ResidualStream(
            rows=rows,
            cols=cols,
            codes=codes_r,
            k_shift=k_shift,
            sigma=header["residual_sigma"],
        )

    return QuantizedLayer(
        format_text=header["format"],
        shape=tuple(header["shape"]),
        g=header["g"],
        k_star=header["k_star"],
        sfmt_name=header["sfmt"],
        rule=header["rule"],
        sign_mode=header["sign_mode"],
        tables=tuple(tables),
        scale_raws=raws,
        codes=codes,
        outliers=outliers,
        residuals=residuals,
        saturation_count=header["saturation_count"],
        meta=header.get("meta", {}),
    )
