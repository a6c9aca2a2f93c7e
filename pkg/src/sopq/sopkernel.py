"""Reference simulator of the scaled-outer-product GEMM micro-kernel.

The kernel contracts block-scaled operands in the quantized domain: for
each K-block, g rank-1 outer products accumulate into a tile ``t`` with
no scale factor involved, then ``t`` is multiplied elementwise by the
rank-1 outer product of the per-block scale columns and added to the
output.  Algebraically this equals dequantize-then-GEMM; the point of the
formulation is that the inner MAC array only ever sees quantized values.

Two datapaths are modeled:

* ``real``: float64 accumulation in a fixed (block-ascending) order;
* ``hif_integer``: the shift-add path for shift-add grids, where each
  operand is a small two's-complement coefficient times a power-of-two
  shift and the block accumulator is an exact integer:
  ``iacc += (wc * ac) << (ws + as)``.

Per-K-block traffic splits into ``b_scale * (T_r + M_r)`` scale bits and
``b_op * g * (T_r + M_r)`` operand bits; at the reference tile
(128, 128, g=16, 12-bit scales, 4-bit operands) scales are 3072 of
19456 bits, about 15.8%.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .grids import ElementGrid

__all__ = [
    "KernelConfig",
    "BandwidthReport",
    "KernelError",
    "sop_gemm",
    "hif_decompose",
    "hif_mac_path",
    "bandwidth_split",
]


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    t_r: int = 128
    m_r: int = 128
    g: int = 16
    scale_bits: int = 12
    op_bits: int = 4
    datapath: str = "real"  # "real" | "hif_integer"
    coeff_width: int = 5
    w_shift_max: int = 3
    a_shift_max: int = 4  # 5..7 available as the extended-range option
    shift_sum_cap: int | None = None  # default: w_shift_max + a_shift_max

    @property
    def cap(self) -> int:
        return self.shift_sum_cap if self.shift_sum_cap is not None else (
            self.w_shift_max + self.a_shift_max
        )


@dataclass(frozen=True)
class BandwidthReport:
    scale_bits_per_kblock: int
    operand_bits_per_kblock: int

    @property
    def scale_fraction(self) -> float:
        total = self.scale_bits_per_kblock + self.operand_bits_per_kblock
        return self.scale_bits_per_kblock / total if total else 0.0


def bandwidth_split(cfg: KernelConfig) -> BandwidthReport:
    lanes = cfg.t_r + cfg.m_r
    return BandwidthReport(
        scale_bits_per_kblock=cfg.scale_bits * lanes,
        operand_bits_per_kblock=cfg.op_bits * cfg.g * lanes,
    )


def hif_decompose(values, grid: ElementGrid):
    """Split shift-add grid values into (coefficient, shift) pairs.

    Canonical form uses the smallest admissible shift: the coefficient is
    value >> shift and must fit the two's-complement coefficient width.
    """
    if grid.spec.kind != "hif":
        raise KernelError("decomposition applies to shift-add grids")
    cw = grid.spec.coeff_width
    lo, hi = -(2 ** (cw - 1)), 2 ** (cw - 1) - 1
    shifts_sorted = sorted(grid.spec.shift_set)
    table = {}
    for v in grid.values:
        iv = int(v)
        for s in shifts_sorted:
            if iv % (1 << s) == 0 and lo <= iv >> s <= hi:
                table[iv] = (iv >> s, s)
                break
        else:
            raise KernelError(f"value {iv} not representable in the grid parameters")
    flat = np.asarray(values, dtype=np.float64).ravel()
    coeffs = np.empty(flat.shape, dtype=np.int64)
    shifts = np.empty(flat.shape, dtype=np.int64)
    for i, v in enumerate(flat):
        iv = int(v)
        if iv != v or iv not in table:
            raise KernelError(f"value {v} is not a grid point")
        coeffs[i], shifts[i] = table[iv]
    shape = np.asarray(values).shape
    return coeffs.reshape(shape), shifts.reshape(shape)


def _check_acc_width(k: int, cfg: KernelConfig):
    # worst |coeff product| = 2^(2*cw-2); each MAC <= 2^(2*cw-2+cap);
    # K terms bound |iacc| by K * 2^(2*cw-2+cap), which must stay under
    # the int64 limit 2^63
    per_mac_bits = 2 * cfg.coeff_width - 2 + cfg.cap
    if k.bit_length() + per_mac_bits >= 63:
        raise KernelError(
            f"integer accumulator would overflow: K={k} at {per_mac_bits} bits per MAC"
        )


def hif_mac_path(w_coeffs, w_shifts, a_coeffs, a_shifts, cfg: KernelConfig) -> np.ndarray:
    """Exact integer accumulation over the full contracted dimension:
    iacc[t, m] = sum_k (a[t,k] * w[m,k]) << (as[t,k] + ws[m,k])."""
    wc = np.asarray(w_coeffs, dtype=np.int64)
    ws = np.asarray(w_shifts, dtype=np.int64)
    ac = np.asarray(a_coeffs, dtype=np.int64)
    a_s = np.asarray(a_shifts, dtype=np.int64)
    lim = 2 ** (cfg.coeff_width - 1)
    if np.any(wc < -lim) or np.any(wc >= lim) or np.any(ac < -lim) or np.any(ac >= lim):
        raise KernelError(f"coefficient outside tc{cfg.coeff_width} range")
    if np.any(ws < 0) or np.any(ws > cfg.w_shift_max):
        raise KernelError(f"weight shift outside 0..{cfg.w_shift_max}")
    if np.any(a_s < 0) or np.any(a_s > cfg.a_shift_max):
        raise KernelError(f"activation shift outside 0..{cfg.a_shift_max}")
    if np.any(ws[None, :, :] + a_s[:, None, :] > cfg.cap):
        raise KernelError(f"shift sum exceeds the configured cap {cfg.cap}")
    k = wc.shape[1]
    _check_acc_width(k, cfg)
    acc = _kernels.hif_accumulate(ac, a_s, wc, ws, k)  # one block spanning K
    return acc[0]


def sop_gemm(
    qx,
    sx,
    qw,
    sw,
    cfg: KernelConfig,
    hif_grid: ElementGrid | None = None,
    hif_grid_x: ElementGrid | None = None,
):
    """Block-scaled GEMM: Y = sum_b (sx[:,b] (x) sw[:,b]) .* (Qx_b Qw_b^T).

    Scales are per (row, K-block).  The real path accumulates in float64;
    the hif_integer path decomposes grid values and runs the exact
    shift-add datapath, applying scales only at block boundaries.
    ``hif_grid`` decomposes the weights; activations default to the same
    grid unless ``hif_grid_x`` names the (typically wider-shift) one.
    """
    qx = np.asarray(qx, dtype=np.float64)
    qw = np.asarray(qw, dtype=np.float64)
    sx = np.asarray(sx, dtype=np.float64)
    sw = np.asarray(sw, dtype=np.float64)
    t_n, k = qx.shape
    m_n, k2 = qw.shape
    g = cfg.g if cfg.g else k
    if k != k2:
        raise KernelError(f"contracted dims differ: {k} vs {k2}")
    if k % g:
        raise KernelError(f"contracted dim {k} not a multiple of block size {g}")
    nb = k // g
    if sx.shape != (t_n, nb) or sw.shape != (m_n, nb):
        raise KernelError(f"scale shapes must be ({t_n},{nb}) and ({m_n},{nb})")

    if cfg.datapath == "real":
        return _kernels.sop_gemm_real(qx, sx, qw, sw, g)
    if cfg.datapath != "hif_integer":
        raise KernelError(f"unknown datapath {cfg.datapath!r}")
    if hif_grid is None:
        raise KernelError("hif_integer datapath needs the grid for decomposition")
    xc, xs = hif_decompose(qx, hif_grid_x if hif_grid_x is not None else hif_grid)
    wc, ws = hif_decompose(qw, hif_grid)
    if np.any(xs > cfg.a_shift_max) or np.any(ws > cfg.w_shift_max):
        raise KernelError("decomposed shifts exceed the configured per-operand range")
    _check_acc_width(g, cfg)
    acc = _kernels.hif_accumulate(xc, xs, wc, ws, g)  # (nb, T, M) exact ints
    y = np.zeros((t_n, m_n))
    for b in range(nb):
        y += acc[b].astype(np.float64) * np.outer(sx[:, b], sw[:, b])
    return y
