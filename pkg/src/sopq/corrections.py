"""Post-quantization corrections: outlier extraction (OPQ) and the
activation-weighted sparse residual (Wr).

OPQ pulls high-magnitude weights out of the codebook path before
quantization: positions where |w| exceeds ``m`` sigma of their block are
stored exactly as (16-bit index, bf16 value) and zeroed in the codebook
input, so the codebook fits a tighter residual distribution.  The
threshold comes from the quantile equation ``(2*Phi(m) - 1)^M = q`` --
the CDF of the max of M iid |N(0,1)| draws -- so with the true sigma a
fraction ``1 - q`` of Gaussian blocks contains at least one outlier.

Wr runs after quantization: the residual E = W - What is ranked by
activation-weighted magnitude |E| * c and the top sigma fraction of
entries is stored as (16-bit index, 8-bit exponent/mantissa value) under
a stream-level power-of-two shift.  Both streams cost 32 bits per entry
in the amortized accounting.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import norm

from .blockquant import OutlierStream, QuantizeError, ResidualStream, to_bf16_bits
from .scalewords import f_layer_search, parse_scale_format

__all__ = [
    "opq_threshold",
    "extract_outliers",
    "fit_wr",
    "decode_residual_values",
    "RESIDUAL_VALUE_FORMAT",
]

# residual values ride in a full-range signed byte codec (every raw byte
# decodes; range max 31 with the stream shift recentering magnitudes)
RESIDUAL_VALUE_FORMAT = "E3M4"


def opq_threshold(q: float, m_order: int) -> float:
    """Sigma threshold m solving (2*Phi(m) - 1)^M = q."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile must be in (0, 1), got {q}")
    if m_order < 1:
        raise ValueError("max-order count must be >= 1")
    return float(norm.ppf((q ** (1.0 / m_order) + 1.0) / 2.0))


def extract_outliers(W, threshold: float, g: int = 16, sigma=None, quantile=None):
    """Split a weight tensor into (cleaned tensor, outlier stream).

    ``sigma`` is the per-block deviation used for thresholding: by default
    the block RMS (weights are treated as zero-mean); pass a scalar or a
    per-block array to use a known deviation instead (the quantile
    construction is exact for the true sigma).
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    W = np.asarray(W, dtype=np.float64)
    m, k = W.shape
    if m > 0xFFFF or k > 0xFFFF:
        raise QuantizeError("outlier indices are 16-bit; tensor dim exceeds 65535")
    g_eff = g if g else k
    pad = (-k) % g_eff
    Wp = np.concatenate([W, np.zeros((m, pad))], axis=1) if pad else W
    blocks = Wp.reshape(m, -1, g_eff)
    if sigma is None:
        sig = np.sqrt(np.mean(blocks**2, axis=-1))
    else:
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), blocks.shape[:2])
    with np.errstate(invalid="ignore", divide="ignore"):
        mask = np.abs(blocks) > threshold * sig[:, :, None]
    mask &= sig[:, :, None] > 0
    mask = mask.reshape(m, -1)[:, :k]
    rows, cols = np.nonzero(mask)
    vals = to_bf16_bits(W[rows, cols])
    cleaned = W.copy()
    cleaned[rows, cols] = 0.0
    stream = OutlierStream(
        rows=rows.astype(np.int32),
        cols=cols.astype(np.int32),
        values_bf16=vals,
        threshold=float(threshold),
        quantile=quantile,
        max_order=g,
    )
    return cleaned, stream


def _residual_codec():
    return parse_scale_format(RESIDUAL_VALUE_FORMAT)


def encode_residual_values(values: np.ndarray) -> tuple[np.ndarray, int]:
    """Encode residual values as signed bytes under a shared power-of-two
    shift chosen (f_layer style) to center magnitudes in the codec's
    normal range."""
    fmt = _residual_codec()
    vals = np.asarray(values, dtype=np.float64)
    nz = np.abs(vals[vals != 0])
    k_shift = f_layer_search(nz, fmt).k_star if nz.size else 0
    from . import _kernels

    mags = fmt._magnitudes()
    codes = _kernels.nearest_index(np.abs(vals) * 2.0**k_shift, mags)
    raw = codes.astype(np.int64) << fmt._mant_shift
    raw |= (vals < 0).astype(np.int64) << (fmt.bits - 1)
    return raw.astype(np.uint8), int(k_shift)


def decode_residual_values(codes: np.ndarray, k_shift: int) -> np.ndarray:
    fmt = _residual_codec()
    raw = np.asarray(codes, dtype=np.int64)
    mag_codes = (raw >> fmt._mant_shift) & ((1 << (fmt.x + fmt.y)) - 1)
    sign = np.where((raw >> (fmt.bits - 1)) & 1, -1.0, 1.0)
    return sign * fmt._magnitudes()[mag_codes] * 2.0 ** (-k_shift)


def fit_wr(W, W_hat, norms, sigma: float) -> ResidualStream:
    """Top-sigma residual entries by activation-weighted magnitude.

    Ranking key is |W - What| * c tiled over rows; ties resolve in
    (row, col) order.  sigma is a fraction of all elements in [0, 1].
    """
    if not 0.0 <= sigma <= 1.0:
        raise ValueError("sparsity must be in [0, 1]")
    W = np.asarray(W, dtype=np.float64)
    W_hat = np.asarray(W_hat, dtype=np.float64)
    if W.shape != W_hat.shape:
        raise QuantizeError("shape mismatch between tensor and reconstruction")
    m, k = W.shape
    if m > 0xFFFF or k > 0xFFFF:
        raise QuantizeError("residual indices are 16-bit; tensor dim exceeds 65535")
    c = np.ones(k) if norms is None else np.asarray(norms, dtype=np.float64).reshape(-1)
    if c.shape[0] != k:
        raise QuantizeError(f"channel norms length {c.shape[0]} != contracted dim {k}")
    E = W - W_hat
    keyed = np.abs(E) * c[None, :]
    n_keep = int(np.floor(sigma * W.size))
    if n_keep == 0:
        empty = np.zeros(0, dtype=np.int32)
        return ResidualStream(
            rows=empty, cols=empty, codes=np.zeros(0, dtype=np.uint8), k_shift=0, sigma=sigma
        )
    flat = keyed.ravel()
    # stable sort on descending key keeps (row, col) order among ties
    order = np.argsort(-flat, kind="stable")[:n_keep]
    rows, cols = np.unravel_index(order, W.shape)
    codes, k_shift = encode_residual_values(E[rows, cols])
    return ResidualStream(
        rows=rows.astype(np.int32),
        cols=cols.astype(np.int32),
        codes=codes,
        k_shift=k_shift,
        sigma=sigma,
    )
