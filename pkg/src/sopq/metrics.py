"""Fidelity metrics: channel norms, activation-weighted blockwise cosine,
MSE variants, and distribution summaries.

The weighted cosine averages, over all (row, block) pairs, the
channel-norm-weighted cosine between a block of W and the matching block
of the reconstruction.  The norms c are per input channel, tiled across
the output dimension; gaps to unity are reported in parts per million.
All accumulation runs in float64 with a fixed block order, so results are
bit-stable run to run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ChannelNorms",
    "FidelityScore",
    "MetricError",
    "channel_norms",
    "acos_similarity",
    "blockwise_cosines",
    "weighted_mse",
    "fidelity",
    "max_to_mean",
    "ppm_gap",
]


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelNorms:
    """Per-input-channel RMS activation magnitudes from calibration."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if np.any(v < 0):
            raise MetricError("channel norms are RMS magnitudes; must be non-negative")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)


def channel_norms(activation_samples) -> ChannelNorms:
    """c_j = sqrt(mean over samples of x_j^2)."""
    x = np.asarray(activation_samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] < 1 or x.size == 0:
        raise MetricError("need at least one activation sample")
    return ChannelNorms(values=np.sqrt(np.mean(x * x, axis=0)))


@dataclass(frozen=True)
class FidelityScore:
    acos: float
    ppm_gap: float
    weighted_mse: float
    mse: float
    degenerate_blocks: int = 0  # excluded one-sided-zero blocks


def _block_shape(W, W_hat, norms, g):
    W = np.asarray(W, dtype=np.float64)
    W_hat = np.asarray(W_hat, dtype=np.float64)
    if W.shape != W_hat.shape:
        raise MetricError(f"shape mismatch {W.shape} vs {W_hat.shape}")
    m, k = W.shape
    g_eff = g if g else k
    pad = (-k) % g_eff
    if pad:
        W = np.concatenate([W, np.zeros((m, pad))], axis=1)
        W_hat = np.concatenate([W_hat, np.zeros((m, pad))], axis=1)
    if norms is None:
        c = np.ones(k + pad)
    else:
        c = np.asarray(norms.values if isinstance(norms, ChannelNorms) else norms, dtype=np.float64)
        if c.shape[0] != k:
            raise MetricError(f"channel norms length {c.shape[0]} != contracted dim {k}")
        if pad:
            c = np.concatenate([c, np.zeros(pad)])
    wb = W.reshape(m, -1, g_eff)
    hb = W_hat.reshape(m, -1, g_eff)
    cb = c.reshape(-1, g_eff)[None, :, :]  # tiled across the output dim
    return wb, hb, cb


def blockwise_cosines(W, W_hat, norms=None, g: int = 16):
    """Per-(row, block) weighted cosines plus a degenerate-block mask.

    Blocks where both vectors vanish under the weighting score 1; blocks
    where exactly one vanishes are flagged degenerate and excluded from
    the layer mean.
    """
    wb, hb, cb = _block_shape(W, W_hat, norms, g)
    dot = np.sum(cb * wb * hb, axis=-1)
    nw = np.sqrt(np.sum(cb * wb * wb, axis=-1))
    nh = np.sqrt(np.sum(cb * hb * hb, axis=-1))
    both_zero = (nw == 0) & (nh == 0)
    one_zero = (nw == 0) ^ (nh == 0)
    denom = np.where(nw * nh > 0, nw * nh, 1.0)
    cos = dot / denom
    cos = np.where(both_zero, 1.0, cos)
    return cos, one_zero


def acos_similarity(W, W_hat, norms=None, g: int = 16) -> float:
    cos, degenerate = blockwise_cosines(W, W_hat, norms, g)
    valid = ~degenerate
    if not np.any(valid):
        raise MetricError("all blocks degenerate; no cosine defined")
    return float(np.mean(cos[valid]))


def weighted_mse(W, W_hat, norms=None) -> float:
    W = np.asarray(W, dtype=np.float64)
    W_hat = np.asarray(W_hat, dtype=np.float64)
    if norms is None:
        c = np.ones(W.shape[1])
    else:
        c = np.asarray(norms.values if isinstance(norms, ChannelNorms) else norms, dtype=np.float64)
    d = (W - W_hat) ** 2 * c[None, :]
    total = c.sum() * W.shape[0]
    return float(d.sum() / total) if total > 0 else 0.0


def ppm_gap(acos: float) -> float:
    return (1.0 - acos) * 1e6


def fidelity(W, W_hat, norms=None, g: int = 16) -> FidelityScore:
    cos, degenerate = blockwise_cosines(W, W_hat, norms, g)
    valid = ~degenerate
    acos = float(np.mean(cos[valid])) if np.any(valid) else 1.0
    W = np.asarray(W, dtype=np.float64)
    W_hat = np.asarray(W_hat, dtype=np.float64)
    return FidelityScore(
        acos=acos,
        ppm_gap=ppm_gap(acos),
        weighted_mse=weighted_mse(W, W_hat, norms),
        mse=float(np.mean((W - W_hat) ** 2)),
        degenerate_blocks=int(np.count_nonzero(degenerate)),
    )


def max_to_mean(per_layer_mse) -> float:
    """Spread summary of a per-layer error distribution: max / mean."""
    v = np.asarray(per_layer_mse, dtype=np.float64)
    if v.size < 1:
        raise MetricError("need at least one layer value")
    mean = v.mean()
    if mean == 0:
        raise MetricError("max-to-mean undefined for zero mean")
    return float(v.max() / mean)
