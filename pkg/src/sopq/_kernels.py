"""Hot numeric loops with numba-compiled and pure-numpy implementations.

Every kernel here exists twice: a ``*_np`` vectorized numpy version and a
numba ``@njit`` version.  The active path is chosen once at import:

* ``SOPQ_PURE_NUMPY=1`` in the environment forces the numpy path;
* otherwise numba is used when it imports cleanly.

``benchmarks/bench_kernels.py`` times the two paths against each other.
Both paths produce identical results for the integer kernels and agree to
float64 rounding for the accumulating ones (accumulation order is fixed
per kernel, not per path).
"""

from __future__ import annotations

import os

import numpy as np

_FORCE_NUMPY = os.environ.get("SOPQ_PURE_NUMPY", "0") not in ("", "0")

if not _FORCE_NUMPY:
    try:
        from numba import njit

        NUMBA_ACTIVE = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ACTIVE = False
else:
    NUMBA_ACTIVE = False

if not NUMBA_ACTIVE:

    def njit(*args, **kwargs):  # no-op decorator so the jit defs still import
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


# ---------------------------------------------------------------------------
# nearest-index lookup (codes from values)
# ---------------------------------------------------------------------------


def nearest_index_np(v: np.ndarray, table: np.ndarray) -> np.ndarray:
    if len(table) == 1:
        return np.zeros(v.shape, dtype=np.int64)
    idx = np.searchsorted(table, v)
    idx = np.clip(idx, 1, len(table) - 1)
    lo = table[idx - 1]
    hi = table[idx]
    d_lo = v - lo
    d_hi = hi - v
    out = np.where(d_lo < d_hi, idx - 1, idx)
    tie = d_lo == d_hi
    if np.any(tie):
        even_lo = (idx - 1) % 2 == 0
        out = np.where(tie & even_lo, idx - 1, out)
        out = np.where(tie & ~even_lo, idx, out)
    out = np.where(v <= table[0], 0, out)
    out = np.where(v >= table[-1], len(table) - 1, out)
    return out.astype(np.int64)


@njit(cache=True)
def _nearest_index_nb(v, table):
    n = table.shape[0]
    out = np.empty(v.shape[0], dtype=np.int64)
    for i in range(v.shape[0]):
        x = v[i]
        if x <= table[0] or n == 1:
            out[i] = 0
            continue
        if x >= table[n - 1]:
            out[i] = n - 1
            continue
        lo, hi = 0, n - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if table[mid] <= x:
                lo = mid
            else:
                hi = mid
        d_lo = x - table[lo]
        d_hi = table[hi] - x
        if d_lo < d_hi:
            out[i] = lo
        elif d_hi < d_lo:
            out[i] = hi
        else:
            out[i] = lo if lo % 2 == 0 else hi
    return out


def nearest_index(v: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Nearest sorted-table index per element, midpoint ties to even index."""
    shape = np.shape(v)
    v = np.ascontiguousarray(v, dtype=np.float64)
    table = np.ascontiguousarray(table, dtype=np.float64)
    if NUMBA_ACTIVE:
        return _nearest_index_nb(v.ravel(), table).reshape(shape)
    return nearest_index_np(v.ravel(), table).reshape(shape)


# ---------------------------------------------------------------------------
# scaled-outer-product GEMM, real datapath
# ---------------------------------------------------------------------------


def sop_gemm_real_np(qx, sx, qw, sw, g: int) -> np.ndarray:
    T, K = qx.shape
    M = qw.shape[0]
    nb = K // g
    y = np.zeros((T, M), dtype=np.float64)
    for b in range(nb):  # fixed K-block order
        t = qx[:, b * g : (b + 1) * g] @ qw[:, b * g : (b + 1) * g].T
        y += t * np.outer(sx[:, b], sw[:, b])
    return y


@njit(cache=True)
def _sop_gemm_real_nb(qx, sx, qw, sw, g):
    T, K = qx.shape
    M = qw.shape[0]
    nb = K // g
    y = np.zeros((T, M), dtype=np.float64)
    for b in range(nb):
        for i in range(T):
            for j in range(M):
                t = 0.0
                for r in range(g):
                    t += qx[i, b * g + r] * qw[j, b * g + r]
                y[i, j] += t * (sx[i, b] * sw[j, b])
    return y


def sop_gemm_real(qx, sx, qw, sw, g: int) -> np.ndarray:
    qx = np.ascontiguousarray(qx, dtype=np.float64)
    qw = np.ascontiguousarray(qw, dtype=np.float64)
    sx = np.ascontiguousarray(sx, dtype=np.float64)
    sw = np.ascontiguousarray(sw, dtype=np.float64)
    if NUMBA_ACTIVE:
        return _sop_gemm_real_nb(qx, sx, qw, sw, g)
    return sop_gemm_real_np(qx, sx, qw, sw, g)


# ---------------------------------------------------------------------------
# shift-add integer MAC datapath
# ---------------------------------------------------------------------------


def hif_accumulate_np(xc, xs, wc, ws, g: int) -> np.ndarray:
    """Per-K-block integer accumulators: iacc[b,i,j] = sum_r (xc*wc) << (xs+ws)."""
    T, K = xc.shape
    M = wc.shape[0]
    nb = K // g
    xc3 = xc.reshape(T, nb, g).astype(np.int64)
    wc3 = wc.reshape(M, nb, g).astype(np.int64)
    xv = xc3 << xs.reshape(T, nb, g).astype(np.int64)
    wv = wc3 << ws.reshape(M, nb, g).astype(np.int64)
    # (w*a) << (ws+as) == (w << ws) * (a << as): exact in int64
    return np.einsum("tbr,mbr->btm", xv, wv)


@njit(cache=True)
def _hif_accumulate_nb(xc, xs, wc, ws, g):
    T, K = xc.shape
    M = wc.shape[0]
    nb = K // g
    acc = np.zeros((nb, T, M), dtype=np.int64)
    for b in range(nb):
        for i in range(T):
            for j in range(M):
                t = np.int64(0)
                for r in range(g):
                    k = b * g + r
                    t += (xc[i, k] * wc[j, k]) << (xs[i, k] + ws[j, k])
                acc[b, i, j] = t
    return acc


def hif_accumulate(xc, xs, wc, ws, g: int) -> np.ndarray:
    xc = np.ascontiguousarray(xc, dtype=np.int64)
    xs = np.ascontiguousarray(xs, dtype=np.int64)
    wc = np.ascontiguousarray(wc, dtype=np.int64)
    ws = np.ascontiguousarray(ws, dtype=np.int64)
    if NUMBA_ACTIVE:
        return _hif_accumulate_nb(xc, xs, wc, ws, g)
    return hif_accumulate_np(xc, xs, wc, ws, g)


# ---------------------------------------------------------------------------
# grid-constrained 1-D weighted k-means dynamic program
# ---------------------------------------------------------------------------


def _kmeans_dp_core(x, w, grid, k):
    """Shared DP body, written to compile under numba as-is.

    x must be sorted ascending.  D[j, i] = min weighted SSE of the first i
    points split into at most j+1 interval clusters, each cluster scored at
    its best grid center (the cost is quadratic in the center, so the
    grid minimizer brackets the weighted mean).  Empty clusters are
    allowed, which makes "at most k" and "exactly k" coincide.
    Returns (cost, per-cluster center index array, -1 for empty clusters).
    """
    n = x.shape[0]
    m = grid.shape[0]
    pw = np.zeros(n + 1)
    pwx = np.zeros(n + 1)
    pwx2 = np.zeros(n + 1)
    for i in range(n):
        pw[i + 1] = pw[i] + w[i]
        pwx[i + 1] = pwx[i] + w[i] * x[i]
        pwx2[i + 1] = pwx2[i] + w[i] * x[i] * x[i]

    D = np.full((k, n + 1), np.inf)
    split = np.zeros((k, n + 1), dtype=np.int64)
    cidx = np.full((k, n + 1), -1, dtype=np.int64)

    for j in range(k):
        for i in range(n + 1):
            if i == 0:
                D[j, i] = 0.0
                split[j, i] = 0
                continue
            if j > 0:
                best = D[j - 1, i]  # empty last cluster
                bt = i
                bc = -1
                t_lo = 0
            else:
                best = np.inf
                bt = 0
                bc = -1
                t_lo = 0
            t_hi = i if j > 0 else 1  # j == 0 forces a single interval [0, i)
            for t in range(t_lo, t_hi):
                sw = pw[i] - pw[t]
                swx = pwx[i] - pwx[t]
                swx2 = pwx2[i] - pwx2[t]
                mean = swx / sw if sw > 0.0 else 0.0
                # binary search for the grid bracket of the mean
                lo2, hi2 = 0, m
                while lo2 < hi2:
                    mid = (lo2 + hi2) // 2
                    if grid[mid] < mean:
                        lo2 = mid + 1
                    else:
                        hi2 = mid
                c_cost = np.inf
                c_idx = -1
                for cand in (lo2 - 1, lo2):
                    if 0 <= cand < m:
                        c = grid[cand]
                        cc = swx2 - 2.0 * c * swx + sw * c * c
                        if cc < c_cost:
                            c_cost = cc
                            c_idx = cand
                prev = D[j - 1, t] if j > 0 else 0.0
                tot = prev + c_cost
                if tot < best:
                    best = tot
                    bt = t
                    bc = c_idx
            D[j, i] = best
            split[j, i] = bt
            cidx[j, i] = bc

    centers = np.full(k, -1, dtype=np.int64)
    i = n
    for j in range(k - 1, -1, -1):
        centers[j] = cidx[j, i]
        i = split[j, i]
    return D[k - 1, n], centers


_kmeans_dp_nb = njit(cache=True)(_kmeans_dp_core) if NUMBA_ACTIVE else None


def kmeans_grid_dp(x, w, centers_grid, k):
    """Exact grid-constrained weighted 1-D k-means.

    Returns (cost, sorted unique center indices into centers_grid).
    x need not be sorted; weights must be non-negative.
    """
    order = np.argsort(x, kind="stable")
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64)[order])
    w = np.ascontiguousarray(np.asarray(w, dtype=np.float64)[order])
    centers_grid = np.ascontiguousarray(centers_grid, dtype=np.float64)
    fn = _kmeans_dp_nb if NUMBA_ACTIVE else _kmeans_dp_core
    cost, centers = fn(x, w, centers_grid, int(k))
    picked = sorted(set(int(c) for c in centers if c >= 0))
    return float(cost), picked


# ---------------------------------------------------------------------------
# multiple-choice knapsack dynamic program
# ---------------------------------------------------------------------------


def mckp_dp_np(costs, values, capacity: int):
    """Exact MCKP maximizer over integer costs.

    costs/values: list-of-arrays per group (one item per candidate).
    Returns (best_value, picks) with exactly one pick per group, or
    (None, None) when infeasible.
    """
    neg = -np.inf
    L = len(costs)
    f = np.full(capacity + 1, neg)
    f[0] = 0.0
    back = np.full((L, capacity + 1), -1, dtype=np.int64)
    for li in range(L):
        c = np.asarray(costs[li], dtype=np.int64)
        v = np.asarray(values[li], dtype=np.float64)
        g = np.full(capacity + 1, neg)
        pick = np.full(capacity + 1, -1, dtype=np.int64)
        for fi in range(len(c)):
            if c[fi] > capacity:
                continue
            shifted = np.full(capacity + 1, neg)
            shifted[c[fi] :] = f[: capacity + 1 - c[fi]] + v[fi]
            # strict > keeps the lowest-cost, lowest-index winner on ties
            better = shifted > g
            g = np.where(better, shifted, g)
            pick = np.where(better, fi, pick)
        f = g
        back[li] = pick
    if not np.any(np.isfinite(f)):
        return None, None
    best_cap = int(np.argmax(np.where(np.isfinite(f), f, neg)))
    best_val = float(f[best_cap])
    picks = np.zeros(L, dtype=np.int64)
    cap = best_cap
    for li in range(L - 1, -1, -1):
        fi = int(back[li, cap])
        picks[li] = fi
        cap -= int(costs[li][fi])
    return best_val, picks


def mckp_dp(costs, values, capacity: int):
    # group layout is ragged; the numpy path is already O(L * C * capacity)
    # with vectorized inner sweeps, so it serves both backends.
    return mckp_dp_np(costs, values, capacity)
