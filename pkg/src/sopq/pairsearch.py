"""Per-layer codebook pair search and single-format materialization.

The pair search picks, per layer, two reconstruction tables plus a
one-bit per-block selector living in the scale word:

1. build the first candidate table (ROM lookup, or a grid-constrained DP
   fit for data-adaptive atoms);
2. score every block under it and rank by the partition metric; the top
   p% best-served blocks form the first pool;
3. the remaining blocks form the residual pool that fits (or re-scores)
   the second table;
4. a finishing reassignment evaluates each block under both tables -- and
   under both scale signs when the deployed scale format is signed -- and
   keeps the better option per block.

Sign-negated variants of every fixed atom enter the search as separate
candidates.  Four axes are independently configurable: the partition
metric, the reassignment metric, the fit weighting for adaptive atoms,
and the residual-pool rule.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .atoms import ADAPTIVE_ATOMS, atom_registry, fit_dd
from .blockquant import (
    BlockQuantConfig,
    QuantizeError,
    QuantizedLayer,
    place_atom,
    quantize_layer,
    reconstruct,
)
from .formats import FormatSpec
from .grids import ElementGrid, exmy_grid, hif_grid
from .metrics import ChannelNorms, blockwise_cosines, fidelity
from .scalewords import ScaleWordFormat, parse_scale_format

__all__ = [
    "PairAxes",
    "PairPlan",
    "PairSearchConfig",
    "PairSearchResult",
    "LayerQuantResult",
    "pair_search",
    "fit_fixed_pair",
    "quantize_full",
    "resolve_table",
    "resolve_grid",
    "config_from_spec",
    "quantize_with_spec",
]

# dense fallback grid for DP fits when no hosting grid is deployed
_FREE_FIT_GRID = ("exmy", 5, 7)


@dataclass(frozen=True)
class PairAxes:
    partition_metric: str = "acos"  # "acos" | "mse"
    reassign_metric: str = "acos"
    dd_weighting: str = "channel"  # "channel" | "uniform"
    pool_rule: str = "top_p"  # "top_p" | "top_k" | "quantile"


@dataclass(frozen=True)
class PairPlan:
    fmt_a: str
    fmt_b: str
    partition_p: float
    axes: PairAxes
    sign_flip_enabled: bool
    score: float  # layer ACos of the final reconstruction
    selector_histogram: tuple = ()


@dataclass
class PairSearchConfig:
    sfmt: ScaleWordFormat
    g: int = 16
    lfmt: ElementGrid | None = None
    rule: str = "absmax"
    partition_p: float = 50.0
    pool_param: float | None = None  # count for top_k, threshold for quantile
    axes: PairAxes = field(default_factory=PairAxes)
    sign_flip: bool | None = None  # None: enabled iff the scale format is signed
    include_sign_variants: bool = True
    format_text: str = ""

    def flip_enabled(self) -> bool:
        if self.sign_flip is not None:
            return self.sign_flip
        return self.sfmt.signed


@dataclass
class PairSearchResult:
    plan: PairPlan
    layer: QuantizedLayer
    report: dict


# ---------------------------------------------------------------------------
# table resolution shared with the pipeline and allocator
# ---------------------------------------------------------------------------


_GRID_NAME_RE = re.compile(r"E(\d+)M(\d+)|HIF[78]")


def resolve_grid(name: str) -> ElementGrid:
    if name == "HIF7":
        return hif_grid(5, (0, 1, 2, 3))
    if name == "HIF8":
        return hif_grid(5, (0, 1, 2, 3, 4))
    mo = re.fullmatch(r"E(\d+)M(\d+)", name)
    if mo:
        return exmy_grid(int(mo.group(1)), int(mo.group(2)))
    raise QuantizeError(f"{name!r} is not a grid name")


def resolve_table(name: str, lfmt: ElementGrid | None, registry=None) -> np.ndarray:
    """Reconstruction table for an atom name: grids quantize directly,
    named atoms are hosted in the deployed grid."""
    neg = name.startswith("-")
    base = name[1:] if neg else name
    if _GRID_NAME_RE.fullmatch(base):
        if neg:
            raise QuantizeError("grids are sign-closed; negated grid atoms are meaningless")
        return resolve_grid(base).values
    registry = registry if registry is not None else atom_registry()
    if base not in registry:
        raise QuantizeError(f"unknown atom {base!r} (adaptive atoms need a fitted table)")
    atom = registry[base]
    if neg:
        atom = atom.negated()
    return place_atom(atom, lfmt)


def config_from_spec(
    spec: FormatSpec,
    lfmt: ElementGrid | None = None,
    tables=None,
    rule: str = "absmax",
) -> BlockQuantConfig:
    """BlockQuantConfig for a parsed format (single atom or pre-fitted
    pair tables).  Formats with no scale word resolve to a per-layer
    power-of-two scale."""
    if tables is None:
        if any(a in ADAPTIVE_ATOMS for a in spec.atoms):
            raise QuantizeError("adaptive atoms need the pair search to fit tables first")
        tables = tuple(resolve_table(a, lfmt) for a in spec.atoms)
    if spec.scale_fmt is not None:
        sfmt = parse_scale_format(spec.scale_fmt)
        g = spec.block_size
    else:
        sfmt = parse_scale_format("UE8M0")
        g = 0
    return BlockQuantConfig(
        format_text=spec.to_string(),
        g=g,
        tables=tuple(tables),
        sfmt=sfmt,
        rule=rule,
    )


def quantize_with_spec(W, spec: FormatSpec, lfmt=None, rule="absmax") -> QuantizedLayer:
    return quantize_layer(W, config_from_spec(spec, lfmt=lfmt, rule=rule))


# ---------------------------------------------------------------------------
# pair search
# ---------------------------------------------------------------------------


def _per_block_metric(W, recon, norms, g, which):
    if which == "acos":
        cos, degenerate = blockwise_cosines(W, recon, norms, g)
        return np.where(degenerate, 1.0, cos)  # higher better
    diff = np.asarray(W, dtype=np.float64) - recon
    m, k = diff.shape
    g_eff = g if g else k
    pad = (-k) % g_eff
    if pad:
        diff = np.concatenate([diff, np.zeros((m, pad))], axis=1)
    sse = (diff.reshape(m, -1, g_eff) ** 2).sum(axis=-1)
    return -sse  # negated so "higher is better" uniformly


def _candidate_names(alphabet, include_sign_variants, registry):
    names = []
    for name in alphabet:
        names.append(name)
        if name in ADAPTIVE_ATOMS:
            continue
        if include_sign_variants:
            base = registry.get(name)
            if base is not None and not base.sign_closed:
                names.append(f"-{name}")
    return names


def _fit_adaptive(name, samples, weights, lfmt) -> np.ndarray:
    fit_grid = lfmt if lfmt is not None else exmy_grid(_FREE_FIT_GRID[1], _FREE_FIT_GRID[2])
    k = 2 ** ADAPTIVE_ATOMS[name]
    atom = fit_dd(samples, weights, fit_grid, k)
    return atom.values


def _block_samples(W, norms, g, mask=None):
    """Per-block max-normalized samples (and weights) for adaptive fits."""
    W = np.asarray(W, dtype=np.float64)
    m, k = W.shape
    g_eff = g if g else k
    pad = (-k) % g_eff
    Wp = np.concatenate([W, np.zeros((m, pad))], axis=1) if pad else W
    blocks = Wp.reshape(m, -1, g_eff)
    c = np.ones(k + pad) if norms is None else np.concatenate(
        [np.asarray(norms, dtype=np.float64), np.zeros(pad)]
    )
    cb = np.broadcast_to(c.reshape(1, -1, g_eff), blocks.shape)
    if mask is not None:
        blocks = blocks[mask]
        cb = cb[mask]
    absmax = np.abs(blocks).max(axis=-1, keepdims=True)
    absmax = np.where(absmax > 0, absmax, 1.0)
    return (blocks / absmax).ravel(), cb.ravel()


def pair_search(W, norms, alphabet, cfg: PairSearchConfig) -> PairSearchResult:
    """Search (first table, p, second table) over the alphabet and return
    the winning plan and its materialized layer.

    The single-table solution is always in the search space (a pair with
    itself degenerates to it), so the winning layer score is never worse
    than the best single atom."""
    W = np.asarray(W, dtype=np.float64)
    norm_values = None
    if norms is not None:
        norm_values = norms.values if isinstance(norms, ChannelNorms) else np.asarray(norms)
    registry = atom_registry()
    names = _candidate_names(alphabet, cfg.include_sign_variants, registry)
    if not names:
        raise QuantizeError("empty candidate alphabet")
    flip = cfg.flip_enabled()
    if flip and not cfg.sfmt.signed and cfg.sfmt.m < 2:
        raise QuantizeError(
            f"sign flip requested but {cfg.sfmt.name} has no sign bit and too few metabits"
        )

    # resolve fixed tables; fit full-pool tables for adaptive candidates
    all_samples = all_weights = None
    tables: dict[str, np.ndarray] = {}
    for name in names:
        if name in ADAPTIVE_ATOMS:
            if all_samples is None:
                all_samples, all_weights = _block_samples(W, norm_values, cfg.g)
            weights = all_weights if cfg.axes.dd_weighting == "channel" else None
            tables[name] = _fit_adaptive(name, all_samples, weights, cfg.lfmt)
        else:
            tables[name] = resolve_table(name, cfg.lfmt, registry)

    # cache per-(candidate, flip) single-table scores; refit tables bypass it
    part_cache: dict[tuple, np.ndarray] = {}
    reassign_cache: dict[tuple, np.ndarray] = {}

    def option_scores(table, flipped, cache_key=None):
        if cache_key is not None and (cache_key, flipped) in reassign_cache:
            return reassign_cache[(cache_key, flipped)]
        q = _quantize_option(W, table, cfg, flipped)
        recon = reconstruct(q)
        r_score = _per_block_metric(W, recon, norm_values, cfg.g, cfg.axes.reassign_metric)
        if cache_key is not None:
            reassign_cache[(cache_key, flipped)] = r_score
            part_cache[(cache_key, flipped)] = _per_block_metric(
                W, recon, norm_values, cfg.g, cfg.axes.partition_metric
            )
        return r_score

    best = None
    for name_a in names:
        option_scores(tables[name_a], False, cache_key=name_a)
        keep_mask = _partition(part_cache[(name_a, False)], cfg)
        for name_b in names:
            table_b = tables[name_b]
            key_b = name_b
            if name_b in ADAPTIVE_ATOMS and not np.all(keep_mask):
                # refit the adaptive second table on the residual pool only
                samples, weights = _block_samples(W, norm_values, cfg.g, mask=~keep_mask)
                if samples.size:
                    w_arg = weights if cfg.axes.dd_weighting == "channel" else None
                    table_b = _fit_adaptive(name_b, samples, w_arg, cfg.lfmt)
                    key_b = None  # pool-specific fit; don't cache under the name
            options = [
                (0, False, option_scores(tables[name_a], False, cache_key=name_a)),
                (1, False, option_scores(table_b, False, cache_key=key_b)),
            ]
            if flip:
                options.append((0, True, option_scores(tables[name_a], True, cache_key=name_a)))
                options.append((1, True, option_scores(table_b, True, cache_key=key_b)))
            result = _finish_pair(
                W, norm_values, cfg, name_a, name_b, tables[name_a], table_b, options
            )
            if best is None or result[0] > best[0]:
                best = result
    _, plan, layer = best
    rep = {
        "pair": [plan.fmt_a, plan.fmt_b],
        "partition_p": plan.partition_p,
        "axes": {
            "partition_metric": cfg.axes.partition_metric,
            "reassign_metric": cfg.axes.reassign_metric,
            "dd_weighting": cfg.axes.dd_weighting,
            "pool_rule": cfg.axes.pool_rule,
        },
        "sign_flip": plan.sign_flip_enabled,
        "selector_histogram": list(plan.selector_histogram),
        "score_acos": plan.score,
        "candidates_scored": sorted({k[0] for k in reassign_cache}),
    }
    return PairSearchResult(plan=plan, layer=layer, report=rep)


def _quantize_option(W, table, cfg: PairSearchConfig, flipped: bool) -> QuantizedLayer:
    m, k = W.shape
    g_eff = cfg.g if cfg.g else m * k
    nb = (k + g_eff - 1) // g_eff if cfg.g else 1
    rows = m if cfg.g else 1
    flips = np.full((rows, nb), flipped, dtype=bool) if (flipped or cfg.flip_enabled()) else None
    qcfg = BlockQuantConfig(
        format_text=cfg.format_text,
        g=cfg.g,
        tables=(table,),
        sfmt=cfg.sfmt,
        rule=cfg.rule,
        sign_flips=flips,
    )
    return quantize_layer(W, qcfg)


def _partition(part_scores: np.ndarray, cfg: PairSearchConfig) -> np.ndarray:
    """Boolean mask of blocks kept in the first pool (best-served)."""
    flat = part_scores.ravel()
    if cfg.axes.pool_rule == "top_p":
        n_keep = int(round(len(flat) * cfg.partition_p / 100.0))
    elif cfg.axes.pool_rule == "top_k":
        n_keep = int(cfg.pool_param if cfg.pool_param is not None else len(flat) // 2)
    elif cfg.axes.pool_rule == "quantile":
        thr = np.quantile(flat, cfg.pool_param if cfg.pool_param is not None else 0.5)
        return (part_scores >= thr).reshape(part_scores.shape)
    else:
        raise QuantizeError(f"unknown pool rule {cfg.axes.pool_rule!r}")
    n_keep = min(max(n_keep, 0), len(flat))
    mask = np.zeros(len(flat), dtype=bool)
    if n_keep:
        order = np.argsort(-flat, kind="stable")
        mask[order[:n_keep]] = True
    return mask.reshape(part_scores.shape)


def _finish_pair(W, norm_values, cfg, name_a, name_b, table_a, table_b, options):
    """Step 4: per-block best of both tables (and both scale signs).

    ``options`` is a list of (table_index, flipped, per-block score array);
    ties go to the earlier option, so table a beats table b and an
    unflipped scale beats a flipped one."""
    flip = any(fl for _, fl, _ in options)
    stacked = np.stack([sc for _, _, sc in options])  # (n_options, rows, nb)
    pick = np.argmax(stacked, axis=0)

    assignments = np.array([ti for ti, _, _ in options])[pick]
    flips = np.array([fl for _, fl, _ in options])[pick]
    qcfg = BlockQuantConfig(
        format_text=cfg.format_text,
        g=cfg.g,
        tables=(table_a, table_b),
        sfmt=cfg.sfmt,
        rule=cfg.rule,
        assignments=assignments,
        sign_flips=flips if flip else None,
    )
    layer = quantize_layer(W, qcfg)
    recon = reconstruct(layer)
    score = fidelity(W, recon, norm_values, cfg.g).acos
    plan = PairPlan(
        fmt_a=name_a,
        fmt_b=name_b,
        partition_p=cfg.partition_p,
        axes=cfg.axes,
        sign_flip_enabled=flip,
        score=score,
        selector_histogram=tuple(layer.meta.get("selector_histogram", ())),
    )
    return score, plan, layer


def fit_fixed_pair(W, norms, name_a: str, name_b: str, cfg: PairSearchConfig) -> PairSearchResult:
    """Steps 1-4 for one given (first, second) atom pair, no alphabet scan."""
    W = np.asarray(W, dtype=np.float64)
    norm_values = None
    if norms is not None:
        norm_values = norms.values if isinstance(norms, ChannelNorms) else np.asarray(norms)
    registry = atom_registry()
    flip = cfg.flip_enabled()

    def build(name, mask=None):
        if name in ADAPTIVE_ATOMS:
            samples, weights = _block_samples(W, norm_values, cfg.g, mask=mask)
            w_arg = weights if cfg.axes.dd_weighting == "channel" else None
            return _fit_adaptive(name, samples, w_arg, cfg.lfmt)
        return resolve_table(name, cfg.lfmt, registry)

    table_a = build(name_a)
    q_a = _quantize_option(W, table_a, cfg, False)
    recon_a = reconstruct(q_a)
    part_a = _per_block_metric(W, recon_a, norm_values, cfg.g, cfg.axes.partition_metric)
    keep_mask = _partition(part_a, cfg)
    residual_mask = ~keep_mask if not np.all(keep_mask) else None
    table_b = build(name_b, mask=residual_mask)

    def score(table, flipped):
        q = _quantize_option(W, table, cfg, flipped)
        return _per_block_metric(
            W, reconstruct(q), norm_values, cfg.g, cfg.axes.reassign_metric
        )

    options = [(0, False, score(table_a, False)), (1, False, score(table_b, False))]
    if flip:
        options.append((0, True, score(table_a, True)))
        options.append((1, True, score(table_b, True)))
    _, plan, layer = _finish_pair(
        W, norm_values, cfg, name_a, name_b, table_a, table_b, options
    )
    report = {
        "pair": [name_a, name_b],
        "partition_p": cfg.partition_p,
        "sign_flip": flip,
        "selector_histogram": list(plan.selector_histogram),
        "score_acos": plan.score,
    }
    return PairSearchResult(plan=plan, layer=layer, report=report)


@dataclass
class LayerQuantResult:
    """One layer taken through the full path: outlier extraction, codebook
    (or pair) quantization, then sparse residual fitting."""

    layer: QuantizedLayer
    recon: np.ndarray
    score: "object"  # metrics.FidelityScore
    cost_bits_logical: int
    cost_bits_deployed: int
    pair_report: dict | None = None

    @property
    def bpw_logical(self) -> float:
        m, k = self.layer.shape
        return self.cost_bits_logical / (m * k)

    @property
    def bpw_deployed(self) -> float:
        m, k = self.layer.shape
        return self.cost_bits_deployed / (m * k)


def _layer_cost_bits(layer: QuantizedLayer, spec: FormatSpec, deployed: bool) -> int:
    from .formats import DEFAULT_DEPLOY_PROFILE, atom_bits, atom_deployed_bits

    if deployed:
        code_bits = max(atom_deployed_bits(a, DEFAULT_DEPLOY_PROFILE) for a in spec.atoms)
    else:
        code_bits = max(atom_bits(a) for a in spec.atoms)
    code_bits = max(code_bits, layer.code_bits)
    sfmt = parse_scale_format(layer.sfmt_name)
    scale_bits = sfmt.deployed_bits if deployed else sfmt.bits
    bits = layer.codes.size * code_bits + layer.scale_raws.size * scale_bits
    if layer.outliers is not None:
        bits += 32 * layer.outliers.count
    if layer.residuals is not None:
        bits += 32 * layer.residuals.count
    return int(bits)


def quantize_full(
    W,
    norms,
    spec: FormatSpec,
    lfmt: ElementGrid | None = None,
    rule: str = "absmax",
    axes: PairAxes | None = None,
    partition_p: float = 50.0,
) -> LayerQuantResult:
    """Quantize one layer under a parsed format, corrections included.

    Outlier extraction (when the spec carries .OPQ) preprocesses the
    tensor before codebook fitting; the sparse residual (.Wr) fits after
    reconstruction.  Pair formats run the fixed-pair fit; single formats
    quantize directly.
    """
    from .corrections import extract_outliers, fit_wr
    from .metrics import fidelity

    W = np.asarray(W, dtype=np.float64)
    norm_values = None
    if norms is not None:
        norm_values = norms.values if isinstance(norms, ChannelNorms) else np.asarray(norms)

    work = W
    ostream = None
    if spec.opq_threshold is not None:
        work, ostream = extract_outliers(
            W, spec.opq_threshold, g=spec.block_size if spec.block_size else 16
        )

    pair_report = None
    if spec.is_pair:
        sfmt = parse_scale_format(spec.scale_fmt)
        cfg = PairSearchConfig(
            sfmt=sfmt,
            g=spec.block_size,
            lfmt=lfmt,
            rule=rule,
            partition_p=partition_p,
            axes=axes or PairAxes(),
            format_text=spec.to_string(),
        )
        res = fit_fixed_pair(work, norm_values, spec.atoms[0], spec.atoms[1], cfg)
        layer = res.layer
        pair_report = res.report
    else:
        layer = quantize_layer(work, config_from_spec(spec, lfmt=lfmt, rule=rule))

    layer.outliers = ostream
    recon = reconstruct(layer)
    if spec.wr_percent is not None:
        layer.residuals = fit_wr(W, recon, norm_values, spec.wr_percent / 100.0)
        recon = reconstruct(layer)
    # scores always use the metric's own block granularity so candidates
    # with different quantization scopes stay comparable
    score = fidelity(W, recon, norm_values, g=16)
    return LayerQuantResult(
        layer=layer,
        recon=recon,
        score=score,
        cost_bits_logical=_layer_cost_bits(layer, spec, deployed=False),
        cost_bits_deployed=_layer_cost_bits(layer, spec, deployed=True),
        pair_report=pair_report,
    )
