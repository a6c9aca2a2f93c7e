"""End-to-end orchestration: calibrate, pair-search, profile, allocate,
materialize.

A run is driven by one declarative JSON config; every randomized step
takes an explicit seed, and reports/blobs are byte-deterministic for a
fixed (config, seed).  Steps:

1. *Calibrate*: load channel-norm files, or compute them from synthetic
   activation statistics.
2. *Pair-search / quantize*: per layer, either the fixed format from the
   format string or a search over a configured alphabet.  Outlier
   extraction runs before codebook fitting, the sparse residual after.
3. *Profile*: score every (format, correction) candidate per layer.
4. *Allocate*: exact knapsack at the budget, or greedy fixed promotion.
5. *Materialize*: write layer blobs and the run report.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .allocator import (
    CORRECTION_SUBSETS,
    build_profiles,
    greedy_fixed_promotion,
    solve_mckp,
)
from .blockquant import serialize_layer
from .containers import read_tensor, write_tensor
from .formats import FormatSpec, parse_format
from .metrics import ChannelNorms, channel_norms
from .pairsearch import (
    PairAxes,
    PairSearchConfig,
    pair_search,
    quantize_full,
    resolve_grid,
)
from .scalewords import parse_scale_format

__all__ = [
    "PipelineConfig",
    "PipelineError",
    "run_pipeline",
    "synth_tensor",
    "synth_tensors",
    "load_config",
]


class PipelineError(ValueError):
    pass


@dataclass
class PipelineConfig:
    format: str
    layers: list  # {"name", "weights": path} or {"name", "shape", "dist", "seed"}
    lut_format: str | None = None
    rule: str = "absmax"
    axes: PairAxes = field(default_factory=PairAxes)
    partition_p: float = 50.0
    search_alphabet: list | None = None  # full per-layer pair search when set
    promo_candidates: list = field(default_factory=list)
    corrections: tuple = CORRECTION_SUBSETS
    budget: float | None = None  # extra bpw over base for fixed "+PFMT" promotion
    seed: int = 0
    out_dir: str | None = None

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        known = {
            "format",
            "layers",
            "lut_format",
            "rule",
            "axes",
            "partition_p",
            "search_alphabet",
            "promo_candidates",
            "corrections",
            "budget",
            "seed",
            "out_dir",
        }
        unknown = set(d) - known
        if unknown:
            raise PipelineError(f"unknown config keys: {sorted(unknown)}")
        axes = PairAxes(**d.get("axes", {}))
        return PipelineConfig(
            format=d["format"],
            layers=d["layers"],
            lut_format=d.get("lut_format"),
            rule=d.get("rule", "absmax"),
            axes=axes,
            partition_p=d.get("partition_p", 50.0),
            search_alphabet=d.get("search_alphabet"),
            promo_candidates=d.get("promo_candidates", []),
            corrections=tuple(d.get("corrections", CORRECTION_SUBSETS)),
            budget=d.get("budget"),
            seed=d.get("seed", 0),
            out_dir=d.get("out_dir"),
        )


def load_config(path: str) -> PipelineConfig:
    with open(path) as f:
        return PipelineConfig.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# synthetic tensors
# ---------------------------------------------------------------------------


def synth_tensor(shape, dist: str = "gaussian", seed: int = 0, **params) -> np.ndarray:
    """Reproducible synthetic weight tensors.

    gaussian: unit normal.  student_t: df (default 4), rescaled to unit RMS.
    spike_mix: unit normal plus a ``rate`` fraction of ``magnitude``-sigma
    spikes, the heavy-tailed shape that motivates outlier extraction.
    """
    rng = np.random.default_rng(seed)
    if dist == "gaussian":
        return rng.standard_normal(shape)
    if dist == "student_t":
        df = params.get("df", 4)
        x = rng.standard_t(df, size=shape)
        return x / np.sqrt(df / (df - 2))
    if dist == "spike_mix":
        rate = params.get("rate", 0.003)
        magnitude = params.get("magnitude", 8.0)
        x = rng.standard_normal(shape)
        spikes = rng.random(shape) < rate
        x = np.where(spikes, np.sign(x) * magnitude, x)
        return x
    raise PipelineError(f"unknown synthetic distribution {dist!r}")


def synth_tensors(specs, out_dir: str) -> list:
    """Write synthetic tensors to container files; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for sp in specs:
        arr = synth_tensor(
            tuple(sp["shape"]),
            dist=sp.get("dist", "gaussian"),
            seed=sp.get("seed", 0),
            **{k: v for k, v in sp.items() if k in ("rate", "magnitude", "df")},
        )
        path = os.path.join(out_dir, f"{sp['name']}.sopt")
        write_tensor(path, arr, name=sp["name"], dtype=sp.get("dtype", "f32"))
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# the five pipeline steps
# ---------------------------------------------------------------------------


def _load_layer(entry: dict, seed: int):
    name = entry["name"]
    if "weights" in entry:
        _, W = read_tensor(entry["weights"])
    elif "shape" in entry:
        W = synth_tensor(
            tuple(entry["shape"]),
            dist=entry.get("dist", "gaussian"),
            seed=entry.get("seed", seed),
            **{k: v for k, v in entry.items() if k in ("rate", "magnitude", "df")},
        )
    else:
        raise PipelineError(f"layer {name}: needs 'weights' or 'shape'")
    if W.ndim != 2:
        raise PipelineError(f"layer {name}: expected a 2-D tensor, got shape {W.shape}")

    norms = None
    if "norms" in entry:
        _, c = read_tensor(entry["norms"])
        norms = ChannelNorms(values=c.reshape(-1))
    elif entry.get("synth_norms"):
        rng = np.random.default_rng(entry.get("norms_seed", seed + 1))
        acts = rng.standard_normal((64, W.shape[1])) * (1.0 + rng.random(W.shape[1]))
        norms = channel_norms(acts)
    return name, W, norms


def _needs_norms(cfg: PipelineConfig, spec: FormatSpec) -> bool:
    """Channel norms are mandatory only when an activation-weighted axis
    is actually exercised: pair partitioning / adaptive fits."""
    uses_pair_machinery = bool(cfg.search_alphabet) or spec.is_pair
    if not uses_pair_machinery:
        return False
    return cfg.axes.partition_metric == "acos" or cfg.axes.dd_weighting == "channel"


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Execute the five steps; returns the run report (and writes blobs +
    report JSON to cfg.out_dir when set)."""
    spec = parse_format(cfg.format)
    lfmt = resolve_grid(cfg.lut_format) if cfg.lut_format else None

    # step 1: calibrate
    loaded = [_load_layer(entry, cfg.seed) for entry in cfg.layers]
    if _needs_norms(cfg, spec) and any(n is None for _, _, n in loaded):
        missing = [name for name, _, n in loaded if n is None]
        raise PipelineError(
            f"activation-weighted axes need channel norms; missing for {missing} "
            "(provide 'norms' files or set 'synth_norms': true)"
        )

    report_layers = []
    blobs = {}

    promo = spec.promotion
    if promo is None:
        # steps 2 + 5 only: fixed format per layer (or alphabet search)
        for name, W, norms in loaded:
            result, searched = _quantize_one(W, norms, spec, cfg, lfmt)
            blobs[name] = serialize_layer(result.layer)
            report_layers.append(_layer_report(name, W, result, searched))
    else:
        # steps 2-4: profiles over base + promotion candidates, then allocate
        candidates = list(promo.candidates) if promo.kind == "knapsack" else []
        if not candidates:
            candidates = cfg.promo_candidates or (
                [promo.target] if promo.kind == "fixed" else []
            )
        base_text = FormatSpec(
            atoms=spec.atoms,
            block_size=spec.block_size,
            scale_fmt=spec.scale_fmt,
            opq_threshold=spec.opq_threshold,
            wr_percent=spec.wr_percent,
        ).to_string()
        profiles = build_profiles(
            [(n, W, nr) for n, W, nr in loaded],
            base_format=base_text,
            promo_formats=candidates,
            corrections=cfg.corrections,
            lfmt=lfmt,
            rule=cfg.rule,
        )
        n_total = sum(p.n_elems for p in profiles)
        base_bpw = sum(p.candidates[0].cost_bits for p in profiles) / n_total
        if promo.kind == "knapsack":
            solution = solve_mckp(profiles, base_bpw + promo.budget)
        else:
            solution = greedy_fixed_promotion(profiles, base_bpw + (cfg.budget or 0.0))
        # step 5: materialize the chosen candidate per layer
        for (name, W, norms), pick, prof in zip(loaded, solution.picks, profiles):
            chosen = prof.candidates[pick]
            cspec = parse_format(chosen.format_text)
            from .allocator import _apply_corrections_spec

            cspec = _apply_corrections_spec(cspec, chosen.corrections)
            result = quantize_full(
                W, norms, cspec, lfmt=lfmt, rule=cfg.rule, axes=cfg.axes,
                partition_p=cfg.partition_p,
            )
            blobs[name] = serialize_layer(result.layer)
            rep = _layer_report(name, W, result, None)
            rep["chosen_format"] = chosen.format_text
            rep["corrections"] = chosen.corrections
            report_layers.append(rep)
        alloc_report = {
            "objective": solution.objective,
            "achieved_bpw": solution.achieved_bpw,
            "budget_bpw": solution.budget_bpw,
            "base_bpw": base_bpw,
            "per_layer": solution.per_layer,
        }

    n_total = sum(np.prod(e["shape"]) for e in report_layers)
    weighted_acos = (
        sum(e["acos"] * np.prod(e["shape"]) for e in report_layers) / n_total
    )
    achieved = sum(e["bits_logical"] for e in report_layers) / n_total
    report = {
        "format": cfg.format,
        "lut_format": cfg.lut_format,
        "seed": cfg.seed,
        "layers": report_layers,
        "model": {
            "weighted_acos": float(weighted_acos),
            "weighted_ppm_gap": float((1.0 - weighted_acos) * 1e6),
            "achieved_bpw_logical": float(achieved),
            "total_elements": int(n_total),
        },
    }
    if promo is not None:
        report["allocation"] = alloc_report

    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        for name, blob in blobs.items():
            with open(os.path.join(cfg.out_dir, f"{name}.sopq"), "wb") as f:
                f.write(blob)
        with open(os.path.join(cfg.out_dir, "report.json"), "w") as f:
            json.dump(report, f, sort_keys=True, indent=1)
    report["_blobs"] = blobs
    return report


def _quantize_one(W, norms, spec: FormatSpec, cfg: PipelineConfig, lfmt):
    if cfg.search_alphabet:
        ps_cfg = PairSearchConfig(
            sfmt=parse_scale_format(spec.scale_fmt or "UE8M0"),
            g=spec.block_size if spec.scale_fmt else 0,
            lfmt=lfmt,
            rule=cfg.rule,
            partition_p=cfg.partition_p,
            axes=cfg.axes,
            format_text=spec.to_string(),
        )
        res = pair_search(W, norms, cfg.search_alphabet, ps_cfg)
        from .metrics import fidelity
        from .blockquant import reconstruct
        from .pairsearch import LayerQuantResult, _layer_cost_bits

        recon = reconstruct(res.layer)
        result = LayerQuantResult(
            layer=res.layer,
            recon=recon,
            score=fidelity(W, recon, norms.values if norms else None, g=16),
            cost_bits_logical=_layer_cost_bits(res.layer, spec, deployed=False),
            cost_bits_deployed=_layer_cost_bits(res.layer, spec, deployed=True),
            pair_report=res.report,
        )
        return result, res.report
    return quantize_full(
        W, norms, spec, lfmt=lfmt, rule=cfg.rule, axes=cfg.axes, partition_p=cfg.partition_p
    ), None


def _layer_report(name, W, result, searched):
    rep = {
        "name": name,
        "shape": list(result.layer.shape),
        "format": result.layer.format_text,
        "acos": result.score.acos,
        "ppm_gap": result.score.ppm_gap,
        "mse": result.score.mse,
        "weighted_mse": result.score.weighted_mse,
        "bpw_logical": result.bpw_logical,
        "bpw_deployed": result.bpw_deployed,
        "bits_logical": result.cost_bits_logical,
        "k_star": result.layer.k_star,
        "saturated_scales": result.layer.saturation_count,
    }
    if result.layer.outliers is not None:
        rep["outliers"] = result.layer.outliers.count
    if result.layer.residuals is not None:
        rep["residual_entries"] = result.layer.residuals.count
    if searched:
        rep["pair_search"] = searched
    elif result.pair_report:
        rep["pair_search"] = result.pair_report
    return rep
