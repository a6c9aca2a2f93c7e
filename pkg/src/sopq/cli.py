"""Command-line front end.

Subcommands: grids, hosting-table, parse-fmt, quantize, synth, profile,
allocate, pipeline, kernel-check.  Exit codes: 0 success, 2 config or
parse error, 3 infeasible budget, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4


def _cmd_grids(args) -> int:
    from .grids import grid_dump
    from .pairsearch import resolve_grid

    dump = grid_dump(resolve_grid(args.grid))
    if args.json:
        print(json.dumps(dump, sort_keys=True, indent=1))
    else:
        print(f"{dump['name']}: {dump['count']} values")
        print(
            f"  normal range [{dump['min_normal']}, {dump['max_normal']}]"
            f"  ratio {dump['dynamic_ratio_normal']:g}"
        )
        print(
            f"  subnormal floor {dump['min_subnormal']}"
            f"  extended ratio {dump['dynamic_ratio_subnormal']:g}"
        )
        print("  values:", " ".join(f"{v:g}" for v in dump["values"]))
    return EXIT_OK


def _cmd_hosting_table(args) -> int:
    from .atoms import atom_registry
    from .grids import hosting_report
    from .pairsearch import resolve_grid

    grids = [resolve_grid(n) for n in args.grids.split(",")]
    reg = atom_registry()
    names = args.atoms.split(",") if args.atoms else sorted(reg)
    rows = []
    for name in names:
        atom = reg[name]
        row = {"atom": name, "ratio": round(atom.dynamic_ratio, 1)}
        for g in grids:
            rep = hosting_report(atom.values, g)
            row[g.name] = {"native": "host", "subnormal": "subnormal", "unhostable": "no"}[
                rep.hosting_class
            ]
        rows.append(row)
    if args.json:
        print(json.dumps(rows, sort_keys=True, indent=1))
    else:
        hdr = ["atom", "ratio"] + [g.name for g in grids]
        print("  ".join(f"{h:>10}" for h in hdr))
        for row in rows:
            print("  ".join(f"{str(row.get(h, '')):>10}" for h in hdr))
    return EXIT_OK


def _cmd_parse_fmt(args) -> int:
    from .formats import FormatParseError, compute_bpw, parse_format

    try:
        spec = parse_format(args.format)
    except FormatParseError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    bpw = compute_bpw(spec, layer_elems=args.layer_elems)
    out = {
        "format": spec.to_string(),
        "atoms": list(spec.atoms),
        "block_size": spec.block_size,
        "scale_format": spec.scale_fmt,
        "promotion": spec.promotion.to_string() if spec.promotion else None,
        "opq_threshold": spec.opq_threshold,
        "wr_percent": spec.wr_percent,
        "bpw": {
            "logical": bpw.logical,
            "deployed": bpw.deployed,
            "breakdown": bpw.breakdown,
        },
    }
    print(json.dumps(out, sort_keys=True, indent=1))
    return EXIT_OK


def _cmd_synth(args) -> int:
    from .pipeline import synth_tensors

    specs = []
    shape = [int(x) for x in args.shape.split(",")]
    for i in range(args.count):
        specs.append(
            {
                "name": f"{args.prefix}{i}",
                "shape": shape,
                "dist": args.dist,
                "seed": args.seed + i,
            }
        )
    paths = synth_tensors(specs, args.out)
    for p in paths:
        print(p)
    return EXIT_OK


def _cmd_quantize(args) -> int:
    from .containers import read_tensor
    from .formats import FormatParseError, parse_format
    from .metrics import ChannelNorms
    from .pairsearch import quantize_full, resolve_grid
    from .blockquant import serialize_layer

    try:
        spec = parse_format(args.format)
    except FormatParseError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    _, W = read_tensor(args.weights)
    norms = None
    if args.norms:
        _, c = read_tensor(args.norms)
        norms = ChannelNorms(values=c.reshape(-1))
    lfmt = resolve_grid(args.lut) if args.lut else None
    result = quantize_full(W, norms, spec, lfmt=lfmt, rule=args.rule)
    if args.out:
        with open(args.out, "wb") as f:
            f.write(serialize_layer(result.layer))
    print(
        json.dumps(
            {
                "format": spec.to_string(),
                "shape": list(result.layer.shape),
                "acos": result.score.acos,
                "ppm_gap": result.score.ppm_gap,
                "mse": result.score.mse,
                "bpw_logical": result.bpw_logical,
                "bpw_deployed": result.bpw_deployed,
                "k_star": result.layer.k_star,
            },
            sort_keys=True,
            indent=1,
        )
    )
    return EXIT_OK


def _cmd_pipeline(args) -> int:
    from .allocator import InfeasibleBudgetError
    from .pipeline import PipelineError, load_config, run_pipeline

    try:
        cfg = load_config(args.config)
        if args.out:
            cfg.out_dir = args.out
        report = run_pipeline(cfg)
    except InfeasibleBudgetError as e:
        print(str(e), file=sys.stderr)
        return EXIT_INFEASIBLE
    except (PipelineError, KeyError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    report.pop("_blobs", None)
    print(json.dumps(report, sort_keys=True, indent=1))
    return EXIT_OK


def _cmd_profile(args) -> int:
    from .allocator import build_profiles
    from .pipeline import PipelineError, _load_layer, load_config
    from .pairsearch import resolve_grid

    try:
        cfg = load_config(args.config)
        loaded = [_load_layer(e, cfg.seed) for e in cfg.layers]
        lfmt = resolve_grid(cfg.lut_format) if cfg.lut_format else None
        profiles = build_profiles(
            loaded,
            base_format=cfg.format,
            promo_formats=cfg.promo_candidates,
            corrections=cfg.corrections,
            lfmt=lfmt,
            rule=cfg.rule,
        )
    except (PipelineError, KeyError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = [
        {
            "layer": p.layer_id,
            "n_elems": p.n_elems,
            "candidates": [
                {
                    "format": c.format_text,
                    "corrections": c.corrections,
                    "acos": c.acos,
                    "bpw": c.bpw,
                }
                for c in p.candidates
            ],
        }
        for p in profiles
    ]
    print(json.dumps(out, sort_keys=True, indent=1))
    return EXIT_OK


def _cmd_allocate(args) -> int:
    from .allocator import InfeasibleBudgetError, build_profiles, solve_mckp
    from .pipeline import PipelineError, _load_layer, load_config
    from .pairsearch import resolve_grid

    try:
        cfg = load_config(args.config)
        loaded = [_load_layer(e, cfg.seed) for e in cfg.layers]
        lfmt = resolve_grid(cfg.lut_format) if cfg.lut_format else None
        profiles = build_profiles(
            loaded,
            base_format=cfg.format,
            promo_formats=cfg.promo_candidates,
            corrections=cfg.corrections,
            lfmt=lfmt,
            rule=cfg.rule,
        )
        n_total = sum(p.n_elems for p in profiles)
        base_bpw = sum(p.candidates[0].cost_bits for p in profiles) / n_total
        budget = base_bpw + (args.budget if args.budget is not None else cfg.budget or 0.0)
        solution = solve_mckp(profiles, budget)
    except InfeasibleBudgetError as e:
        print(str(e), file=sys.stderr)
        return EXIT_INFEASIBLE
    except (PipelineError, KeyError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(
        json.dumps(
            {
                "objective": solution.objective,
                "achieved_bpw": solution.achieved_bpw,
                "budget_bpw": solution.budget_bpw,
                "per_layer": solution.per_layer,
            },
            sort_keys=True,
            indent=1,
        )
    )
    return EXIT_OK


def _cmd_kernel_check(args) -> int:
    from .grids import hif_grid
    from .sopkernel import KernelConfig, bandwidth_split, sop_gemm

    rng = np.random.default_rng(args.seed)
    grid = hif_grid(5, (0, 1, 2, 3))
    failures = 0
    for trial in range(args.trials):
        t, m, nb = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 5)
        g = int(rng.choice([1, 4, 16]))
        k = g * int(nb)
        qx = rng.choice(grid.values, size=(t, k))
        qw = rng.choice(grid.values, size=(m, k))
        sx = 2.0 ** rng.integers(-6, 7, size=(t, nb)).astype(np.float64)
        sw = 2.0 ** rng.integers(-6, 7, size=(m, nb)).astype(np.float64)
        oracle = (np.repeat(sx, g, 1) * qx) @ (np.repeat(sw, g, 1) * qw).T
        y_real = sop_gemm(qx, sx, qw, sw, KernelConfig(g=g, datapath="real"))
        y_int = sop_gemm(
            qx, sx, qw, sw, KernelConfig(g=g, datapath="hif_integer", a_shift_max=3),
            hif_grid=grid,
        )
        rel = np.max(np.abs(y_real - oracle)) / max(1.0, np.max(np.abs(oracle)))
        if rel > 1e-10 or not np.array_equal(y_int, oracle):
            failures += 1
    bw = bandwidth_split(KernelConfig())
    status = "PASS" if failures == 0 else f"FAIL ({failures}/{args.trials})"
    print(f"kernel equivalence over {args.trials} random instances: {status}")
    print(
        f"bandwidth split at (128,128,g=16,12,4): "
        f"{bw.scale_bits_per_kblock}/{bw.scale_bits_per_kblock + bw.operand_bits_per_kblock}"
        f" = {bw.scale_fraction:.4f} scale fraction"
    )
    return EXIT_OK if failures == 0 else 1


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="sopq", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("grids", help="dump a grid's values and range metadata")
    p.add_argument("grid", help="E2M3, E4M3, HIF7, HIF8, ...")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=_cmd_grids)

    p = sub.add_parser("hosting-table", help="atom-vs-grid hosting capacity table")
    p.add_argument("--grids", default="E2M3,HIF7,E3M3,HIF8,E4M3")
    p.add_argument("--atoms", default=None, help="comma list; default: whole registry")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=_cmd_hosting_table)

    p = sub.add_parser("parse-fmt", help="parse a format string, print spec + bpw")
    p.add_argument("format")
    p.add_argument("--layer-elems", type=int, default=None)
    p.set_defaults(fn=_cmd_parse_fmt)

    p = sub.add_parser("synth", help="write synthetic weight tensors")
    p.add_argument("--out", required=True)
    p.add_argument("--shape", default="64,256")
    p.add_argument("--dist", default="gaussian", choices=["gaussian", "student_t", "spike_mix"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--prefix", default="layer")
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("quantize", help="quantize one tensor file")
    p.add_argument("--weights", required=True)
    p.add_argument("--format", required=True)
    p.add_argument("--norms", default=None)
    p.add_argument("--lut", default=None, help="hosting grid, e.g. HIF7")
    p.add_argument("--rule", default="absmax", choices=["absmax", "argmax"])
    p.add_argument("--out", default=None, help="write the layer blob here")
    p.set_defaults(fn=_cmd_quantize)

    p = sub.add_parser("profile", help="build promotion profiles from a config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_profile)

    p = sub.add_parser("allocate", help="solve the knapsack from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--budget", type=float, default=None, help="extra bpw over base")
    p.set_defaults(fn=_cmd_allocate)

    p = sub.add_parser("pipeline", help="run the full pipeline from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_pipeline)

    p = sub.add_parser("kernel-check", help="randomized kernel equivalence suite")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_kernel_check)

    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
