"""Promotion profiles and the exact multiple-choice knapsack allocation.

Each layer gets a *profile*: the fidelity score (weighted blockwise
cosine) and exact storage cost of every candidate, where a candidate is
one format (the base, or a higher-precision promotion target) combined
with one correction subset (none, outlier extraction, sparse residual,
or both).  Given a global bits-per-weight budget, the allocator picks
exactly one candidate per layer maximizing the parameter-weighted score:

    max  sum_l n_l * x_{l,f} * rho_l(f)
    s.t. sum_l n_l * x_{l,f} * b_f  <=  N * B,   one f per layer.

Costs are exact integer bit counts (code bits + scale words + 32 bits per
correction entry), so the dynamic program solves the knapsack exactly; a
gcd reduction and a per-layer minimum-cost offset keep the DP small.
Ties break toward lower cost, then lower layer index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .formats import (
    WR_DEFAULT_PERCENT,
    FormatSpec,
    default_opq_threshold,
    parse_format,
)

__all__ = [
    "CandidateScore",
    "PromotionProfile",
    "AllocationSolution",
    "InfeasibleBudgetError",
    "CORRECTION_SUBSETS",
    "build_profiles",
    "solve_mckp",
    "greedy_fixed_promotion",
]

CORRECTION_SUBSETS = ("none", "opq", "wr", "opq+wr")


class InfeasibleBudgetError(ValueError):
    def __init__(self, budget: float, min_feasible: float):
        self.budget = budget
        self.min_feasible = min_feasible
        super().__init__(
            f"budget {budget:.4f} bpw below the minimum feasible {min_feasible:.4f} bpw"
        )


@dataclass(frozen=True)
class CandidateScore:
    format_text: str
    corrections: str
    acos: float
    bpw: float
    cost_bits: int


@dataclass
class PromotionProfile:
    layer_id: str
    n_elems: int
    candidates: list  # CandidateScore; [0] is (base, none)


@dataclass
class AllocationSolution:
    picks: list  # candidate index per layer, profile order
    objective: float  # sum n_l * rho
    total_cost_bits: int
    achieved_bpw: float
    budget_bpw: float
    per_layer: list = field(default_factory=list)  # dicts for the report


def _apply_corrections_spec(spec: FormatSpec, subset: str) -> FormatSpec:
    opq = spec.opq_threshold if spec.opq_threshold is not None else default_opq_threshold()
    wr = spec.wr_percent if spec.wr_percent is not None else WR_DEFAULT_PERCENT
    return replace(
        spec,
        opq_threshold=opq if "opq" in subset else None,
        wr_percent=wr if "wr" in subset else None,
        promotion=None,
    )


def build_profiles(
    layers,
    base_format: str,
    promo_formats=(),
    corrections=CORRECTION_SUBSETS,
    lfmt=None,
    rule: str = "absmax",
) -> list:
    """Quantize every (layer, format, correction subset) candidate and
    record its score and exact cost.

    ``layers`` is an iterable of (layer_id, W, norms).  Candidates that
    cannot host a layer well simply record their saturated score; nothing
    is dropped.
    """
    from .pairsearch import quantize_full

    base_spec = parse_format(base_format)
    specs = [("base", base_spec)] + [(f, parse_format(f)) for f in promo_formats]
    profiles = []
    for layer_id, W, norms in layers:
        n = int(np.asarray(W).size)
        cands = []
        for fmt_label, spec in specs:
            for subset in corrections:
                cspec = _apply_corrections_spec(spec, subset)
                result = quantize_full(W, norms, cspec, lfmt=lfmt, rule=rule)
                bits = result.cost_bits_logical
                cands.append(
                    CandidateScore(
                        format_text=spec.to_string(),
                        corrections=subset,
                        acos=result.score.acos,
                        bpw=bits / n,
                        cost_bits=bits,
                    )
                )
        profiles.append(PromotionProfile(layer_id=layer_id, n_elems=n, candidates=cands))
    return profiles


def solve_mckp(profiles, budget_bpw: float) -> AllocationSolution:
    """Exact DP maximizer of parameter-weighted score under the bit budget."""
    n_total = sum(p.n_elems for p in profiles)
    capacity = math.floor(n_total * budget_bpw)
    costs = [[c.cost_bits for c in p.candidates] for p in profiles]
    values = [
        [p.n_elems * c.acos for c in p.candidates] for p in profiles
    ]
    base_cost = sum(c[0] for c in costs)
    min_cost = sum(min(c) for c in costs)
    if min_cost > capacity:
        raise InfeasibleBudgetError(budget_bpw, base_cost / n_total)

    # offset by per-layer minima, then gcd-reduce the remaining slack
    offsets = [min(c) for c in costs]
    red = [[ci - off for ci in c] for c, off in zip(costs, offsets)]
    slack = capacity - sum(offsets)
    unit = 0
    for c in red:
        for ci in c:
            unit = math.gcd(unit, ci)
    if unit == 0:
        unit = 1
    red = [[ci // unit for ci in c] for c in red]
    slack_units = slack // unit

    best_val, picks = _kernels.mckp_dp(red, values, int(slack_units))
    if picks is None:
        raise InfeasibleBudgetError(budget_bpw, base_cost / n_total)

    total_cost = sum(costs[i][picks[i]] for i in range(len(profiles)))
    objective = float(sum(values[i][picks[i]] for i in range(len(profiles))))
    per_layer = [
        {
            "layer": p.layer_id,
            "choice": p.candidates[picks[i]].format_text,
            "corrections": p.candidates[picks[i]].corrections,
            "acos": p.candidates[picks[i]].acos,
            "bpw": p.candidates[picks[i]].bpw,
        }
        for i, p in enumerate(profiles)
    ]
    return AllocationSolution(
        picks=[int(i) for i in picks],
        objective=objective,
        total_cost_bits=int(total_cost),
        achieved_bpw=total_cost / n_total,
        budget_bpw=budget_bpw,
        per_layer=per_layer,
    )


def greedy_fixed_promotion(profiles, budget_bpw: float, target_index: int = None) -> AllocationSolution:
    """The fixed "+PFMT" path: promote worst-scoring layers first until the
    budget is spent.  Candidate 0 is base; the target defaults to the
    first non-base candidate."""
    n_total = sum(p.n_elems for p in profiles)
    capacity = math.floor(n_total * budget_bpw)
    picks = [0] * len(profiles)
    total = sum(p.candidates[0].cost_bits for p in profiles)
    if total > capacity:
        raise InfeasibleBudgetError(budget_bpw, total / n_total)
    order = sorted(range(len(profiles)), key=lambda i: profiles[i].candidates[0].acos)
    for i in order:
        p = profiles[i]
        ti = target_index if target_index is not None else min(1, len(p.candidates) - 1)
        delta = p.candidates[ti].cost_bits - p.candidates[0].cost_bits
        if delta <= 0 or total + delta <= capacity:
            picks[i] = ti
            total += delta
    objective = float(sum(p.n_elems * p.candidates[picks[i]].acos for i, p in enumerate(profiles)))
    per_layer = [
        {
            "layer": p.layer_id,
            "choice": p.candidates[picks[i]].format_text,
            "corrections": p.candidates[picks[i]].corrections,
            "acos": p.candidates[picks[i]].acos,
            "bpw": p.candidates[picks[i]].bpw,
        }
        for i, p in enumerate(profiles)
    ]
    return AllocationSolution(
        picks=picks,
        objective=objective,
        total_cost_bits=int(total),
        achieved_bpw=total / n_total,
        budget_bpw=budget_bpw,
        per_layer=per_layer,
    )
