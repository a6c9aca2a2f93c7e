"""Promotion profiles and the exact knapsack solver."""

import itertools

import numpy as np
import pytest

from sopq.allocator import (
    AllocationSolution,
    CandidateScore,
    InfeasibleBudgetError,
    PromotionProfile,
    build_profiles,
    greedy_fixed_promotion,
    solve_mckp,
)


def synthetic_profile(layer_id, n, costs, values):
    cands = [
        CandidateScore(
            format_text=f"f{i}", corrections="none", acos=v, bpw=c / n, cost_bits=c
        )
        for i, (c, v) in enumerate(zip(costs, values))
    ]
    return PromotionProfile(layer_id=layer_id, n_elems=n, candidates=cands)


def brute_force(profiles, budget_bpw):
    n_total = sum(p.n_elems for p in profiles)
    cap = int(np.floor(n_total * budget_bpw))
    best = None
    for picks in itertools.product(*[range(len(p.candidates)) for p in profiles]):
        cost = sum(p.candidates[i].cost_bits for p, i in zip(profiles, picks))
        if cost > cap:
            continue
        val = sum(p.n_elems * p.candidates[i].acos for p, i in zip(profiles, picks))
        if best is None or val > best:
            best = val
    return best


class TestSolveMckp:
    def test_budget_exactly_base_keeps_all_base(self):
        profiles = [
            synthetic_profile(f"l{i}", 100, [400, 800, 1600], [0.9, 0.95, 0.99])
            for i in range(4)
        ]
        sol = solve_mckp(profiles, budget_bpw=4.0)  # 400/100 per layer
        assert sol.picks == [0, 0, 0, 0]
        assert sol.achieved_bpw == pytest.approx(4.0)

    def test_huge_budget_takes_best_candidate_everywhere(self):
        profiles = [
            synthetic_profile(f"l{i}", 50, [200, 300, 400], [0.9, 0.99, 0.95])
            for i in range(3)
        ]
        sol = solve_mckp(profiles, budget_bpw=100.0)
        assert sol.picks == [1, 1, 1]  # argmax value, not the priciest

    def test_infeasible_budget_names_minimum(self):
        profiles = [synthetic_profile("l0", 100, [800], [0.9])]
        with pytest.raises(InfeasibleBudgetError) as ei:
            solve_mckp(profiles, budget_bpw=1.0)
        assert ei.value.min_feasible == pytest.approx(8.0)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_exhaustive_on_random_instances(self, seed):
        rng = np.random.default_rng(seed)
        n_layers = int(rng.integers(2, 7))
        profiles = []
        for i in range(n_layers):
            n_cand = int(rng.integers(2, 6))
            n = int(rng.integers(32, 257))
            costs = sorted(int(c) for c in rng.integers(50, 2000, n_cand))
            values = sorted(rng.uniform(0.8, 1.0, n_cand))
            profiles.append(synthetic_profile(f"l{i}", n, costs, values))
        budget = float(rng.uniform(2.0, 30.0))
        expect = brute_force(profiles, budget)
        if expect is None:
            with pytest.raises(InfeasibleBudgetError):
                solve_mckp(profiles, budget)
        else:
            sol = solve_mckp(profiles, budget)
            assert sol.objective == pytest.approx(expect, rel=1e-12)
            assert sol.total_cost_bits <= sum(p.n_elems for p in profiles) * budget

    def test_objective_monotone_in_budget(self):
        rng = np.random.default_rng(42)
        profiles = []
        for i in range(5):
            costs = sorted(int(c) for c in rng.integers(100, 3000, 5))
            values = sorted(rng.uniform(0.85, 1.0, 5))
            profiles.append(synthetic_profile(f"l{i}", 128, costs, values))
        objs = []
        for budget in np.linspace(3.0, 25.0, 10):
            try:
                objs.append(solve_mckp(profiles, float(budget)).objective)
            except InfeasibleBudgetError:
                objs.append(-np.inf)
        assert all(a <= b + 1e-9 for a, b in zip(objs, objs[1:]))

    def test_exactly_one_candidate_per_layer(self):
        rng = np.random.default_rng(7)
        profiles = [
            synthetic_profile(f"l{i}", 64, [100, 150, 220], sorted(rng.uniform(0.8, 1, 3)))
            for i in range(6)
        ]
        sol = solve_mckp(profiles, 3.0)
        assert len(sol.picks) == 6
        assert all(0 <= p < 3 for p in sol.picks)

    def test_parameter_weighting_doubles_with_width(self):
        # doubling a layer's element count doubles both its objective and
        # cost contributions
        base = [
            synthetic_profile("a", 100, [400, 800], [0.9, 0.99]),
            synthetic_profile("b", 100, [400, 800], [0.8, 0.98]),
        ]
        wide = [
            synthetic_profile("a", 200, [800, 1600], [0.9, 0.99]),
            synthetic_profile("b", 200, [800, 1600], [0.8, 0.98]),
        ]
        s1 = solve_mckp(base, 6.0)
        s2 = solve_mckp(wide, 6.0)
        assert s2.picks == s1.picks
        assert s2.objective == pytest.approx(2 * s1.objective)
        assert s2.total_cost_bits == 2 * s1.total_cost_bits


class TestGreedyFixedPromotion:
    def test_promotes_worst_layers_first(self):
        profiles = [
            synthetic_profile("good", 100, [400, 800], [0.99, 0.995]),
            synthetic_profile("bad", 100, [400, 800], [0.90, 0.99]),
        ]
        # room to promote exactly one layer: the worst-scoring one
        sol = greedy_fixed_promotion(profiles, budget_bpw=(400 + 800) / 200)
        assert sol.picks == [0, 1]

    def test_no_budget_no_promotion(self):
        profiles = [synthetic_profile("l", 100, [400, 800], [0.9, 0.99])]
        sol = greedy_fixed_promotion(profiles, budget_bpw=4.0)
        assert sol.picks == [0]


class TestBuildProfiles:
    def test_base_only_has_four_correction_entries(self):
        rng = np.random.default_rng(0)
        layers = [("l0", rng.standard_normal((4, 32)) * 0.02, None)]
        profiles = build_profiles(layers, "NF4sUE4M3")
        assert len(profiles) == 1
        assert len(profiles[0].candidates) == 4  # none/opq/wr/opq+wr

    def test_bf16_class_promotion_reaches_unity(self):
        rng = np.random.default_rng(1)
        layers = [("l0", rng.standard_normal((4, 32)) * 0.02, None)]
        profiles = build_profiles(
            layers, "NF4sUE4M3", promo_formats=["E8M7sE8M7"], corrections=("none",)
        )
        acos_promo = profiles[0].candidates[1].acos
        assert acos_promo == pytest.approx(1.0, abs=1e-6)

    def test_profile_scores_improve_with_finer_formats(self):
        rng = np.random.default_rng(2)
        layers = [("l0", rng.standard_normal((8, 64)) * 0.02, None)]
        profiles = build_profiles(
            layers,
            "NF4sUE4M3",
            promo_formats=["E2M3sUE4M4", "E4M3sUE4M6"],
            corrections=("none",),
        )
        scores = [c.acos for c in profiles[0].candidates]
        assert scores[1] >= scores[0] and scores[2] >= scores[0]

    def test_costs_are_exact_integer_bits(self):
        rng = np.random.default_rng(3)
        W = rng.standard_normal((4, 32))
        profiles = build_profiles([("l0", W, None)], "NF4sUE4M3", corrections=("none",))
        c = profiles[0].candidates[0]
        # 4-bit codes + 8-bit scale words per 16-block
        assert c.cost_bits == 4 * W.size + 8 * (W.size // 16)
        assert c.bpw == pytest.approx(4.5)
