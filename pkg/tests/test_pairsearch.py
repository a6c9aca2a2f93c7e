"""Pair search: degenerations, exhaustive-assignment oracle, invariants."""

import itertools

import numpy as np
import pytest

from sopq.blockquant import BlockQuantConfig, quantize_layer, reconstruct
from sopq.metrics import acos_similarity, channel_norms
from sopq.pairsearch import (
    PairAxes,
    PairSearchConfig,
    fit_fixed_pair,
    pair_search,
    quantize_with_spec,
    resolve_table,
)
from sopq.formats import parse_format
from sopq.scalewords import parse_scale_format


def make_cfg(sfmt="S1E5M5", g=16, p=50.0, **kw):
    return PairSearchConfig(
        sfmt=parse_scale_format(sfmt), g=g, partition_p=p, format_text="test", **kw
    )


class TestDegenerations:
    def test_p100_equals_single_atom(self):
        rng = np.random.default_rng(0)
        W = rng.standard_normal((2, 32))
        cfg = make_cfg(p=100.0, sign_flip=False, include_sign_variants=False)
        res = fit_fixed_pair(W, None, "NF4", "NF4", cfg)
        single = quantize_with_spec(W, parse_format("NF4sS1E5M5"))
        assert np.allclose(reconstruct(res.layer), reconstruct(single))

    def test_same_table_twice_matches_single_codebook(self):
        rng = np.random.default_rng(1)
        W = rng.standard_normal((2, 48))
        cfg = make_cfg(sign_flip=False)
        res = fit_fixed_pair(W, None, "SH4", "SH4", cfg)
        single = quantize_with_spec(W, parse_format("SH4sS1E5M5"))
        # selector content is irrelevant when both tables are the same
        assert np.allclose(reconstruct(res.layer), reconstruct(single))

    def test_sign_flip_requires_affordance(self):
        W = np.ones((1, 16))
        cfg = make_cfg(sfmt="UE4M4", sign_flip=True)
        with pytest.raises(Exception):
            pair_search(W, None, ["NF4"], cfg)


class TestExhaustiveOracle:
    @pytest.mark.parametrize("seed", range(4))
    def test_tiny_instance_matches_brute_force(self, seed):
        """<= 4 blocks, 2 fixed atoms: enumerate every per-block table
        assignment and compare the layer metric."""
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((1, 64))  # 4 blocks of 16
        norms = np.abs(rng.standard_normal(64)) + 0.5
        cfg = make_cfg(sign_flip=False, include_sign_variants=False)
        res = pair_search(W, norms, ["NF4", "SH4"], cfg)

        tables = {n: resolve_table(n, None) for n in ("NF4", "SH4")}
        best = -np.inf
        for name_a, name_b in itertools.product(("NF4", "SH4"), repeat=2):
            for assign in itertools.product((0, 1), repeat=4):
                q = quantize_layer(
                    W,
                    BlockQuantConfig(
                        format_text="brute",
                        g=16,
                        tables=(tables[name_a], tables[name_b]),
                        sfmt=parse_scale_format("S1E5M5"),
                        assignments=np.array(assign).reshape(1, 4),
                    ),
                )
                score = acos_similarity(W, reconstruct(q), norms, g=16)
                best = max(best, score)
        assert res.plan.score == pytest.approx(best, abs=1e-12)

    def test_search_beats_every_single_atom(self):
        rng = np.random.default_rng(9)
        alphabet = ["NF4", "SH4", "BOF4"]
        for trial in range(6):
            W = np.random.default_rng(100 + trial).standard_normal((4, 64))
            norms = np.abs(np.random.default_rng(200 + trial).standard_normal(64)) + 0.1
            cfg = make_cfg()
            res = pair_search(W, norms, alphabet, cfg)
            for name in alphabet:
                single = quantize_with_spec(W, parse_format(f"{name}sS1E5M5"))
                s = acos_similarity(W, reconstruct(single), norms, g=16)
                assert res.plan.score >= s - 1e-12


class TestReassignment:
    def test_finishing_pass_never_worsens(self):
        # the final per-block best-of is at least as good per block as
        # keeping everything on the first table
        rng = np.random.default_rng(3)
        W = rng.standard_normal((2, 64))
        norms = np.abs(rng.standard_normal(64)) + 0.2
        cfg = make_cfg(sign_flip=False, include_sign_variants=False)
        res = fit_fixed_pair(W, norms, "NF4", "SH4", cfg)
        single = quantize_with_spec(W, parse_format("NF4sS1E5M5"))
        assert res.plan.score >= acos_similarity(W, reconstruct(single), norms, g=16) - 1e-12

    def test_selector_histogram_totals(self):
        rng = np.random.default_rng(4)
        W = rng.standard_normal((4, 64))
        cfg = make_cfg()
        res = pair_search(W, None, ["NF4", "SH4"], cfg)
        assert sum(res.plan.selector_histogram) == 4 * 4  # rows * blocks

    def test_mse_axis_variant(self):
        rng = np.random.default_rng(5)
        W = rng.standard_normal((2, 32))
        cfg = make_cfg(axes=PairAxes(partition_metric="mse", reassign_metric="mse"))
        res = pair_search(W, None, ["NF4", "SH4"], cfg)
        assert -1.0 <= res.plan.score <= 1.0

    def test_adaptive_second_atom_refits_on_residual_pool(self):
        rng = np.random.default_rng(6)
        # bimodal rows: NF4 fits one mode poorly; DD4 should absorb it
        W = np.concatenate(
            [rng.standard_normal((2, 32)), 0.05 * rng.standard_normal((2, 32))], axis=0
        )
        norms = np.abs(rng.standard_normal(32)) + 0.5
        cfg = make_cfg(g=16)
        res_pair = fit_fixed_pair(W, norms, "NF4", "DD4", cfg)
        single = quantize_with_spec(W, parse_format("NF4sS1E5M5"))
        s_single = acos_similarity(W, reconstruct(single), norms, g=16)
        assert res_pair.plan.score >= s_single - 1e-12

    def test_sign_variants_enter_candidate_list(self):
        rng = np.random.default_rng(7)
        W = rng.standard_normal((2, 32))
        cfg = make_cfg()
        res = pair_search(W, None, ["NF4"], cfg)
        assert "-NF4" in res.report["candidates_scored"]


class TestBlobIntegration:
    def test_pair_layer_serializes_with_selector_metabits(self):
        from sopq.blockquant import deserialize_layer, serialize_layer

        rng = np.random.default_rng(8)
        W = rng.standard_normal((4, 64))
        cfg = make_cfg(sfmt="UE4M3", sign_flip=False, include_sign_variants=False)
        res = pair_search(W, None, ["NF4", "SH4"], cfg)
        blob = serialize_layer(res.layer)
        layer2 = deserialize_layer(blob)
        assert np.array_equal(reconstruct(res.layer), reconstruct(layer2))
        assert serialize_layer(layer2) == blob
