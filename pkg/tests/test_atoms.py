"""Atom constructions and the grid-constrained DP fit."""

import itertools

import numpy as np
import pytest

from sopq.atoms import (
    AtomError,
    atom_registry,
    build_nf,
    build_sh,
    fit_dd,
    load_rom_atom,
    parse_atom_file,
)
from sopq.grids import exmy_grid


def assignment_cost(samples, weights, centers):
    """Nearest-center weighted SSE; the oracle both fit paths must match."""
    d = (samples[:, None] - np.asarray(centers)[None, :]) ** 2
    return float(np.sum(weights * d.min(axis=1)))


class TestClosedForms:
    def test_sh4_ratio(self):
        assert build_sh(4).dynamic_ratio == pytest.approx(26.8, abs=0.1)

    def test_sh5_ratio(self):
        assert build_sh(5).dynamic_ratio == pytest.approx(75.7, abs=0.1)

    def test_sh_alpha_zero_limit_is_affine_grid(self):
        # sinh linearizes: values approach the uniform grid plus the offset
        atom = build_sh(4, alpha=1e-6, c=-0.02)
        t = -1.0 + 2.0 * np.arange(16) / 15
        expect = 1e-6 * t - 0.02
        expect = expect / np.abs(expect).max()
        assert np.allclose(np.sort(expect), atom.values, rtol=1e-6)

    def test_nf4_ratio_within_five_percent(self):
        r = build_nf(4).dynamic_ratio
        assert abs(r - 12.6) / 12.6 < 0.05

    def test_nf4_asymmetric_seven_negative_eight_positive(self):
        v = build_nf(4).values
        assert (v < 0).sum() == 7 and (v > 0).sum() == 8 and (v == 0).sum() == 1
        assert v[0] == -1.0 and v[-1] == 1.0  # exact endpoints
        # not closed under negation
        assert set(np.round(-v, 12)) != set(np.round(v, 12))

    def test_nf5_structure(self):
        v = build_nf(5).values
        assert len(v) == 32
        assert (v < 0).sum() == 15 and (v > 0).sum() == 16

    def test_bad_n_rejected(self):
        with pytest.raises(AtomError):
            build_sh(3)
        with pytest.raises(AtomError):
            build_nf(6)


class TestRomAtoms:
    def test_registry_contents(self):
        reg = atom_registry()
        for name in ("NF4", "NF5", "SH4", "SH5", "BOF4", "Split87", "MPO2", "NF5-alt"):
            assert name in reg

    def test_reported_ratios(self):
        reg = atom_registry()
        assert reg["Split87"].dynamic_ratio == pytest.approx(18.3, rel=0.01)
        assert reg["MPO2"].dynamic_ratio == pytest.approx(64.0, rel=1e-9)
        assert reg["NF5-alt"].dynamic_ratio == pytest.approx(25.2, rel=0.01)

    def test_wrong_cardinality_rejected(self):
        with pytest.raises(AtomError):
            load_rom_atom("bad", [0.1, 0.2, 0.3])

    def test_duplicates_rejected(self):
        with pytest.raises(AtomError):
            load_rom_atom("dup", [0.1, 0.1, 0.3, 0.4])

    def test_loaded_atom_usable(self):
        atom = load_rom_atom("toy", np.linspace(-1, 1, 16))
        assert atom.n_entries == 16 and atom.provenance == "rom"

    def test_sign_negation_mirrors_values(self):
        atom = load_rom_atom("toy", np.linspace(-0.9, 1.0, 16))
        neg = atom.negated()
        assert np.allclose(neg.values, np.sort(-atom.values))

    def test_negated_ratio_invariant(self):
        reg = atom_registry()
        for atom in reg.values():
            assert atom.negated().dynamic_ratio == pytest.approx(atom.dynamic_ratio)

    def test_atom_file_parse_errors(self):
        with pytest.raises(AtomError):
            parse_atom_file("name: x\nn: 2\nvalues:\n1.0\n")  # missing values


class TestFitDD:
    def test_all_samples_at_grid_point(self):
        g = exmy_grid(2, 3)
        atom = fit_dd(np.full(10, 2.0), None, g, 4)
        assert 2.0 in atom.values
        assert assignment_cost(np.full(10, 2.0), np.ones(10), atom.values) == 0.0

    def test_matches_exhaustive_subsets_small(self):
        grid_vals = np.array([-2.0, -1.0, 0.0, 0.5, 1.0, 2.0])

        class FakeGrid:
            values = grid_vals

        samples = np.array([-1.7, -0.2, 0.4, 1.9])
        weights = np.ones(4)
        atom = fit_dd(samples, weights, FakeGrid(), 2)
        got = assignment_cost(samples, weights, atom.values)
        best = min(
            assignment_cost(samples, weights, list(sub))
            for sub in itertools.combinations(grid_vals, 2)
        )
        assert got == pytest.approx(best, abs=1e-12)

    @pytest.mark.parametrize("k", [2, 3, 4])
    def test_random_pools_match_brute_force(self, k):
        rng = np.random.default_rng(k * 17)
        g = exmy_grid(2, 2)  # 31 values; restrict to a 12-point window
        grid_vals = g.values[np.abs(g.values) <= 1.5]

        class FakeGrid:
            values = grid_vals

        for _ in range(25):
            samples = rng.uniform(-1.6, 1.6, size=rng.integers(k, 20))
            weights = rng.random(samples.size) + 0.1
            atom = fit_dd(samples, weights, FakeGrid(), k)
            got = assignment_cost(samples, weights, atom.values)
            best = min(
                assignment_cost(samples, weights, list(sub))
                for sub in itertools.combinations(grid_vals, k)
            )
            assert got <= best + 1e-9

    def test_monotone_in_k(self):
        rng = np.random.default_rng(3)
        g = exmy_grid(2, 3)
        samples = rng.uniform(-6, 6, 50)
        weights = np.ones(50)
        costs = []
        for k in (2, 4, 8, 16):
            atom = fit_dd(samples, weights, g, k)
            costs.append(assignment_cost(samples, weights, atom.values))
        assert all(a >= b - 1e-12 for a, b in zip(costs, costs[1:]))

    def test_beats_free_lloyd_then_snap(self):
        # the grid-constrained fit avoids the snap-displacement cost
        from sopq.grids import round_to_grid

        rng = np.random.default_rng(6)
        g = exmy_grid(2, 3)
        for _ in range(10):
            samples = rng.uniform(-7, 7, 80)
            weights = np.ones(80)
            atom = fit_dd(samples, weights, g, 4)
            dd_cost = assignment_cost(samples, weights, atom.values)
            centers = np.quantile(samples, [0.125, 0.375, 0.625, 0.875])
            for _ in range(50):  # Lloyd iterations in free space
                assign = np.argmin((samples[:, None] - centers[None, :]) ** 2, axis=1)
                for j in range(4):
                    if np.any(assign == j):
                        centers[j] = samples[assign == j].mean()
            snapped = np.unique([round_to_grid(float(c), g) for c in centers])
            lloyd_cost = assignment_cost(samples, weights, snapped)
            assert dd_cost <= lloyd_cost + 1e-9

    def test_degenerate_pool_fills_with_nearest_grid_points(self):
        g = exmy_grid(2, 3)
        atom = fit_dd(np.full(5, 1.0), None, g, 4)
        assert len(atom.values) == 4
        assert 1.0 in atom.values
        # the fills are the nearest unused grid points around 1.0
        assert np.all(np.abs(atom.values - 1.0) <= 0.5)

    def test_empty_pool_rejected(self):
        with pytest.raises(AtomError):
            fit_dd(np.array([]), None, exmy_grid(2, 3), 4)

    def test_negative_weights_rejected(self):
        with pytest.raises(AtomError):
            fit_dd(np.array([1.0, 2.0]), np.array([1.0, -1.0]), exmy_grid(2, 3), 2)
