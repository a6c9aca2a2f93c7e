"""Format-string grammar and bpw accounting."""

import pytest

from sopq.formats import (
    FormatParseError,
    compute_bpw,
    default_opq_threshold,
    parse_format,
)


class TestParsing:
    def test_fp6_per_block(self):
        spec = parse_format("E2M3sUE4M4")
        assert spec.atoms == ("E2M3",)
        assert spec.block_size == 16
        assert spec.scale_fmt == "UE4M4"

    def test_layer_max_pot(self):
        spec = parse_format("E4M3^0sUE8M0")
        assert spec.atoms == ("E4M3",)
        assert spec.block_size == 0
        assert spec.scale_fmt == "UE8M0"

    def test_pair_with_knapsack_and_wr(self):
        spec = parse_format("NF4|DD4sUE4M3+knap0.10.Wr")
        assert spec.atoms == ("NF4", "DD4")
        assert spec.scale_fmt == "UE4M3"
        assert spec.promotion.kind == "knapsack"
        assert spec.promotion.budget == pytest.approx(0.10)
        assert spec.wr_percent == pytest.approx(0.1)

    def test_longest_match_tokenization(self):
        spec = parse_format("Split87sUE4M3")
        assert spec.atoms == ("Split87",)
        assert spec.scale_fmt == "UE4M3"

    def test_bare_caret_is_layer_scope(self):
        assert parse_format("E4M3^sUE8M0").block_size == 0

    def test_block_sizes_8_and_32_admissible(self):
        assert parse_format("E2M3^8sUE4M4").block_size == 8
        assert parse_format("E2M3^32sUE4M4").block_size == 32
        with pytest.raises(FormatParseError):
            parse_format("E2M3^7sUE4M4")

    def test_fixed_promotion_target(self):
        spec = parse_format("NF4sUE4M3+E8M7")
        assert spec.promotion.kind == "fixed"
        assert spec.promotion.target == "E8M7"

    def test_knapsack_candidate_list(self):
        spec = parse_format("NF4sUE4M3+knap0.2/E2M3sUE4M4/E8M7/")
        assert spec.promotion.candidates == ("E2M3sUE4M4", "E8M7")

    def test_bare_opq_uses_quantile_default(self):
        spec = parse_format("NF4sUE4M3.OPQ")
        assert spec.opq_threshold == pytest.approx(default_opq_threshold())

    def test_opq_with_explicit_sigma(self):
        assert parse_format("NF4sUE4M3.OPQ2.7").opq_threshold == pytest.approx(2.7)

    def test_corrections_in_either_order(self):
        spec = parse_format("NF4sUE4M3.Wr0.06.OPQ3")
        assert spec.wr_percent == pytest.approx(0.06)
        assert spec.opq_threshold == pytest.approx(3.0)

    @pytest.mark.parametrize(
        "bad,pos_hint",
        [
            ("XXsUE4M4", 0),
            ("E2M3sQQQ", 5),
            ("E2M3sUE4M4zzz", 10),
            ("", 0),
            ("NF4|E2M3sS1E5M5", 0),  # mixed code widths
            ("NF4|DD4sUE4M4", 0),  # no metabit affordance for the pair
        ],
    )
    def test_errors_carry_position(self, bad, pos_hint):
        with pytest.raises(FormatParseError) as ei:
            parse_format(bad)
        assert ei.value.pos >= 0
        assert "position" in str(ei.value)

    def test_print_reparse_roundtrip(self):
        for text in [
            "E2M3sUE4M4",
            "E4M3^0sUE8M0",
            "HIF7sUE4M4",
            "NF4|DD4sUE4M3+knap0.10.Wr",
            "SH4|SH5",  # invalid widths -- skipped below
        ]:
            try:
                spec = parse_format(text)
            except FormatParseError:
                continue
            assert parse_format(spec.to_string()) == spec

    def test_appendix_worked_examples_parse(self):
        for text in [
            "E2M3sUE4M4",
            "E4M3^0sUE8M0",
            "NF4|DD4sUE4M3+knap0.10.Wr",
            "E2M3sUE4M3",
            "E4M3^",
            "E5M6^",
            "E8M7",
            "HIF7sUE4M4",
            "E4M3sUE4M6",
            "E3M4sUE4M6",
            "E2M5sUE4M6",
        ]:
            parse_format(text)


class TestBpw:
    @pytest.mark.parametrize(
        "text,logical,deployed",
        [
            ("E2M3sUE4M4", 6.5, 6.5),
            ("E4M3^0sUE8M0", 8.0, 8.0),
            ("E4M3sUE4M6", 8.625, 8.75),
            ("E2M3sUE4M3", 6.5, 6.5),
        ],
    )
    def test_pinned_values(self, text, logical, deployed):
        bpw = compute_bpw(parse_format(text))
        assert bpw.logical == pytest.approx(logical, abs=1e-12)
        assert bpw.deployed == pytest.approx(deployed, abs=1e-12)

    def test_hif7_deployed_container(self):
        bpw = compute_bpw(parse_format("HIF7sUE4M4"))
        assert bpw.deployed == pytest.approx(8.5)
        assert bpw.logical == pytest.approx(7.5)  # 7-bit packed codes

    def test_knapsack_example_arithmetic(self):
        bpw = compute_bpw(parse_format("NF4|DD4sUE4M3+knap0.10.Wr"))
        assert bpw.logical == pytest.approx(4.5 + 0.10 + 0.032, abs=1e-9)

    def test_correction_additivity(self):
        base = compute_bpw(parse_format("NF4sUE4M3")).logical
        wr = compute_bpw(parse_format("NF4sUE4M3.Wr0.1")).logical
        assert wr - base == pytest.approx(32 * 0.001, abs=1e-12)
        opq = compute_bpw(parse_format("NF4sUE4M3.OPQ2.5"), opq_rate=0.004).logical
        assert opq - base == pytest.approx(32 * 0.004, abs=1e-12)

    def test_layer_scope_amortization(self):
        exact = compute_bpw(parse_format("E4M3^0sUE8M0"), layer_elems=4096)
        assert exact.logical == pytest.approx(8.0 + 8 / 4096)

    def test_deployed_never_below_logical(self):
        for text in ["E2M3sUE4M4", "HIF7sUE4M4", "E4M3sUE4M6", "NF4sUE4M3.Wr"]:
            bpw = compute_bpw(parse_format(text))
            assert bpw.deployed >= bpw.logical - 1e-12


class TestOpqDefaultThreshold:
    def test_reference_quantile(self):
        m = default_opq_threshold(0.92, 16)
        assert 2.70 <= m <= 2.85

    def test_monotone_in_q(self):
        assert default_opq_threshold(0.99, 16) > default_opq_threshold(0.5, 16)
