"""Element value grids: ExMy floating-point grids and shift-add (HIF) grids.

A grid is the finite set of scalar values an element format can represent.
Two families are supported:

* ``exmy`` -- sign/exponent/mantissa grids with bias ``2^(x-1) - 1``,
  subnormals at exponent field 0, and no infinity or NaN encodings.
  Formats with x <= 2 use every exponent code (OCP-MX style); formats with
  x >= 3 drop the top exponent binade (the codes that would be inf/NaN in
  an IEEE reading), which is what puts E3M3's normal max at 15 rather
  than 30.
* ``hif`` -- every distinct value of ``c * 2^s`` for a two's-complement
  coefficient ``c`` and a small per-element shift ``s``.  The default
  weight grid (coeff_width=5, shifts {0..3}) has 80 values; adding shift 4
  gives the 96-value activation grid.

All grid values are dyadic rationals that float64 represents exactly, so
enumeration, dedup, and ratio arithmetic below are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import _kernels

__all__ = [
    "ElementGridSpec",
    "ElementGrid",
    "GridError",
    "build_grid",
    "exmy_grid",
    "hif_grid",
    "round_to_grid",
    "round_to_table",
    "nearest_index",
    "hosting_report",
    "HostingReport",
    "grid_dump",
]


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class ElementGridSpec:
    """Parameters of an element grid.

    kind="exmy": ``signed``, ``x`` exponent bits (>= 1), ``y`` mantissa bits.
    kind="hif":  ``coeff_width`` in {5, 6}, ``shift_set`` of non-negative ints.
    """

    kind: str
    signed: bool = True
    x: int = 0
    y: int = 0
    coeff_width: int = 5
    shift_set: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.kind == "exmy":
            if self.x < 1:
                raise GridError("exmy grid needs at least one exponent bit")
            if self.y < 0:
                raise GridError("negative mantissa width")
        elif self.kind == "hif":
            if self.coeff_width not in (5, 6):
                raise GridError("hif coefficient width must be 5 (tc5) or 6 (tc6)")
            if not self.shift_set:
                raise GridError("hif grid needs a non-empty shift set")
            if any(s < 0 for s in self.shift_set):
                raise GridError("hif shifts must be non-negative")
        else:
            raise GridError(f"unknown grid kind {self.kind!r}")

    @property
    def name(self) -> str:
        if self.kind == "exmy":
            return f"{'' if self.signed else 'U'}E{self.x}M{self.y}"
        shifts = sorted(self.shift_set)
        return f"HIF(tc{self.coeff_width},s{{{','.join(map(str, shifts))}}})"


@dataclass(frozen=True)
class ElementGrid:
    """A concrete grid: sorted values plus range metadata.

    ``values`` is strictly increasing.  ``max_normal``/``min_normal`` bound
    the normal magnitude range; ``min_subnormal`` is the smallest non-zero
    magnitude including the subnormal extension (equal to ``min_normal``
    for hif grids, which have no subnormals).  ``dynamic_ratio_normal`` is
    exactly ``max_normal / min_normal``.
    """

    spec: ElementGridSpec
    values: np.ndarray
    max_normal: float
    min_normal: float
    min_subnormal: float

    @property
    def dynamic_ratio_normal(self) -> float:
        return self.max_normal / self.min_normal

    @property
    def dynamic_ratio_subnormal(self) -> float:
        return self.max_normal / self.min_subnormal

    @property
    def t_plus(self) -> float:
        """Most-positive representable value."""
        return float(self.values[-1])

    @property
    def t_minus(self) -> float:
        """Most-negative representable value."""
        return float(self.values[0])

    @property
    def code_bits(self) -> int:
        """Bits needed to index the value table."""
        return max(1, int(np.ceil(np.log2(len(self.values)))))

    @property
    def name(self) -> str:
        return self.spec.name

    def __len__(self) -> int:
        return len(self.values)


def _exmy_magnitudes(x: int, y: int) -> list[Fraction]:
    """Non-negative magnitudes of an ExMy grid, zero included."""
    bias = 2 ** (x - 1) - 1
    # x >= 3 reserves the top exponent binade (would-be inf/NaN codes);
    # x <= 2 uses the full exponent range.
    e_top = 2**x - 1 - (1 if x >= 3 else 0)
    scale_sub = Fraction(2) ** (1 - bias - y)
    mags = [f * scale_sub for f in range(2**y)]
    for e in range(1, e_top + 1):
        scale = Fraction(2) ** (e - bias - y)
        mags.extend((2**y + f) * scale for f in range(2**y))
    return mags


def exmy_grid(x: int, y: int, signed: bool = True) -> ElementGrid:
    return build_grid(ElementGridSpec(kind="exmy", signed=signed, x=x, y=y))


def hif_grid(coeff_width: int = 5, shift_set=(0, 1, 2, 3)) -> ElementGrid:
    return build_grid(
        ElementGridSpec(kind="hif", coeff_width=coeff_width, shift_set=frozenset(shift_set))
    )


def build_grid(spec: ElementGridSpec) -> ElementGrid:
    """Enumerate the full de-duplicated value set with range metadata."""
    if spec.kind == "exmy":
        mags = _exmy_magnitudes(spec.x, spec.y)
        bias = 2 ** (spec.x - 1) - 1
        e_top = 2**spec.x - 1 - (1 if spec.x >= 3 else 0)
        max_normal = float((2 - Fraction(2) ** (-spec.y)) * Fraction(2) ** (e_top - bias))
        min_normal = float(Fraction(2) ** (1 - bias))
        if spec.y > 0:
            min_subnormal = float(Fraction(2) ** (1 - bias - spec.y))
        else:
            min_subnormal = min_normal  # no fraction bits: no subnormals besides zero
        vals = set(float(m) for m in mags)
        if spec.signed:
            vals |= {-v for v in vals}
    else:
        lo = -(2 ** (spec.coeff_width - 1))
        hi = 2 ** (spec.coeff_width - 1) - 1
        vals = {float(c * 2**s) for c in range(lo, hi + 1) for s in spec.shift_set}
        pos = sorted(v for v in vals if v > 0)
        max_normal = pos[-1]
        min_normal = pos[0]
        min_subnormal = min_normal
    values = np.array(sorted(vals), dtype=np.float64)
    return ElementGrid(
        spec=spec,
        values=values,
        max_normal=max_normal,
        min_normal=min_normal,
        min_subnormal=min_subnormal,
    )


def nearest_index(v, table: np.ndarray):
    """Index of the nearest entry of a sorted table, ties to the even index.

    Total on finite inputs: values beyond the endpoints clamp to the
    endpoint index.  Midpoints between adjacent entries resolve to the
    even-positioned entry (documented tie rule; comparisons are exact for
    dyadic inputs and tables).
    """
    return _kernels.nearest_index(np.asarray(v, dtype=np.float64), table)


def round_to_table(v, table: np.ndarray):
    return table[nearest_index(v, table)]


def round_to_grid(v, grid: ElementGrid):
    """Nearest grid value; out-of-range inputs clamp to the endpoints."""
    arr = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise GridError("round_to_grid requires finite input")
    result = round_to_table(arr, grid.values)
    if np.isscalar(v) or arr.ndim == 0:
        return float(result)
    return result


@dataclass(frozen=True)
class HostingReport:
    """Whether a value table fits a grid's magnitude range.

    ``ratio`` is the table's max/min-nonzero magnitude ratio; ``grid_normal``
    and ``grid_subnormal`` are the grid's normal and subnormal-extended
    capacities.  The class is the pure ratio predicate; the ratios are
    carried so borderline judgements stay visible.
    """

    ratio: float
    hosting_class: str  # "native" | "subnormal" | "unhostable"
    grid_normal: float
    grid_subnormal: float


def hosting_report(atom_values, grid: ElementGrid) -> HostingReport:
    mags = np.abs(np.asarray(atom_values, dtype=np.float64))
    nz = mags[mags > 0]
    if nz.size == 0:
        raise GridError("hosting ratio undefined for an all-zero value table")
    ratio = float(nz.max() / nz.min())
    if ratio <= grid.dynamic_ratio_normal:
        cls = "native"
    elif ratio <= grid.dynamic_ratio_subnormal:
        cls = "subnormal"
    else:
        cls = "unhostable"
    return HostingReport(
        ratio=ratio,
        hosting_class=cls,
        grid_normal=grid.dynamic_ratio_normal,
        grid_subnormal=grid.dynamic_ratio_subnormal,
    )


def _sign_mant_exp(v: float) -> tuple[int, int, int]:
    """Decompose a dyadic float as (sign, odd mantissa, exponent)."""
    if v == 0:
        return (0, 0, 0)
    f = Fraction(v)
    sign = 1 if f > 0 else -1
    f = abs(f)
    num, den = f.numerator, f.denominator
    exp = 0
    while num % 2 == 0:
        num //= 2
        exp += 1
    while den > 1:
        den //= 2
        exp -= 1
    return (sign, num, exp)


def grid_dump(grid: ElementGrid) -> dict:
    """JSON-ready table of values and range metadata (golden-file friendly)."""
    return {
        "name": grid.name,
        "count": len(grid),
        "max_normal": grid.max_normal,
        "min_normal": grid.min_normal,
        "min_subnormal": grid.min_subnormal,
        "dynamic_ratio_normal": grid.dynamic_ratio_normal,
        "dynamic_ratio_subnormal": grid.dynamic_ratio_subnormal,
        "t_plus": grid.t_plus,
        "t_minus": grid.t_minus,
        "values": [float(v) for v in grid.values],
        "values_exact": ["%d*2^%d" % (s * m, e) for s, m, e in map(_sign_mant_exp, grid.values)],
    }
