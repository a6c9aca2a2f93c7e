"""Codebook alphabet: fixed-ROM, closed-form, and data-adaptive atoms.

An atom is a small table of 2^n normalized reconstruction values (n in
{4, 5}).  Fixed atoms are unit-normalized so max|v| == 1 and are later
rescaled into a hosting grid; data-adaptive (DD) atoms are fitted
directly on the hosting grid's points and keep those values.

Provenance does not privilege any atom: the pair search treats a sinh
grid, a normal-quantile grid, a shipped ROM table, and a per-layer DP fit
identically as candidates.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import norm

from . import _kernels
from .grids import ElementGrid

__all__ = [
    "Atom",
    "AtomError",
    "build_sh",
    "build_nf",
    "load_rom_atom",
    "parse_atom_file",
    "atom_registry",
    "fit_dd",
    "ADAPTIVE_ATOMS",
]

ADAPTIVE_ATOMS = {"DD4": 4, "DD5": 5}


class AtomError(ValueError):
    pass


@dataclass(frozen=True)
class Atom:
    name: str
    values: np.ndarray  # sorted ascending, float64
    provenance: str  # "closed_form" | "rom" | "fitted"
    grid_aligned: bool = False  # fitted atoms already live on the host grid

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if np.unique(vals).size != vals.size:
            raise AtomError(f"atom {self.name} has duplicate values")
        object.__setattr__(self, "values", np.sort(vals))

    @property
    def n_entries(self) -> int:
        return len(self.values)

    @property
    def code_bits(self) -> int:
        return max(1, int(np.ceil(np.log2(self.n_entries))))

    @property
    def dynamic_ratio(self) -> float:
        mags = np.abs(self.values)
        nz = mags[mags > 0]
        return float(nz.max() / nz.min())

    @property
    def sign_closed(self) -> bool:
        """Whether negating every value reproduces the same set."""
        neg = np.sort(-self.values)
        return len(neg) == len(self.values) and bool(np.all(neg == self.values))

    def negated(self) -> "Atom":
        return replace(self, name=f"-{self.name}", values=np.sort(-self.values))

    def max_positive(self) -> float:
        return float(self.values[-1])


def _unit_normalize(values: np.ndarray) -> np.ndarray:
    peak = np.abs(values).max()
    if peak == 0:
        raise AtomError("cannot normalize an all-zero value table")
    return values / peak


def build_sh(n: int, alpha: float = 1.50, c: float = -0.02) -> Atom:
    """Sinh companding grid: sinh(alpha * t) + c on 2^n uniform t in [-1, 1]."""
    if n not in (4, 5):
        raise AtomError("SH atoms are defined for n in {4, 5}")
    t = -1.0 + 2.0 * np.arange(2**n) / (2**n - 1)
    vals = np.sinh(alpha * t) + c
    return Atom(name=f"SH{n}", values=_unit_normalize(vals), provenance="closed_form")


def build_nf(n: int) -> Atom:
    """Normal-quantile grid: asymmetric inverse-CDF construction.

    2^(n-1) negative entries and 2^(n-1) positive entries share a zero;
    quantile probabilities run from an offset (set so the extreme bins keep
    half their mass) down to 0.5 on each side, and the result is normalized
    to +/-1 endpoints.
    """
    if n not in (4, 5):
        raise AtomError("NF atoms are defined for n in {4, 5}")
    half = 2 ** (n - 1)
    offset = 1 - 0.5 * (1 / (2 * 2**n) + 1 / (2 * (2**n - 1)))
    pos = norm.ppf(np.linspace(offset, 0.5, half + 1)[:-1])
    neg = -norm.ppf(np.linspace(offset, 0.5, half)[:-1])
    vals = np.concatenate([neg, [0.0], pos])
    return Atom(name=f"NF{n}", values=_unit_normalize(vals), provenance="closed_form")


def load_rom_atom(name: str, table) -> Atom:
    """Register a fixed table as an atom; cardinality must be a power of two."""
    vals = np.asarray(table, dtype=np.float64)
    n_bits = int(np.log2(vals.size))
    if 2**n_bits != vals.size:
        raise AtomError(f"ROM atom {name} needs a power-of-two entry count, got {vals.size}")
    if np.unique(vals).size != vals.size:
        raise AtomError(f"ROM atom {name} has duplicate values")
    return Atom(name=name, values=_unit_normalize(vals), provenance="rom")


def parse_atom_file(text: str) -> Atom:
    """Parse the registry file format: name/n/provenance headers then values."""
    name = prov = None
    n = None
    values = []
    in_values = False
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if in_values:
            values.append(float(line))
        elif line.startswith("name:"):
            name = line.split(":", 1)[1].strip()
        elif line.startswith("n:"):
            n = int(line.split(":", 1)[1])
        elif line.startswith("provenance:"):
            prov = line.split(":", 1)[1].strip()
        elif line.startswith("values:"):
            in_values = True
        else:
            raise AtomError(f"atom file line {lineno}: unrecognized {line!r}")
    if name is None or n is None or len(values) != 2**n:
        raise AtomError(f"atom file for {name!r}: expected {2**(n or 0)} values, got {len(values)}")
    atom = load_rom_atom(name, values)
    return replace(atom, provenance=prov or "rom")


_ROM_FILES = ("bof4.txt", "split87.txt", "mpo2.txt", "nf5_alt.txt")


def atom_registry() -> dict[str, Atom]:
    """All fixed atoms by name (closed-form constructions plus shipped ROMs)."""
    reg = {}
    for fname in _ROM_FILES:
        text = importlib.resources.files("sopq.rom").joinpath(fname).read_text()
        atom = parse_atom_file(text)
        reg[atom.name] = atom
    for n in (4, 5):
        sh = build_sh(n)
        nf = build_nf(n)
        reg[sh.name] = sh
        reg[nf.name] = nf
    return reg


def fit_dd(samples, weights, lfmt: ElementGrid, k: int) -> Atom:
    """Data-adaptive codebook: DP-optimal weighted 1-D clustering with
    centers restricted to the hosting grid's points.

    Exact for the 1-D problem: nearest-center assignment on a line induces
    interval clusters, and the DP scores every interval at its best grid
    center, so its optimum matches exhaustive subset search.  If fewer than
    k distinct centers emerge (including the all-identical-pool case), the
    remaining slots fill with unused grid points nearest the pool's
    weighted mean.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if weights is None:
        w = np.ones_like(x)
    else:
        w = np.asarray(weights, dtype=np.float64).ravel()
    if x.size == 0:
        raise AtomError("fit_dd needs a non-empty sample pool")
    if np.any(w < 0):
        raise AtomError("fit_dd weights must be non-negative")
    grid = lfmt.values
    _, picked = _kernels.kmeans_grid_dp(x, w, grid, k)
    centers = [float(grid[i]) for i in picked]
    if len(centers) < k:
        mean = float(np.average(x, weights=w)) if w.sum() > 0 else float(x.mean())
        unused = [float(v) for v in grid if float(v) not in set(centers)]
        unused.sort(key=lambda v: (abs(v - mean), v))
        centers.extend(unused[: k - len(centers)])
    return Atom(
        name=f"DD{max(1, int(np.ceil(np.log2(k))))}",
        values=np.sort(np.array(centers)),
        provenance="fitted",
        grid_aligned=True,
    )
