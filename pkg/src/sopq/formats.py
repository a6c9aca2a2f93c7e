"""Format-string grammar and bits-per-weight accounting.

A format string names a complete quantization recipe:

    WFMT0|WFMT1[^N][sSFMT][+PFMT][.OPQs][.Wrr]

* one or more weight atoms separated by ``|`` (two atoms means per-block
  selection through a scale-word metadata bit);
* ``^N`` block size (16 default; 0 = one scale per layer);
* ``sSFMT`` per-block scale word format;
* ``+PFMT`` promotion: a fixed target format, or ``+knapB`` for
  knapsack-allocated promotion at a budget of +B bpw over base, with an
  optional ``/FMT/FMT/`` candidate restriction;
* ``.OPQs`` outlier extraction at sigma-threshold s (bare .OPQ uses the
  quantile-derived default), ``.Wrr`` sparse residual at r percent
  sparsity (bare .Wr = 0.1%).

Atoms tokenize by longest match against the vocabulary, so
``Split87sUE4M3`` splits after ``Split87``.  Parse errors carry the
offending position.

Reported bpw is *logical*: atom code bits plus scale word bits amortized
over the block, plus correction streams.  *Deployed* bpw applies the
hardware container sizes: shift-add grids ride in byte containers and
scale words pad up to the next {8, 12, 16}-bit container.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from scipy.stats import norm

from .scalewords import ScaleCodecError, parse_scale_format

__all__ = [
    "FormatSpec",
    "Promotion",
    "BpwReport",
    "DeployProfile",
    "FormatParseError",
    "parse_format",
    "format_to_string",
    "compute_bpw",
    "atom_bits",
    "ATOM_VOCABULARY",
    "DEFAULT_DEPLOY_PROFILE",
]

# named atoms and their code widths; ExMy / HIF names are matched by pattern
ATOM_VOCABULARY: dict[str, int] = {
    "NF4": 4,
    "NF5": 5,
    "NF5-alt": 5,
    "DD4": 4,
    "DD5": 5,
    "SH4": 4,
    "SH5": 5,
    "BOF4": 4,
    "Split87": 4,
    "MPO2": 4,
}

_EXMY_RE = re.compile(r"E(\d+)M(\d+)")
_HIF_RE = re.compile(r"HIF(7|8)")
_SFMT_RE = re.compile(r"(?:S[01]|U?)E\d+M\d+")
_NUM_RE = re.compile(r"\d+(?:\.\d+)?")

ADMISSIBLE_BLOCK_SIZES = (0, 8, 16, 32)

# default OPQ quantile construction: q=0.92 over the block max-order M=16
OPQ_DEFAULT_Q = 0.92
OPQ_DEFAULT_M = 16

WR_DEFAULT_PERCENT = 0.1
CORRECTION_ENTRY_BITS = 32  # 16-bit index + value, amortized headers included


class FormatParseError(ValueError):
    def __init__(self, text: str, pos: int, message: str):
        self.text = text
        self.pos = pos
        self.message = message
        caret = " " * pos + "^"
        super().__init__(f"{message} at position {pos}\n  {text}\n  {caret}")


@dataclass(frozen=True)
class Promotion:
    kind: str  # "fixed" | "knapsack"
    target: str | None = None  # fixed target format string
    budget: float | None = None  # knapsack bpw increment over base
    candidates: tuple = ()

    def to_string(self) -> str:
        if self.kind == "fixed":
            return f"+{self.target}"
        s = f"+knap{self.budget:g}"
        if self.candidates:
            s += "/" + "/".join(self.candidates) + "/"
        return s


@dataclass(frozen=True)
class FormatSpec:
    atoms: tuple
    block_size: int = 16
    scale_fmt: str | None = None
    promotion: Promotion | None = None
    opq_threshold: float | None = None  # sigma multiples
    wr_percent: float | None = None

    @property
    def is_pair(self) -> bool:
        return len(self.atoms) > 1

    def to_string(self) -> str:
        return format_to_string(self)


def format_to_string(spec: FormatSpec) -> str:
    s = "|".join(spec.atoms)
    if spec.block_size != 16:
        s += f"^{spec.block_size}"
    if spec.scale_fmt:
        s += f"s{spec.scale_fmt}"
    if spec.promotion:
        s += spec.promotion.to_string()
    if spec.opq_threshold is not None:
        s += f".OPQ{spec.opq_threshold:g}"
    if spec.wr_percent is not None:
        s += f".Wr{spec.wr_percent:g}"
    return s


def default_opq_threshold(q: float = OPQ_DEFAULT_Q, m_order: int = OPQ_DEFAULT_M) -> float:
    """Sigma threshold from the block-max quantile equation (2*Phi(m)-1)^M = q."""
    if not 0 < q < 1:
        raise ValueError("quantile must be in (0, 1)")
    return float(norm.ppf((q ** (1.0 / m_order) + 1.0) / 2.0))


def _match_atom(text: str, pos: int) -> tuple[str, int] | None:
    best = None
    for name in ATOM_VOCABULARY:
        if text.startswith(name, pos) and (best is None or len(name) > len(best)):
            best = name
    for rx in (_EXMY_RE, _HIF_RE):
        mo = rx.match(text, pos)
        if mo and (best is None or len(mo.group(0)) > len(best)):
            best = mo.group(0)
    if best is None:
        return None
    return best, pos + len(best)


def atom_bits(name: str) -> int:
    """Logical code width of one atom."""
    if name.startswith("-"):
        name = name[1:]
    if name in ATOM_VOCABULARY:
        return ATOM_VOCABULARY[name]
    mo = _HIF_RE.fullmatch(name)
    if mo:
        return 7  # 80- and 96-value grids both index in 7 bits
    mo = _EXMY_RE.fullmatch(name)
    if mo:
        return 1 + int(mo.group(1)) + int(mo.group(2))
    raise FormatParseError(name, 0, f"unknown atom {name!r}")


def atom_deployed_bits(name: str, profile: "DeployProfile") -> int:
    if name.startswith("-"):
        name = name[1:]
    if _HIF_RE.fullmatch(name):
        return profile.hif_container
    return atom_bits(name)


def parse_format(text: str, _allow_promotion: bool = True) -> FormatSpec:
    if not text or not text.isascii():
        raise FormatParseError(text or "", 0, "format string must be non-empty ASCII")
    pos = 0
    atoms = []
    while True:
        hit = _match_atom(text, pos)
        if hit is None:
            raise FormatParseError(text, pos, "expected an atom name")
        name, pos = hit
        atoms.append(name)
        if pos < len(text) and text[pos] == "|":
            pos += 1
            continue
        break

    block_size = 16
    if pos < len(text) and text[pos] == "^":
        pos += 1
        mo = re.compile(r"\d*").match(text, pos)
        digits = mo.group(0)
        block_size = int(digits) if digits else 0  # bare '^' means layer scope
        pos = mo.end()
        if block_size not in ADMISSIBLE_BLOCK_SIZES:
            raise FormatParseError(text, pos, f"inadmissible block size {block_size}")

    scale_fmt = None
    if pos < len(text) and text[pos] == "s":
        mo = _SFMT_RE.match(text, pos + 1)
        if mo is None:
            raise FormatParseError(text, pos + 1, "malformed scale format after 's'")
        scale_fmt = mo.group(0)
        try:
            parse_scale_format(scale_fmt)
        except ScaleCodecError as e:
            raise FormatParseError(text, pos + 1, str(e)) from e
        pos = mo.end()

    promotion = None
    if pos < len(text) and text[pos] == "+":
        if not _allow_promotion:
            raise FormatParseError(text, pos, "nested promotion clause")
        pos += 1
        if text.startswith("knap", pos):
            pos += 4
            mo = _NUM_RE.match(text, pos)
            if mo is None:
                raise FormatParseError(text, pos, "knapsack promotion needs a bpw budget")
            budget = float(mo.group(0))
            pos = mo.end()
            candidates = []
            if pos < len(text) and text[pos] == "/":
                pos += 1
                while True:
                    end = text.find("/", pos)
                    if end < 0:
                        raise FormatParseError(text, pos, "unterminated promotion candidate list")
                    candidates.append(text[pos:end])
                    pos = end + 1
                    if pos >= len(text) or text[pos] == ".":
                        break
            promotion = Promotion(kind="knapsack", budget=budget, candidates=tuple(candidates))
        else:
            end = text.find(".", pos)
            target = text[pos:] if end < 0 else text[pos:end]
            if not target:
                raise FormatParseError(text, pos, "empty promotion target")
            parse_format(target, _allow_promotion=False)  # validate
            promotion = Promotion(kind="fixed", target=target)
            pos += len(target)

    opq_threshold = None
    wr_percent = None
    while pos < len(text) and text[pos] == ".":
        pos += 1
        if text.startswith("OPQ", pos):
            pos += 3
            mo = _NUM_RE.match(text, pos)
            opq_threshold = float(mo.group(0)) if mo else default_opq_threshold()
            pos = mo.end() if mo else pos
        elif text.startswith("Wr", pos):
            pos += 2
            mo = _NUM_RE.match(text, pos)
            wr_percent = float(mo.group(0)) if mo else WR_DEFAULT_PERCENT
            pos = mo.end() if mo else pos
        else:
            raise FormatParseError(text, pos, "expected OPQ or Wr correction clause")

    if pos != len(text):
        raise FormatParseError(text, pos, "trailing garbage")

    for a in atoms:
        atom_bits(a)  # unknown atoms already rejected; double-checks patterns
    widths = {atom_bits(a) for a in atoms}
    if len(widths) > 1:
        raise FormatParseError(text, 0, f"pair atoms must share a code width, got {sorted(widths)}")
    if len(atoms) > 1:
        if scale_fmt is None:
            raise FormatParseError(text, 0, "pair formats need a scale word for the selector bit")
        if parse_scale_format(scale_fmt).metabit_capacity < 1:
            raise FormatParseError(
                text, 0, f"scale format {scale_fmt} has no metabit or sign bit for pair selection"
            )
    return FormatSpec(
        atoms=tuple(atoms),
        block_size=block_size,
        scale_fmt=scale_fmt,
        promotion=promotion,
        opq_threshold=opq_threshold,
        wr_percent=wr_percent,
    )


# ---------------------------------------------------------------------------
# bits-per-weight accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeployProfile:
    """Hardware container sizes applied to deployed bpw."""

    name: str = "sop-v19"
    hif_container: int = 8
    scale_containers: tuple = (8, 12, 16)

    def deployed_scale_bits(self, logical_bits: int) -> int:
        for c in self.scale_containers:
            if logical_bits <= c:
                return c
        return logical_bits


DEFAULT_DEPLOY_PROFILE = DeployProfile()


@dataclass(frozen=True)
class BpwReport:
    logical: float
    deployed: float
    breakdown: dict = field(default_factory=dict)


def compute_bpw(
    spec: FormatSpec,
    profile: DeployProfile = DEFAULT_DEPLOY_PROFILE,
    opq_rate: float | None = None,
    wr_rate: float | None = None,
    layer_elems: int | None = None,
) -> BpwReport:
    """Logical and deployed bits-per-weight with a correction breakdown.

    ``opq_rate``/``wr_rate`` are measured entry fractions when known;
    otherwise OPQ uses the Gaussian nominal rate 2*(1 - Phi(m)) and Wr the
    spec's sparsity (the realized count rounds down to whole entries).
    ``layer_elems`` makes the layer-scope scale cost exact instead of 0.
    """
    a_log = max(atom_bits(a) for a in spec.atoms)
    a_dep = max(atom_deployed_bits(a, profile) for a in spec.atoms)

    if spec.scale_fmt is None:
        s_log = s_dep = 0.0
        sc_note = "none"
    else:
        fmt = parse_scale_format(spec.scale_fmt)
        if spec.block_size == 0:
            per = 1.0 / layer_elems if layer_elems else 0.0
            s_log = fmt.bits * per
            s_dep = profile.deployed_scale_bits(fmt.bits) * per
            sc_note = "per-layer"
        else:
            s_log = fmt.bits / spec.block_size
            s_dep = profile.deployed_scale_bits(fmt.bits) / spec.block_size
            sc_note = f"per-block/{spec.block_size}"

    opq_bpw = 0.0
    if spec.opq_threshold is not None:
        rate = opq_rate if opq_rate is not None else 2.0 * (1.0 - norm.cdf(spec.opq_threshold))
        opq_bpw = CORRECTION_ENTRY_BITS * rate
    wr_bpw = 0.0
    if spec.wr_percent is not None:
        rate = wr_rate if wr_rate is not None else spec.wr_percent / 100.0
        wr_bpw = CORRECTION_ENTRY_BITS * rate
    promo_bpw = 0.0
    if spec.promotion is not None and spec.promotion.kind == "knapsack":
        promo_bpw = spec.promotion.budget

    logical = a_log + s_log + opq_bpw + wr_bpw + promo_bpw
    deployed = a_dep + s_dep + opq_bpw + wr_bpw + promo_bpw
    return BpwReport(
        logical=logical,
        deployed=deployed,
        breakdown={
            "atom_logical": a_log,
            "atom_deployed": a_dep,
            "scale_logical": s_log,
            "scale_deployed": s_dep,
            "scale_scope": sc_note,
            "opq": opq_bpw,
            "wr": wr_bpw,
            "promotion": promo_bpw,
        },
    )
