"""Block-scaled weight quantization toolkit.

Numeric grids and scale-word codecs, block-scaled quantization with
codebook pair search, outlier and sparse-residual corrections,
knapsack-based precision allocation, and a reference scaled-outer-product
GEMM kernel that validates the quantized-domain algebra.
"""

from .atoms import Atom, atom_registry, build_nf, build_sh, fit_dd, load_rom_atom
from .blockquant import (
    BlockQuantConfig,
    QuantizedLayer,
    absmax_scale,
    argmax_scale,
    deserialize_layer,
    quantize_layer,
    reconstruct,
    serialize_layer,
)
from .formats import FormatSpec, compute_bpw, parse_format
from .grids import ElementGrid, ElementGridSpec, build_grid, hosting_report, round_to_grid
from .metrics import acos_similarity, channel_norms, fidelity, max_to_mean
from .pairsearch import pair_search, quantize_full
from .scalewords import ScaleWordFormat, decode_scale, encode_scale, f_layer_search
from .sopkernel import KernelConfig, bandwidth_split, sop_gemm

__version__ = "0.1.0"

__all__ = [
    "Atom",
    "BlockQuantConfig",
    "ElementGrid",
    "ElementGridSpec",
    "FormatSpec",
    "KernelConfig",
    "QuantizedLayer",
    "ScaleWordFormat",
    "absmax_scale",
    "acos_similarity",
    "argmax_scale",
    "atom_registry",
    "bandwidth_split",
    "build_grid",
    "build_nf",
    "build_sh",
    "channel_norms",
    "compute_bpw",
    "decode_scale",
    "deserialize_layer",
    "encode_scale",
    "f_layer_search",
    "fidelity",
    "fit_dd",
    "hosting_report",
    "load_rom_atom",
    "max_to_mean",
    "pair_search",
    "parse_format",
    "quantize_full",
    "quantize_layer",
    "reconstruct",
    "round_to_grid",
    "serialize_layer",
    "sop_gemm",
]
