"""Dump linear-layer weights and input-activation RMS vectors.

For every linear layer of a model, two container files are written: the
weight matrix and a per-input-channel calibration vector

    c_j = sqrt(mean over calibration samples of x_j^2)

captured by forward pre-hooks while the unquantized model runs a small
calibration corpus.  The RMS accumulates streaming (sum of squares plus a
row count, float64) so memory stays bounded by one activation batch.

The manifest is written last and serves as the atomic completion marker:
a directory with a manifest is a finished extraction.  Modules with
parameters that are not plain linear layers are skipped and listed in the
manifest's warnings.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from sopq.containers import write_tensor

__all__ = ["ExtractionManifest", "ExtractError", "extract", "extract_hf", "load_manifest"]

MANIFEST_NAME = "manifest.json"


class ExtractError(RuntimeError):
    pass


@dataclass
class ExtractionManifest:
    model_id: str
    corpus_id: str
    token_count: int
    layers: list = field(default_factory=list)  # {name, shape, dtype}
    files: dict = field(default_factory=dict)  # name -> {"weights": .., "norms": ..}
    skipped: list = field(default_factory=list)  # warnings for unsupported modules

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def load_manifest(out_dir: str) -> ExtractionManifest:
    with open(os.path.join(out_dir, MANIFEST_NAME)) as f:
        return ExtractionManifest(**json.load(f))


class _RmsAccumulator:
    """Streaming per-channel sum of squares over flattened batch rows."""

    def __init__(self, d_in: int):
        self.sq_sum = np.zeros(d_in, dtype=np.float64)
        self.count = 0

    def add(self, x: torch.Tensor):
        flat = x.detach().reshape(-1, x.shape[-1]).to(torch.float64).cpu().numpy()
        self.sq_sum += np.sum(flat * flat, axis=0)
        self.count += flat.shape[0]

    def norms(self) -> np.ndarray:
        if self.count == 0:
            raise ExtractError("no calibration samples reached this layer")
        return np.sqrt(self.sq_sum / self.count)


def _sanitize(name: str) -> str:
    return name.replace(".", "_").replace("/", "_") or "root"


def extract(
    model: torch.nn.Module,
    corpus,
    out_dir: str,
    model_id: str = "model",
    corpus_id: str = "corpus",
) -> ExtractionManifest:
    """Run calibration batches through the model, then write per-layer
    weight and norm containers plus the manifest.

    ``corpus`` is an iterable of input batches (tensors or whatever the
    model's forward accepts as its single positional argument).
    """
    os.makedirs(out_dir, exist_ok=True)
    linears: dict[str, torch.nn.Linear] = {}
    skipped = []
    for name, module in model.named_modules():
        if isinstance(module, torch.nn.Linear):
            linears[name or "root"] = module
        elif any(True for _ in module.parameters(recurse=False)):
            skipped.append(f"{name or 'root'}: {type(module).__name__} (not a linear layer)")
    if not linears:
        raise ExtractError("model contains no linear layers")

    accs = {name: _RmsAccumulator(m.in_features) for name, m in linears.items()}
    hooks = []
    for name, module in linears.items():
        hooks.append(
            module.register_forward_pre_hook(
                lambda mod, inputs, _name=name: accs[_name].add(inputs[0])
            )
        )

    token_count = 0
    try:
        model.eval()
        with torch.no_grad():
            for batch in corpus:
                if isinstance(batch, torch.Tensor):
                    token_count += int(np.prod(batch.shape[:-1]))
                model(batch)
    finally:
        for h in hooks:
            h.remove()

    manifest = ExtractionManifest(
        model_id=model_id, corpus_id=corpus_id, token_count=token_count, skipped=skipped
    )
    for name, module in linears.items():
        W = module.weight.detach().to(torch.float64).cpu().numpy()
        src_dtype = str(module.weight.dtype).replace("torch.", "")
        base = _sanitize(name)
        w_path = os.path.join(out_dir, f"{base}.weights.sopt")
        n_path = os.path.join(out_dir, f"{base}.norms.sopt")
        write_tensor(w_path, W, name=name, dtype="f32")
        write_tensor(n_path, accs[name].norms(), name=f"{name}.norms", dtype="f32")
        manifest.layers.append({"name": name, "shape": list(W.shape), "dtype": src_dtype})
        manifest.files[name] = {
            "weights": os.path.basename(w_path),
            "norms": os.path.basename(n_path),
        }

    # manifest last: its presence marks a complete extraction
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as f:
        f.write(manifest.to_json())
    return manifest


def extract_hf(model_id: str, texts, out_dir: str, max_tokens: int = 16384):
    """Convenience wrapper for transformer checkpoints: tokenize a text
    corpus and extract through the standard path.  Requires the optional
    transformers dependency and local model availability."""
    try:
        from transformers import AutoModelForCausalLM, AutoTokenizer
    except ImportError as e:
        raise ExtractError("extract_hf needs the transformers package") from e
    tok = AutoTokenizer.from_pretrained(model_id)
    model = AutoModelForCausalLM.from_pretrained(model_id)

    batches = []
    total = 0
    for text in texts:
        ids = tok(text, return_tensors="pt").input_ids
        total += ids.numel()
        batches.append(ids)
        if total >= max_tokens:
            break

    def run(batch):
        return model(batch)

    class _Wrapper(torch.nn.Module):
        def __init__(self, inner):
            super().__init__()
            self.inner = inner

        def forward(self, x):
            return self.inner(x)

    return extract(
        _Wrapper(model), batches, out_dir, model_id=model_id,
        corpus_id=f"text[{total} tokens]",
    )
