"""Global magnitude pruning and symmetric per-tensor int8 quantization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evaluation import evaluate_documents
from .model import FingerprintError, ModelParams
from .numerics import NonFiniteError, load_tensors, save_tensors
from .resolver import ResolveConfig

QMAX = 127


@dataclass
class QuantizedTensor:
    shape: tuple
    scale: float
    values: np.ndarray  # int8

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def dequantize(self):
        return self.scale * self.values.astype(np.float64).reshape(self.shape)


def quantize_tensor(w) -> QuantizedTensor:
    """Symmetric int8: ``scale = max|w| / 127`` (1 for an all-zero tensor)."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise NonFiniteError("cannot quantize non-finite weights")
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = peak / QMAX if peak > 0 else 1.0
    q = np.clip(np.rint(w / scale), -QMAX, QMAX).astype(np.int8)  # rint: half to even
    return QuantizedTensor(w.shape, scale, q)


@dataclass
class QuantizedModel:
    source: ModelParams
    tensors: dict  # name -> QuantizedTensor

    def dequantized(self) -> ModelParams:
        """A float64 model whose weights are the dequantized lattice values."""
        return ModelParams.from_tensors(self.source.config, self.source.table.words,
                                        {k: q.dequantize() for k, q in self.tensors.items()})

    def save(self, path):
        arrays, header = {}, self.source.header()
        header["kind"] = "quantized-model"
        header["scales"] = {}
        for name, q in self.tensors.items():
            arrays[name] = q.values
            header["scales"][name] = q.scale
        save_tensors(path, arrays, header)

    @classmethod
    def load(cls, path, expect=None):
        arrays, header = load_tensors(path)
        if header.get("kind") != "quantized-model":
            raise FingerprintError(f"{path} is not a quantized checkpoint")
        tensors = {k: QuantizedTensor(v.shape, float(header["scales"][k]), v.astype(np.int8))
                   for k, v in arrays.items()}
        deq = {k: q.dequantize() for k, q in tensors.items()}
        source = ModelParams.from_header(deq, dict(header, kind="model"), expect)
        return cls(source, tensors)


def quantize(model: ModelParams) -> QuantizedModel:
    return QuantizedModel(model, {p.name: quantize_tensor(p.value) for p in model.all_params()})


@dataclass
class SparsityMask:
    masks: dict = field(default_factory=dict)  # tensor name -> bool array, True = kept
    target_sparsity: float = 0.0

    def apply(self, model: ModelParams):
        for p in model.weight_matrices():
            keep = self.masks.get(p.name)
            if keep is not None:
                p.value[~keep] = 0.0

    def sparsity(self):
        total = sum(m.size for m in self.masks.values())
        zeros = sum(int((~m).sum()) for m in self.masks.values())
        return zeros / total if total else 0.0


def global_sparsity(model: ModelParams):
    mats = model.weight_matrices()
    total = sum(p.value.size for p in mats)
    return sum(int((p.value == 0).sum()) for p in mats) / total


def global_magnitude_masks(mags: dict, target_sparsity: float) -> dict:
    """Keep-masks that drop the globally smallest entries of ``mags``.

    ``ceil(target * total)`` entries are dropped; entries that are already
    zero are dropped as well, so the achieved fraction never falls short.
    Ties go to the earlier tensor (dict order), then the earlier position.
    """
    names = list(mags)
    flat = np.concatenate([np.ravel(mags[k]) for k in names]) if names else np.zeros(0)
    n_zero = int(np.ceil(target_sparsity * flat.size))
    order = np.argsort(flat, kind="stable")
    drop = np.zeros(flat.size, dtype=bool)
    drop[order[:n_zero]] = True
    drop |= flat == 0.0
    masks, offset = {}, 0
    for k in names:
        shape = np.shape(mags[k])
        size = int(np.prod(shape))
        masks[k] = ~drop[offset:offset + size].reshape(shape)
        offset += size
    return masks


def prune(model: ModelParams, target_sparsity: float):
    """Zero the globally smallest-magnitude weights until the target is met.

    Biases, the embedding table and the mention scorer are left alone.
    Magnitudes of the two affinity projections are compared after
    balancing them (see ``balanced_magnitudes``). Returns a pruned copy and
    its mask.
    """
    if not 0.0 <= target_sparsity < 1.0:
        raise ValueError("target_sparsity must lie in [0, 1)")
    pruned = model.copy()
    if target_sparsity == 0.0:
        return pruned, SparsityMask({}, 0.0)
    mask = SparsityMask(global_magnitude_masks(balanced_magnitudes(pruned), target_sparsity),
                        target_sparsity)
    mask.apply(pruned)
    return pruned, mask


def balanced_magnitudes(model: ModelParams):
    """Absolute weights, with the affinity projections put on a common scale.

    Affinity scores depend only on the product of the two projections, so
    scaling one by ``c`` and the other by ``1/c`` changes no output. Ranking
    them at equal Frobenius norm keeps global pruning from singling out
    whichever factor happens to be small.
    """
    mags = {p.name: np.abs(p.value) for p in model.weight_matrices()}
    nu = np.linalg.norm(model.proj_u.value)
    nv = np.linalg.norm(model.proj_v.value)
    if nu > 0 and nv > 0:
        c = np.sqrt(nv / nu)
        mags[model.proj_u.name] = mags[model.proj_u.name] * c
        mags[model.proj_v.name] = mags[model.proj_v.name] / c
    return mags


FINETUNE_LR = 1e-4


def finetune_pruned(model: ModelParams, mask: SparsityMask, train_docs, dev_docs,
                    epochs=5, learning_rate=FINETUNE_LR, seed=7):
    """Continue training a pruned model with its mask enforced after every step.

    Starts from fresh optimizer moments. Returns the training result; its
    ``model`` is the best dev checkpoint.
    """
    from .training import TrainConfig, train

    config = TrainConfig(epochs=epochs, learning_rate=learning_rate, seed=seed)
    return train(train_docs, dev_docs, config, model=model.copy(), mask=mask)


@dataclass
class CompressionReport:
    full: object
    compressed: object
    delta_f1: float  # percentage points, compressed minus full
    throughput_ratio: float  # compressed / full tokens per second


def eval_compressed(model: ModelParams, compressed, dev_docs, config: ResolveConfig | None = None,
                    workers=1):
    """Score the full and the compressed model on the same documents."""
    if isinstance(compressed, QuantizedModel):
        compressed = compressed.dequantized()
    full = evaluate_documents(model, dev_docs, config, workers)
    comp = evaluate_documents(compressed, dev_docs, config, workers)
    ratio = comp.tokens_per_second / full.tokens_per_second if full.tokens_per_second else 0.0
    return CompressionReport(full, comp, 100.0 * (comp.link_f1 - full.link_f1), ratio)
