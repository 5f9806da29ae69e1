"""The trainable parameter bundle, its forward/backward pass and checkpoints."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import encoder as enc
from .encoder import AttentionParams, EmbeddingTable, EncoderStack
from .numerics import ParamTensor, Rng, config_hash, glorot_uniform, he_uniform, load_tensors, save_tensors
from .resolver import MentionScorerParams, affinity, affinity_backward, enumerate_spans


class FingerprintError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_emb: int = 32
    d_model: int = 32
    d_att: int = 32
    d_proj: int = 32
    depth: int = 2
    attention: bool = True
    max_width: int = 4
    keep_ratio: float = 0.4
    embed_init: float = 8.0  # embedding rows ~ U(-embed_init, embed_init)

    def fingerprint(self):
        return config_hash(asdict(self))

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class ModelParams:
    def __init__(self, config: ModelConfig, table, stack, attention, proj_u, proj_v, scorer):
        self.config = config
        self.fingerprint = config.fingerprint()
        self.table = table
        self.stack = stack
        self.attention = attention
        self.proj_u = proj_u
        self.proj_v = proj_v
        self.scorer = scorer

    @classmethod
    def build(cls, config: ModelConfig, vocab, rng: Rng):
        """Fresh parameters.

        Attention starts with the key projection equal to the query
        projection (each token attends mostly to itself) and the antecedent
        projection starts at zero (every affinity starts at the dummy's 0).
        """
        vocab = list(vocab)
        if enc.UNK not in vocab:
            vocab.insert(0, enc.UNK)
        a = config.embed_init
        table = EmbeddingTable(vocab, ParamTensor(
            "embedding", rng.uniform(-a, a, (len(vocab), config.d_emb))))
        layers = []
        d_in = config.d_emb
        for l in range(config.depth):
            layers.append((ParamTensor(f"layer{l}.W", he_uniform(rng, d_in, config.d_model)),
                           ParamTensor(f"layer{l}.b", np.zeros(config.d_model))))
            d_in = config.d_model
        query = glorot_uniform(rng, d_in, config.d_att, (d_in, config.d_att))
        attention = AttentionParams(ParamTensor("attn.query", query),
                                    ParamTensor("attn.key", query.copy()),
                                    enabled=config.attention)
        d_span = 3 * d_in
        proj_u = ParamTensor("affinity.u", np.zeros((d_span, config.d_proj)))
        proj_v = ParamTensor("affinity.v", glorot_uniform(rng, d_span, config.d_proj, (d_span, config.d_proj)))
        scorer = MentionScorerParams(
            ParamTensor("mention.w", glorot_uniform(rng, d_span, 1, (d_span,))),
            ParamTensor("mention.b", np.zeros(1)), config.keep_ratio)
        return cls(config, table, EncoderStack(layers), attention, proj_u, proj_v, scorer)

    def all_params(self):
        out = [self.table.table, *self.stack.params(), self.attention.query,
               self.attention.key, self.proj_u, self.proj_v, self.scorer.w, self.scorer.bias]
        return out

    def params(self, mention_scorer=False):
        """Parameters the optimizer should update."""
        out = [] if self.table.frozen else [self.table.table]
        out += self.stack.params()
        if self.attention.enabled:
            out += [self.attention.query, self.attention.key]
        out += [self.proj_u, self.proj_v]
        if mention_scorer:
            out += [self.scorer.w, self.scorer.bias]
        return out

    def weight_matrices(self):
        """Prunable tensors: every weight matrix except the embedding table."""
        return [W for W, _ in self.stack.layers] + [
            self.attention.query, self.attention.key, self.proj_u, self.proj_v]

    def named_tensors(self):
        return {p.name: p.value for p in self.all_params()}

    def copy(self) -> "ModelParams":
        clone = ModelParams.from_tensors(self.config, self.table.words,
                                         {k: v.copy() for k, v in self.named_tensors().items()})
        clone.table.frozen = self.table.frozen
        return clone

    @classmethod
    def from_tensors(cls, config: ModelConfig, vocab, tensors):
        model = cls.build(config, vocab, Rng(0))
        for p in model.all_params():
            if p.name not in tensors:
                raise FingerprintError(f"checkpoint is missing tensor {p.name}")
            value = np.asarray(tensors[p.name], dtype=np.float64)
            if value.shape != p.shape:
                raise FingerprintError(f"tensor {p.name} has shape {value.shape}, expected {p.shape}")
            p.value = value.copy()
            p.grad = np.zeros_like(p.value)
            p.m = np.zeros_like(p.value)
            p.v = np.zeros_like(p.value)
        return model

    def header(self):
        return {"kind": "model", "fingerprint": self.fingerprint,
                "config": asdict(self.config), "vocab": list(self.table.words)}

    def save(self, path):
        save_tensors(path, self.named_tensors(), self.header())

    @classmethod
    def load(cls, path, expect: ModelConfig | None = None):
        tensors, header = load_tensors(path)
        if header.get("kind") != "model":
            raise FingerprintError(f"{path} is not a full-precision model checkpoint")
        return cls.from_header(tensors, header, expect)

    @classmethod
    def from_header(cls, tensors, header, expect=None):
        config = ModelConfig.from_dict(header["config"])
        if config.fingerprint() != header["fingerprint"]:
            raise FingerprintError("checkpoint fingerprint does not match its stored config")
        if expect is not None and expect.fingerprint() != header["fingerprint"]:
            raise FingerprintError(
                f"checkpoint fingerprint {header['fingerprint']} does not match "
                f"requested config {expect.fingerprint()}")
        return cls.from_tensors(config, header["vocab"], tensors)


class ForwardPass:
    """Cached forward computation over one document's mentions."""

    def __init__(self, model: ModelParams, tokens, spans):
        self.model = model
        self.spans = list(spans)
        self.E, self.ids = enc.embed(tokens, model.table)
        self.H, self.enc_cache = enc.encode(self.E, model.stack)
        self.reps = enc.attend(self.H, model.attention)
        self.X = enc.span_reprs(self.reps, self.spans)
        self.A, self.UV = affinity(self.X, model.proj_u, model.proj_v, model.config.d_proj)

    def backward(self, d_raw, d_tokens=None):
        """Accumulate grads from raw-score grads (and optional extra dR)."""
        model = self.model
        dX = affinity_backward(d_raw, self.X, self.UV, model.proj_u, model.proj_v,
                               model.config.d_proj)
        dR = enc.span_reprs_backward(dX, self.spans, self.H.shape[0])
        if d_tokens is not None:
            dR = dR + d_tokens
        dH = enc.attend_backward(dR, self.reps, model.attention)
        dE = enc.encode_backward(dH, self.enc_cache, model.stack)
        enc.embed_backward(dE, self.ids, model.table)


def mention_hinge(model: ModelParams, reps, doc, max_width):
    """Mean hinge loss of the span scorer against gold mentions; returns (loss, dR)."""
    spans = enumerate_spans(len(doc.tokens), max_width)
    X = enc.span_reprs(reps, spans)
    scores = X @ model.scorer.w.value + model.scorer.bias.value[0]
    gold = set(doc.mentions)
    y = np.array([1.0 if s in gold else -1.0 for s in spans])
    margin = 1.0 - y * scores
    active = margin > 0
    loss = float(np.where(active, margin, 0.0).sum() / len(spans))
    d_scores = np.where(active, -y, 0.0) / len(spans)
    model.scorer.w.grad += X.T @ d_scores
    model.scorer.bias.grad += d_scores.sum()
    dX = np.outer(d_scores, model.scorer.w.value)
    return loss, enc.span_reprs_backward(dX, spans, len(doc.tokens))


