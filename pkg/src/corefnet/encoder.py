"""Token embeddings, the ReLU feedforward stack, token attention and spans.

Forward functions return the output together with whatever the matching
backward function needs; backward functions accumulate into ``.grad`` of the
parameters they touch and return the gradient for their input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ParamTensor, ShapeError, relu, softmax_rows

UNK = "<unk>"


class MissingCacheError(RuntimeError):
    pass


class EmbeddingTable:
    def __init__(self, vocab, table: ParamTensor):
        vocab = list(vocab)
        if UNK not in vocab:
            vocab.insert(0, UNK)
        self.words = vocab
        self.index = {w: k for k, w in enumerate(vocab)}
        if table.shape[0] != len(vocab):
            raise ShapeError(f"table has {table.shape[0]} rows for {len(vocab)} words")
        self.table = table
        self.frozen = False

    @property
    def dim(self):
        return self.table.shape[1]

    def ids(self, tokens):
        unk = self.index[UNK]
        return np.array([self.index.get(t, unk) for t in tokens], dtype=np.int64)


@dataclass
class EncoderStack:
    # W^l has shape (d_out, d_in); b^l has shape (d_out,)
    layers: list = field(default_factory=list)

    @property
    def depth(self):
        return len(self.layers)

    def params(self):
        return [p for layer in self.layers for p in layer]


@dataclass
class AttentionParams:
    query: ParamTensor
    key: ParamTensor
    enabled: bool = True

    def __post_init__(self):
        if self.query.shape != self.key.shape:
            raise ShapeError(f"query {self.query.shape} and key {self.key.shape} differ")


@dataclass
class TokenRepresentations:
    """Refined token vectors plus the caches the backward pass needs."""

    R: np.ndarray
    H: np.ndarray
    weights: np.ndarray | None = None  # attention rows, None when disabled
    hq: np.ndarray | None = None
    hk: np.ndarray | None = None

    def __len__(self):
        return self.R.shape[0]


def embed(tokens, table: EmbeddingTable):
    if len(tokens) == 0:
        raise ValueError("cannot embed an empty document")
    ids = table.ids(tokens)
    return table.table.value[ids], ids


def embed_backward(dE, ids, table: EmbeddingTable):
    if table.frozen:
        return
    np.add.at(table.table.grad, ids, dE)


def encode(E, stack: EncoderStack):
    """Apply ``H = relu(H_prev W^T + b)`` per layer; returns (H_L, cache)."""
    H = np.asarray(E, dtype=np.float64)
    cache = []
    for W, b in stack.layers:
        if H.shape[1] != W.shape[1]:
            raise ShapeError(f"layer expects width {W.shape[1]}, got {H.shape[1]}")
        Z = H @ W.value.T + b.value
        cache.append((H, Z))
        H = relu(Z)
    return H, cache


def encode_backward(dH, cache, stack: EncoderStack):
    if len(cache) != stack.depth:
        raise MissingCacheError("encoder cache does not match the stack")
    for (W, b), (H_prev, Z) in zip(reversed(stack.layers), reversed(cache)):
        dZ = dH * (Z > 0)
        W.grad += dZ.T @ H_prev
        b.grad += dZ.sum(axis=0)
        dH = dZ @ W.value
    return dH


def attend(H, params: AttentionParams) -> TokenRepresentations:
    """Refine each row of ``H`` as an attention-weighted mix of all rows.

    ``R = H`` exactly when attention is disabled.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.shape[0] == 0:
        raise ValueError("cannot attend over zero tokens")
    if not params.enabled:
        return TokenRepresentations(R=H, H=H)
    if H.shape[1] != params.query.shape[0]:
        raise ShapeError(f"attention expects width {params.query.shape[0]}, got {H.shape[1]}")
    hq = H @ params.query.value
    hk = H @ params.key.value
    weights = softmax_rows(compatibility(hq, hk))
    return TokenRepresentations(R=weights @ H, H=H, weights=weights, hq=hq, hk=hk)


def compatibility(hq, hk):
    """Negative squared distance between projected queries and keys.

    Equals ``2 q.k - |k|^2`` up to a per-row constant, so it is the
    query/key dot product plus a key-norm penalty; with tied projections
    every token is its own best match.
    """
    sq_q = (hq * hq).sum(axis=1)[:, None]
    sq_k = (hk * hk).sum(axis=1)[None, :]
    return -(sq_q - 2.0 * hq @ hk.T + sq_k)


def attend_backward(dR, reps: TokenRepresentations, params: AttentionParams):
    if not params.enabled:
        return dR
    if reps.weights is None:
        raise MissingCacheError("attention weights were not cached")
    A, H = reps.weights, reps.H
    dH = A.T @ dR
    dA = dR @ H.T
    dS = A * (dA - (dA * A).sum(axis=1, keepdims=True))
    hq, hk = reps.hq, reps.hk
    dhq = 2.0 * (dS @ hk - dS.sum(axis=1)[:, None] * hq)
    dhk = 2.0 * (dS.T @ hq - dS.sum(axis=0)[:, None] * hk)
    params.query.grad += H.T @ dhq
    params.key.grad += H.T @ dhk
    dH += dhq @ params.query.value.T + dhk @ params.key.value.T
    return dH


def span_repr(R, span):
    """Concatenate the start row, end row and span mean: width 3d."""
    R = R.R if isinstance(R, TokenRepresentations) else R
    s, e = span
    if not 0 <= s <= e < R.shape[0]:
        raise IndexError(f"span [{s},{e}] outside {R.shape[0]} tokens")
    return np.concatenate([R[s], R[e], R[s:e + 1].mean(axis=0)])


def span_reprs(R, spans):
    R = R.R if isinstance(R, TokenRepresentations) else R
    if not spans:
        return np.zeros((0, 3 * R.shape[1]))
    starts = np.array([s for s, _ in spans])
    ends = np.array([e for _, e in spans])
    if starts.min() < 0 or ends.max() >= R.shape[0] or np.any(starts > ends):
        raise IndexError("span outside document")
    csum = np.vstack([np.zeros((1, R.shape[1])), np.cumsum(R, axis=0)])
    means = (csum[ends + 1] - csum[starts]) / (ends - starts + 1)[:, None]
    return np.hstack([R[starts], R[ends], means])


def span_reprs_backward(dX, spans, n_tokens):
    d = dX.shape[1] // 3
    dR = np.zeros((n_tokens, d))
    for k, (s, e) in enumerate(spans):
        dR[s] += dX[k, :d]
        dR[e] += dX[k, d:2 * d]
        dR[s:e + 1] += dX[k, 2 * d:] / (e - s + 1)
    return dR
