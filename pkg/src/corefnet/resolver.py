"""Antecedent scoring, link selection and clustering.

Candidate antecedents for mention ``j`` are the dummy ``EPSILON`` (raw score
fixed at 0, meaning "no antecedent") followed by mentions ``0..j-1``. Score
matrices are stored padded: column 0 is the dummy, column ``i + 1`` is
mention ``i``; entries for ``i >= j`` are ``-inf`` (raw) or 0 (attention).
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .encoder import attend, embed, encode, span_reprs
from .numerics import ParamTensor, ShapeError, softmax_row
from .textmodel import ClusterSet, Document, MentionSpan

EPSILON = -1

MAX_BRUTE_FORCE = 10


class InstanceTooLargeError(ValueError):
    pass


@dataclass
class AffinityMatrix:
    raw: np.ndarray   # (n, n + 1)
    attn: np.ndarray  # (n, n + 1)
    dim: int = 1

    @property
    def n(self):
        return self.raw.shape[0]

    def raw_row(self, j):
        return self.raw[j, :j + 1]

    def row(self, j):
        return self.attn[j, :j + 1]

    @classmethod
    def from_raw(cls, raw, dim=1):
        raw = np.asarray(raw, dtype=np.float64)
        n = raw.shape[0]
        attn = np.zeros_like(raw)
        for j in range(n):
            attn[j, :j + 1] = softmax_row(raw[j, :j + 1])
        return cls(raw, attn, dim)


@dataclass
class CorefLinkSet:
    # anaphor index -> antecedent index, or EPSILON for "no antecedent"
    links: dict = field(default_factory=dict)
    objective: float = 0.0

    def real_links(self):
        return {j: i for j, i in self.links.items() if i != EPSILON}

    def __eq__(self, other):
        return isinstance(other, CorefLinkSet) and self.links == other.links


@dataclass
class MentionScorerParams:
    w: ParamTensor
    bias: ParamTensor
    keep_ratio: float = 0.4

    def __post_init__(self):
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ValueError("keep_ratio must lie in (0, 1]")


@dataclass
class ResolveConfig:
    mention_mode: str = "gold"  # gold | enumerate
    max_width: int = 4
    include_singletons: bool = False


@dataclass
class Resolution:
    clusters: ClusterSet
    spans: list
    links: CorefLinkSet
    timings: dict
    tokens_per_second: float


def enumerate_spans(n_tokens, max_width):
    return [MentionSpan(s, e) for s in range(n_tokens)
            for e in range(s, min(n_tokens, s + max_width))]


def candidate_mentions(doc: Document, R, mode="gold", scorer=None, max_width=4):
    """Gold mentions verbatim, or the top ``ceil(keep_ratio * n)`` scored spans."""
    if mode == "gold":
        return list(doc.mentions)
    if mode != "enumerate":
        raise ValueError(f"unknown mention mode {mode!r}")
    spans = enumerate_spans(len(doc.tokens), max_width)
    if not spans:
        return []
    scores = mention_scores(R, spans, scorer)
    k = math.ceil(scorer.keep_ratio * len(doc.tokens))
    # descending score, then earlier start, then shorter span
    order = np.lexsort((np.array([e for _, e in spans]), np.array([s for s, _ in spans]), -scores))
    return sorted(spans[i] for i in order[:k])


def mention_scores(R, spans, scorer: MentionScorerParams):
    X = span_reprs(R, spans)
    return X @ scorer.w.value + scorer.bias.value[0]


def affinity(X, proj_u: ParamTensor, proj_v: ParamTensor, dim=None):
    """Scaled dot products of projected span vectors, softmaxed per anaphor.

    ``X`` holds one span representation per row. Returns the matrix and the
    projected vectors (needed for the backward pass).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or (X.shape[0] and X.shape[1] != proj_u.shape[0]):
        raise ShapeError(f"span matrix {X.shape} does not fit projection {proj_u.shape}")
    dim = dim or proj_u.shape[1]
    if dim <= 0:
        raise ValueError("dim must be positive")
    n = X.shape[0]
    U = X @ proj_u.value
    V = X @ proj_v.value
    scores = (V @ U.T) / math.sqrt(dim)  # scores[j, i] = u_i . v_j / sqrt(d)
    raw = np.full((n, n + 1), -np.inf)
    raw[:, 0] = 0.0
    lower = np.tril_indices(n, -1)
    raw[lower[0], lower[1] + 1] = scores[lower]
    shifted = np.exp(raw - raw.max(axis=1, keepdims=True))
    attn = shifted / shifted.sum(axis=1, keepdims=True)
    return AffinityMatrix(raw, attn, dim), (U, V)


def affinity_backward(d_raw, X, UV, proj_u: ParamTensor, proj_v: ParamTensor, dim):
    """Accumulate projection grads from grads on raw scores; return dX."""
    U, V = UV
    n = X.shape[0]
    G = np.tril(d_raw[:, 1:n + 1], -1) / math.sqrt(dim)  # G[j, i]
    dU = G.T @ V
    dV = G @ U
    proj_u.grad += X.T @ dU
    proj_v.grad += X.T @ dV
    return dU @ proj_u.value.T + dV @ proj_v.value.T


def select_links(A: AffinityMatrix) -> CorefLinkSet:
    """Per-anaphor argmax; ties go to the dummy, then the earliest mention.

    Each anaphor's choice is constrained only by itself, so the per-row
    argmax maximizes the summed attention over all feasible link sets.
    """
    links, total = {}, 0.0
    for j in range(A.n):
        row = A.row(j)
        k = int(np.argmax(row))
        links[j] = EPSILON if k == 0 else k - 1
        total += row[k]
    return CorefLinkSet(links, total)


def brute_force_links(A: AffinityMatrix) -> CorefLinkSet:
    """Exhaustive search over every antecedent assignment (n <= 10)."""
    n = A.n
    if n > MAX_BRUTE_FORCE:
        raise InstanceTooLargeError(f"{n} mentions exceeds brute-force limit {MAX_BRUTE_FORCE}")
    if n == 0:
        return CorefLinkSet({}, 0.0)
    # vectorize the trailing anaphors, loop over assignments of the leading ones
    split, size = n, 1
    while split > 0 and size * split <= 50_000:
        size *= split  # anaphor split - 1 has `split` candidates
        split -= 1
    tail = list(range(split, n))
    tail_grid = np.indices([j + 1 for j in tail]).reshape(len(tail), -1).T
    tail_obj = np.zeros(tail_grid.shape[0])
    for col, j in enumerate(tail):
        tail_obj = tail_obj + A.attn[j, tail_grid[:, col]]
    best_val, best = -np.inf, None
    for head in itertools.product(*[range(j + 1) for j in range(split)]):
        head_val = 0.0
        for j, k in enumerate(head):
            head_val += A.attn[j, k]
        k = int(np.argmax(tail_obj + head_val))
        val = (tail_obj + head_val)[k]
        if val > best_val:  # strict: earlier (lexicographically smaller) wins ties
            best_val, best = val, head + tuple(int(x) for x in tail_grid[k])
    links = {j: (EPSILON if k == 0 else k - 1) for j, k in enumerate(best)}
    return CorefLinkSet(links, float(best_val))


class UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def clusters_from_links(links: CorefLinkSet, n, include_singletons=False) -> ClusterSet:
    uf = UnionFind(n)
    for j, i in links.real_links().items():
        if not 0 <= i < j < n:
            raise ValueError(f"invalid link {j}->{i} over {n} mentions")
        uf.union(i, j)
    groups = {}
    for m in range(n):
        groups.setdefault(uf.find(m), []).append(m)
    return ClusterSet(tuple(g for g in groups.values() if include_singletons or len(g) > 1))


def resolve(doc: Document, model, config: ResolveConfig | None = None) -> Resolution:
    """Run the full pipeline on one document with per-stage wall times."""
    config = config or ResolveConfig()
    timings = {}
    t_all = t = time.perf_counter()

    def lap(stage):
        nonlocal t
        now = time.perf_counter()
        timings[stage] = (now - t) * 1000.0
        t = now

    if not doc.tokens:
        return Resolution(ClusterSet(), [], CorefLinkSet(), timings, 0.0)
    E, _ = embed(doc.tokens, model.table)
    lap("embed")
    H, _ = encode(E, model.stack)
    lap("encode")
    R = attend(H, model.attention)
    lap("attend")
    spans = candidate_mentions(doc, R, config.mention_mode, model.scorer, config.max_width)
    lap("mentions")
    X = span_reprs(R, spans)
    A, _ = affinity(X, model.proj_u, model.proj_v)
    lap("affinity")
    links = select_links(A)
    lap("select")
    clusters = clusters_from_links(links, len(spans), config.include_singletons)
    lap("cluster")
    elapsed = time.perf_counter() - t_all
    tps = len(doc.tokens) / elapsed if elapsed > 0 else float("inf")
    return Resolution(clusters, spans, links, timings, tps)
