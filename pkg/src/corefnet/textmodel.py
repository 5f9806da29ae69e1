"""Documents, mention spans, clusters, the JSONL file format and corpora."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

from .numerics import Rng

log = logging.getLogger(__name__)


class DocumentError(ValueError):
    pass


class MentionSpan(NamedTuple):
    start: int
    end: int

    @property
    def width(self):
        return self.end - self.start + 1


@dataclass(frozen=True)
class ClusterSet:
    """Disjoint, non-empty clusters of mention indices (or any hashable ids)."""

    clusters: tuple = ()

    def __post_init__(self):
        clusters = tuple(frozenset(c) for c in self.clusters)
        seen = set()
        for c in clusters:
            if not c:
                raise DocumentError("empty cluster")
            if seen & c:
                raise DocumentError("clusters are not disjoint")
            seen |= c
        # canonical order: by smallest member
        clusters = tuple(sorted(clusters, key=lambda c: sorted(c)))
        object.__setattr__(self, "clusters", clusters)

    def __len__(self):
        return len(self.clusters)

    def __iter__(self):
        return iter(self.clusters)

    def members(self):
        return set().union(*self.clusters) if self.clusters else set()

    def without_singletons(self) -> "ClusterSet":
        return ClusterSet(tuple(c for c in self.clusters if len(c) > 1))

    def mapped(self, fn) -> "ClusterSet":
        return ClusterSet(tuple(frozenset(fn(m) for m in c) for c in self.clusters))

    def as_lists(self):
        return [sorted(c) for c in self.clusters]


@dataclass(frozen=True)
class Document:
    id: str
    tokens: tuple
    mentions: tuple = ()
    gold_clusters: ClusterSet = field(default_factory=ClusterSet)

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        spans = [MentionSpan(int(s), int(e)) for s, e in self.mentions]
        n = len(self.tokens)
        for s, e in spans:
            if s > e:
                raise DocumentError(f"span start exceeds end in {self.id}")
            if s < 0 or e >= n:
                raise DocumentError(f"span [{s},{e}] out of range in {self.id}")
        order = sorted(range(len(spans)), key=lambda k: spans[k])
        if len(set(spans)) != len(spans):
            raise DocumentError(f"duplicate mention span in {self.id}")
        clusters = self.gold_clusters
        if not isinstance(clusters, ClusterSet):
            try:
                clusters = ClusterSet(tuple(clusters))
            except DocumentError as exc:
                raise DocumentError(f"{exc} in {self.id}") from None
        for m in clusters.members():
            if not isinstance(m, int) or not 0 <= m < len(spans):
                raise DocumentError(f"cluster references invalid mention {m} in {self.id}")
        if order != list(range(len(spans))):
            remap = {old: new for new, old in enumerate(order)}
            spans = [spans[k] for k in order]
            clusters = clusters.mapped(remap.__getitem__)
        object.__setattr__(self, "mentions", tuple(spans))
        object.__setattr__(self, "gold_clusters", clusters)

    def __len__(self):
        return len(self.tokens)

    def to_record(self, with_clusters=True) -> dict:
        rec = {"id": self.id, "tokens": list(self.tokens),
               "mentions": [[s, e] for s, e in self.mentions]}
        if with_clusters:
            rec["clusters"] = self.gold_clusters.as_lists()
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Document":
        for key in ("id", "tokens", "mentions"):
            if key not in rec:
                raise DocumentError(f"missing field {key!r}")
        return cls(str(rec["id"]), tuple(rec["tokens"]),
                   tuple(tuple(m) for m in rec["mentions"]),
                   ClusterSet(tuple(rec.get("clusters", ()))))

    def with_clusters(self, clusters: ClusterSet) -> "Document":
        return Document(self.id, self.tokens, self.mentions, clusters)

    def truncated(self, max_len: int) -> "Document":
        """Drop tokens past ``max_len`` and every mention that reaches them."""
        if len(self.tokens) <= max_len:
            return self
        keep = [k for k, (s, e) in enumerate(self.mentions) if e < max_len]
        remap = {old: new for new, old in enumerate(keep)}
        clusters = []
        for c in self.gold_clusters:
            kept = frozenset(remap[m] for m in c if m in remap)
            if kept:
                clusters.append(kept)
        return Document(self.id, self.tokens[:max_len],
                        tuple(self.mentions[k] for k in keep), ClusterSet(tuple(clusters)))


@dataclass(frozen=True)
class CorpusSplit:
    train: tuple
    dev: tuple
    test: tuple


def dumps_document(doc: Document) -> str:
    return json.dumps(doc.to_record(), ensure_ascii=False, separators=(",", ":"))


def read_documents(path) -> list:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DocumentError(f"{path}:{lineno}: parse error: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise DocumentError(f"{path}:{lineno}: parse error: record is not an object")
            try:
                docs.append(Document.from_record(rec))
            except DocumentError as exc:
                raise DocumentError(f"{path}:{lineno}: {exc}") from None
            except (TypeError, ValueError) as exc:
                raise DocumentError(f"{path}:{lineno}: malformed record: {exc}") from None
    return docs


def write_documents(docs, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for doc in docs:
            fh.write(dumps_document(doc))
            fh.write("\n")


def split_corpus(docs, seed: int) -> CorpusSplit:
    """Shuffled 80/10/10 split: floor for dev and test, the rest to train."""
    ids = [d.id for d in docs]
    if len(ids) < 10:
        raise DocumentError(f"need at least 10 documents to split, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise DocumentError("document ids are not unique")
    order = Rng(seed).permutation(len(ids))
    shuffled = [ids[k] for k in order]
    n_dev = n_test = len(ids) // 10
    n_train = len(ids) - n_dev - n_test
    return CorpusSplit(tuple(shuffled[:n_train]),
                       tuple(shuffled[n_train:n_train + n_dev]),
                       tuple(shuffled[n_train + n_dev:]))


# -- synthetic corpus ---------------------------------------------------------

# Entity kinds: how the full mention is built and which pronouns agree with it.
ENTITY_KINDS = {
    "male": {"head": ("mr",), "tail": (), "pronouns": ("he", "him", "his")},
    "female": {"head": ("ms",), "tail": (), "pronouns": ("she", "her", "hers")},
    "group": {"head": ("the",), "tail": ("family",), "pronouns": ("they", "them", "their")},
    "company": {"head": ("the",), "tail": ("company",), "pronouns": ("it", "its")},
}
_PUNCT = (".", ",")
_SYLLABLES = ("ka", "lo", "mi", "ren", "to", "sa", "vel", "dor", "qu", "ne",
              "bri", "ta", "fo", "gan", "li", "mar", "pe", "zu", "cho", "ra")


def _word_list(rng: Rng, count: int, taken: set) -> list:
    words = []
    while len(words) < count:
        n = int(rng.integers(2, 4))
        w = "".join(_SYLLABLES[int(i)] for i in rng.integers(0, len(_SYLLABLES), n))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def _reserved_tokens():
    out = set(_PUNCT)
    for kind in ENTITY_KINDS.values():
        out.update(kind["head"], kind["tail"], kind["pronouns"])
    return out


def generate_synthetic_corpus(n_docs: int, seed: int, vocab_size: int = 200,
                              max_len: int = 60) -> list:
    """Templated documents whose pronouns resolve by gender/number agreement.

    Each document introduces two to four entities of distinct kinds (a man,
    a woman, a family, a company), each by title plus proper name. Later
    references are either a repeat of the full mention or an agreeing
    pronoun, so every pronoun's cluster holds an earlier named mention.
    ``vocab_size`` counts the open-class words (names plus filler).
    """
    if n_docs < 1:
        raise ValueError("n_docs must be >= 1")
    if vocab_size < 20:
        raise ValueError("vocab_size must be >= 20")
    if max_len < 8:
        raise ValueError("max_len must be >= 8")
    rng = Rng(seed)
    taken = _reserved_tokens()
    n_names = max(8, vocab_size // 2)
    names = _word_list(rng, n_names, taken)
    fillers = _word_list(rng, vocab_size - n_names, taken)
    kinds = list(ENTITY_KINDS)
    width = len(str(n_docs - 1))
    return [_generate_document(f"doc{k:0{width}d}", rng.spawn(k), names, fillers, kinds, max_len)
            for k in range(n_docs)]


def _generate_document(doc_id, rng, names, fillers, kinds, max_len):
    n_ent = int(rng.integers(2, len(kinds) + 1))
    chosen = [kinds[int(i)] for i in sorted(rng.choice(len(kinds), n_ent, replace=False))]
    order = list(rng.permutation(n_ent))
    ent_names = {kind: names[int(rng.integers(len(names)))] for kind in chosen}

    tokens, spans, owner = [], [], []
    introduced = []

    def full_mention(kind):
        spec = ENTITY_KINDS[kind]
        return list(spec["head"]) + [ent_names[kind]] + list(spec["tail"])

    def add_mention(words, kind):
        spans.append((len(tokens), len(tokens) + len(words) - 1))
        owner.append(kind)
        tokens.extend(words)

    def add_fillers(lo, hi):
        tokens.extend(fillers[int(i)] for i in rng.integers(0, len(fillers), int(rng.integers(lo, hi + 1))))

    # sentences: <subject> <filler...> [<object>] <filler...> .
    while True:
        pending = [chosen[k] for k in order if chosen[k] not in introduced]
        if pending and (not introduced or rng.random() < 0.6):
            subject = pending[0]
        else:
            subject = introduced[int(rng.integers(len(introduced)))]
        sentence_start = len(tokens)
        n_spans = len(spans)
        _mention_for(subject, introduced, rng, add_mention, full_mention)
        add_fillers(1, 3)
        if len(introduced) >= 1 and rng.random() < 0.5:
            others = [k for k in introduced if k != subject]
            if others:
                obj = others[int(rng.integers(len(others)))]
                _mention_for(obj, introduced, rng, add_mention, full_mention)
                add_fillers(0, 2)
        tokens.append(".")
        if len(tokens) > max_len:
            del tokens[sentence_start:]
            del spans[n_spans:]
            del owner[n_spans:]
            break
        for kind in owner[n_spans:]:
            if kind not in introduced:
                introduced.append(kind)
        if len(tokens) >= max_len - 3:
            break
    if not spans:
        # max_len too small for even one sentence: a bare full mention
        words = full_mention(chosen[order[0]])[:max_len]
        tokens = words + ["."] * (1 if len(words) < max_len else 0)
        spans, owner = [(0, len(words) - 1)], [chosen[order[0]]]

    clusters = {}
    for idx, kind in enumerate(owner):
        clusters.setdefault(kind, []).append(idx)
    return Document(doc_id, tuple(tokens), tuple(spans),
                    ClusterSet(tuple(clusters.values())))


def _mention_for(kind, introduced, rng, add_mention, full_mention):
    if kind in introduced and rng.random() < 0.7:
        pronouns = ENTITY_KINDS[kind]["pronouns"]
        add_mention([pronouns[int(rng.integers(len(pronouns)))]], kind)
    else:
        add_mention(full_mention(kind), kind)
