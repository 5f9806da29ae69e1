import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corefnet.textmodel import (ENTITY_KINDS, ClusterSet, Document, DocumentError, MentionSpan,
                                dumps_document, generate_synthetic_corpus, read_documents,
                                split_corpus, write_documents)

PRONOUNS = {p for kind in ENTITY_KINDS.values() for p in kind["pronouns"]}


def _write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


class TestDocument:
    def test_minimal_record(self, tmp_path):
        f = tmp_path / "d.jsonl"
        _write_lines(f, ['{"id":"d0","tokens":["a"],"mentions":[[0,0]],"clusters":[[0]]}'])
        (doc,) = read_documents(f)
        assert doc.tokens == ("a",)
        assert doc.mentions == (MentionSpan(0, 0),)
        assert doc.gold_clusters == ClusterSet(({0},))

    def test_reversed_span_message(self, tmp_path):
        f = tmp_path / "d.jsonl"
        _write_lines(f, ['{"id":"d0","tokens":["a","b","c"],"mentions":[[2,1]]}'])
        with pytest.raises(DocumentError, match="span start exceeds end in d0"):
            read_documents(f)

    def test_parse_error_has_line_number(self, tmp_path):
        f = tmp_path / "d.jsonl"
        _write_lines(f, ['{"id":"d0","tokens":["a"],"mentions":[]}', "{oops"])
        with pytest.raises(DocumentError, match=r":2: parse error"):
            read_documents(f)

    @pytest.mark.parametrize("rec, msg", [
        ({"id": "x", "tokens": ["a"], "mentions": [[0, 1]]}, "out of range in x"),
        ({"id": "x", "tokens": ["a", "b"], "mentions": [[0, 0], [0, 0]]}, "duplicate"),
        ({"id": "x", "tokens": ["a"], "mentions": [[0, 0]], "clusters": [[3]]}, "invalid mention 3 in x"),
        ({"id": "x", "tokens": ["a", "b"], "mentions": [[0, 0], [1, 1]], "clusters": [[0, 1], [1]]},
         "not disjoint"),
        ({"id": "x", "tokens": ["a"]}, "missing field 'mentions'"),
    ])
    def test_invariant_violations(self, rec, msg):
        with pytest.raises(DocumentError, match=msg):
            Document.from_record(rec)

    def test_missing_clusters_is_empty(self):
        doc = Document.from_record({"id": "u", "tokens": ["a", "b"], "mentions": [[0, 0]]})
        assert len(doc.gold_clusters) == 0

    def test_mentions_resorted_and_clusters_follow(self):
        doc = Document("s", ("a", "b", "c"), ((2, 2), (0, 0), (1, 1)), ClusterSet(({0, 1},)))
        assert doc.mentions == ((0, 0), (1, 1), (2, 2))
        # old 0 = (2,2) is new 2, old 1 = (0,0) is new 0
        assert doc.gold_clusters == ClusterSet(({0, 2},))

    def test_span_width(self):
        assert MentionSpan(3, 5).width == 3

    def test_truncated_drops_crossing_mentions(self):
        doc = Document("t", tuple("abcdef"), ((0, 0), (2, 4), (5, 5)), ClusterSet(({0, 1, 2},)))
        cut = doc.truncated(4)
        assert cut.tokens == tuple("abcd")
        assert cut.mentions == ((0, 0),)
        assert cut.gold_clusters == ClusterSet(({0},))
        assert doc.truncated(10) is doc


class TestClusterSet:
    def test_canonical_order(self):
        a = ClusterSet(({5, 3}, {1, 0}))
        b = ClusterSet(({0, 1}, {3, 5}))
        assert a == b and a.as_lists() == [[0, 1], [3, 5]]

    def test_empty_cluster_rejected(self):
        with pytest.raises(DocumentError):
            ClusterSet((set(),))

    def test_without_singletons(self):
        assert ClusterSet(({0}, {1, 2})).without_singletons() == ClusterSet(({1, 2},))


class TestFileFormat:
    def test_empty_sequence_empty_file(self, tmp_path):
        write_documents([], tmp_path / "e.jsonl")
        assert (tmp_path / "e.jsonl").read_bytes() == b""

    def test_single_document_one_line(self, tmp_path):
        write_documents([Document("d0", ("a",), ((0, 0),), ClusterSet(({0},)))], tmp_path / "o.jsonl")
        text = (tmp_path / "o.jsonl").read_text()
        assert text.count("\n") == 1
        assert list(json.loads(text)) == ["id", "tokens", "mentions", "clusters"]

    def test_round_trip_500(self, tmp_path):
        docs = generate_synthetic_corpus(500, 7)
        write_documents(docs, tmp_path / "c.jsonl")
        assert read_documents(tmp_path / "c.jsonl") == docs

    def test_write_read_write_bytes(self, tmp_path):
        docs = generate_synthetic_corpus(50, 3)
        write_documents(docs, tmp_path / "a.jsonl")
        write_documents(read_documents(tmp_path / "a.jsonl"), tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_unicode_kept_verbatim(self):
        doc = Document("ü", ("çà",), ((0, 0),))
        assert "çà" in dumps_document(doc)


class TestSyntheticCorpus:
    @pytest.mark.parametrize("kw", [dict(n_docs=0), dict(n_docs=5, vocab_size=19),
                                    dict(n_docs=5, max_len=7)])
    def test_preconditions(self, kw):
        with pytest.raises(ValueError):
            generate_synthetic_corpus(seed=1, **kw)

    def test_same_seed_same_corpus(self):
        assert generate_synthetic_corpus(40, 7) == generate_synthetic_corpus(40, 7)
        assert generate_synthetic_corpus(40, 7) != generate_synthetic_corpus(40, 8)

    def test_ten_thousand_docs_valid_and_resolvable(self):
        docs = generate_synthetic_corpus(10_000, 11)
        for doc in docs:
            # re-running validation through the record path checks every invariant
            assert Document.from_record(doc.to_record()) == doc
            assert len(doc.tokens) <= 60
            self._check_pronouns(doc)

    @staticmethod
    def _check_pronouns(doc):
        owner = {m: c for c in doc.gold_clusters for m in c}
        for j, (s, e) in enumerate(doc.mentions):
            if s == e and doc.tokens[s] in PRONOUNS:
                earlier_named = [i for i in owner[j] if i < j
                                 and doc.tokens[doc.mentions[i][0]] not in PRONOUNS]
                assert earlier_named, f"{doc.id}: pronoun at mention {j} has no named antecedent"

    def test_pronoun_agreement(self):
        for doc in generate_synthetic_corpus(200, 5):
            for c in doc.gold_clusters:
                kinds = set()
                for m in c:
                    s, e = doc.mentions[m]
                    words = doc.tokens[s:e + 1]
                    for name, spec in ENTITY_KINDS.items():
                        if words[0] in spec["pronouns"] or (
                                len(words) > 1 and words[0] == spec["head"][0]
                                and tuple(words[2:]) == spec["tail"]):
                            kinds.add(name)
                assert len(kinds) == 1

    def test_small_max_len(self):
        for doc in generate_synthetic_corpus(30, 2, max_len=8):
            assert 1 <= len(doc.tokens) <= 8 and doc.mentions


class TestSplit:
    @pytest.mark.parametrize("n, sizes", [(10, (8, 1, 1)), (20, (16, 2, 2)), (59, (49, 5, 5))])
    def test_sizes(self, n, sizes):
        docs = generate_synthetic_corpus(n, 1)
        sp = split_corpus(docs, 3)
        assert (len(sp.train), len(sp.dev), len(sp.test)) == sizes

    def test_too_few(self):
        with pytest.raises(DocumentError):
            split_corpus(generate_synthetic_corpus(9, 1), 0)

    def test_deterministic(self):
        docs = generate_synthetic_corpus(30, 1)
        assert split_corpus(docs, 4) == split_corpus(docs, 4)
        assert split_corpus(docs, 4) != split_corpus(docs, 5)

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(10, 400), st.integers(0, 2**32))
    def test_partition(self, n, seed):
        docs = [Document(f"d{k}", ("a",)) for k in range(n)]
        sp = split_corpus(docs, seed)
        parts = [set(sp.train), set(sp.dev), set(sp.test)]
        assert parts[0] | parts[1] | parts[2] == {d.id for d in docs}
        assert sum(map(len, parts)) == n
        # dev and test are floor(n/10); train takes the remainder, so it can
        # sit up to two documents above 80%
        assert len(parts[1]) == len(parts[2]) == n // 10
        assert abs(len(parts[1]) - 0.1 * n) <= 1
        assert 0 <= len(parts[0]) - 0.8 * n <= 2
