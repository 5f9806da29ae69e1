import numpy as np
import pytest

from corefnet import encoder as enc
from corefnet.encoder import (UNK, AttentionParams, EmbeddingTable, EncoderStack, MissingCacheError,
                              attend, attend_backward, compatibility, embed, embed_backward, encode,
                              encode_backward, span_repr, span_reprs, span_reprs_backward)
from corefnet.model import ForwardPass, ModelConfig, ModelParams
from corefnet.numerics import ParamTensor, Rng, ShapeError, finite_diff_check, softmax_row
from corefnet.textmodel import generate_synthetic_corpus

from conftest import random_document, tiny_model


def _table(words, d=3, seed=0):
    rng = np.random.default_rng(seed)
    vocab = [UNK, *words]
    return EmbeddingTable(vocab, ParamTensor("e", rng.normal(size=(len(vocab), d))))


def _stack(rng, dims):
    return EncoderStack([(ParamTensor(f"W{k}", rng.normal(size=(o, i))), ParamTensor(f"b{k}", rng.normal(size=o)))
                         for k, (i, o) in enumerate(zip(dims[:-1], dims[1:]))])


def _attention(rng, d, d_att, enabled=True):
    return AttentionParams(ParamTensor("q", rng.normal(size=(d, d_att))),
                           ParamTensor("k", rng.normal(size=(d, d_att))), enabled)


class TestEmbed:
    def test_known_word_row(self):
        t = _table(["cat", "dog"])
        E, ids = embed(["dog"], t)
        np.testing.assert_array_equal(E[0], t.table.value[t.index["dog"]])

    def test_unknown_word_row(self):
        t = _table(["cat"])
        E, _ = embed(["zebra"], t)
        np.testing.assert_array_equal(E[0], t.table.value[t.index[UNK]])

    def test_empty_document(self):
        with pytest.raises(ValueError):
            embed([], _table(["a"]))

    def test_unk_inserted(self):
        t = EmbeddingTable(["a"], ParamTensor("e", np.zeros((2, 2))))
        assert t.words[0] == UNK

    def test_batch_matches_lookup(self):
        docs = generate_synthetic_corpus(100, 2)
        words = sorted({w for d in docs[:50] for w in d.tokens})
        t = _table(words, d=4)
        for doc in docs:
            E, _ = embed(doc.tokens, t)
            for i, w in enumerate(doc.tokens):
                row = t.index.get(w, t.index[UNK])
                np.testing.assert_array_equal(E[i], t.table.value[row])

    def test_backward_accumulates_repeats(self):
        t = _table(["a", "b"], d=2)
        _, ids = embed(["a", "b", "a"], t)
        embed_backward(np.ones((3, 2)), ids, t)
        np.testing.assert_array_equal(t.table.grad[t.index["a"]], [2, 2])
        t.frozen = True
        t.table.zero_grad()
        embed_backward(np.ones((3, 2)), ids, t)
        assert not t.table.grad.any()


class TestEncode:
    def test_depth_zero_passthrough(self):
        E = np.random.default_rng(0).normal(size=(4, 3))
        H, cache = encode(E, EncoderStack([]))
        np.testing.assert_array_equal(H, E)

    def test_identity_fixed_point(self):
        E = np.abs(np.random.default_rng(0).normal(size=(4, 3)))
        stack = EncoderStack([(ParamTensor("W", np.eye(3)), ParamTensor("b", np.zeros(3)))])
        np.testing.assert_array_equal(encode(E, stack)[0], E)

    def test_straight_line_oracle(self):
        rng = np.random.default_rng(1)
        stack = _stack(rng, [5, 4, 3])
        E = rng.normal(size=(6, 5))
        (W1, b1), (W2, b2) = [(W.value, b.value) for W, b in stack.layers]
        expected = np.zeros((6, 3))
        for r in range(6):
            h1 = [max(0.0, sum(W1[o, i] * E[r, i] for i in range(5)) + b1[o]) for o in range(4)]
            expected[r] = [max(0.0, sum(W2[o, i] * h1[i] for i in range(4)) + b2[o]) for o in range(3)]
        np.testing.assert_allclose(encode(E, stack)[0], expected, rtol=0, atol=1e-12)

    def test_positive_homogeneity(self):
        rng = np.random.default_rng(2)
        stack = _stack(rng, [4, 4, 4])
        for _, b in stack.layers:
            b.value[:] = 0
        E = rng.normal(size=(5, 4))
        for t in (0.5, 3.0, 17.0):
            np.testing.assert_allclose(encode(t * E, stack)[0], t * encode(E, stack)[0], rtol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            encode(np.zeros((2, 3)), _stack(np.random.default_rng(0), [4, 2]))

    def test_missing_cache(self):
        stack = _stack(np.random.default_rng(0), [3, 3])
        with pytest.raises(MissingCacheError):
            encode_backward(np.zeros((2, 3)), [], stack)


class TestAttend:
    def test_disabled_is_identity(self):
        rng = np.random.default_rng(0)
        H = rng.normal(size=(5, 4))
        reps = attend(H, _attention(rng, 4, 3, enabled=False))
        assert reps.R is H or np.array_equal(reps.R, H)
        assert reps.weights is None

    def test_single_row(self):
        rng = np.random.default_rng(0)
        H = rng.normal(size=(1, 4))
        reps = attend(H, _attention(rng, 4, 3))
        assert reps.weights[0, 0] == 1.0
        np.testing.assert_array_equal(reps.R, H)

    def test_weights_follow_projected_dot_product(self):
        rng = np.random.default_rng(3)
        H = rng.normal(size=(6, 4))
        params = _attention(rng, 4, 3)
        reps = attend(H, params)
        q, k = H @ params.query.value, H @ params.key.value
        for i in range(6):
            # compatibility differs from q_i . k_j only by terms softmax ignores
            # (-|q_i|^2, constant in the row) or by the key-norm penalty -|k_j|^2
            logits = [2 * q[i] @ k[j] - k[j] @ k[j] for j in range(6)]
            np.testing.assert_allclose(reps.weights[i], softmax_row(logits), atol=1e-12)

    def test_tied_projections_peak_on_self(self):
        rng = np.random.default_rng(4)
        H = rng.normal(size=(8, 5))
        q = rng.normal(size=(5, 5))
        reps = attend(H, AttentionParams(ParamTensor("q", q), ParamTensor("k", q.copy())))
        assert np.all(np.argmax(reps.weights, axis=1) == np.arange(8))

    def test_rows_are_convex_combinations(self):
        rng = np.random.default_rng(5)
        # 6 tokens in 8 dims: rows of H are independent, so the combination is unique
        H = rng.normal(size=(6, 8))
        reps = attend(H, _attention(rng, 8, 4))
        np.testing.assert_allclose(reps.weights.sum(axis=1), 1.0, atol=1e-12)
        for i in range(6):
            coef, *_ = np.linalg.lstsq(H.T, reps.R[i], rcond=None)
            np.testing.assert_allclose(H.T @ coef, reps.R[i], atol=1e-12)
            assert np.all(coef >= -1e-12)
            assert abs(coef.sum() - 1.0) <= 1e-10

    def test_shift_invariance_of_compatibility(self):
        rng = np.random.default_rng(6)
        hq, hk = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        S = compatibility(hq, hk)
        for i in range(5):
            np.testing.assert_allclose(softmax_row(S[i] + 123.4), softmax_row(S[i]), atol=1e-12)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ShapeError):
            attend(rng.normal(size=(3, 4)), _attention(rng, 5, 2))
        with pytest.raises(ShapeError):
            AttentionParams(ParamTensor("q", np.zeros((4, 2))), ParamTensor("k", np.zeros((4, 3))))

    def test_backward_needs_weights(self):
        rng = np.random.default_rng(0)
        H = rng.normal(size=(3, 4))
        params = _attention(rng, 4, 2)
        with pytest.raises(MissingCacheError):
            attend_backward(np.ones((3, 4)), enc.TokenRepresentations(R=H, H=H), params)


class TestSpanRepr:
    def test_width_one(self):
        R = np.arange(12.0).reshape(4, 3)
        np.testing.assert_array_equal(span_repr(R, (2, 2)), np.tile(R[2], 3))

    def test_constant_rows(self):
        v = np.array([1.0, -2.0])
        R = np.tile(v, (5, 1))
        np.testing.assert_array_equal(span_repr(R, (1, 3)), np.tile(v, 3))

    def test_mean_oracle(self):
        rng = np.random.default_rng(0)
        R = rng.normal(size=(10, 4))
        spans = [(0, 0), (2, 5), (7, 9), (3, 3)]
        X = span_reprs(R, spans)
        for row, (s, e) in zip(X, spans):
            mean = [sum(R[t, c] for t in range(s, e + 1)) / (e - s + 1) for c in range(4)]
            np.testing.assert_allclose(row[8:], mean, rtol=0, atol=1e-12)
            np.testing.assert_allclose(row, span_repr(R, (s, e)), atol=1e-12)

    @pytest.mark.parametrize("span", [(3, 4), (-1, 0), (2, 1)])
    def test_out_of_range(self, span):
        with pytest.raises(IndexError):
            span_repr(np.zeros((4, 2)), span)

    def test_empty_span_list(self):
        assert span_reprs(np.zeros((3, 2)), []).shape == (0, 6)

    def test_backward_is_adjoint(self):
        rng = np.random.default_rng(1)
        R = rng.normal(size=(7, 3))
        spans = [(0, 2), (1, 1), (4, 6)]
        dX = rng.normal(size=(3, 9))
        dR = span_reprs_backward(dX, spans, 7)
        # <dX, J R> == <J^T dX, R> for the linear map R -> span_reprs(R)
        np.testing.assert_allclose((dX * span_reprs(R, spans)).sum(), (dR * R).sum(), rtol=1e-12)


def _model_loss_fn(model, docs, d_raw_fn):
    def f():
        total = 0.0
        for doc in docs:
            fp = ForwardPass(model, doc.tokens, doc.mentions)
            loss, d_raw = d_raw_fn(fp.A, doc)
            fp.backward(d_raw)
            total += loss
        return total
    return f


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        model, rng = tiny_model(0, depth=2)
        doc = random_document(rng, 6, 4, model.table.words[1:])
        fp = ForwardPass(model, doc.tokens, doc.mentions)
        fp.backward(np.zeros_like(fp.A.raw))
        for p in model.all_params():
            assert not p.grad.any(), p.name

    def test_depth0_no_attention_routes_through_spans(self):
        rng = np.random.default_rng(7)
        config = ModelConfig(d_emb=3, d_model=3, d_att=2, d_proj=2, depth=0, attention=False, embed_init=1.0)
        model = ModelParams.build(config, ["a", "b", "c"], Rng(0))
        doc = random_document(rng, 5, 3, ["a", "b", "c"])
        fp = ForwardPass(model, doc.tokens, doc.mentions)
        dX = rng.normal(size=fp.X.shape)
        dR = enc.span_reprs_backward(dX, fp.spans, len(doc.tokens))
        H, cache = enc.encode(fp.E, model.stack)
        dE = enc.encode_backward(enc.attend_backward(dR, fp.reps, model.attention), cache, model.stack)
        np.testing.assert_array_equal(dE, dR)
        enc.embed_backward(dE, fp.ids, model.table)
        expected = np.zeros_like(model.table.table.value)
        np.add.at(expected, fp.ids, dR)
        np.testing.assert_array_equal(model.table.table.grad, expected)

    @pytest.mark.parametrize("seed", range(20))
    def test_full_model_grad_check(self, seed):
        from corefnet.training import coref_loss

        model, rng = tiny_model(100 + seed)
        vocab = model.table.words[1:]
        docs = [random_document(rng, int(rng.integers(3, 7)), int(rng.integers(2, 5)), vocab)
                for _ in range(2)]
        f = _model_loss_fn(model, docs, lambda A, doc: coref_loss(A, doc.gold_clusters, 1.3, 0.7))
        for res in finite_diff_check(f, model.params(), epsilon=1e-6, tolerance=1e-4):
            assert res.passed, (res.name, res.max_rel_error)
