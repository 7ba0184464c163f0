import itertools
import math

import numpy as np
import pytest
from conftest import toy_catalog
from hypothesis import given, settings
from hypothesis import strategies as st

from zsfc.model import (
    PARAM_SHAPES,
    Event,
    Ranker,
    Variant,
    attention_pool,
    elu,
    encode_context,
    fuse_item_embedding,
    init_params,
    rank_candidates,
    score_sum,
    score_trilinear,
    top_k,
    xavier_bound,
)
from zsfc.sampler import TrainingExample


def _zero(params):
    for name in PARAM_SHAPES:
        params[name][...] = 0
    return params


def _example(base, clicks=(), orders=()):
    return TrainingExample(0, base, base, 0, tuple(clicks), tuple(orders), False)


class TestElu:
    def test_values(self):
        assert elu(0.0) == 0.0
        assert elu(1.0) == 1.0
        assert float(elu(-1.0)) == pytest.approx(-0.63212055, abs=1e-8)

    def test_no_overflow_warning_for_large_inputs(self):
        with np.errstate(over="raise"):
            np.testing.assert_array_equal(elu(np.array([1000.0, -1000.0])), [1000.0, -1.0])


class TestFusion:
    def test_zero_parameters_give_zero(self):
        cat = toy_catalog(8, 3)
        p = _zero(init_params(cat, d=4))
        assert not fuse_item_embedding(2, Event.CLICK, p, Variant.ZSFC, cat).any()

    def test_scalar_hand_evaluation(self):
        cat = toy_catalog(2, 1)
        p = _zero(init_params(cat, d=1, dtype=np.float64))
        p["item_emb"][0] = 1.0
        p["category_emb"][cat.categories[0]] = 2.0
        p["fuse_w2"][:] = 1.0  # pre-activation 1 + 1*2 + 2 = 5
        p["fuse_w1"][:] = 1.0
        assert fuse_item_embedding(0, Event.CLICK, p, Variant.ZSFC, cat)[0] == 5.0

    def test_minus_one_event_annihilates(self):
        cat = toy_catalog(8, 3)
        p = init_params(cat, d=4, seed=3)
        p["event_emb"][Event.ORDER] = -1.0
        assert not fuse_item_embedding(5, Event.ORDER, p, Variant.ZSFC, cat).any()

    @pytest.mark.parametrize("variant", [Variant.STAMP, Variant.STAMP_ORDERS])
    def test_without_category_fusion_is_raw_embedding(self, variant):
        cat = toy_catalog(8, 3)
        p = init_params(cat, d=4, seed=1)
        p["event_emb"][:] = 0.7  # ignored without fusion
        for ev in Event:
            np.testing.assert_array_equal(fuse_item_embedding(3, ev, p, variant, cat), p["item_emb"][3])

    def test_unknown_item(self):
        cat = toy_catalog(8, 3)
        with pytest.raises(KeyError):
            fuse_item_embedding(8, Event.CLICK, init_params(cat, d=2), Variant.ZSFC, cat)


class TestAttention:
    def setup_method(self):
        self.p = _zero(init_params(toy_catalog(4, 2), d=1, dtype=np.float64))

    def test_empty_session(self):
        assert not attention_pool(np.zeros((0, 1)), np.zeros(1), self.p).any()

    def test_zero_output_weights(self):
        p = init_params(toy_catalog(4, 2), d=3, seed=2)
        p["attn_v"][:] = 0
        assert not attention_pool(np.ones((4, 3)), np.ones(3), p).any()

    def test_single_item_hand_evaluation(self):
        self.p["attn_v"][:] = 1.0
        assert attention_pool(np.array([[2.0]]), np.zeros(1), self.p)[0] == 1.0

    def test_permutation_invariant(self):
        p = init_params(toy_catalog(4, 2), d=5, seed=4, dtype=np.float64)
        rng = np.random.default_rng(0)
        s, b = rng.normal(size=(6, 5)), rng.normal(size=5)
        np.testing.assert_allclose(attention_pool(s, b, p), attention_pool(s[::-1], b, p), rtol=1e-12)


class TestEncodeContext:
    def test_zero_parameters(self):
        cat = toy_catalog(8, 3)
        ctx = encode_context(_example(0, [1, 2], [3]), _zero(init_params(cat, d=4)), Variant.ZSFC, cat)
        for h in (ctx.h_s, ctx.h_t, ctx.h_o):
            assert not h.any()

    def test_empty_context_uses_biases(self):
        cat = toy_catalog(8, 3)
        p = init_params(cat, d=4, seed=5)
        p["session_b"][:] = 0.3
        p["order_b"][:] = -0.2
        ctx = encode_context(_example(0), p, Variant.ZSFC, cat)
        assert not ctx.x_s.any()
        np.testing.assert_allclose(ctx.h_s, np.tanh(0.3), rtol=1e-6)
        np.testing.assert_allclose(ctx.h_o, np.tanh(-0.2), rtol=1e-6)

    def test_scalar_hand_evaluation(self):
        cat = toy_catalog(3, 1)
        p = _zero(init_params(cat, d=1, dtype=np.float64))
        p["item_emb"][:, 0] = [0.3, 0.5, 0.4]  # base, click, order
        for name in ("session_w", "base_w", "order_w"):
            p[name][:] = 1.0
        p["attn_v"][:] = 1.0
        ctx = encode_context(_example(0, [1], [2]), p, Variant.STAMP_ORDERS, cat)
        # one click: weight sigmoid(0) = 0.5, so x_s = 0.25
        assert ctx.x_s[0] == pytest.approx(0.25)
        assert ctx.h_s[0] == pytest.approx(math.tanh(0.25))
        assert ctx.h_t[0] == pytest.approx(math.tanh(0.3))
        assert ctx.h_o[0] == pytest.approx(math.tanh(0.4))

    def test_no_order_head_without_orders(self):
        cat = toy_catalog(8, 3)
        p = init_params(cat, d=4, seed=1)
        p["order_b"][:] = 0.5
        for v in (Variant.STAMP, Variant.STAMP_CATEGORY, Variant.STAMP_IMAGE):
            assert not encode_context(_example(0, [1], [2]), p, v, cat).h_o.any()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 1000), st.sampled_from(list(Variant)))
    def test_heads_bounded(self, seed, variant):
        cat = toy_catalog(16, 4, features_dim=6)
        p = init_params(cat, d=6, seed=seed)
        for name in PARAM_SHAPES:
            p[name] *= 20.0
        rng = np.random.default_rng(seed)
        ex = _example(0, rng.integers(0, 16, 7), rng.integers(0, 16, 3))
        ctx = encode_context(ex, p, variant, cat)
        for h in (ctx.h_s, ctx.h_t, ctx.h_o):
            assert np.isfinite(h).all() and np.abs(h).max() <= 1.0


class TestScores:
    def test_trilinear(self):
        assert score_trilinear([1, 2], [3, 4], [5, 6]) == 63
        assert score_trilinear([1, 2], [0, 0], [5, 6]) == 0

    def test_trilinear_symmetric(self):
        a, b, c = [1.5, -2.0, 3.0], [0.5, 4.0, -1.0], [2.0, 1.0, 0.25]
        values = {score_trilinear(*perm) for perm in itertools.permutations([a, b, c])}
        assert len(values) == 1

    def test_sum(self):
        assert score_sum([1, 0], [0, 1], [1, 1], [2, 3]) == 10
        assert score_sum([0, 0], [0, 0], [0, 0], [7, 9]) == 0
        args = ([1, 0], [0, 1], [1, 1])
        assert {score_sum(*perm, [2, 3]) for perm in itertools.permutations(args)} == {10}

    @pytest.mark.parametrize("fn, n", [(score_trilinear, 3), (score_sum, 4)])
    def test_length_mismatch(self, fn, n):
        args = [[1.0, 2.0]] * (n - 1) + [[1.0]]
        with pytest.raises(ValueError, match="length"):
            fn(*args)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=6))
    def test_trilinear_brute_force(self, rows):
        a, b, c = zip(*rows)
        want = 0.0
        for i in range(len(rows)):
            want += a[i] * b[i] * c[i]
        assert score_trilinear(a, b, c) == pytest.approx(want, abs=1e-9)


class TestTopK:
    def test_order(self):
        assert [i for i, _ in top_k(np.array([0, 1, 2]), np.array([5.0, 2.0, 9.0]), 2)] == [2, 0]

    def test_ties_lower_id_first(self):
        assert [i for i, _ in top_k(np.array([7, 3, 5]), np.array([1.0, 1.0, 0.0]), 2)] == [3, 7]

    def test_fewer_than_k(self):
        assert len(top_k(np.arange(4), np.zeros(4), 10)) == 4

    def test_ties_at_cut(self):
        ids = np.arange(10)[::-1].copy()
        assert [i for i, _ in top_k(ids, np.ones(10), 3)] == [0, 1, 2]

    def test_rejects_k_zero(self):
        with pytest.raises(ValueError):
            top_k(np.arange(3), np.zeros(3), 0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-3, 3), min_size=1, max_size=30), st.integers(1, 10), st.floats(-10, 10), st.floats(0.1, 10))
    def test_invariant_to_shift_and_scale(self, raw, k, shift, scale):
        ids = np.arange(len(raw))
        scores = np.array(raw, dtype=np.float64)
        base = [i for i, _ in top_k(ids, scores, k)]
        assert [i for i, _ in top_k(ids, scores * scale + shift, k)] == base


class TestRankCandidates:
    def test_hand_scores(self):
        cat = toy_catalog(4, 4)
        p = _zero(init_params(cat, d=1, dtype=np.float64, variant=Variant.STAMP_ORDERS))
        p["base_b"][:] = math.atanh(0.5)  # h_t = 0.5, h_s = h_o = 0
        p["item_emb"][:, 0] = [0.0, 10.0, 4.0, 18.0]  # scores 0, 5, 2, 9
        ctx = encode_context(_example(0), p, Variant.STAMP_ORDERS, cat)
        got = rank_candidates(ctx, [1, 2, 3], 2, p, Variant.STAMP_ORDERS, False, 0, cat)
        assert [i for i, _ in got] == [3, 1]
        assert [s for _, s in got] == pytest.approx([9.0, 5.0])

    @pytest.mark.parametrize("variant", list(Variant))
    def test_matches_direct_scoring(self, variant):
        cat = toy_catalog(30, 5, features_dim=4)
        p = init_params(cat, d=4, seed=7, variant=variant, mode=variant.init_mode, dtype=np.float64)
        ex = _example(3, [1, 2, 5], [7, 8])
        ctx = encode_context(ex, p, variant, cat)
        cands = list(range(30))
        got = dict(rank_candidates(ctx, cands, 30, p, variant, False, 3, cat))
        for c in cands:
            x = fuse_item_embedding(c, Event.CANDIDATE, p, variant, cat)
            want = score_sum(ctx.h_o, ctx.h_s, ctx.h_t, x) if variant.uses_orders else score_trilinear(ctx.h_s, ctx.h_t, x)
            assert got[c] == pytest.approx(want, rel=1e-10, abs=1e-12)

    def test_post_filter(self):
        cat = toy_catalog(40, 4, negatives=[(0, 1)])
        p = init_params(cat, d=4, seed=1)
        ranker = Ranker(p, Variant.ZSFC, cat)
        for base in range(40):
            out = ranker.rank(ranker.encode(_example(base, [1, 2])), 40, base, post_filter=True)
            assert out and all(cat.is_complementary(base, i) for i, _ in out)
            assert len(out) == cat.complementary_count(base)

    def test_unknown_candidate(self):
        cat = toy_catalog(10, 3)
        p = init_params(cat, d=2)
        ctx = encode_context(_example(0), p, Variant.ZSFC, cat)
        with pytest.raises((KeyError, IndexError)):
            rank_candidates(ctx, [1, 10], 2, p, Variant.ZSFC, True, 0, cat)


class TestInit:
    def test_deterministic(self):
        cat = toy_catalog(20, 4)
        a, b = init_params(cat, d=8, seed=9), init_params(cat, d=8, seed=9)
        for name in PARAM_SHAPES:
            np.testing.assert_array_equal(a[name], b[name])
        assert not np.array_equal(a["item_emb"], init_params(cat, d=8, seed=10)["item_emb"])

    def test_xavier_bound_d128(self):
        assert xavier_bound(128, 128) == pytest.approx(0.1531, abs=5e-5)
        p = init_params(toy_catalog(10, 2), d=128)
        assert np.abs(p["session_w"]).max() <= xavier_bound(128, 128)
        assert not p["session_b"].any() and not p["fuse_b2"].any()

    def test_shapes(self):
        cat = toy_catalog(10, 3)
        p = init_params(cat, d=5)
        p.check()
        assert p["fuse_w2"].shape == (15, 5) and p["event_emb"].shape == (3, 5)
        assert p["category_emb"].shape == (len(cat.hierarchy), 5)

    def test_image_copy(self):
        cat = toy_catalog(10, 3, features_dim=6)
        p = init_params(cat, d=6, mode="image")
        np.testing.assert_array_equal(p["item_emb"], cat.image_features)

    def test_image_needs_features(self):
        with pytest.raises(ValueError, match="image"):
            init_params(toy_catalog(10, 3), d=6, mode="image")
        with pytest.raises(ValueError, match="dimension"):
            init_params(toy_catalog(10, 3, features_dim=4), d=6, mode="image")

    def test_check_rejects_non_finite(self):
        p = init_params(toy_catalog(10, 3), d=2)
        p["base_w"][0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            p.check()
