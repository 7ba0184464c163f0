import math

import numpy as np
import pytest
from conftest import toy_catalog
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from zsfc.model import PARAM_SHAPES, Variant, init_params
from zsfc.sampler import TrainingExample
from zsfc.training import (
    Adam,
    TrainConfig,
    adam_step,
    batch_loss,
    gradients,
    loss,
    sample_negatives,
    scatter_rows,
    train,
)


def _ex(base, target, clicks=(), orders=()):
    return TrainingExample(0, base, target, 0, tuple(clicks), tuple(orders), True)


def _random_case(rng, cat, variant, d=8, n_neg=10, scale=0.5, seed=0):
    p = init_params(cat, d, "xavier", seed, variant, dtype=np.float64)
    for v in p.tensors.values():
        v[...] = rng.normal(0, scale, v.shape)
    items = rng.permutation(len(cat))
    ex = _ex(int(items[0]), int(items[1]), items[2 : 2 + rng.integers(0, 6)], items[10 : 10 + rng.integers(0, 4)])
    return p, ex, [int(i) for i in items[20 : 20 + n_neg]]


class TestNegatives:
    def test_forced_set(self):
        out = sample_negatives(5, 4, {2}, np.random.default_rng(0))
        assert sorted(out.tolist()) == [0, 1, 3, 4]

    def test_deterministic(self):
        a = sample_negatives(100, 20, {1, 5}, np.random.default_rng([3, 3]))
        b = sample_negatives(100, 20, {1, 5}, np.random.default_rng([3, 3]))
        np.testing.assert_array_equal(a, b)

    def test_never_duplicates_or_excluded(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            vocab = int(rng.integers(2, 40))
            exclude = set(rng.integers(0, vocab, size=int(rng.integers(0, 4))).tolist())
            n = int(rng.integers(1, vocab - len(exclude) + 1)) if vocab > len(exclude) else 0
            if n == 0:
                continue
            out = sample_negatives(vocab, n, exclude, rng)
            assert len(set(out.tolist())) == n
            assert not set(out.tolist()) & exclude
            assert out.min() >= 0 and out.max() < vocab

    def test_roughly_uniform(self):
        rng = np.random.default_rng(2)
        counts = np.bincount(np.concatenate([sample_negatives(10, 3, {4}, rng) for _ in range(6000)]), minlength=10)
        assert counts[4] == 0
        others = np.delete(counts, 4)
        assert others.min() > 0.9 * 2000 and others.max() < 1.1 * 2000

    def test_too_many(self):
        with pytest.raises(ValueError, match="cannot draw"):
            sample_negatives(5, 5, {0}, np.random.default_rng(0))


class TestLoss:
    def setup_method(self):
        self.cat = toy_catalog(16, 4)

    def test_equal_scores_two_way(self):
        p = init_params(self.cat, d=4)
        for v in p.tensors.values():
            v[...] = 0
        assert loss(_ex(0, 1), [2], p, Variant.ZSFC, self.cat) == pytest.approx(math.log(2), abs=1e-7)

    def test_large_margin(self):
        cat = toy_catalog(4, 4)
        p = init_params(cat, d=1, variant=Variant.STAMP_ORDERS, dtype=np.float64)
        for v in p.tensors.values():
            v[...] = 0
        p["base_b"][:] = math.atanh(0.5)
        p["item_emb"][:, 0] = [0.0, 80.0, 0.0, 0.0]  # target score 40, negatives 0
        value = loss(_ex(0, 1), [2, 3], p, Variant.STAMP_ORDERS, cat)
        assert 0 <= value < 1e-6

    @pytest.mark.parametrize("variant", list(Variant))
    def test_full_vocabulary_is_exact_cross_entropy(self, variant):
        rng = np.random.default_rng(4)
        cat = toy_catalog(30, 5, features_dim=6)
        p, ex, _ = _random_case(rng, cat, variant, d=6)
        negs = [i for i in range(30) if i != ex.target]
        flags = (variant.uses_orders, variant.uses_category)
        z = oracles.example_scores(dict(p.tensors), flags, cat.categories, ex.base, ex.clicks, ex.orders, range(30))
        want = oracles.softmax_cross_entropy(z, ex.target)
        assert loss(ex, negs, p, variant, cat) == pytest.approx(want, abs=1e-6)

    def test_matches_oracle_loss(self):
        rng = np.random.default_rng(5)
        cat = toy_catalog(40, 5)
        for variant in Variant:
            p, ex, negs = _random_case(rng, cat, variant)
            want = oracles.example_loss(dict(p.tensors), (variant.uses_orders, variant.uses_category), cat.categories,
                                        ex.base, ex.target, ex.clicks, ex.orders, negs)
            assert loss(ex, negs, p, variant, cat) == pytest.approx(want, rel=1e-10)

    def test_target_among_negatives(self):
        with pytest.raises(ValueError, match="target"):
            loss(_ex(0, 1), [1, 2], init_params(self.cat, d=2), Variant.ZSFC, self.cat)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_score(self):
        p = init_params(self.cat, d=2, variant=Variant.STAMP_ORDERS)
        p["item_emb"][1] = np.inf
        with pytest.raises(FloatingPointError):
            loss(_ex(0, 1), [2], p, Variant.STAMP_ORDERS, self.cat)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        cat = toy_catalog(40, 5)
        variant = list(Variant)[seed % 5]
        p, ex, negs = _random_case(rng, cat, variant, scale=2.0)
        assert loss(ex, negs, p, variant, cat) >= 0


class TestGradients:
    @pytest.mark.parametrize("variant", list(Variant))
    def test_finite_differences_float64(self, variant):
        rng = np.random.default_rng(list(Variant).index(variant))
        cat = toy_catalog(64, 6, negatives=[(0, 1)])
        for _ in range(2):
            p, ex, negs = _random_case(rng, cat, variant)
            flags = (variant.uses_orders, variant.uses_category)
            fd = oracles.finite_difference(
                lambda P: oracles.example_loss(P, flags, cat.categories, ex.base, ex.target, ex.clicks, ex.orders, negs),
                dict(p.tensors),
                list(PARAM_SHAPES),
                rows={"item_emb": sorted({ex.base, ex.target, *ex.clicks, *ex.orders, *negs})},
            )
            _, G = gradients(ex, negs, p, variant, cat)
            for name in PARAM_SHAPES:
                scale = max(np.abs(fd[name]).max(), 1e-8)
                assert np.abs(G[name] - fd[name]).max() / scale < 1e-6, name

    def test_untouched_rows_are_zero(self):
        rng = np.random.default_rng(9)
        cat = toy_catalog(64, 6)
        for variant in Variant:
            p, ex, negs = _random_case(rng, cat, variant)
            _, G = gradients(ex, negs, p, variant, cat)
            touched = {ex.base, ex.target, *ex.clicks, *ex.orders, *negs}
            untouched = [i for i in range(64) if i not in touched]
            assert not G["item_emb"][untouched].any()
            used_cats = set(cat.categories[list(touched)].tolist())
            idle = [c for c in range(cat.n_categories) if c not in used_cats]
            assert not G["category_emb"][idle].any()

    def test_duplicate_doubles_sum(self):
        rng = np.random.default_rng(11)
        cat = toy_catalog(64, 6)
        for variant in Variant:
            p, ex, negs = _random_case(rng, cat, variant)
            l1, g1 = gradients([ex], [negs], p, variant, cat, reduction="sum")
            l2, g2 = gradients([ex, ex], [negs, negs], p, variant, cat, reduction="sum")
            assert l2 == pytest.approx(2 * l1, rel=1e-12)
            for name in PARAM_SHAPES:
                np.testing.assert_allclose(g2[name], 2 * g1[name], rtol=1e-10, atol=1e-14)

    def test_batch_mean_is_mean_of_examples(self):
        rng = np.random.default_rng(12)
        cat = toy_catalog(64, 6)
        cases = [_random_case(rng, cat, Variant.ZSFC, seed=0) for _ in range(3)]
        p = cases[0][0]
        exs, negs = [c[1] for c in cases], [c[2] for c in cases]
        lb, gb = gradients(exs, negs, p, Variant.ZSFC, cat)
        singles = [gradients(e, n, p, Variant.ZSFC, cat) for e, n in zip(exs, negs)]
        assert lb == pytest.approx(np.mean([s[0] for s in singles]), rel=1e-12)
        for name in PARAM_SHAPES:
            np.testing.assert_allclose(gb[name], sum(s[1][name] for s in singles) / 3, rtol=1e-9, atol=1e-14)
        assert batch_loss(exs, negs, p, Variant.ZSFC, cat) == pytest.approx(lb, rel=1e-12)

    def test_scatter_rows_accumulates(self):
        target = np.zeros((4, 2))
        scatter_rows(target, np.array([1, 3, 1]), np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(target, [[0, 0], [6, 8], [0, 0], [3, 4]])


class TestAdam:
    def _params(self):
        return init_params(toy_catalog(4, 2), d=2, dtype=np.float64)

    def test_first_step(self):
        p = self._params()
        before = p.copy()
        g = p.zeros_like()
        for v in g.tensors.values():
            v[...] = 1.0
        state = Adam(p, lr=5e-4)
        adam_step(p, g, state)
        for name in PARAM_SHAPES:
            np.testing.assert_allclose(p[name] - before[name], -4.99999995e-4, rtol=0, atol=1e-15)
        assert state.step_count == 1

    def test_zero_gradient_is_noop(self):
        p = self._params()
        before = p.copy()
        adam_step(p, p.zeros_like(), Adam(p))
        for name in PARAM_SHAPES:
            np.testing.assert_array_equal(p[name], before[name])

    def test_long_random_run_stays_finite(self):
        p = self._params()
        state = Adam(p, lr=1e-2)
        rng = np.random.default_rng(0)
        g = p.zeros_like()
        for _ in range(10_000):
            for v in g.tensors.values():
                v[...] = rng.normal(0, 10, v.shape)
            state.step(p, g)
        assert state.step_count == 10_000
        for name in PARAM_SHAPES:
            assert np.isfinite(p[name]).all() and (state.v[name] >= 0).all()


def _dataset(cat, n=200, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        base = int(rng.integers(0, len(cat)))
        # a planted rule the model can learn: target = base + 1 (mod n)
        out.append(_ex(base, (base + 1) % len(cat), rng.integers(0, len(cat), 3), rng.integers(0, len(cat), 2)))
    return out


class TestTrain:
    def test_loss_decreases(self):
        cat = toy_catalog(40, 5, features_dim=16)
        cfg = TrainConfig(d=16, epochs=5, negatives=20, batch_size=16, learning_rate=1e-2, seed=1)
        log = train(_dataset(cat), cat, cfg).epoch_log
        assert [e["epoch"] for e in log] == [1, 2, 3, 4, 5]
        assert log[-1]["mean_loss"] < log[0]["mean_loss"]

    def test_deterministic(self, tmp_path):
        cat = toy_catalog(40, 5, features_dim=8)
        cfg = TrainConfig(d=8, epochs=2, negatives=10, batch_size=8, seed=3)
        a = train(_dataset(cat, 50), cat, cfg).params
        b = train(_dataset(cat, 50), cat, cfg).params
        for name in PARAM_SHAPES:
            np.testing.assert_array_equal(a[name], b[name])

    def test_zero_epochs_is_initialisation(self):
        cat = toy_catalog(40, 5, features_dim=8)
        cfg = TrainConfig(d=8, epochs=0, negatives=10, seed=4)
        got = train(_dataset(cat, 10), cat, cfg).params
        want = init_params(cat, 8, "image", 4, Variant.ZSFC)
        for name in PARAM_SHAPES:
            np.testing.assert_array_equal(got[name], want[name])

    def test_log_file(self, tmp_path):
        import json

        cat = toy_catalog(20, 4)
        cfg = TrainConfig(d=4, epochs=2, negatives=5, variant=Variant.STAMP)
        train(_dataset(cat, 20), cat, cfg, log_path=tmp_path / "log.jsonl")
        rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert [sorted(r) for r in rows] == [["epoch", "mean_loss", "wall_ms"]] * 2

    def test_negatives_capped_by_vocabulary(self):
        cat = toy_catalog(12, 3)
        result = train(_dataset(cat, 10), cat, TrainConfig(d=4, epochs=1, variant=Variant.STAMP))
        assert result.negatives_used == 10

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="empty"):
            train([], toy_catalog(10, 2), TrainConfig(d=4))

    @pytest.mark.parametrize("field, value", [("learning_rate", 0), ("d", -1), ("negatives", 0), ("epochs", -1)])
    def test_config_validation(self, field, value):
        with pytest.raises(ValueError):
            TrainConfig(**{field: value})
