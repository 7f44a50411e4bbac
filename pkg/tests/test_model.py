import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from pkgm.model import (ModelParams, batch_grad, batch_loss, grad, hinge, init_params, pair_losses,
                        relation_residual, score_relation, score_total, score_triple)

import oracles
from conftest import random_params

reals = st.floats(-5, 5, allow_nan=False)


def params_from(h, r, t=None, m=None):
    d = len(h)
    ent = np.array([h] + ([t] if t is not None else []), dtype=float)
    mats = np.eye(d)[None] if m is None else np.asarray(m, dtype=float)[None]
    return ModelParams(ent, np.array([r], dtype=float), mats)


class TestScores:
    def test_exact_translation(self):
        assert score_triple(params_from([1, 0], [0, 1], [1, 1]), 0, 0, 1) == 0

    def test_by_hand(self):
        assert score_triple(params_from([1, 2], [3, -1], [0, 0]), 0, 0, 1) == 5

    def test_relation_identity(self):
        assert score_relation(params_from([0.3, -2], [0.3, -2]), 0, 0) == 0

    def test_relation_zero_matrix(self):
        assert score_relation(params_from([4, 4], [1, -1], m=np.zeros((2, 2))), 0, 0) == 2

    def test_total_is_sum(self, params):
        assert score_total(params, 1, 2, 3) == pytest.approx(score_triple(params, 1, 2, 3)
                                                             + score_relation(params, 1, 2), abs=1e-12)

    def test_total_by_hand(self):
        p = params_from([1, 2], [3, -1], [0, 0], m=np.eye(2))
        # triple part 5, relation part |1-3| + |2+1| = 5
        assert score_total(p, 0, 0, 1) == 10

    def test_index_errors(self, params):
        for args in ((6, 0, 0), (0, 3, 0), (0, 0, -1)):
            with pytest.raises(IndexError):
                score_triple(params, *args)
        with pytest.raises(IndexError):
            score_relation(params, 0, 3)

    def test_random_against_loops(self):
        p = random_params(10, 4, 7, seed=3)
        rng = np.random.default_rng(0)
        for h, r, t in zip(rng.integers(10, size=50), rng.integers(4, size=50), rng.integers(10, size=50)):
            assert score_triple(p, h, r, t) == pytest.approx(oracles.score_triple(p, h, r, t), abs=1e-9)
            assert score_relation(p, h, r) == pytest.approx(oracles.score_relation(p, h, r), abs=1e-6)

    def test_vectorised_matches_scalar(self, params):
        h, r, t = np.array([0, 1, 5]), np.array([2, 0, 1]), np.array([3, 3, 4])
        np.testing.assert_array_equal(score_total(params, h, r, t),
                                      [score_total(params, *x) for x in zip(h, r, t)])

    @given(st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_nonnegative(self, d, seed):
        p = random_params(3, 2, d, seed=seed)
        assert score_triple(p, 0, 1, 2) >= 0 and score_relation(p, 2, 0) >= 0

    def test_init(self):
        p = init_params(5, 3, 16, np.random.default_rng(0))
        assert np.abs(p.entity_emb).max() <= 6 / 4 and np.abs(p.relation_emb).max() <= 6 / 4
        assert np.abs(p.relation_mat - np.eye(16)).max() < 0.1
        with pytest.raises(ValueError):
            init_params(5, 3, 0, np.random.default_rng(0))

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            ModelParams(np.zeros((3, 2)), np.zeros((2, 3)), np.zeros((2, 2, 2)))


class TestHinge:
    @pytest.mark.parametrize("pos,neg,gamma,expected", [(1, 5, 1, 0), (3, 2, 1, 2), (4, 4, 0, 0)])
    def test_examples(self, pos, neg, gamma, expected):
        assert hinge(pos, neg, gamma) == expected

    @given(reals, reals, st.floats(0, 5), st.floats(0, 3))
    def test_monotone(self, pos, neg, gamma, delta):
        base = hinge(pos, neg, gamma)
        assert base >= 0
        assert hinge(pos, neg + delta, gamma) <= base
        assert hinge(pos + delta, neg, gamma) >= base
        assert hinge(pos, neg, gamma + delta) >= base


class TestBatchLoss:
    def test_satisfied_margin(self):
        p = params_from([0, 0], [0, 0], [5, 5])
        # positive (0,0,0) scores 0, negative (0,0,1) scores 10
        assert batch_loss(p, [((0, 0, 0), (0, 0, 1))], 1.0) == 0

    def test_additive(self, params):
        pair = ((0, 1, 2), (0, 1, 3))
        single = batch_loss(params, [pair], 5.0)
        assert batch_loss(params, [pair, pair], 5.0) == pytest.approx(2 * single, rel=1e-12)

    def test_empty(self, params):
        with pytest.raises(ValueError):
            batch_loss(params, [], 1.0)

    def test_random_batch_matches_oracle(self):
        p = random_params(8, 3, 5, seed=11)
        rng = np.random.default_rng(2)
        batch = [(tuple(rng.integers([8, 3, 8])), tuple(rng.integers([8, 3, 8]))) for _ in range(12)]
        assert batch_loss(p, batch, 1.5) == pytest.approx(oracles.batch_loss(p, batch, 1.5), abs=1e-9)


def check_gradient(p, batch, margin):
    _, g = batch_grad(p, batch, margin)
    dense = g.to_dense(p)
    num = oracles.pkgm_numeric_grad(p, batch, margin)
    return max(np.abs(dense.entity_emb - num["entity"]).max(), np.abs(dense.relation_emb - num["relation"]).max(),
               np.abs(dense.relation_mat - num["matrix"]).max())


class TestGradient:
    def test_inactive_pair_all_zero(self):
        p = params_from([0, 0], [0, 0], [5, 5])
        g = grad(p, ((0, 0, 0), (0, 0, 1)), 1.0)
        assert not g.entity_grad.any() and not g.relation_grad.any() and not g.matrix_grad.any()

    def test_sparsity(self):
        p = random_params(10, 4, 3)
        g = grad(p, ((1, 2, 3), (1, 2, 7)), 10.0)
        assert g.entity_ids.tolist() == [1, 3, 7]
        assert g.relation_ids.tolist() == [2]
        dense = g.to_dense(p)
        untouched = [e for e in range(10) if e not in (1, 3, 7)]
        assert not dense.entity_emb[untouched].any()
        assert not dense.relation_emb[[0, 1, 3]].any()

    def test_sign_zero(self):
        # h + r - t = 0 exactly in the first coordinate: subgradient 0 there
        p = ModelParams(np.array([[1.0, 0.0], [1.0, 5.0], [9.0, 9.0]]), np.array([[0.0, 1.0]]),
                        np.zeros((1, 2, 2)))
        g = grad(p, ((0, 0, 1), (0, 0, 2)), 100.0)
        dense = g.to_dense(p)
        assert dense.entity_emb[1, 0] == 0.0

    def test_loss_matches(self, params):
        batch = [((0, 1, 2), (3, 1, 2)), ((4, 0, 5), (4, 2, 5))]
        loss, _ = batch_grad(params, batch, 2.0)
        assert loss == pytest.approx(batch_loss(params, batch, 2.0), rel=1e-12)
        assert pair_losses(params, batch, 2.0).shape == (2,)

    def test_finite_differences_fixed(self):
        checked = 0
        for seed in range(40):
            p = random_params(6, 3, 3, seed=seed)
            rng = np.random.default_rng(seed)
            batch = [(tuple(rng.integers([6, 3, 6])), tuple(rng.integers([6, 3, 6]))) for _ in range(3)]
            if oracles.pkgm_kink_distance(p, batch, 1.0) < 1e-3:
                continue
            assert check_gradient(p, batch, 1.0) < 1e-3
            checked += 1
        assert checked >= 30

    @given(st.integers(0, 2**32 - 1), st.floats(0, 4), st.integers(1, 4))
    def test_finite_differences_property(self, seed, margin, d):
        p = random_params(5, 2, d, seed=seed)
        rng = np.random.default_rng(seed)
        batch = [(tuple(rng.integers([5, 2, 5])), tuple(rng.integers([5, 2, 5]))) for _ in range(2)]
        assume(oracles.pkgm_kink_distance(p, batch, margin) > 1e-3)
        assert check_gradient(p, batch, margin) < 1e-3

    def test_residual_shape(self, params):
        assert relation_residual(params, np.array([0, 1]), np.array([1, 2])).shape == (2, params.dim)
