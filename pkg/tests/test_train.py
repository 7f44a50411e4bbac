import numpy as np
import pytest
from hypothesis import given, strategies as st

from pkgm.checkpoint import CheckpointError, build_meta, load_checkpoint, read_checkpoint, save_checkpoint
from pkgm.kg import select_key_relations
from pkgm.model import ModelParams, score_total
from pkgm.optim import Adam, LazyAdam
from pkgm.train import TrainConfig, TrainingError, train

from conftest import make_store, random_params


def adam_reference(g_seq, lr, b1=0.9, b2=0.999, eps=1e-8, x0=0.0):
    """Scalar Adam written from its textbook definition."""
    x, m, v = x0, 0.0, 0.0
    for t, g in enumerate(g_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return x


class TestOptimizers:
    def test_dense_adam_matches_reference(self):
        gs = [0.5, -1.0, 2.0, 0.1]
        x = {"w": np.zeros(1)}
        opt = Adam(x, lr=0.1)
        for g in gs:
            opt.step(x, {"w": np.array([g])})
        assert x["w"][0] == pytest.approx(adam_reference(gs, 0.1), rel=1e-12)

    def test_lazy_rows_untouched(self):
        table = np.zeros((4, 2))
        opt = LazyAdam(lr=0.1)
        opt.begin_step()
        opt.update("t", table, np.array([1]), np.ones((1, 2)))
        assert not table[[0, 2, 3]].any() and (table[1] < 0).all()
        assert opt.n_state_rows("t") == 1

    def test_lazy_moments_frozen_when_absent(self):
        # row 0 sees gradients at steps 1 and 3 only; its moments skip step 2 but bias correction uses t=3
        table = np.zeros((2, 1))
        opt = LazyAdam(lr=0.1)
        for ids, g in (([0], 1.0), ([1], 5.0), ([0], -2.0)):
            opt.begin_step()
            opt.update("t", table, np.array(ids), np.full((1, 1), g))
        m1, v1 = 0.1 * 1.0, 0.001 * 1.0
        x = -0.1 * (m1 / 0.1) / (np.sqrt(v1 / 0.001) + 1e-8)
        m3, v3 = 0.9 * m1 + 0.1 * -2.0, 0.999 * v1 + 0.001 * 4.0
        x -= 0.1 * (m3 / (1 - 0.9 ** 3)) / (np.sqrt(v3 / (1 - 0.999 ** 3)) + 1e-8)
        assert table[0, 0] == pytest.approx(x, rel=1e-12)


class TestTrain:
    def test_loss_decreases(self, tiny_store):
        res = train(tiny_store, TrainConfig(dim=8, learning_rate=0.01, batch_size=4, epochs=50, seed=0))
        smooth = np.convolve(res.loss_history, np.ones(5) / 5, mode="valid")
        assert smooth[-1] < smooth[0]
        assert len(res.loss_history) == 50

    def test_zero_lr_zero_margin_noop(self, tiny_store, init):
        before = init.copy()
        res = train(tiny_store, TrainConfig(dim=8, margin=0.0, learning_rate=0.0, epochs=3), params=init)
        assert res.params == before

    def test_deterministic(self, tiny_store):
        cfg = TrainConfig(dim=8, learning_rate=0.01, batch_size=3, epochs=5, seed=42, negatives_per_edge=2)
        a, b = train(tiny_store, cfg), train(tiny_store, cfg)
        assert a.loss_history == b.loss_history
        assert a.params.digest() == b.params.digest()
        c = train(tiny_store, TrainConfig(dim=8, learning_rate=0.01, batch_size=3, epochs=5, seed=43))
        assert c.params.digest() != a.params.digest()

    def test_normalization(self, tiny_store):
        res = train(tiny_store, TrainConfig(dim=8, learning_rate=0.05, epochs=3, normalize_entities=True))
        norms = np.linalg.norm(res.params.entity_emb, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_parallel_workers_run(self, tiny_store):
        res = train(tiny_store, TrainConfig(dim=8, learning_rate=0.01, batch_size=2, epochs=3, workers=3))
        assert res.params.is_finite() and len(res.loss_history) == 3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_aborts(self, tiny_store, init):
        init.entity_emb[0, 0] = np.inf
        with pytest.raises(TrainingError, match="learning_rate"):
            train(tiny_store, TrainConfig(dim=8, epochs=1), params=init)

    def test_empty_store(self):
        store = make_store(np.zeros((0, 3)), 2, 2)
        with pytest.raises(ValueError):
            train(store, TrainConfig())

    def test_config_validation(self):
        for bad in ({"margin": -1}, {"batch_size": 0}, {"epochs": 0}, {"negatives_per_edge": 0}, {"dim": 0},
                    {"beta1": 1.0}):
            with pytest.raises(ValueError):
                TrainConfig(**bad)
        assert TrainConfig().config_hash() == TrainConfig().config_hash() != TrainConfig(seed=1).config_hash()

    def test_translation_pattern_learned(self):
        # relation 0 maps entity i to i+10 for 10 heads; positives should end up scoring below corruptions
        rows = [(i, 0, i + 10) for i in range(10)] + [(i + 10, 1, (i + 3) % 10) for i in range(10)]
        store = make_store(rows, 20, 2)
        res = train(store, TrainConfig(dim=16, learning_rate=0.02, batch_size=5, epochs=150, seed=1))
        p = res.params
        pos = score_total(p, np.arange(10), np.zeros(10, int), np.arange(10) + 10).mean()
        rng = np.random.default_rng(0)
        neg = score_total(p, rng.integers(20, size=200), np.zeros(200, int), rng.integers(20, size=200)).mean()
        assert pos < neg


class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny_store):
        p = random_params(12, 2, 4)
        km = select_key_relations(tiny_store, 2)
        save_checkpoint(p, tmp_path / "m.ckpt", "abcdef0123456789", build_meta(tiny_store.vocab, km, seed=3))
        ck = read_checkpoint(tmp_path / "m.ckpt")
        assert ck.params == p
        assert ck.config_hash == "abcdef0123456789"
        assert ck.vocab() == tiny_store.vocab and ck.key_relations() == km and ck.meta["seed"] == 3

    @given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_round_trip_bitwise(self, tmp_path_factory, d, n_e, n_r, seed):
        p = random_params(n_e, n_r, d, seed=seed)
        path = tmp_path_factory.mktemp("ck") / "m.ckpt"
        save_checkpoint(p, path)
        q = load_checkpoint(path)
        for a, b in ((p.entity_emb, q.entity_emb), (p.relation_emb, q.relation_emb),
                     (p.relation_mat, q.relation_mat)):
            assert a.tobytes() == b.tobytes()

    def test_header_layout(self, tmp_path):
        save_checkpoint(random_params(6, 3, 4), tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw[:4] == b"PKGM"
        assert np.frombuffer(raw[4:20], "<u4").tolist() == [1, 4, 6, 3]

    def test_truncated(self, tmp_path):
        save_checkpoint(random_params(), tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        for cut in (10, 100, len(raw) - 1):
            (tmp_path / "t.ckpt").write_bytes(raw[:cut])
            with pytest.raises(CheckpointError):
                load_checkpoint(tmp_path / "t.ckpt")

    def test_shape_mismatch(self, tmp_path):
        save_checkpoint(random_params(d=32), tmp_path / "m.ckpt")
        with pytest.raises(CheckpointError, match="dim"):
            load_checkpoint(tmp_path / "m.ckpt", dim=64)

    def test_version_mismatch(self, tmp_path):
        save_checkpoint(random_params(), tmp_path / "m.ckpt")
        raw = bytearray((tmp_path / "m.ckpt").read_bytes())
        raw[4] = 9
        (tmp_path / "m.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_refuses_non_finite(self, tmp_path):
        p = random_params()
        p.entity_emb[0, 0] = np.nan
        with pytest.raises(CheckpointError):
            save_checkpoint(p, tmp_path / "m.ckpt")

    def test_params_shape_validation(self):
        with pytest.raises(ValueError):
            ModelParams(np.zeros((2, 3)), np.zeros((1, 3)), np.zeros((1, 2, 2)))
