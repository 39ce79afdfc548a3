import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avse import training
from avse.errors import ConfigError, DataError, NumericError
from avse.model import Network, NetworkConfig
from avse.training import AdamState, PlateauState, TrainConfig, adam_step, lr_schedule_update, lr_trace


class Arrays:
    def __init__(self, n, seed=0, video=False):
        rng = np.random.default_rng(seed)
        self.noisy = rng.normal(-3, 1, (n, 80, 20)).astype(np.float32)
        self.clean = (0.5 * self.noisy - 1).astype(np.float32)
        self.video = rng.standard_normal((n, 5, 128, 128)).astype(np.float32) if video else None

    def __len__(self):
        return len(self.noisy)


def tiny(mode="audio_only", seed=0):
    return Network(NetworkConfig(mode=mode, width_divisor=32, seed=seed))


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = [np.array([1.0, -2.0]), np.ones((2, 2))]
        before = [x.copy() for x in p]
        state = AdamState.for_params(p)
        adam_step(p, [np.zeros(2), np.zeros((2, 2))], state)
        for a, b in zip(p, before):
            np.testing.assert_array_equal(a, b)
        assert state.t == 1

    @pytest.mark.parametrize("g", [0.3, -7.0, 1e-3])
    def test_first_step_size(self, g):
        p = [np.zeros(4)]
        adam_step(p, [np.full(4, g)], AdamState.for_params(p))
        # bias-corrected first step: lr * g / (|g| + eps)
        np.testing.assert_allclose(p[0], -5e-4 * g / (abs(g) + 1e-8), rtol=1e-12)

    def test_against_reference_loop(self):
        rng = np.random.default_rng(0)
        p = [rng.standard_normal(5)]
        ref = p[0].copy()
        m = v = np.zeros(5)
        state = AdamState.for_params(p, lr=0.01)
        for t in range(1, 6):
            g = rng.standard_normal(5)
            adam_step(p, [g], state)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p[0], ref, rtol=1e-12)

    def test_deterministic(self):
        g = [np.array([0.1, 0.2])]
        a, b = [np.ones(2)], [np.ones(2)]
        sa, sb = AdamState.for_params(a), AdamState.for_params(b)
        for _ in range(2):
            adam_step(a, g, sa)
            adam_step(b, g, sb)
        np.testing.assert_array_equal(a[0], b[0])

    def test_non_finite(self):
        p = [np.ones(3)]
        with pytest.raises(NumericError, match="w"):
            adam_step(p, [np.array([0, np.nan, 0])], AdamState.for_params(p), names=["w"])
        np.testing.assert_array_equal(p[0], 1.0)

    def test_shape_mismatch(self):
        p = [np.ones(3)]
        with pytest.raises(ValueError):
            adam_step(p, [np.ones(4)], AdamState.for_params(p))

    def test_bad_lr(self):
        with pytest.raises(ConfigError):
            AdamState.for_params([np.ones(1)], lr=0)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_descends_quadratic(self, seed):
        p = [np.random.default_rng(seed).standard_normal(6)]
        p0 = p[0].copy()
        adam_step(p, [p[0].copy()], AdamState.for_params(p, lr=1e-6))
        step = p[0] - p0
        assert np.dot(step, p0) < 0
        assert 0.5 * np.sum(p[0] ** 2) < 0.5 * np.sum(p0**2)


class TestPlateau:
    def test_decreasing_never_changes(self):
        assert lr_trace([1.0 / k for k in range(1, 30)]) == [5e-4] * 29

    def test_flat_six(self):
        assert lr_trace([1.0] * 6) == [5e-4] * 5 + [2.5e-4]

    def test_two_plateaus(self):
        trace = lr_trace([1.0] * 11)
        assert trace[5] == 2.5e-4 and trace[9] == 2.5e-4 and trace[10] == 1.25e-4

    def test_improvement_resets(self):
        losses = [1.0, 1.0, 1.0, 1.0, 0.9, 1.0, 1.0, 1.0, 1.0, 1.0]
        trace = lr_trace(losses)
        assert trace[:9] == [5e-4] * 9 and trace[9] == 2.5e-4

    def test_equal_is_not_improvement(self):
        s = PlateauState(1.0, best=0.5)
        assert lr_schedule_update([0.5], s).bad_epochs == 1

    def test_bad_patience(self):
        with pytest.raises(ConfigError):
            PlateauState(1.0, patience=0)
        with pytest.raises(ConfigError):
            TrainConfig(lr_factor=1.0)


class TestBatches:
    def test_cover_each_sample_once(self):
        batches = training.epoch_batches(37, 16, seed=1, epoch=3)
        assert sorted(np.concatenate(batches).tolist()) == list(range(37))
        assert [len(b) for b in batches] == [16, 16, 5]

    def test_singleton_folded(self):
        assert [len(b) for b in training.epoch_batches(17, 16, 0, 1)] == [17]

    def test_seeded_per_epoch(self):
        a = training.epoch_batches(20, 4, 0, 1)
        b = training.epoch_batches(20, 4, 0, 1)
        c = training.epoch_batches(20, 4, 0, 2)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not all(np.array_equal(x, y) for x, y in zip(a, c))

    def test_too_small(self):
        with pytest.raises(DataError):
            training.epoch_batches(1, 16, 0, 1)


class TestFit:
    def test_loss_decreases(self):
        net = tiny()
        res = training.fit(net, Arrays(8), None, TrainConfig(max_epochs=20, batch_size=4, initial_lr=2e-3))
        first, last = np.mean(res.train_losses[:5]), np.mean(res.train_losses[-5:])
        assert last < first
        assert len(res.history) == 20

    def test_reproducible(self):
        cfg = TrainConfig(max_epochs=3, batch_size=4, seed=5)
        a = training.fit(tiny("audio_visual"), Arrays(6, video=True), Arrays(4, 1, True), cfg)
        b = training.fit(tiny("audio_visual"), Arrays(6, video=True), Arrays(4, 1, True), cfg)
        assert a.history == b.history

    def test_returns_best_checkpoint(self):
        net = tiny()
        val = Arrays(4, seed=9)
        res = training.fit(net, Arrays(8), val, TrainConfig(max_epochs=6, batch_size=4, initial_lr=5e-3))
        assert res.best_loss == min(res.val_losses)
        assert training.evaluate_loss(net, val) == pytest.approx(res.best_loss, rel=1e-6)
        assert res.best_loss <= res.val_losses[-1]

    def test_callback_stops(self):
        res = training.fit(tiny(), Arrays(4), None, TrainConfig(max_epochs=10, batch_size=4), callback=lambda r: r.epoch == 2)
        assert len(res.history) == 2

    def test_csv(self):
        res = training.fit(tiny(), Arrays(4), None, TrainConfig(max_epochs=2, batch_size=4))
        lines = res.to_csv().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,lr" and len(lines) == 3

    def test_non_finite_loss(self):
        data = Arrays(4)
        data.clean[0, 0, 0] = np.inf
        with pytest.raises(NumericError, match="epoch 1"):
            training.fit(tiny(), data, None, TrainConfig(max_epochs=1, batch_size=4))

    def test_empty(self):
        with pytest.raises(DataError):
            training.fit(tiny(), Arrays(4), Arrays(0), TrainConfig(max_epochs=1))

    def test_resume_is_bit_identical(self, tmp_path):
        kw = dict(batch_size=4, seed=2)
        full = tiny("audio_visual")
        res_full = training.fit(full, Arrays(6, video=True), Arrays(3, 1, True), TrainConfig(max_epochs=4, **kw))

        ckpt = str(tmp_path / "ck")
        part = tiny("audio_visual")
        training.fit(part, Arrays(6, video=True), Arrays(3, 1, True), TrainConfig(max_epochs=2, checkpoint_dir=ckpt, **kw))
        resumed = tiny("audio_visual", seed=0)
        res = training.fit(resumed, Arrays(6, video=True), Arrays(3, 1, True), TrainConfig(max_epochs=4, checkpoint_dir=ckpt, **kw))
        assert res.history == res_full.history
        for (k, a), (_, b) in zip(full.state_dict().items(), resumed.state_dict().items()):
            np.testing.assert_array_equal(a, b, err_msg=k)

    def test_checkpoint_option_mismatch(self, tmp_path):
        ckpt = str(tmp_path / "ck")
        training.fit(tiny(), Arrays(4), None, TrainConfig(max_epochs=1, batch_size=4, checkpoint_dir=ckpt))
        with pytest.raises(ConfigError):
            training.fit(tiny(), Arrays(4), None, TrainConfig(max_epochs=2, batch_size=2, checkpoint_dir=ckpt))


class TestConfig:
    def test_from_dict(self):
        assert TrainConfig.from_dict({"batch_size": 8}).batch_size == 8
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"bogus": 1})

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.initial_lr, cfg.plateau_patience, cfg.lr_factor, cfg.batch_size) == (5e-4, 5, 0.5, 16)
