"""Deep-supervision loss, augmentation, Adam, initialisation and the training loop."""

import numpy as np
import pytest

from helpers import tiny_config
from oracles import bce_oracle
from u2net import training as TR
from u2net.errors import ConfigurationError, DataError, NumericalError
from u2net.network import SaliencyOutputs, build_network, forward
from u2net.nn import make_rng, xavier_bound, xavier_init
from u2net.optim import AdamState, adam_step
from u2net.synthetic import shape_dataset
from u2net.tensor import Tensor


class FixedRng:
    """Stand-in generator returning chosen coin and offset values."""

    def __init__(self, coin, offset=0):
        self.coin, self.offset = coin, offset

    def random(self):
        return self.coin

    def integers(self, lo, hi):
        return min(self.offset, hi - 1)


def fake_outputs(maps):
    probs = [Tensor(np.asarray(m, dtype=np.float64), requires_grad=True) for m in maps]
    return SaliencyOutputs(sides=probs[:6], fused=probs[6], side_logits=[], fused_logit=None)


@pytest.fixture
def tiny_data():
    return shape_dataset(4, 32, seed=1)


class TestLoss:
    def test_identical_maps_give_seven_times_one_term(self, rng):
        m = rng.uniform(0.05, 0.95, (2, 1, 4, 4))
        g = (rng.random((2, 1, 4, 4)) > 0.5).astype(float)
        total = TR.total_loss(fake_outputs([m] * 7), g)
        assert float(total.data) == pytest.approx(7 * bce_oracle(m, g), rel=1e-12)

    def test_single_weighted_side_term(self, rng):
        maps = [rng.uniform(0.05, 0.95, (1, 1, 3, 5)) for _ in range(7)]
        g = (rng.random((1, 1, 3, 5)) > 0.5).astype(float)
        w = TR.LossWeights(side=(2, 0, 0, 0, 0, 0), fuse=0)
        assert float(TR.total_loss(fake_outputs(maps), g, w).data) == pytest.approx(2 * bce_oracle(maps[0], g), rel=1e-12)

    @pytest.mark.parametrize("reduction", ["sum", "mean"])
    @pytest.mark.parametrize("seed", range(4))
    def test_linear_in_weights_against_term_oracle(self, reduction, seed):
        r = np.random.default_rng(seed)
        maps = [r.uniform(0.01, 0.99, (2, 1, 5, 4)) for _ in range(7)]
        g = (r.random((2, 1, 5, 4)) > 0.4).astype(float)
        ws = r.uniform(0, 3, 7)
        w = TR.LossWeights(side=tuple(ws[:6]), fuse=ws[6])
        expected = sum(wk * bce_oracle(m, g, reduction) for wk, m in zip(ws, maps))
        got = float(TR.total_loss(fake_outputs(maps), g, w, reduction).data)
        assert abs(got - expected) <= 1e-10 * max(1.0, abs(expected))

    def test_terms_follow_side_then_fuse_order(self, rng):
        maps = [np.full((1, 1, 2, 2), 0.1 * (k + 1)) for k in range(7)]
        g = np.ones((1, 1, 2, 2))
        terms = TR.loss_terms(fake_outputs(maps), g)
        np.testing.assert_allclose([float(t.data) for t in terms], [-np.log(0.1 * (k + 1)) for k in range(7)])

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            TR.total_loss(fake_outputs([np.full((1, 1, 2, 2), 0.5)] * 7), np.ones((1, 1, 3, 2)))

    @pytest.mark.parametrize("side,fuse", [((1,) * 5, 1), ((1,) * 6, -1), ((-1,) + (1,) * 5, 1)])
    def test_bad_weights(self, side, fuse):
        with pytest.raises(ConfigurationError):
            TR.LossWeights(side=side, fuse=fuse)


class TestAugment:
    def test_forced_no_flip_top_left_crop(self, rng):
        img = rng.random((3, 10, 10))
        mask = (rng.random((1, 10, 10)) > 0.5).astype(float)
        pair = TR.augment(img, mask, FixedRng(0.9, 0), resize=10, crop=6)
        np.testing.assert_array_equal(pair.image[0], img[:, :6, :6])
        np.testing.assert_array_equal(pair.mask[0], mask[:, :6, :6])

    def test_forced_vertical_flip(self, rng):
        img = rng.random((3, 8, 8))
        pair = TR.augment(img, np.zeros((1, 8, 8)), FixedRng(0.1, 0), resize=8, crop=8)
        np.testing.assert_array_equal(pair.image[0], img[:, ::-1])

    def test_flip_twice_is_identity(self, rng):
        img = rng.random((3, 6, 7))
        once = TR.augment(img, np.zeros((6, 7)), FixedRng(0.1), resize=7, crop=7).image[0]
        resized = TR.augment(img, np.zeros((6, 7)), FixedRng(0.9), resize=7, crop=7).image[0]
        twice = TR.augment(once, np.zeros((7, 7)), FixedRng(0.1), resize=7, crop=7).image[0]
        np.testing.assert_array_equal(twice, resized)

    @pytest.mark.parametrize("seed", range(10))
    def test_mask_stays_binary_after_resize(self, seed):
        r = np.random.default_rng(seed)
        mask = (r.random((1, 23, 17)) > 0.5).astype(np.float32)
        pair = TR.augment(r.random((3, 23, 17)), mask, r, resize=40, crop=32, hflip=True)
        assert set(np.unique(pair.mask)) <= {0.0, 1.0}
        assert pair.image.shape == (1, 3, 32, 32) and pair.mask.shape == (1, 1, 32, 32)

    @pytest.mark.parametrize("seed", range(10))
    def test_image_and_mask_never_desynchronise(self, seed):
        n = 12
        ids = np.arange(n * n, dtype=np.float64).reshape(1, n, n)
        img = np.concatenate([ids / (n * n), np.zeros((2, n, n))])
        mask = (ids % 3 == 0).astype(float)
        r = np.random.default_rng(seed)
        pair = TR.augment(img, mask, r, resize=n, crop=7, hflip=True)
        recovered = np.rint(pair.image[0, 0] * n * n)
        np.testing.assert_array_equal(pair.mask[0, 0], (recovered % 3 == 0).astype(float))

    def test_draw_order(self, rng):
        img = rng.random((3, 9, 9))
        a = TR.augment(img, np.zeros((9, 9)), np.random.default_rng(5), resize=9, crop=5, hflip=True)
        r = np.random.default_rng(5)
        v, h = r.random() < 0.5, r.random() < 0.5
        top, left = r.integers(0, 5), r.integers(0, 5)
        expected = img[:, ::-1] if v else img
        expected = expected[:, :, ::-1] if h else expected
        np.testing.assert_array_equal(a.image[0], expected[:, top:top + 5, left:left + 5])

    def test_validation(self, rng):
        with pytest.raises(ConfigurationError):
            TR.augment(rng.random((3, 4, 4)), np.zeros((4, 5)), rng, resize=4, crop=4)
        with pytest.raises(ConfigurationError):
            TR.augment(rng.random((3, 4, 4)), np.zeros((4, 4)), rng, resize=4, crop=5)
        with pytest.raises(DataError):
            TR.augment(np.zeros((3, 0, 4)), np.zeros((0, 4)), rng)


class TestAdam:
    def test_first_step_by_hand(self):
        p = Tensor(np.zeros(1), requires_grad=True)
        state = adam_step([p], AdamState(), [np.ones(1)])
        assert state.t == 1
        assert p.data[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)

    def test_zero_gradient_leaves_param_and_advances_t(self):
        p = Tensor(np.array([0.3, -2.0]), requires_grad=True)
        state = AdamState()
        for _ in range(3):
            adam_step([p], state, [np.zeros(2)])
        np.testing.assert_array_equal(p.data, [0.3, -2.0])
        assert state.t == 3

    def test_constant_gradient_update_tends_to_lr(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        state = AdamState()
        for _ in range(999):
            adam_step([p], state, [np.array([0.2, -5.0])])
        before = p.data.copy()
        adam_step([p], state, [np.array([0.2, -5.0])])
        np.testing.assert_allclose(p.data - before, [-1e-3, 1e-3], rtol=0.01)

    def test_matches_scalar_recurrence(self, rng):
        grads = rng.standard_normal(20)
        p = Tensor(np.array([0.5]), requires_grad=True)
        state = AdamState(lr=0.01, weight_decay=0.1)
        x, m, v = 0.5, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            adam_step([p], state, [np.array([g])])
            g = g + 0.1 * x
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p.data[0] == pytest.approx(x, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            adam_step([Tensor(np.zeros(2), requires_grad=True)], AdamState(), [np.zeros(3)])

    def test_state_bound_to_parameter_list(self):
        state = adam_step([Tensor(np.zeros(2), requires_grad=True)], AdamState(), [np.zeros(2)])
        with pytest.raises(ConfigurationError):
            adam_step([Tensor(np.zeros(2)), Tensor(np.zeros(2))], state, [np.zeros(2)] * 2)


class TestInit:
    def test_bound_for_64_channel_conv(self):
        a = xavier_bound((64, 64, 3, 3))
        assert a == pytest.approx(np.sqrt(6 / 1152))
        assert a == pytest.approx(0.07217, abs=1e-5)
        w = xavier_init((64, 64, 3, 3), seed=0).data
        assert np.abs(w).max() <= a

    def test_same_seed_same_tensor(self):
        assert np.array_equal(xavier_init((4, 3, 3, 3), seed=1).data, xavier_init((4, 3, 3, 3), seed=1).data)

    def test_variance_is_a_squared_over_three(self):
        w = xavier_init((100, 1000), seed=2, dtype=np.float64).data
        a = xavier_bound((100, 1000))
        assert w.var(ddof=1) == pytest.approx(a * a / 3, rel=0.05)

    def test_generator_seeds_are_reusable(self):
        assert make_rng(3).random() == make_rng(3).random()


class TestTrain:
    def config(self, **kw):
        base = dict(iterations=3, batch_size=2, seed=0, resize=36, crop=32)
        base.update(kw)
        return TR.TrainConfig(**base)

    def test_zero_learning_rate_keeps_parameters(self, tiny_data):
        net = build_network(tiny_config(), seed=0)
        params = {k: p.data.copy() for k, p in net.named_parameters()}
        result = TR.train(net, tiny_data, self.config(iterations=1, lr=0.0))
        assert len(result.history) == 1 and np.isfinite(result.history[0][1])
        for k, p in net.named_parameters():
            np.testing.assert_array_equal(p.data, params[k])

    def test_same_seed_same_trace_and_parameters(self, tiny_data):
        runs = []
        for _ in range(2):
            net = build_network(tiny_config(), seed=4)
            runs.append((TR.train(net, tiny_data, self.config(hflip=True)).losses(), net.state_dict()))
        (l1, s1), (l2, s2) = runs
        np.testing.assert_array_equal(l1, l2)
        assert all(np.array_equal(s1[k], s2[k]) for k in s1)

    def test_parameters_change_and_grads_are_cleared(self, tiny_data):
        net = build_network(tiny_config(), seed=0)
        before = net.stages["En_1"].conv_in.weight.data.copy()
        TR.train(net, tiny_data, self.config(iterations=2))
        assert not np.array_equal(before, net.stages["En_1"].conv_in.weight.data)
        assert all(p.grad is None or not p.grad.any() for p in net.parameters())

    def test_nan_names_offending_term(self, tiny_data):
        net = build_network(tiny_config(), seed=0)
        net.sides[2].weight.data[...] = np.nan
        with pytest.raises(NumericalError, match="side3"):
            TR.train(net, tiny_data, self.config(iterations=1))

    def test_callback_can_stop_early(self, tiny_data):
        net = build_network(tiny_config(), seed=0)
        seen = []
        result = TR.train(net, tiny_data, self.config(iterations=10),
                          callback=lambda it, loss: seen.append(it) or it == 2)
        assert seen == [1, 2] and len(result.history) == 2

    def test_checkpoint_cadence(self, tiny_data, tmp_path):
        net = build_network(tiny_config(), seed=0)
        cfg = self.config(iterations=4, checkpoint_every=2, checkpoint_path=str(tmp_path / "ck_{iteration}.u2ck"))
        TR.train(net, tiny_data, cfg)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["ck_2.u2ck", "ck_4.u2ck"]

    def test_without_augmentation_resizes_to_crop(self, tiny_data):
        net = build_network(tiny_config(), seed=0)
        result = TR.train(net, shape_dataset(2, 40, seed=0), self.config(iterations=1, augment=False))
        assert len(result.history) == 1

    def test_sum_mode_scales_loss(self, tiny_data):
        losses = {}
        for mode in ("sum", "mean"):
            net = build_network(tiny_config(), seed=0)
            losses[mode] = TR.train(net, tiny_data, self.config(iterations=1, loss_mode=mode, lr=0.0)).losses()[0]
        assert losses["sum"] == pytest.approx(losses["mean"] * 2 * 32 * 32, rel=1e-5)

    def test_empty_dataset(self):
        with pytest.raises(DataError):
            TR.train(build_network(tiny_config(), seed=0), [], self.config())

    @pytest.mark.parametrize("kw", [dict(batch_size=0), dict(crop=40), dict(loss_mode="max"), dict(iterations=-1)])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigurationError):
            self.config(**kw)

    def test_consecutive_backwards_with_zeroing_equal_one(self, rng):
        net = build_network(tiny_config(), seed=0, dtype=np.float64)
        x = rng.random((2, 3, 32, 32))
        g = (rng.random((2, 1, 32, 32)) > 0.5).astype(float)
        grads = []
        for _ in range(2):
            net.zero_grad()
            TR.total_loss(forward(net, x), g).backward()
            grads.append([p.grad.copy() for p in net.parameters()])
        for a, b in zip(*grads):
            np.testing.assert_array_equal(a, b)

    def test_loss_csv(self, tmp_path):
        TR.write_loss_csv([(1, 0.5), (2, 0.25)], tmp_path / "l.csv")
        assert (tmp_path / "l.csv").read_text() == "iteration,loss\n1,0.5\n2,0.25\n"


class TestSamplePair:
    def test_misaligned(self):
        with pytest.raises(ConfigurationError):
            TR.SamplePair(np.zeros((1, 3, 4, 4)), np.zeros((1, 1, 4, 5)))

    def test_rank(self):
        with pytest.raises(ConfigurationError):
            TR.SamplePair(np.zeros((3, 4, 4)), np.zeros((1, 4, 4)))
