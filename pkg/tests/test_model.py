import numpy as np
import pytest

from aacl import model
from aacl.data import SceneSpec, generate_scene
from aacl.loss import loss_gradients, supervised_loss
from aacl.raster import softmax
from oracles import bilinear_matrix, central_difference_params, naive_conv3x3, relative_error


def as64(params):
    return {k: v.astype(np.float64) for k, v in params.items()}


def test_zero_params_give_uniform_prediction():
    params = {k: np.zeros_like(v) for k, v in model.init_params(0, 4).items()}
    logits = model.forward(params, np.random.default_rng(0).random((8, 8, 3)))
    np.testing.assert_array_equal(logits, 0.0)
    np.testing.assert_array_equal(softmax(logits), 0.25)


def test_output_shapes():
    params = model.init_params(0, 5)
    assert model.forward(params, np.zeros((64, 64, 3))).shape == (64, 64, 5)
    assert model.forward(params, np.zeros((3, 16, 24, 3))).shape == (3, 16, 24, 5)


def test_forward_is_bitwise_deterministic():
    x = np.random.default_rng(1).random((2, 32, 32, 3))
    a = model.forward(model.init_params(7, 5), x)
    b = model.forward(model.init_params(7, 5), x)
    assert a.tobytes() == b.tobytes()


def test_odd_dimensions_rejected():
    with pytest.raises(ValueError):
        model.forward(model.init_params(0, 3), np.zeros((7, 8, 3)))


def test_default_parameter_count():
    n = sum(v.size for v in model.init_params(0, 5).values())
    assert 14_000 <= n <= 16_000


class TestInit:
    def test_seed_repeatable_and_distinct(self):
        a, b, c = model.init_params(3, 5), model.init_params(3, 5), model.init_params(4, 5)
        for name in model.PARAM_ORDER:
            np.testing.assert_array_equal(a[name], b[name])
        assert any(not np.array_equal(a[n], c[n]) for n in model.PARAM_ORDER)

    def test_he_uniform_bounds(self):
        params = model.init_params(0, 5)
        for name, shape in model.param_shapes(5).items():
            assert params[name].shape == shape
            if name.endswith("_w"):
                bound = np.sqrt(6.0 / np.prod(shape[:-1]))
                assert np.abs(params[name]).max() <= bound

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            model.init_params(0, 1)


class TestLayers:
    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv_matches_loops(self, stride):
        rng = np.random.default_rng(stride)
        x = rng.normal(size=(2, 6, 8, 3))
        w = rng.normal(size=(3, 3, 3, 4))
        b = rng.normal(size=4)
        out, _ = model.conv3x3(x, w, b, stride)
        np.testing.assert_allclose(out, naive_conv3x3(x, w, b, stride), atol=1e-12)

    def test_upsample_matches_interpolation_matrix(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 5, 4))
        expected = np.einsum("ih,jw,nhwc->nijc", bilinear_matrix(3), bilinear_matrix(5), x)
        np.testing.assert_allclose(model.upsample2(x), expected, atol=1e-12)

    def test_upsample_backward_is_transpose(self):
        g = np.random.default_rng(1).normal(size=(2, 6, 10, 4))
        expected = np.einsum("ih,jw,nijc->nhwc", bilinear_matrix(3), bilinear_matrix(5), g)
        np.testing.assert_allclose(model.upsample2_backward(g), expected, atol=1e-12)


class TestBackward:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.params = as64(model.init_params(1, 3, widths=(4, 5, 6)))
        for v in self.params.values():
            v += rng.normal(scale=0.05, size=v.shape)
        self.x = rng.random((2, 8, 8, 3))
        self.g = rng.normal(size=(2, 8, 8, 3))

    def test_zero_upstream(self):
        grads = model.backward(self.params, self.x, np.zeros_like(self.g))
        for g in grads.values():
            np.testing.assert_array_equal(g, 0.0)

    def test_linear_in_upstream(self):
        g1 = model.backward(self.params, self.x, self.g)
        g2 = model.backward(self.params, self.x, 2 * self.g)
        for name in model.PARAM_ORDER:
            np.testing.assert_array_equal(g2[name], 2 * g1[name])

    def test_finite_differences_tiny_net(self):
        # 8x8 input, two classes, end-to-end supervised loss
        rng = np.random.default_rng(5)
        params = as64(model.init_params(2, 2, widths=(4, 6, 5)))
        for v in params.values():
            v += rng.normal(scale=0.05, size=v.shape)
        x = rng.random((1, 8, 8, 3))
        labels = rng.integers(0, 2, size=(1, 8, 8))

        def f(p):
            return supervised_loss(model.forward(p, x), labels)

        logits, cache = model.forward(params, x, return_cache=True)
        analytic = model.backward(params, x, loss_gradients(logits, labels), cache)
        numeric = central_difference_params(f, params, 1e-6)
        for name in model.PARAM_ORDER:
            assert relative_error(analytic[name], numeric[name], 1e-5).max() < 1e-4, name

    def test_finite_differences_full_width(self):
        # every one of the ~15k default parameters on a single 8x8 image
        rng = np.random.default_rng(6)
        params = as64(model.init_params(3, 5))
        for name in ("conv1_b", "conv2_b", "conv3_b", "head_b"):
            params[name] += rng.normal(scale=0.05, size=params[name].shape)
        x = rng.random((1, 8, 8, 3))
        labels = rng.integers(0, 5, size=(1, 8, 8))

        def f(p):
            return supervised_loss(model.forward(p, x), labels)

        logits, cache = model.forward(params, x, return_cache=True)
        analytic = model.backward(params, x, loss_gradients(logits, labels), cache)
        numeric = central_difference_params(f, params, 1e-6)
        worst = max(relative_error(analytic[n], numeric[n], 1e-5).max() for n in model.PARAM_ORDER)
        assert worst < 1e-4


class TestSGD:
    def test_zero_everything_is_a_no_op(self):
        p = {"w": np.array([1.5, -2.0])}
        state = model.OptimizerState.for_params(p, weight_decay=0.0)
        model.sgd_step(p, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(p["w"], [1.5, -2.0])

    def test_single_scalar_step(self):
        p = {"w": np.array([1.0])}
        state = model.OptimizerState.for_params(p, lr=0.001, weight_decay=0.0)
        model.sgd_step(p, {"w": np.array([1.0])}, state)
        assert p["w"][0] == pytest.approx(0.999, abs=1e-15)
        assert state.velocity["w"][0] == 1.0

    def test_weight_decay_only(self):
        p = {"w": np.array([1.0])}
        state = model.OptimizerState.for_params(p, lr=0.001, weight_decay=1e-4)
        model.sgd_step(p, {"w": np.array([0.0])}, state)
        assert state.velocity["w"][0] == pytest.approx(1e-4, abs=1e-18)
        assert p["w"][0] == pytest.approx(1 - 1e-7, abs=1e-15)

    def test_momentum_accumulates(self):
        p = {"w": np.array([0.0])}
        state = model.OptimizerState.for_params(p, lr=0.1, momentum=0.9, weight_decay=0.0)
        model.sgd_step(p, {"w": np.array([1.0])}, state)
        model.sgd_step(p, {"w": np.array([1.0])}, state)
        assert state.velocity["w"][0] == pytest.approx(1.9)
        assert p["w"][0] == pytest.approx(-0.1 - 0.19)

    def test_non_finite_gradient_aborts_without_update(self):
        p = {"a": np.array([1.0]), "w": np.array([1.0])}
        state = model.OptimizerState.for_params(p)
        with pytest.raises(FloatingPointError, match="w"):
            model.sgd_step(p, {"a": np.array([1.0]), "w": np.array([np.nan])}, state)
        assert p["a"][0] == 1.0

    def test_defaults_follow_training_protocol(self):
        state = model.OptimizerState()
        assert (state.lr, state.momentum, state.weight_decay) == (1e-3, 0.9, 1e-4)


def test_overfits_single_image():
    image, mask = generate_scene(SceneSpec(size=32, noise=0.0, illumination=0.0), 3)
    params = model.init_params(0, 5)
    state = model.OptimizerState.for_params(params, lr=0.02, momentum=0.9, weight_decay=1e-4)
    x = image[None].astype(np.float32)
    y = mask[None]
    for _ in range(300):
        logits, cache = model.forward(params, x, return_cache=True)
        grads = model.backward(params, x, loss_gradients(logits, y), cache)
        model.sgd_step(params, grads, state)
    assert supervised_loss(model.forward(params, x), y) < 0.1


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        params = model.init_params(9, 5)
        state = model.OptimizerState.for_params(params)
        for v in state.velocity.values():
            v += np.random.default_rng(0).normal(size=v.shape).astype(np.float32)
        path = tmp_path / "a.ckpt"
        model.save_checkpoint(path, params, state, epoch=12)
        loaded, velocity, epoch = model.load_checkpoint(path, 5)
        assert epoch == 12
        for name in model.PARAM_ORDER:
            assert loaded[name].tobytes() == params[name].tobytes()
            assert velocity[name].tobytes() == state.velocity[name].tobytes()
        model.save_checkpoint(tmp_path / "b.ckpt", loaded, model.OptimizerState(velocity=velocity), 12)
        assert (tmp_path / "b.ckpt").read_bytes() == path.read_bytes()

    def test_header_layout(self, tmp_path):
        path = tmp_path / "c.ckpt"
        model.save_checkpoint(path, model.init_params(0, 3))
        raw = path.read_bytes()
        assert raw[:4] == b"AACL"
        assert int.from_bytes(raw[4:8], "little") == model.CKPT_VERSION
        assert int.from_bytes(raw[8:12], "little") == 3

    def test_rejects_mismatches(self, tmp_path):
        path = tmp_path / "c.ckpt"
        model.save_checkpoint(path, model.init_params(0, 3))
        raw = path.read_bytes()
        with pytest.raises(ValueError, match="classes"):
            model.load_checkpoint(path, 5)
        bad_version = tmp_path / "v.ckpt"
        bad_version.write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
        with pytest.raises(ValueError, match="version"):
            model.load_checkpoint(bad_version)
        bad_magic = tmp_path / "m.ckpt"
        bad_magic.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(ValueError, match="magic"):
            model.load_checkpoint(bad_magic)
        short = tmp_path / "s.ckpt"
        short.write_bytes(raw[:-4])
        with pytest.raises(ValueError, match="bytes"):
            model.load_checkpoint(short)
