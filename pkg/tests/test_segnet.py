import numpy as np
import pytest

from dpl import segnet
from dpl.io_formats import FormatError
from dpl.rng import Rng

from oracles import fd_gradient_errors, forward_naive, upsample_naive


@pytest.fixture(scope="module")
def params():
    return segnet.init_params(Rng(1))


def _image(seed, h=8, w=8, n=None):
    rng = Rng(seed)
    shape = (h, w, 3) if n is None else (n, h, w, 3)
    return rng.uniform_array(int(np.prod(shape))).reshape(shape).astype(np.float32)


def test_parameter_shapes(params):
    for name, shape in segnet.PARAM_SHAPES.items():
        assert params[name].shape == shape
        assert params[name].dtype == np.float32


def test_he_initialization_scale():
    p = segnet.init_params(Rng(2))
    w = p["conv2.w"]
    assert w.std() == pytest.approx(np.sqrt(2.0 / (9 * 16)), rel=0.05)
    assert not p["conv2.b"].any()


def test_zero_weights_give_half():
    p = segnet.init_params(Rng(0))
    for v in p.weights.values():
        v[...] = 0
    prob, e, _ = segnet.forward(p, _image(3), "eval")
    np.testing.assert_array_equal(prob, np.full((8, 8, 2), 0.5, dtype=np.float32))
    assert e.shape == (4, 4, 16)


def test_matches_naive_forward(params):
    img = _image(4, 10, 12)
    prob, e, _ = segnet.forward(params, img, "eval")
    w64 = {k: v.astype(np.float64) for k, v in params.weights.items()}
    ref_prob, ref_e = forward_naive(w64, img.astype(np.float64))
    np.testing.assert_allclose(prob, ref_prob, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(e, ref_e, rtol=1e-5, atol=1e-5)


def test_batch_matches_single(params):
    imgs = _image(5, n=3)
    batch, _, _ = segnet.forward(params, imgs, "eval")
    for i in range(3):
        single, _, _ = segnet.forward(params, imgs[i], "eval")
        np.testing.assert_allclose(batch[i], single, atol=1e-6)


def test_odd_size_rejected(params):
    with pytest.raises(ValueError):
        segnet.forward(params, np.zeros((7, 8, 3), dtype=np.float32))


def test_dropout_needs_rng(params):
    with pytest.raises(ValueError):
        segnet.forward(params, _image(6), "train")


def test_mc_with_zero_dropout_equals_eval(params):
    p0 = params.copy()
    p0.dropout = 0.0
    img = _image(7)
    ref, _, _ = segnet.forward(p0, img, "eval")
    for prob in segnet.mc_passes(p0, img, 4, Rng(1)):
        np.testing.assert_array_equal(prob, ref)


def test_mc_passes_vary(params):
    passes = segnet.mc_passes(params, _image(8), 3, Rng(2))
    assert not np.array_equal(passes[0], passes[1])
    with pytest.raises(ValueError):
        segnet.mc_passes(params, _image(8), 1, Rng(2))


def test_inverted_dropout_expectation():
    mask = segnet.sample_dropout_mask(Rng(3), (200_000,), 0.5)
    assert set(np.unique(mask)) == {0.0, 2.0}
    assert mask.mean() == pytest.approx(1.0, abs=0.01)


class TestUpsample:
    def test_two_by_two_to_three(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]
        out = segnet.bilinear_upsample(x, 3, 3)[..., 0]
        np.testing.assert_allclose(out, [[0, 0.5, 1], [1, 1.5, 2], [2, 2.5, 3]])

    def test_naive_oracle(self):
        x = Rng(4).uniform_array(5 * 6 * 2).reshape(5, 6, 2)
        np.testing.assert_allclose(segnet.bilinear_upsample(x, 10, 12), upsample_naive(x, 10, 12), atol=1e-12)

    def test_corners_are_preserved(self):
        x = Rng(5).uniform_array(4 * 4).reshape(4, 4, 1)
        out = segnet.bilinear_upsample(x, 8, 8)
        for (i, j), (k, l) in [((0, 0), (0, 0)), ((0, 3), (0, 7)), ((3, 0), (7, 0)), ((3, 3), (7, 7))]:
            assert out[k, l, 0] == pytest.approx(x[i, j, 0])

    def test_backward_is_adjoint(self):
        rng = Rng(6)
        x = rng.uniform_array(3 * 4 * 2).reshape(1, 3, 4, 2)
        g = rng.uniform_array(6 * 8 * 2).reshape(1, 6, 8, 2)
        lhs = (segnet.bilinear_upsample(x, 6, 8) * g).sum()
        rhs = (x * segnet.bilinear_upsample_backward(g, 3, 4)).sum()
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_single_pixel_axis_replicates(self):
        x = np.array([[[2.0]]])
        np.testing.assert_array_equal(segnet.bilinear_upsample(x, 2, 3)[..., 0], np.full((2, 3), 2.0))


class TestBackward:
    def test_finite_differences(self):
        errors = fd_gradient_errors(seed=3, per_layer=10)
        for name, (err, checked) in errors.items():
            assert checked == 10, name
            assert err < 1e-4, name

    def test_zero_upstream_gives_zero_gradients(self, params):
        prob, _, cache = segnet.forward(params, _image(9), "eval")
        grads = segnet.backward(cache, np.zeros_like(prob))
        assert all(not g.any() for g in grads.values())

    def test_dropped_channel_gets_no_conv2_gradient(self, params):
        img = _image(10)
        mask = np.full((1, 4, 4, 32), 2.0, dtype=np.float32)
        mask[..., 5] = 0.0
        prob, _, cache = segnet.forward(params, img, "train", dropout_mask=mask)
        grads = segnet.backward(cache, np.ones_like(prob))
        assert grads["conv2.b"][5] == 0.0
        assert not grads["conv2.w"][..., 5].any()

    def test_shape_mismatch(self, params):
        _, _, cache = segnet.forward(params, _image(11), "eval")
        with pytest.raises(ValueError):
            segnet.backward(cache, np.zeros((4, 4, 2)))


class TestAdam:
    def test_first_step_moves_by_lr(self, params):
        grads = {k: np.full_like(v, 0.3) for k, v in params.weights.items()}
        state = segnet.AdamState.zeros_like(params)
        new, state = segnet.adam_step(params, grads, state, 1e-3)
        assert state.t == 1
        delta = params["conv3.w"] - new["conv3.w"]
        np.testing.assert_allclose(delta, 1e-3, rtol=1e-3)
        assert (state.v["conv1.w"] >= 0).all()

    def test_non_finite_gradient(self, params):
        grads = {k: np.zeros_like(v) for k, v in params.weights.items()}
        grads["conv4.b"][0] = np.nan
        with pytest.raises(FloatingPointError):
            segnet.adam_step(params, grads, segnet.AdamState.zeros_like(params), 1e-3)

    def test_input_params_untouched(self, params):
        before = params.copy()
        grads = {k: np.ones_like(v) for k, v in params.weights.items()}
        segnet.adam_step(params, grads, segnet.AdamState.zeros_like(params), 1e-2)
        for k in segnet.PARAM_NAMES:
            np.testing.assert_array_equal(before[k], params[k])


class TestCheckpoint:
    def test_roundtrip_with_optimizer(self, tmp_path, params):
        grads = {k: np.ones_like(v) for k, v in params.weights.items()}
        p2, state = segnet.adam_step(params, grads, segnet.AdamState.zeros_like(params), 1e-3)
        segnet.save_checkpoint(tmp_path / "ck", p2, state)
        loaded, st = segnet.load_checkpoint(tmp_path / "ck")
        assert segnet.params_hash(loaded) == segnet.params_hash(p2)
        assert loaded.dropout == p2.dropout
        assert st.t == 1
        for k in segnet.PARAM_NAMES:
            assert loaded[k].tobytes() == p2[k].tobytes()
            assert st.m[k].tobytes() == state.m[k].tobytes()

    def test_without_optimizer(self, tmp_path, params):
        segnet.save_checkpoint(tmp_path / "ck", params)
        _, st = segnet.load_checkpoint(tmp_path / "ck")
        assert st is None

    def test_missing_tensor(self, tmp_path, params):
        segnet.save_checkpoint(tmp_path / "ck", params)
        text = (tmp_path / "ck" / "index.txt").read_text()
        (tmp_path / "ck" / "index.txt").write_text(text.replace("tensor conv4.b 2\n", ""))
        with pytest.raises(FormatError):
            segnet.load_checkpoint(tmp_path / "ck")

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            segnet.load_checkpoint(tmp_path / "nope")

    def test_hash_changes_with_weights(self, params):
        p2 = params.copy()
        p2["conv1.b"][0] += 1.0
        assert segnet.params_hash(p2) != segnet.params_hash(params)
