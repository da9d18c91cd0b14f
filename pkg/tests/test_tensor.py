import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lacuna.errors import OddSpatialDim, ShapeMismatch
from lacuna.evaluation import connected_components
from lacuna.tensor import autodiff as ad
from lacuna.tensor.augment import AugmentParams, apply_augment, augment, sample_augment
from lacuna.tensor.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from lacuna.tensor.gradcheck import check_function, run_gradcheck
from lacuna.tensor.optim import AdamState, adam_step
from lacuna.tensor.unet import UNetConfig, as_tensors, init_unet, param_shapes, unet_forward


def naive_conv3(x, w, b):
    """Direct loop cross-correlation with zero padding 1."""
    c_out = w.shape[0]
    _, nx, ny, nz = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((c_out, nx, ny, nz))
    for o, i, j, k in itertools.product(range(c_out), range(nx), range(ny), range(nz)):
        out[o, i, j, k] = np.sum(xp[:, i:i + 3, j:j + 3, k:k + 3] * w[o]) + b[o]
    return out


def test_conv3_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 4, 5, 3))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    out = ad.conv3(ad.constant(x), ad.constant(w), ad.constant(b)).values
    np.testing.assert_allclose(out, naive_conv3(x, w, b), atol=1e-10)


def test_conv3_identity_and_ones_kernel():
    x = np.random.default_rng(1).standard_normal((1, 5, 5, 5))
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1
    out = ad.conv3(ad.constant(x), ad.constant(w), ad.constant(np.zeros(1))).values
    np.testing.assert_allclose(out, x)
    c = np.full((1, 5, 5, 5), 2.0)
    out = ad.conv3(ad.constant(c), ad.constant(np.ones((1, 1, 3, 3, 3))), ad.constant(np.zeros(1))).values
    assert out[0, 2, 2, 2] == pytest.approx(54.0)


def test_conv3_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ad.conv3(ad.constant(np.zeros((2, 4, 4, 4))), ad.constant(np.zeros((1, 3, 3, 3, 3))),
                 ad.constant(np.zeros(1)))


def test_activations():
    np.testing.assert_array_equal(ad.relu(ad.constant(np.array([-2.0, 0.0, 3.0]))).values, [0, 0, 3])
    np.testing.assert_allclose(ad.softmax3(ad.constant(np.zeros(3))).values, [1 / 3] * 3)
    big = ad.softmax3(ad.constant(np.array([1000.0, 0.0, -1000.0]))).values
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0)
    s = ad.sigmoid(ad.constant(np.array([-800.0, 0.0, 800.0]))).values
    np.testing.assert_allclose(s, [0.0, 0.5, 1.0])


def test_pooling_examples():
    x = np.arange(1, 9, dtype=float).reshape(1, 2, 2, 2)
    assert ad.maxpool2(ad.constant(x)).values.ravel().tolist() == [8.0]
    with pytest.raises(OddSpatialDim):
        ad.maxpool2(ad.constant(np.zeros((1, 3, 2, 2))))
    with pytest.raises(ShapeMismatch):
        ad.concat(ad.constant(np.zeros((1, 2, 2, 2))), ad.constant(np.zeros((1, 4, 2, 2))))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3), st.integers(1, 3))
def test_upsample_then_maxpool_is_identity(seed, c, n):
    x = np.random.default_rng(seed).standard_normal((c, n, n + 1, 2))
    up = ad.upsample2(ad.constant(x))
    assert up.shape == (c, 2 * n, 2 * n + 2, 4)
    np.testing.assert_array_equal(ad.maxpool2(up).values, x)


def test_maxpool_routes_gradient_to_argmax():
    x = np.zeros((1, 2, 2, 2))
    x[0, 1, 0, 1] = 5.0
    t = ad.parameter(x)
    ad.weighted_sum(ad.maxpool2(t), np.array([[[[3.0]]]])).backward()
    expected = np.zeros_like(x)
    expected[0, 1, 0, 1] = 3.0
    np.testing.assert_array_equal(t.grad, expected)


def test_conv3_gradient_5cube():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 5, 5, 5))
    w = rng.standard_normal((2, 2, 3, 3, 3)) * 0.3
    b = rng.standard_normal(2)
    r = rng.standard_normal((2, 5, 5, 5))
    err = check_function(lambda x, w, b: ad.weighted_sum(ad.conv3(x, w, b), r), [x, w, b], eps=1e-3,
                         n_entries=30, rng=rng)
    assert err < 1e-4


def test_gradcheck_suite_quick():
    results = run_gradcheck(trials=2, seed=5)
    names = {r.name for r in results}
    assert {"conv3", "relu", "sigmoid", "softmax3", "maxpool2", "upsample2", "concat",
            "fnw_bce", "voxel_ratio_bce", "burden_ce", "joint_loss", "unet_composite"} <= names
    for r in results:
        assert r.passed, r


def test_unet_shapes_and_zero_params():
    cfg = UNetConfig(depth=2, base_channels=2, in_channels=3)
    params = init_unet(cfg, np.random.default_rng(0))
    assert list(params) == list(param_shapes(cfg))
    out = unet_forward(cfg, as_tensors(params), ad.constant(np.random.default_rng(1).standard_normal((3, 8, 8, 8))))
    assert out.dense.shape == (1, 8, 8, 8) and out.class_logits is None
    assert np.all((out.dense.values > 0) & (out.dense.values < 1))
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    out = unet_forward(cfg, as_tensors(zeros), ad.constant(np.ones((3, 8, 8, 8))))
    np.testing.assert_array_equal(out.dense.values, 0.5)
    with pytest.raises(ShapeMismatch):
        unet_forward(cfg, as_tensors(params), ad.constant(np.zeros((3, 7, 8, 8))))


def test_unet_classifier_head():
    cfg = UNetConfig(depth=3, base_channels=2, in_channels=4, head="dense_plus_classifier")
    params = init_unet(cfg, np.random.default_rng(0))
    out = unet_forward(cfg, as_tensors(params), ad.constant(np.zeros((4, 8, 8, 8))))
    assert out.class_logits.shape == (3,)


@pytest.mark.slow
def test_unet_depth5():
    cfg = UNetConfig(depth=5, base_channels=2, in_channels=3)
    params = init_unet(cfg, np.random.default_rng(0))
    out = unet_forward(cfg, as_tensors(params), ad.constant(np.random.default_rng(1).standard_normal((3, 32, 32, 32))))
    assert out.dense.shape == (1, 32, 32, 32)


def test_residual_head_starts_at_input_map():
    cfg = UNetConfig(depth=2, base_channels=2, in_channels=2, residual_logit=True, residual_eps=1e-3)
    params = init_unet(cfg, np.random.default_rng(4))
    assert not params["head.w"].any()
    x = np.random.default_rng(5).random((2, 8, 8, 8)).astype(np.float32)
    x[0, 0, 0, 0], x[0, 0, 0, 1] = 0.0, 1.0
    dense = unet_forward(cfg, as_tensors(params), ad.constant(x)).dense.values[0]
    np.testing.assert_allclose(dense, np.clip(x[0], 1e-3, 1 - 1e-3), rtol=1e-5, atol=1e-6)


def test_constant_input_gives_constant_interior():
    cfg = UNetConfig(depth=2, base_channels=2, in_channels=1)
    params = init_unet(cfg, np.random.default_rng(3))
    out = unet_forward(cfg, as_tensors(params), ad.constant(np.ones((1, 32, 32, 32)))).dense.values[0]
    # zero padding reaches 8 voxels in at depth 2
    interior = out[10:22, 10:22, 10:22]
    assert np.ptp(interior) < 1e-6


def test_adam_first_step_and_zero_grad():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.5, -4.0, 1e-3])}
    adam_step(p, g, AdamState(), lr=0.01)
    np.testing.assert_allclose(p["w"], np.array([1.0, -2.0, 3.0]) - 0.01 * np.sign(g["w"]), atol=1e-6)
    before = p["w"].copy()
    adam_step(p, {"w": np.zeros(3)}, AdamState(), lr=0.01)
    np.testing.assert_array_equal(p["w"], before)
    with pytest.raises(ShapeMismatch):
        adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.01)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(0)
        p = {"a": rng.standard_normal(5).astype(np.float32)}
        st_ = AdamState()
        for _ in range(10):
            adam_step(p, {"a": rng.standard_normal(5).astype(np.float32)}, st_, lr=0.1)
        return p["a"]
    assert run().tobytes() == run().tobytes()


def test_augment_identity_and_flip_involution():
    rng = np.random.default_rng(0)
    ch = rng.standard_normal((3, 4, 6, 8)).astype(np.float32)
    lab = (rng.random((4, 6, 8)) < 0.3).astype(np.float32)
    c2, l2 = apply_augment(AugmentParams.identity(3), ch, lab)
    np.testing.assert_array_equal(c2, ch)
    np.testing.assert_array_equal(l2, lab)
    flip = AugmentParams((True, False, True), (0, 1), 0, (1.0,) * 3, (0.0,) * 3)
    c3, l3 = apply_augment(flip, *apply_augment(flip, ch, lab))
    np.testing.assert_array_equal(c3, ch)
    np.testing.assert_array_equal(l3, lab)


def test_augment_contrast_only_on_image_channels():
    ch = np.ones((2, 4, 4, 4), dtype=np.float32)
    lab = np.zeros((4, 4, 4), dtype=np.float32)
    p = AugmentParams((False,) * 3, (0, 1), 0, (1.1,), (0.05,))
    c2, _ = apply_augment(p, ch, lab, image_channels=[1])
    np.testing.assert_array_equal(c2[0], 1.0)
    np.testing.assert_allclose(c2[1], 1.15, rtol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_augment_preserves_label_components(seed):
    rng = np.random.default_rng(seed)
    lab = np.zeros((8, 8, 8), dtype=np.float32)
    for _ in range(3):
        i, j, k = rng.integers(0, 7, size=3)
        lab[i:i + 2, j:j + 2, k] = 1
    ch = rng.standard_normal((3, 8, 8, 8)).astype(np.float32)
    params = sample_augment(rng, 3, lab.shape)
    assert all(0.9 <= g <= 1.1 for g in params.gains)
    assert all(-0.1 <= o <= 0.1 for o in params.offsets)
    _, l2 = apply_augment(params, ch, lab)
    assert len(connected_components(l2)) == len(connected_components(lab))
    assert l2.sum() == lab.sum()


def test_augment_keeps_shape_on_noncubic():
    rng = np.random.default_rng(4)
    for _ in range(20):
        c, l = augment(np.zeros((1, 4, 6, 8), np.float32), np.zeros((4, 6, 8), np.float32), rng)
        assert c.shape == (1, 4, 6, 8) and l.shape == (4, 6, 8)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"enc0.conv1.w": rng.standard_normal((2, 1, 3, 3, 3)).astype(np.float32),
              "head.b": rng.standard_normal(1).astype(np.float32)}
    save_checkpoint(Checkpoint(params, 17, {"note": "x"}), tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.step == 17 and back.meta["note"] == "x"
    for k, v in params.items():
        assert back.params[k].tobytes() == v.tobytes()
    raw = (tmp_path / "ck" / "head.b.f32").read_bytes()
    assert np.frombuffer(raw, "<f4")[0] == params["head.b"][0]


def test_gradients_finite_after_backward():
    cfg = UNetConfig(depth=2, base_channels=2, in_channels=2, head="dense_plus_classifier")
    t = as_tensors(init_unet(cfg, np.random.default_rng(0)))
    out = unet_forward(cfg, t, ad.constant(np.random.default_rng(1).standard_normal((2, 4, 4, 4))))
    ad.weighted_sum(out.class_logits, np.ones(3)).backward()
    for v in t.values():
        assert v.grad.shape == v.shape and np.all(np.isfinite(v.grad))
