import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lacuna.errors import ConfigError, ShapeMismatch
from lacuna.losses import (
    LossConfig,
    burden_ce,
    category_from_mask,
    fnw_bce,
    joint_loss,
    voxel_ratio,
    voxel_ratio_bce,
)
from lacuna.phantom import BurdenCategory
from lacuna.tensor import autodiff as ad
from lacuna.tensor.gradcheck import check_function


def t(x):
    return ad.constant(np.asarray(x, dtype=np.float64))


def test_fnw_examples():
    p, y = np.full((1, 1, 1, 1), 0.5), np.ones((1, 1, 1, 1))
    assert fnw_bce(t(p), y, LossConfig(w_fn=1)).item() == pytest.approx(math.log(2))
    assert fnw_bce(t(p), y, LossConfig(w_fn=2)).item() == pytest.approx(2 * math.log(2))
    for w in (1, 5, 37):
        assert fnw_bce(t(p), 0 * y, LossConfig(w_fn=w)).item() == pytest.approx(math.log(2))


def test_fnw_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        fnw_bce(t(np.full((1, 2, 2, 2), 0.5)), np.zeros((1, 2, 2, 1)), LossConfig())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_fnw_w1_is_textbook_bce(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.01, 0.99, size=(1, 3, 3, 3))
    y = (rng.random((1, 3, 3, 3)) < 0.4).astype(float)
    ref = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert abs(fnw_bce(t(p), y, LossConfig(w_fn=1)).item() - ref) < 1e-7


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(1, 30), st.floats(0, 10))
def test_fnw_monotone_in_weight(seed, w, dw):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.01, 0.99, size=(1, 2, 2, 2))
    y = np.zeros((1, 2, 2, 2))
    y.flat[0] = 1
    a = fnw_bce(t(p), y, LossConfig(w_fn=w)).item()
    b = fnw_bce(t(p), y, LossConfig(w_fn=w + dw)).item()
    assert b >= a - 1e-12


def test_fnw_gradient_formula():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.05, 0.95, size=(1, 2, 3, 2))
    y = (rng.random(p.shape) < 0.5).astype(float)
    cfg = LossConfig(w_fn=7)
    x = ad.parameter(p.copy())
    fnw_bce(x, y, cfg).backward()
    expected = (-cfg.w_fn * y / p + (1 - y) / (1 - p)) / p.size
    np.testing.assert_allclose(x.grad, expected, rtol=1e-10)
    err = check_function(lambda q: fnw_bce(q, y, cfg), [p], eps=1e-6)
    assert err < 1e-5


def test_clamped_gradients_finite():
    p = np.array([0.0, 1.0, 0.0, 1.0]).reshape(1, 2, 2, 1)
    y = np.array([1.0, 0.0, 0.0, 1.0]).reshape(1, 2, 2, 1)
    for fn in (lambda q: fnw_bce(q, y, LossConfig()), lambda q: voxel_ratio_bce(q, y, LossConfig())):
        x = ad.parameter(p.copy())
        out = fn(x)
        out.backward()
        assert np.isfinite(out.item()) and np.all(np.isfinite(x.grad))


def test_voxel_ratio_examples():
    y = np.zeros((1, 2, 2, 2))
    y.flat[0] = 1
    assert voxel_ratio(y) == 7
    assert voxel_ratio(np.zeros((1, 2, 2, 2))) == 1
    bal = np.zeros((1, 2, 1, 1))
    bal.flat[0] = 1
    p = np.random.default_rng(2).uniform(0.1, 0.9, size=(1, 2, 1, 1))
    assert voxel_ratio_bce(t(p), bal, LossConfig()).item() == pytest.approx(fnw_bce(t(p), bal, LossConfig(w_fn=1)).item())
    p8 = np.random.default_rng(3).uniform(0.1, 0.9, size=(1, 2, 2, 2))
    assert voxel_ratio_bce(t(p8), y, LossConfig()).item() == pytest.approx(fnw_bce(t(p8), y, LossConfig(w_fn=7)).item())
    zeros = np.zeros((1, 2, 2, 2))
    assert voxel_ratio_bce(t(p8), zeros, LossConfig()).item() == pytest.approx(fnw_bce(t(p8), zeros, LossConfig(w_fn=1)).item())


def test_burden_ce_examples_and_gradient():
    for c in BurdenCategory:
        assert burden_ce(t([0.0, 0.0, 0.0]), c).item() == pytest.approx(math.log(3))
    assert burden_ce(t([10.0, -10.0, -10.0]), BurdenCategory.C0).item() < 1e-4
    logits = np.random.default_rng(4).standard_normal(3)
    assert check_function(lambda z: burden_ce(z, BurdenCategory.C2), [logits], eps=1e-6) < 1e-5


def _blob_mask(n_blobs, shape=(1, 8, 8, 8)):
    m = np.zeros(shape)
    for i in range(n_blobs):
        m[0, 1 + 3 * (i % 2), 1 + 3 * ((i // 2) % 2), 1 + 3 * (i // 4)] = 1
    return m


@pytest.mark.parametrize("n,cat", [(0, BurdenCategory.C0), (2, BurdenCategory.C1), (5, BurdenCategory.C2)])
def test_category_from_mask(n, cat):
    assert category_from_mask(_blob_mask(n)) is cat


def test_joint_loss_examples():
    rng = np.random.default_rng(5)
    p = rng.uniform(0.1, 0.9, size=(1, 8, 8, 8))
    y = _blob_mask(2)
    logits = rng.standard_normal(3)
    seg = fnw_bce(t(p), y, LossConfig()).item()
    assert joint_loss(t(p), y, t(logits), LossConfig(lambda_burden=0)).item() == seg
    perfect = np.zeros((1, 8, 8, 8))
    floor = fnw_bce(t(perfect), perfect, LossConfig()).item()
    val = joint_loss(t(perfect), perfect, t([10.0, -10.0, -10.0]), LossConfig()).item()
    assert abs(val - floor) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 5), st.floats(0, 5))
def test_joint_loss_affine_in_lambda(seed, l1, l2):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.1, 0.9, size=(1, 8, 8, 8))
    y = _blob_mask(int(rng.integers(0, 7)))
    z = rng.standard_normal(3)
    f = lambda lam: joint_loss(t(p), y, t(z), LossConfig(lambda_burden=lam)).item()
    f0 = f(0.0)
    slope = f(1.0) - f0
    assert f(l1) == pytest.approx(f0 + l1 * slope, rel=1e-9, abs=1e-9)
    assert f(l2) == pytest.approx(f0 + l2 * slope, rel=1e-9, abs=1e-9)


def test_joint_loss_gradient():
    rng = np.random.default_rng(6)
    p = rng.uniform(0.1, 0.9, size=(1, 4, 4, 4))
    y = (rng.random(p.shape) < 0.1).astype(float)
    z = rng.standard_normal(3)
    err = check_function(lambda q, l: joint_loss(q, y, l, LossConfig(w_fn=3, lambda_burden=0.7)), [p, z], eps=1e-6)
    assert err < 1e-4


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(w_fn=0.5)
    with pytest.raises(ConfigError):
        LossConfig(p_clip=0.6)
    with pytest.raises(ConfigError):
        LossConfig(lambda_burden=-1)
    with pytest.raises(ConfigError):
        LossConfig.from_dict({"weight": 3})
    cfg = LossConfig(w_fn=5, segmentation="voxel_ratio_bce")
    assert LossConfig.from_dict(cfg.to_dict()) == cfg
