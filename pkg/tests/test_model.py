import math

import numpy as np
import pytest

from centermask import ops
from centermask.model import (
    CLASS_AGNOSTIC,
    CLASS_SPECIFIC,
    ModelConfig,
    build_model,
    forward,
)
from centermask.tensor import DimensionError, Tensor, precision


def small_config(**kw):
    base = dict(input_size=(32, 32), backbone_channels=(4, 8, 8, 8), feature_channels=8, head_channels=8,
                shape_size=4)
    base.update(kw)
    return ModelConfig(**base)


def test_build_is_deterministic():
    a = build_model(ModelConfig(), rng_seed=3)
    b = build_model(ModelConfig(), rng_seed=3)
    for k in a.tensors:
        assert a[k].data.tobytes() == b[k].data.tobytes()


def test_heatmap_bias_prior():
    p = build_model(ModelConfig())
    np.testing.assert_allclose(p["heatmap.out.bias"].data, -4.59512, atol=1e-5)
    assert -math.log(0.99 / 0.01) == pytest.approx(-4.59512, abs=1e-5)


def test_shape_head_channels_follow_s():
    p = build_model(ModelConfig(shape_size=24))
    assert p["shape.out.weight"].shape[0] == 576


def test_forward_shapes_default():
    p = build_model(ModelConfig())
    out = forward(p, np.zeros((3, 128, 128)))
    for name, c in [("heatmap", 3), ("offset", 2), ("shape", 1024), ("size", 2), ("saliency", 1)]:
        assert getattr(out, name).shape == (1, c, 32, 32)


@pytest.mark.parametrize("mode,channels", [(CLASS_SPECIFIC, 5), (CLASS_AGNOSTIC, 1)])
def test_saliency_channels(mode, channels):
    cfg = small_config(num_classes=5, saliency_mode=mode)
    out = forward(build_model(cfg), np.zeros((3, 32, 32)))
    assert out.saliency.shape[1] == channels


@pytest.mark.parametrize("stride", [2, 4, 8])
def test_output_stride(stride):
    cfg = small_config(output_stride=stride)
    out = forward(build_model(cfg), np.zeros((2, 3, 32, 32)))
    assert out.heatmap.shape[-2:] == (32 // stride, 32 // stride)


def test_forward_dimension_error_names_shapes():
    p = build_model(small_config())
    with pytest.raises(DimensionError, match=r"\(3, 32, 32\)"):
        forward(p, np.zeros((3, 30, 32)))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(shape_size=1)
    with pytest.raises(ValueError):
        ModelConfig(output_stride=3)
    with pytest.raises(ValueError):
        ModelConfig(num_classes=0)
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()


def test_sparse_shape_equals_dense_gather():
    cfg = small_config()
    p = build_model(cfg, rng_seed=1)
    img = np.random.default_rng(0).random((2, 3, 32, 32))
    dense = forward(p, img)
    bi, ys, xs = np.array([0, 1, 1]), np.array([2, 5, 0]), np.array([3, 1, 7])
    sparse = forward(p, img, centers=(bi, ys, xs))
    np.testing.assert_allclose(sparse.shape_vectors.data, dense.shape.data[bi, :, ys, xs], rtol=1e-5, atol=1e-6)


def test_forward_is_pure():
    p = build_model(small_config())
    before = {k: v.copy() for k, v in p.arrays().items()}
    forward(p, np.ones((3, 32, 32)))
    for k, v in p.arrays().items():
        np.testing.assert_array_equal(v, before[k])


def test_every_parameter_gets_finite_nonzero_gradient():
    cfg = small_config()
    with precision(np.float64):
        p = build_model(cfg, rng_seed=2, dtype=np.float64)
        img = np.random.default_rng(1).random((1, 3, 32, 32))
        out = forward(p, img)
        loss = ops.sum(ops.sigmoid(out.heatmap))
        for t in (out.offset, out.shape, out.size, out.saliency):
            loss = loss + ops.sum(ops.mul(t, t))
        loss.backward()
    for name, t in p.tensors.items():
        assert t.grad is not None, name
        assert np.all(np.isfinite(t.grad)), name
        assert np.abs(t.grad).sum() > 0, name
