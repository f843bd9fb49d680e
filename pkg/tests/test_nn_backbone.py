import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scouter.backbone import (
    BackboneConfig,
    backbone_forward,
    fc_head_forward,
    init_backbone,
    init_fc_head,
)
from scouter.errors import ConfigError, DimensionError
from scouter.gradcheck import check_gradients
from scouter.model import Classifier, ModelConfig
from scouter.nn import GRU_BIASES, GRU_WEIGHTS, gru_cell, init_gru, init_mlp, mlp
from scouter.tensor import Tensor, mul, reduce_sum, softmax_cross_entropy

# ---------------------------------------------------------------- GRU


def _sig(v):
    return 1 / (1 + np.exp(-v))


def test_gru_zero_params_halves_hidden(f64):
    params = {f"g.{k}": Tensor(np.zeros((4, 4))) for k in GRU_WEIGHTS}
    params.update({f"g.{k}": Tensor(np.zeros(4)) for k in GRU_BIASES})
    h = np.arange(8.0).reshape(2, 4)
    out = gru_cell(Tensor(np.ones((2, 4))), Tensor(h), params, "g")
    np.testing.assert_allclose(out.data, 0.5 * h)


def test_gru_saturated_update_gate_returns_candidate(f64, rng):
    params = init_gru(rng, 3, "g")
    params["g.b_z"] = Tensor(np.full(3, 50.0))
    x, h = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    p = {k: params[f"g.{k}"].data for k in GRU_WEIGHTS + GRU_BIASES}
    r = _sig(x @ p["w_r"] + h @ p["u_r"] + p["b_r"])
    cand = np.tanh(x @ p["w_h"] + (r * h) @ p["u_h"] + p["b_h"])
    np.testing.assert_allclose(gru_cell(Tensor(x), Tensor(h), params, "g").data, cand, atol=1e-12)


def test_gru_matches_gate_equations(f64, rng):
    params = init_gru(rng, 5, "g")
    x, h = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    p = {k: params[f"g.{k}"].data for k in GRU_WEIGHTS + GRU_BIASES}
    z = _sig(x @ p["w_z"] + h @ p["u_z"] + p["b_z"])
    r = _sig(x @ p["w_r"] + h @ p["u_r"] + p["b_r"])
    cand = np.tanh(x @ p["w_h"] + (r * h) @ p["u_h"] + p["b_h"])
    ref = (1 - z) * h + z * cand
    np.testing.assert_allclose(gru_cell(Tensor(x), Tensor(h), params, "g").data, ref, rtol=1e-12)


def test_gru_gradients_all_nine_params(f64, rng):
    params = init_gru(rng, 3, "g")
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    h = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    w = rng.standard_normal((2, 3))
    targets = dict(params, x=x, h=h)
    errs = check_gradients(lambda: reduce_sum(mul(gru_cell(x, h, params, "g"), w)), targets)
    assert len(errs) == 11
    assert max(errs.values()) < 1e-4


def test_gru_shape_mismatch(rng):
    params = init_gru(rng, 3, "g")
    with pytest.raises(DimensionError):
        gru_cell(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))), params, "g")


def test_mlp_has_no_activation_after_last_layer(f64, rng):
    params = init_mlp(rng, [2, 2, 2], "m")
    params["m.1.weight"] = Tensor(-np.eye(2))
    params["m.1.bias"] = Tensor(np.zeros(2))
    out = mlp(Tensor(np.ones((1, 2))), params, "m", 2)
    assert np.all(out.data <= 0)


# ---------------------------------------------------------------- backbone


def test_mnist_config_feature_shape():
    cfg = BackboneConfig()
    params, buffers = init_backbone(cfg, np.random.default_rng(0))
    out = backbone_forward(Tensor(np.random.default_rng(1).standard_normal((2, 1, 28, 28))), cfg, params,
                           buffers, training=True)
    assert out.shape == (2, 64, 7, 7)
    assert cfg.output_hw == (7, 7)
    assert np.all(out.data >= 0)


def test_zero_input_gives_zero_features():
    cfg = BackboneConfig()
    params, buffers = init_backbone(cfg, np.random.default_rng(0))
    out = backbone_forward(Tensor(np.zeros((2, 1, 28, 28))), cfg, params, buffers, training=False)
    assert not out.data.any()


def test_input_shape_mismatch():
    cfg = BackboneConfig()
    params, buffers = init_backbone(cfg, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        backbone_forward(Tensor(np.zeros((1, 3, 28, 28))), cfg, params, buffers, training=False)


@pytest.mark.parametrize("kwargs", [
    dict(stage_channels=[]),
    dict(strides=[2, 2]),
    dict(input_shape=(1, 4, 4), strides=[2, 2, 2]),
    dict(kernel_size=0),
    dict(blocks_per_stage=0),
])
def test_backbone_config_validation(kwargs):
    with pytest.raises(ConfigError):
        BackboneConfig(**kwargs)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(8, 20), w=st.integers(8, 20), s1=st.integers(1, 2), s2=st.integers(1, 2),
       blocks=st.integers(1, 2))
def test_output_dims_match_stride_arithmetic(h, w, s1, s2, blocks):
    cfg = BackboneConfig(input_shape=(1, h, w), stage_channels=[3, 4], strides=[s1, s2], blocks_per_stage=blocks)
    params, buffers = init_backbone(cfg, np.random.default_rng(0))
    out = backbone_forward(Tensor(np.ones((1, 1, h, w))), cfg, params, buffers, training=True)
    eh, ew = h, w
    for s in (s1, s2):
        eh, ew = (eh - 1) // s + 1, (ew - 1) // s + 1
    assert out.shape == (1, 4, eh, ew) and (eh, ew) == cfg.output_hw


def test_backbone_gradients_two_layer_toy(f64, rng):
    cfg = BackboneConfig(input_shape=(1, 6, 6), stage_channels=[2, 3], strides=[1, 2], blocks_per_stage=1)
    params, buffers = init_backbone(cfg, rng)
    x = Tensor(rng.standard_normal((3, 1, 6, 6)))
    w = rng.standard_normal((3, 3, 3, 3))

    def loss():
        bufs = {k: v.copy() for k, v in buffers.items()}
        return reduce_sum(mul(backbone_forward(x, cfg, params, bufs, training=True), w))

    assert max(check_gradients(loss, params).values()) < 1e-3


def test_fc_head_examples(f64):
    feats = Tensor(np.arange(12.0).reshape(1, 3, 2, 2))
    params = {"fc.weight": Tensor(np.zeros((3, 2))), "fc.bias": Tensor([0.5, -1.0])}
    np.testing.assert_array_equal(fc_head_forward(feats, params).data, [[0.5, -1.0]])
    params = {"fc.weight": Tensor([[1.0], [2.0], [3.0]]), "fc.bias": Tensor([1.0])}
    pooled = np.array([1.5, 5.5, 9.5])
    assert fc_head_forward(feats, params).data[0, 0] == pytest.approx(pooled @ [1, 2, 3] + 1)


def test_fc_head_channel_mismatch(rng):
    params = init_fc_head(4, 2, rng)
    with pytest.raises(DimensionError):
        fc_head_forward(Tensor(np.ones((1, 3, 2, 2))), params)


def test_head_swap_keeps_backbone_identical():
    images = np.random.default_rng(3).standard_normal((2, 1, 28, 28)).astype(np.float32)
    fc = Classifier(ModelConfig(head="fc"), seed=7)
    sc = Classifier(ModelConfig(head="scouter"), seed=7)
    for k, v in fc.params.items():
        if k.startswith("backbone."):
            np.testing.assert_array_equal(v.data, sc.params[k].data)
    np.testing.assert_array_equal(fc.forward(images).features.data, sc.forward(images).features.data)


def test_fc_training_step_reduces_loss(rng):
    model = Classifier(ModelConfig(head="fc", backbone=BackboneConfig(input_shape=(1, 8, 8),
                                                                        stage_channels=[4, 8], strides=[2, 1])),
                       seed=0)
    x = rng.standard_normal((16, 1, 8, 8)).astype(np.float32)
    y = rng.integers(0, 10, 16)
    from scouter.trainer import Adam

    opt = Adam(model.params, 1e-2)
    first = None
    for _ in range(30):
        loss = softmax_cross_entropy(model.forward(x, training=True).logits, y)
        first = first if first is not None else loss.item()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert loss.item() < first
