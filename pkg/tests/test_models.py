import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from moeamc import tensorcore as tc
from moeamc.models import (
    HSRM,
    LSRM,
    Gate,
    GateConfig,
    HsrmConfig,
    LsrmConfig,
    MoEAMC,
    build_model,
    classify,
    encoder_block_forward,
    load_model,
    mix_experts,
    patchify,
    preprocess,
    residual_unit_forward,
    save_model,
)
from moeamc.selftest import SHIFT_INVARIANT, randomize_heads
from moeamc.sigsynth import IQFrame
from moeamc.tensorcore import Tensor

SMALL_H = HsrmConfig(n_classes=4, n_stacks=2, units_per_stack=1, channels=4, head_hidden=(8, 6))
SMALL_L = LsrmConfig(n_classes=4, d_model=8, n_heads=2, ffn_hidden=12, head_hidden=(8, 6))


@pytest.fixture(scope="module")
def x64():
    return Tensor(np.random.default_rng(5).standard_normal((6, 2, 128)))


@pytest.fixture(scope="module")
def moe64():
    return randomize_heads(MoEAMC(rng=np.random.default_rng(2), dtype=np.float64), seed=2)


# preprocess --------------------------------------------------------------------------


def test_preprocess_examples():
    assert_array_equal(preprocess(IQFrame(np.array([2.0, 2.0]), np.zeros(2))).data, [[1, 1], [0, 0]])
    r = np.random.default_rng(0)
    z = r.standard_normal(64) + 1j * r.standard_normal(64)
    z /= np.sqrt(np.mean(np.abs(z) ** 2))
    out = preprocess(IQFrame(z.real, z.imag)).data
    assert_allclose(out, np.stack([z.real, z.imag]), atol=1e-12)
    zero = preprocess(IQFrame(np.zeros(4), np.zeros(4))).data
    assert_array_equal(zero, 0.0)


def test_preprocess_length_check():
    with pytest.raises(ValueError):
        preprocess(IQFrame(np.ones(8), np.ones(8)), input_len=16)


# residual unit -----------------------------------------------------------------------


def _unit_params(rng, C=3, k=3):
    p = {}
    for c in (1, 2):
        p[f"u.conv{c}.w"] = Tensor(rng.standard_normal((C, C, k)))
        p[f"u.conv{c}.b"] = Tensor(rng.standard_normal(C))
        p[f"u.bn{c}.gamma"] = Tensor(rng.standard_normal(C))
        p[f"u.bn{c}.beta"] = Tensor(rng.standard_normal(C))
    bufs = {f"u.bn{c}.{s}": np.full(C, v) for c in (1, 2) for s, v in (("running_mean", 0.2), ("running_var", 1.7))}
    return p, bufs


def test_residual_unit_zero_branch_is_identity():
    rng = np.random.default_rng(0)
    p, bufs = _unit_params(rng)
    for name in p:
        if "conv" in name or "beta" in name:
            p[name] = Tensor(np.zeros_like(p[name].data))
    bufs = {k: np.zeros(3) if "mean" in k else np.ones(3) for k in bufs}
    x = rng.standard_normal((2, 3, 10))
    for training in (False, True):
        out = residual_unit_forward(Tensor(x), p, bufs, "u", training).data
        assert_allclose(out, x, rtol=0, atol=1e-12)


def test_residual_unit_matches_hand_composition():
    rng = np.random.default_rng(1)
    p, bufs = _unit_params(rng)
    x = Tensor(rng.standard_normal((2, 3, 10)))

    def bn(t, c):
        return tc.batch_norm(t, p[f"u.bn{c}.gamma"], p[f"u.bn{c}.beta"], np.full(3, 0.2), np.full(3, 1.7), False)

    g = tc.relu(bn(tc.conv1d(x, p["u.conv1.w"], p["u.conv1.b"], pad=1), 1))
    g = bn(tc.conv1d(g, p["u.conv2.w"], p["u.conv2.b"], pad=1), 2)
    expected = x.data + g.data
    assert_allclose(residual_unit_forward(x, p, bufs, "u").data, expected, rtol=0, atol=1e-12)
    assert residual_unit_forward(x, p, bufs, "u").shape == x.shape


def test_residual_unit_channel_mismatch():
    p, bufs = _unit_params(np.random.default_rng(0))
    with pytest.raises(ValueError):
        residual_unit_forward(Tensor(np.ones((1, 4, 8))), p, bufs, "u")


# HSRM ------------------------------------------------------------------------------------


def test_hsrm_shapes_and_rows():
    m = HSRM(rng=np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).standard_normal((2, 2, 128)).astype(np.float32))
    assert m.features(x).shape == (2, 32, 8)
    y = m(x).data
    assert y.shape == (2, 8)
    assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)


def test_hsrm_batch_permutation_equivariant(moe64, x64):
    perm = np.array([3, 0, 5, 1, 4, 2])
    a = moe64.hsrm(x64).data
    b = moe64.hsrm(Tensor(x64.data[perm])).data
    assert_allclose(b, a[perm], atol=1e-12)


def test_hsrm_geometry_errors():
    with pytest.raises(ValueError):
        HSRM(input_len=100)
    with pytest.raises(ValueError):
        HsrmConfig(kernel=4)
    with pytest.raises(ValueError):
        HSRM()(Tensor(np.zeros((1, 2, 64), np.float32)))


# LSRM --------------------------------------------------------------------------------------


def test_patchify_layout():
    x = Tensor(np.arange(2 * 2 * 16, dtype=np.float64).reshape(2, 2, 16))
    t = patchify(x).data
    assert t.shape == (2, 2, 16)
    assert_array_equal(t[0, 1], np.concatenate([x.data[0, 0, 8:16], x.data[0, 1, 8:16]]))


def _enc_params(rng, d=8, f=12):
    p = {}
    for proj in "qkvo":
        p[f"e.attn.w{proj}"] = Tensor(rng.standard_normal((d, d)))
        p[f"e.attn.b{proj}"] = Tensor(rng.standard_normal(d))
    p["e.ffn.fc0.w"], p["e.ffn.fc0.b"] = Tensor(rng.standard_normal((d, f))), Tensor(rng.standard_normal(f))
    p["e.ffn.fc1.w"], p["e.ffn.fc1.b"] = Tensor(rng.standard_normal((f, d))), Tensor(rng.standard_normal(d))
    for ln in ("ln1", "ln2"):
        p[f"e.{ln}.gamma"], p[f"e.{ln}.beta"] = Tensor(np.ones(d)), Tensor(np.zeros(d))
    return p


def test_encoder_block_zero_submodules_collapse_to_double_layer_norm():
    rng = np.random.default_rng(3)
    p = _enc_params(rng)
    for k in p:
        if ".attn." in k or ".ffn." in k:
            p[k] = Tensor(np.zeros_like(p[k].data))
    x = rng.standard_normal((2, 5, 8))
    one, zero = Tensor(np.ones(8)), Tensor(np.zeros(8))
    expected = tc.layer_norm(tc.layer_norm(Tensor(x), one, zero), one, zero).data
    out = encoder_block_forward(Tensor(x), p, "e", 2).data
    assert out.shape == x.shape
    assert_allclose(out, expected, atol=1e-12)


def test_encoder_block_time_permutation_equivariant():
    rng = np.random.default_rng(4)
    p = _enc_params(rng)
    x = rng.standard_normal((2, 7, 8))
    perm = rng.permutation(7)
    a = encoder_block_forward(Tensor(x), p, "e", 2).data
    b = encoder_block_forward(Tensor(x[:, perm]), p, "e", 2).data
    assert_allclose(b, a[:, perm], atol=1e-12)


def test_lsrm_shapes_rows_and_duplicates(moe64, x64):
    assert patchify(x64).shape == (6, 16, 16)
    xs = Tensor(np.concatenate([x64.data[:2], x64.data[:1]]))
    y = moe64.lsrm(xs).data
    assert y.shape == (3, 8)
    assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
    assert_array_equal(y[0], y[2])


def test_lsrm_gradients_pass_grad_check():
    rng = np.random.default_rng(8)
    m = randomize_heads(LSRM(rng=np.random.default_rng(8), dtype=np.float64), seed=8)
    x = Tensor(rng.standard_normal((4, 2, 128)))
    labels = rng.integers(0, 8, 4)
    params = {k: v for k, v in m.params.items() if k not in SHIFT_INVARIANT}
    assert tc.grad_check(lambda: tc.cross_entropy(m(x), labels), params, max_coords=256) < 1e-4


def test_lsrm_rejects_bad_length():
    with pytest.raises(ValueError):
        LSRM(input_len=12)
    with pytest.raises(ValueError):
        LsrmConfig(d_model=10, n_heads=4)


# gate ------------------------------------------------------------------------------------


def test_gate_examples(x64):
    g = Gate(dtype=np.float64)
    for k, p in g.params.items():
        p.data[:] = 0.0
    assert_array_equal(g(x64).data, 0.5)
    g.params["gate.mlp.fc2.b"].data[:] = 20.0
    assert_allclose(g(x64).data, 1.0, atol=1e-8)


def test_gate_strictly_inside_unit_interval(x64):
    g = Gate(rng=np.random.default_rng(3), dtype=np.float64)
    y = g(x64).data
    assert y.shape == (6,)
    assert np.all((y > 0) & (y < 1))


# mixture -----------------------------------------------------------------------------------


def test_mix_midpoint():
    out = mix_experts(Tensor([0.5]), Tensor([[0.8, 0.2]]), Tensor([[0.2, 0.8]])).data
    assert_allclose(out, [[0.5, 0.5]], atol=1e-15)


def test_mix_endpoints_exact():
    a, b = Tensor([[0.9, 0.1]]), Tensor([[0.3, 0.7]])
    assert_array_equal(mix_experts(Tensor([1.0]), a, b).data, a.data)
    assert_array_equal(mix_experts(Tensor([0.0]), a, b).data, b.data)


def test_moe_gate_saturation_selects_expert(moe64, x64):
    saved = {k: moe64.params[k].data.copy() for k in ("gate.mlp.fc2.w", "gate.mlp.fc2.b")}
    try:
        moe64.params["gate.mlp.fc2.w"].data[:] = 0.0
        for bias, expert in ((20.0, moe64.hsrm), (-20.0, moe64.lsrm)):
            moe64.params["gate.mlp.fc2.b"].data[:] = bias
            assert np.abs(moe64(x64).data - expert(x64).data).max() < 1e-7
    finally:
        for k, v in saved.items():
            moe64.params[k].data = v


def test_moe_convex_and_conserving(moe64, x64):
    y, g, h, l = (t.data for t in moe64.forward_all(x64))
    assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(y >= np.minimum(h, l) - 1e-15)
    assert np.all(y <= np.maximum(h, l) + 1e-15)
    assert g.shape == (6,)


def test_moe_gradients_reach_every_submodel():
    m = MoEAMC(rng=np.random.default_rng(0), dtype=np.float64)
    x = Tensor(np.random.default_rng(1).standard_normal((4, 2, 128)))
    tc.cross_entropy(m(x, True), [0, 3, 5, 7]).backward(m.parameters())
    for prefix in ("gate.", "hsrm.", "lsrm."):
        assert any(np.any(p.grad != 0) for k, p in m.params.items() if k.startswith(prefix)), prefix


def test_untrained_loss_is_log_k():
    m = MoEAMC(rng=np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).standard_normal((16, 2, 128)).astype(np.float32))
    loss = tc.cross_entropy(m(x, True), np.arange(16) % 8).item()
    assert abs(loss / math.log(8) - 1.0) < 0.15


def test_parameter_names_unique_and_namespaced():
    m = MoEAMC()
    names = list(m.params)
    assert len(names) == len(set(names))
    assert {n.split(".")[0] for n in names} == {"gate", "hsrm", "lsrm"}
    assert "hsrm.stack0.unit1.conv1.w" in names
    assert len(m.buffers) == 4 * 2 * 2 * 2


def test_moe_rejects_inconsistent_configs():
    with pytest.raises(ValueError):
        MoEAMC(n_classes=8, hsrm_cfg=HsrmConfig(n_classes=4))


def test_classify_examples():
    assert classify(np.array([[0.1, 0.7, 0.2]]))[0] == 1
    assert classify(np.array([[0.5, 0.5]]))[0] == 0
    out = classify(Tensor(np.eye(3)[[2, 0, 1]]))
    assert_array_equal(out, [2, 0, 1])


# construction and persistence --------------------------------------------------------------


def test_build_model_kinds_and_determinism():
    for kind, cls in (("hsrm", HSRM), ("lsrm", LSRM), ("moe", MoEAMC)):
        a = build_model(kind, 4, 32, seed=7, configs={"hsrm": {"n_stacks": 2, "channels": 4}})
        b = build_model(kind, 4, 32, seed=7, configs={"hsrm": {"n_stacks": 2, "channels": 4}})
        assert isinstance(a, cls)
        for k, v in a.state_dict().items():
            assert_array_equal(v, b.state_dict()[k])
    with pytest.raises(ValueError):
        build_model("cnn", 4, 32)


def test_save_load_round_trip(tmp_path):
    m = MoEAMC(4, 32, GateConfig((6,)), SMALL_H, SMALL_L, rng=np.random.default_rng(1))
    x = Tensor(np.random.default_rng(2).standard_normal((3, 2, 32)).astype(np.float32))
    m(x, True)  # move running stats off their initial values
    save_model(m, tmp_path / "m.ckpt")
    back = load_model(tmp_path / "m.ckpt")
    assert (tmp_path / "m.json").exists()
    assert_array_equal(back(x).data, m(x).data)
    assert set(back.state_dict()) == set(m.state_dict())
