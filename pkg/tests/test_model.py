import numpy as np
import pytest

from surfgen import numerics as nx
from surfgen.model import Denoiser, ModelConfig, count_params, forward, init_params, trainable


def small(**kw):
    base = dict(n_vertex_tokens=10, n_joint_tokens=4, n_layers=2, hidden_dim=16, n_heads=2, mlp_ratio=2)
    base.update(kw)
    return ModelConfig(**base)


def randomize_heads(params, seed=0):
    rng = np.random.default_rng(seed)
    for k in ("out_v.1.w", "out_j.1.w"):
        params[k].data[...] = rng.normal(0, 0.3, params[k].shape)


def inputs(cfg, b=2, seed=1):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(b, cfg.n_vertex_tokens, cfg.vertex_channels)).astype(np.float32)
    y = rng.normal(size=(b, cfg.n_joint_tokens, 3)).astype(np.float32)
    return x, y


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        ModelConfig(10, 4, hidden_dim=30, n_heads=4)


def test_output_shapes_and_zero_heads():
    for attr in (0, 3):
        cfg = small(attr_channels=attr)
        params = init_params(cfg, 0)
        x, y = inputs(cfg)
        px, py = forward(x, y, np.array([3, 700]), np.array([0, 1000]), params, cfg)
        assert px.shape == (2, 10, 3 + attr) and py.shape == (2, 4, 3)
        assert not px.data.any() and not py.data.any()


def test_unbatched_call_returns_unbatched():
    cfg = small()
    model = Denoiser(init_params(cfg, 0), cfg)
    x, y = inputs(cfg, 1)
    vx, vy = model(x[0], y[0], 5, 5)
    assert vx.shape == (10, 3) and vy.shape == (4, 3)


def test_init_deterministic():
    cfg = small()
    a, b = init_params(cfg, 7), init_params(cfg, 7)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    c = init_params(cfg, 8)
    assert not np.array_equal(a["blk0.qkv.w"].data, c["blk0.qkv.w"].data)


def test_forward_deterministic():
    cfg = small()
    params = init_params(cfg, 0)
    randomize_heads(params)
    x, y = inputs(cfg)
    p1 = forward(x, y, 10, 20, params, cfg)
    p2 = forward(x, y, 10, 20, params, cfg)
    assert np.array_equal(p1[0].data, p2[0].data) and np.array_equal(p1[1].data, p2[1].data)


def enumerate_params(cfg):
    template = None
    if cfg.pos_embed_kind == "template":
        template = np.zeros((cfg.n_joint_tokens + cfg.n_vertex_tokens, 3))
    return sum(p.size for p in trainable(init_params(cfg, 0, template=template)).values())


@pytest.mark.parametrize(
    "kw",
    [
        dict(),
        dict(attr_channels=3),
        dict(use_long_skip=True, n_layers=5),
        dict(pos_embed_kind="template"),
        dict(time_embed_kind="add"),
    ],
)
def test_count_params_matches_enumeration(kw):
    cfg = small(**kw)
    assert count_params(cfg) == enumerate_params(cfg)


def test_count_params_full_sized_config():
    cfg = ModelConfig(n_vertex_tokens=431, n_joint_tokens=14, n_layers=7, hidden_dim=256, n_heads=4)
    assert count_params(cfg) == enumerate_params(cfg)


def test_count_params_linear_in_layers_and_attr_delta():
    c2, c4 = small(n_layers=2), small(n_layers=4)
    per_block = (count_params(c4) - count_params(c2)) // 2
    assert count_params(small(n_layers=8)) - count_params(c4) == 4 * per_block
    h = c2.hidden_dim
    # three extra input channels and three extra outputs (weights plus biases)
    assert count_params(small(attr_channels=3)) - count_params(c2) == 3 * h + 3 * h + 3


def test_vertex_permutation_equivariance():
    cfg = small()
    params = init_params(cfg, 0)
    randomize_heads(params)
    x, y = inputs(cfg)
    px, py = forward(x, y, 50, 60, params, cfg)
    perm = np.random.default_rng(3).permutation(cfg.n_vertex_tokens)
    permuted = {k: v for k, v in params.items()}
    pos = params["pos"].data.copy()
    off = cfg.n_time_tokens + cfg.n_joint_tokens
    pos[off:] = pos[off:][perm]
    permuted["pos"] = nx.Tensor(pos, True, "pos")
    qx, qy = forward(x[:, perm], y, 50, 60, permuted, cfg)
    np.testing.assert_allclose(qx.data, px.data[:, perm], atol=1e-5)
    np.testing.assert_allclose(qy.data, py.data, atol=1e-5)


def test_long_skip_is_a_real_switch():
    cfg_on = small(n_layers=3, use_long_skip=True)
    cfg_off = small(n_layers=3)
    p_on = init_params(cfg_on, 0)
    randomize_heads(p_on)
    p_off = {k: v for k, v in p_on.items() if not k.startswith("skip")}
    x, y = inputs(cfg_on)
    a = forward(x, y, 5, 5, p_on, cfg_on)[0].data
    b = forward(x, y, 5, 5, p_off, cfg_off)[0].data
    assert np.abs(a - b).max() > 1e-4


def test_template_positions_need_template_and_run():
    cfg = small(pos_embed_kind="template")
    params = init_params(cfg, 0, template=np.random.default_rng(0).normal(size=(14, 3)))
    assert not params["template"].requires_grad
    x, y = inputs(cfg)
    assert forward(x, y, 1, 1, params, cfg)[0].shape == (2, 10, 3)


def test_rejects_mismatches():
    cfg = small()
    params = init_params(cfg, 0)
    x, y = inputs(cfg)
    with pytest.raises(ValueError):
        forward(x[:, :5], y, 1, 1, params, cfg)
    with pytest.raises(ValueError):
        forward(x, y, 1, 1001, params, cfg)
    with pytest.raises(ValueError):
        Denoiser(params, small(n_layers=3))
    with pytest.raises(ValueError):
        Denoiser(params, small(hidden_dim=32))


def test_state_arrays_roundtrip():
    cfg = small()
    model = Denoiser(init_params(cfg, 0), cfg)
    back = Denoiser.from_arrays(model.state_arrays(), cfg)
    assert set(back.params) == set(model.params)
    assert all(np.array_equal(back.params[k].data, model.params[k].data) for k in model.params)
