import numpy as np
import pytest

from lifmixer.model import (
    REFERENCE_TARGETS,
    SNNMLP,
    Linear,
    LifModule,
    MlpModule,
    ModelConfig,
    count_flops,
    count_module_params,
    count_params,
    linear_flops,
    variant,
)

TOY = ModelConfig(embed_dim=32, depths=(1, 1, 1, 1), num_classes=10)


def test_tiny_shape_schedule():
    model = SNNMLP(variant("tiny"), seed=0)
    cap = {}
    logits = model.forward(np.random.default_rng(0).random((1, 3, 224, 224), dtype=np.float32), capture=cap)
    assert logits.shape == (1, 1000)
    assert cap["stage0.block0.out"].shape == (1, 96, 56, 56)
    assert cap["stage1.block0.out"].shape == (1, 192, 28, 28)
    assert cap["stage2.block5.out"].shape == (1, 384, 14, 14)
    assert cap["stage3.block1.out"].shape == (1, 768, 7, 7)


def test_toy_logits_shape():
    assert SNNMLP(TOY).forward(np.zeros((2, 3, 32, 32), np.float32)).shape == (2, 10)


def test_indivisible_input_rejected():
    with pytest.raises(ValueError, match="divisible"):
        SNNMLP(TOY).forward(np.zeros((1, 3, 40, 32), np.float32))
    with pytest.raises(ValueError):
        SNNMLP(TOY).forward(np.zeros((1, 1, 32, 32), np.float32))


def test_zero_params_gives_bias(rng):
    model = SNNMLP(TOY)
    for _, p in model.named_params():
        p.value[...] = 0
    b = rng.normal(size=10).astype(np.float32)
    model.head.bias.value[...] = b
    out = model.forward(rng.random((3, 3, 32, 32), dtype=np.float32))
    assert np.array_equal(out, np.broadcast_to(b, out.shape))


def test_module_shapes(rng):
    x = rng.normal(size=(1, 96, 56, 56)).astype(np.float32)
    assert LifModule(96, 4, rng).forward(x).shape == x.shape
    x = rng.normal(size=(2, 96, 7, 7)).astype(np.float32)
    assert MlpModule(96, 384, rng).forward(x).shape == x.shape


def test_mlp_identity_composition(rng):
    from lifmixer.layers import gelu

    m = MlpModule(3, 3, rng, dtype=np.float64)
    for fc in (m.fc1, m.fc2):
        fc.weight.value[...] = np.eye(3)
        fc.bias.value[...] = 0
    x = rng.normal(size=(1, 3, 4, 4))
    assert np.array_equal(m.forward(x), gelu(gelu(x)))


# -- counting ----------------------------------------------------------------------

@pytest.mark.parametrize("name", ["tiny", "small", "base"])
def test_counts_within_gates(name):
    tp, tf = REFERENCE_TARGETS[name]
    cfg = variant(name)
    assert abs(count_params(cfg) - tp) / tp <= 0.05
    assert abs(count_flops(cfg, (224, 224)) - tf) / tf <= 0.10


def test_reference_targets():
    assert REFERENCE_TARGETS == {"tiny": (28e6, 4.4e9), "small": (50e6, 8.5e9), "base": (88e6, 15.2e9)}
    assert [variant(n).embed_dim for n in ("tiny", "small", "base")] == [96, 96, 128]
    assert [variant(n).depths[2] for n in ("tiny", "small", "base")] == [6, 18, 18]


@pytest.mark.parametrize("cfg", [TOY, variant("tiny"), ModelConfig(embed_dim=16, depths=(1, 2, 1, 3), mlp_ratio=3.0,
                                                                    num_classes=7, patch=2)])
def test_count_params_matches_constructor(cfg):
    assert count_params(cfg) == count_module_params(SNNMLP(cfg))


def test_counter_stubs(rng):
    assert count_module_params(Linear(2, 3, rng)) == 9
    assert linear_flops(4, 4, 2 * 2) == 64


def test_every_lif_param_counted():
    cfg = TOY
    lifs = SNNMLP(cfg).lif_units()
    assert len(lifs) == 2 * sum(cfg.depths)
    assert all(u.tau.value.shape == (1,) and u.v_th.value.shape == (1,) for u in lifs)


def test_flops_reject_bad_input():
    with pytest.raises(ValueError):
        count_flops(TOY, (36, 32))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(depths=(1, 1, 1))
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=30, norm_groups=4)
    cfg = ModelConfig(embed_dim=24, depths=(1, 2, 3, 4), mlp_ratio=2.5)
    assert ModelConfig.from_kv(cfg.to_kv()) == cfg
    with pytest.raises(KeyError):
        ModelConfig.from_kv({"nope": "1"})


# -- behaviour --------------------------------------------------------------------

def test_forward_deterministic(rng):
    x = rng.random((2, 3, 32, 32), dtype=np.float32)
    a, b = SNNMLP(TOY, seed=3), SNNMLP(TOY, seed=3)
    assert np.array_equal(a.forward(x), b.forward(x))
    a.train()
    a.seed_rngs(0, 5)
    b.train()
    b.seed_rngs(0, 5)
    assert np.array_equal(a.forward(x), b.forward(x))


def test_drop_path_schedule():
    model = SNNMLP(variant("tiny", num_classes=10))
    rates = [m.rate for m in model.stochastic_layers() if type(m).__name__ == "DropPath"]
    assert rates[0] == 0.0 and rates[-1] == pytest.approx(0.1)
    assert rates == sorted(rates)


def test_lif_params_receive_gradient_every_stage(rng):
    model = SNNMLP(TOY, seed=0, dtype=np.float64)
    model.train()
    model.seed_rngs(0, 0)
    # 64px keeps stage 3 at 2x2, so its chains have a carry term
    x = rng.normal(size=(2, 3, 64, 64))
    logits = model.forward(x)
    model.zero_grad()
    model.backward(rng.normal(size=logits.shape))
    for s, stage in enumerate(model.stages):
        units = [m for b in stage.blocks for m in (b.lif.vlif, b.lif.hlif)]
        assert any(u.tau.grad[0] != 0 and u.v_th.grad[0] != 0 for u in units), f"stage {s}"


def test_full_model_input_gradient(rng):
    """Directional finite difference through the whole network (float64)."""
    model = SNNMLP(ModelConfig(embed_dim=8, depths=(1, 1, 1, 1), num_classes=3), seed=1, dtype=np.float64)
    x = rng.normal(size=(1, 3, 32, 32))
    w = rng.normal(size=(1, 3))
    model.forward(x)
    model.zero_grad()
    g = model.backward(w)
    v = rng.normal(size=x.shape)
    h = 1e-6
    fd = (np.sum(w * model.forward(x + h * v)) - np.sum(w * model.forward(x - h * v))) / (2 * h)
    assert np.sum(g * v) == pytest.approx(fd, rel=1e-4)


def test_feature_names_cover_capture(rng):
    model = SNNMLP(TOY)
    cap = {}
    model.forward(rng.random((1, 3, 32, 32), dtype=np.float32), capture=cap)
    assert set(model.feature_names()) == set(cap)
    assert np.array_equal(cap["stage0.block0.lif_out"], cap["stage0.block0.vlif_out"])
