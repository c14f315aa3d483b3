import pytest
import torch
from conftest import randomize
from reference import isotropic_forward

from urepa.model import (
    ModelConfig,
    UNetSiT,
    attention_weight_count,
    default_tap,
    depth_to_stage,
    parameter_count,
)

F64 = torch.float64
TOY = dict(channels=16, heads=2, num_classes=3, input_size=8, in_channels=4, patch_size=2)


def inputs(cfg, b=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(b, cfg.in_channels, cfg.input_size, cfg.input_size, generator=g, dtype=F64)
    t = torch.rand(b, generator=g, dtype=F64)
    y = torch.arange(b) % cfg.num_classes
    return z, t, y


def test_sit_b_stage_arrangement():
    cfg = ModelConfig(channels=768, heads=12, blocks_per_stage=(5, 5, 5), input_size=32)
    assert cfg.total_blocks == 15 and default_tap(cfg) == 8


def test_toy_tap_at_depth_3_is_2x2():
    cfg = ModelConfig(blocks_per_stage=(2, 2, 2), tap_depth=3, **TOY)
    model = UNetSiT(cfg).to(F64)
    out = model(*inputs(cfg))
    assert (out.tap_hidden.height, out.tap_hidden.width) == (2, 2)
    assert out.velocity.shape == (2, 4, 8, 8)


@pytest.mark.parametrize("depth", range(1, 7))
def test_tap_dims_match_depth_to_stage(depth):
    cfg = ModelConfig(blocks_per_stage=(2, 2, 2), **TOY)
    model = UNetSiT(cfg).to(F64)
    tap = model(*inputs(cfg), tap_depth=depth).tap_hidden
    info = depth_to_stage(cfg, depth)
    assert (tap.height, tap.width) == (info.height, info.width)


def test_isotropic_tap_dims_constant():
    cfg = ModelConfig(blocks_per_stage=(2, 2, 2), use_skips=False, use_downsampling=False, **TOY)
    model = UNetSiT(cfg).to(F64)
    for d in range(1, 7):
        tap = model(*inputs(cfg), tap_depth=d).tap_hidden
        assert (tap.height, tap.width) == (4, 4)
        assert depth_to_stage(cfg, d)[2:] == (4, 4)


@pytest.mark.parametrize("rope", [True, False])
def test_isotropic_matches_independent_reference(rope):
    cfg = ModelConfig(blocks_per_stage=(1, 2, 1), use_skips=False, use_downsampling=False,
                      use_rope=rope, **TOY)
    model = randomize(UNetSiT(cfg), seed=4, std=0.2)
    z, t, y = inputs(cfg)
    out = model(z, t, y, tap_depth=2)
    ref_v, ref_tap = isotropic_forward(model, z, t, y, tap=2)
    assert (out.velocity - ref_v).abs().max() < 1e-6
    assert (out.tap_hidden.data - ref_tap).abs().max() < 1e-6


def test_xl_depth_table():
    xl = ModelConfig(channels=1152, heads=16, blocks_per_stage=(10, 16, 10), input_size=32)
    expected = {4: 16, 8: 16, 12: 8, 16: 8, 18: 8, 20: 8, 24: 8, 28: 16, 32: 16}
    for depth, dim in expected.items():
        assert depth_to_stage(xl, depth).height == dim
    assert depth_to_stage(xl, 18).name == "middle"
    assert depth_to_stage(xl, 4).name == "encoder"
    assert depth_to_stage(xl, 32).name == "decoder"
    assert default_tap(xl) == 18


def test_default_tap_formula():
    assert default_tap(ModelConfig(blocks_per_stage=(2, 2, 2))) == 3
    assert default_tap(ModelConfig(blocks_per_stage=(5, 5, 5), input_size=32)) == 8


def test_depth_out_of_range():
    cfg = ModelConfig()
    with pytest.raises(ValueError):
        depth_to_stage(cfg, 0)
    with pytest.raises(ValueError):
        depth_to_stage(cfg, 7)
    with pytest.raises(ValueError):
        ModelConfig(tap_depth=9)
    model = UNetSiT(cfg)
    with pytest.raises(ValueError):
        model(torch.zeros(1, 4, 16, 16), torch.tensor([0.5]), tap_depth=7)


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(blocks_per_stage=(2, 0, 2))
    with pytest.raises(ValueError):
        ModelConfig(input_size=6, patch_size=2)   # 3x3 grid cannot downsample
    ModelConfig(input_size=6, patch_size=2, use_downsampling=False)


def test_input_shape_mismatch():
    with pytest.raises(ValueError):
        UNetSiT(ModelConfig())(torch.zeros(1, 4, 8, 8), torch.tensor([0.5]))


def test_tap_does_not_perturb_forward():
    cfg = ModelConfig(blocks_per_stage=(2, 2, 2), **TOY)
    model = randomize(UNetSiT(cfg), seed=1, std=0.2)
    z, t, y = inputs(cfg)
    a = model(z, t, y, tap_depth=1)
    b = model(z, t, y, tap_depth=5)
    assert torch.equal(a.velocity, b.velocity)
    with torch.no_grad():
        c = model(z, t, y, tap_depth=5)
    assert torch.equal(b.tap_hidden.data, c.tap_hidden.data)


def test_forward_deterministic_and_fresh_model_predicts_zero():
    cfg = ModelConfig(**TOY)
    m1, m2 = UNetSiT(cfg).to(F64), UNetSiT(cfg).to(F64)
    z, t, y = inputs(cfg)
    assert torch.equal(m1(z, t, y).velocity, m2(z, t, y).velocity)
    # AdaLN-zero and a zero final layer
    assert torch.equal(m1(z, t, y).velocity, torch.zeros_like(z))


def test_parameter_count_is_a_function_of_config():
    cfg = ModelConfig(**TOY)
    assert parameter_count(UNetSiT(cfg)) == parameter_count(UNetSiT(cfg))
    wide = ModelConfig(**{**TOY, "channels": 32})
    assert attention_weight_count(UNetSiT(wide)) == 4 * attention_weight_count(UNetSiT(cfg))
    no_skip = ModelConfig(**TOY, use_skips=False)
    assert parameter_count(UNetSiT(cfg)) - parameter_count(UNetSiT(no_skip)) == 2 * (32 * 16 + 16)


def test_cfg_drop_uses_null_label():
    cfg = ModelConfig(**{**TOY}, class_dropout=1.0)
    model = randomize(UNetSiT(cfg), seed=2, std=0.2)
    from urepa.numerics import SeededRng
    z, t, y = inputs(cfg)
    dropped = model(z, t, y, cfg_drop=True, rng=SeededRng(0)).velocity
    uncond = model(z, t, None).velocity
    assert torch.equal(dropped, uncond)
