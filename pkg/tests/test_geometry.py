import itertools

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from urepa.geometry import (
    RopeTable,
    TokenGrid,
    apply_rope,
    nearest_upsample,
    patchify,
    pixel_shuffle,
    pixel_unshuffle,
    unpatchify,
)


def grid(b, h, w, c, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return TokenGrid(torch.randn(b, h * w, c, generator=g, dtype=dtype), h, w)


def test_token_grid_validates_extent():
    with pytest.raises(ValueError):
        TokenGrid(torch.zeros(1, 5, 2), 2, 2)
    with pytest.raises(ValueError):
        TokenGrid(torch.zeros(1, 0, 2), 0, 2)


def test_patchify_shape_patch2():
    img = torch.randn(2, 4, 16, 16)
    g = patchify(img, 2, torch.nn.Linear(16, 32))
    assert (g.height, g.width, g.channels) == (8, 8, 32)


def test_patchify_patch1_identity_gives_pixel_vectors():
    img = torch.randn(1, 3, 4, 5)
    g = patchify(img, 1)
    assert torch.equal(g.spatial()[0], img[0].permute(1, 2, 0))


def test_patchify_round_trip_with_inverse_map():
    img = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    lin = torch.nn.Linear(16, 16, dtype=torch.float64)
    inv = torch.linalg.inv(lin.weight)
    g = patchify(img, 2, lin)
    raw = g.with_data((g.data - lin.bias) @ inv.T)
    assert (unpatchify(raw, 2, 4) - img).abs().max() < 1e-5


def test_patchify_rejects_non_divisible():
    with pytest.raises(ValueError):
        patchify(torch.zeros(1, 1, 5, 4), 2)


def test_unshuffle_shape_and_identity():
    g = grid(2, 8, 8, 3)
    u = pixel_unshuffle(g, 2)
    assert (u.height, u.width, u.channels) == (4, 4, 12)
    assert pixel_unshuffle(g, 1) is not None and torch.equal(pixel_unshuffle(g, 1).data, g.data)
    assert torch.equal(pixel_shuffle(g, 1).data, g.data)


def test_unshuffle_matches_torch_channel_order():
    g = grid(2, 4, 6, 3)
    ref = F.pixel_unshuffle(g.spatial().permute(0, 3, 1, 2), 2).permute(0, 2, 3, 1)
    assert torch.equal(pixel_unshuffle(g, 2).spatial(), ref)
    s = grid(2, 2, 3, 12)
    ref = F.pixel_shuffle(s.spatial().permute(0, 3, 1, 2), 2).permute(0, 2, 3, 1)
    assert torch.equal(pixel_shuffle(s, 2).spatial(), ref)


def test_shuffle_errors():
    with pytest.raises(ValueError):
        pixel_unshuffle(grid(1, 3, 4, 2), 2)
    with pytest.raises(ValueError):
        pixel_shuffle(grid(1, 2, 2, 6), 2)


@settings(max_examples=40, deadline=None)
@given(r=st.integers(1, 3), h=st.integers(1, 3), w=st.integers(1, 3), c=st.integers(1, 4),
       seed=st.integers(0, 10_000))
def test_shuffle_unshuffle_bijection(r, h, w, c, seed):
    g = grid(2, h * r, w * r, c, seed)
    assert torch.equal(pixel_shuffle(pixel_unshuffle(g, r), r).data, g.data)
    s = grid(2, h, w, c * r * r, seed)
    assert torch.equal(pixel_unshuffle(pixel_shuffle(s, r), r).data, s.data)


def test_nearest_upsample_single_token():
    g = TokenGrid(torch.tensor([[[1.0, -2.0]]]), 1, 1)
    up = nearest_upsample(g, 2)
    assert (up.height, up.width) == (2, 2)
    assert torch.equal(up.data, g.data.expand(1, 4, 2))


def test_nearest_upsample_preserves_mean():
    g = grid(3, 3, 2, 5)
    assert torch.allclose(nearest_upsample(g, 3).data.mean(1), g.data.mean(1))


def test_nearest_upsample_block_structure():
    g = TokenGrid(torch.arange(4.0).view(1, 4, 1), 2, 2)
    up = nearest_upsample(g, 2).spatial()[0, :, :, 0]
    expected = torch.tensor([[0.0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
    assert torch.equal(up, expected)


def test_rope_head_dim_must_divide_by_4():
    with pytest.raises(ValueError):
        RopeTable(4, 4, 6)


def test_rope_origin_is_identity():
    table = RopeTable(3, 3, 8)
    v = torch.randn(2, 9, 8, dtype=torch.float64)
    out = apply_rope(v, table, 3, 3)
    assert torch.equal(out[:, 0], v[:, 0])


def test_rope_dimension_mismatch():
    with pytest.raises(ValueError):
        apply_rope(torch.zeros(1, 4, 12), RopeTable(2, 2, 8), 2, 2)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_rope_preserves_pair_norms(seed):
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(3, 16, 8, generator=g, dtype=torch.float64) * 5
    out = apply_rope(v, RopeTable(4, 4, 8), 4, 4)
    pair_in = v.unflatten(-1, (-1, 2)).norm(dim=-1)
    pair_out = out.unflatten(-1, (-1, 2)).norm(dim=-1)
    assert (pair_in - pair_out).abs().max() < 1e-6
    assert torch.allclose(v.norm(dim=-1), out.norm(dim=-1))


def test_rope_relative_position_brute_force():
    # one query and one key vector replicated at every position of a 3x3 grid
    table = RopeTable(3, 3, 8)
    g = torch.Generator().manual_seed(0)
    q = torch.randn(8, generator=g, dtype=torch.float64)
    k = torch.randn(8, generator=g, dtype=torch.float64)
    rq = apply_rope(q.expand(9, 8), table, 3, 3)
    rk = apply_rope(k.expand(9, 8), table, 3, 3)
    by_offset = {}
    for p1, p2 in itertools.product(range(9), repeat=2):
        offset = (p1 // 3 - p2 // 3, p1 % 3 - p2 % 3)
        by_offset.setdefault(offset, []).append(float(rq[p1] @ rk[p2]))
    assert len(by_offset) == 25
    for values in by_offset.values():
        assert max(values) - min(values) < 1e-12
