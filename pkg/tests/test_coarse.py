import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dyrf.coarse import (GuidanceMaps, build_guidance, coarse_loss, color_loss, concat_width, feature_loss,
                         split_index)
from dyrf.features import ExtractorWeights, FeatureMap, downsample, extract
from helpers import central_difference, rel_err

f64 = torch.float64


def brute_guidance(content, refs_c):
    """(h, w, 2) winning (p, q) by scanning every stack cell; strict < keeps the first (p, then q)."""
    stack = np.concatenate(refs_c, axis=1)
    h, w, _ = content.shape
    out = np.zeros((h, w, 2), dtype=int)
    for m in range(h):
        for n in range(w):
            f = content[m, n]
            best, arg = np.inf, None
            for p in range(stack.shape[0]):
                for q in range(stack.shape[1]):
                    g = stack[p, q]
                    nf, ng = np.linalg.norm(f), np.linalg.norm(g)
                    d = 0.0 if nf < 1e-12 or ng < 1e-12 else 1.0 - f @ g / (nf * ng)
                    if d < best:
                        best, arg = d, (p, q)
            out[m, n] = arg
    return out


def _random_case(rng, h, w, hr, wr, n, c=5):
    content = rng.normal(size=(h, w, c))
    refs_c = [rng.normal(size=(hr, wr, c)) for _ in range(n)]
    refs_s = [rng.normal(size=(hr, wr, c)) for _ in range(n)]
    cols = [rng.uniform(size=(hr, wr, 3)) for _ in range(n)]
    return content, refs_c, refs_s, cols


def _t(xs):
    return [torch.tensor(x) for x in xs]


# -- concat_width ----------------------------------------------------------------


def test_concat_single_is_identity():
    x = torch.rand(2, 3, 4)
    assert torch.equal(concat_width([x]), x)


def test_concat_block_layout():
    a, b = torch.zeros(2, 3, 1), torch.ones(2, 3, 1)
    out = concat_width([a, b])
    assert out.shape == (2, 6, 1)
    assert torch.all(out[:, :3] == 0) and torch.all(out[:, 3:] == 1)


def test_concat_rejects_height_mismatch():
    with pytest.raises(ValueError):
        concat_width([torch.zeros(2, 3, 1), torch.zeros(3, 3, 1)])


def test_split_index_enumeration():
    widths = [3, 1, 4]
    seen = [split_index(q, widths) for q in range(8)]
    assert seen == [(0, 0), (0, 1), (0, 2), (1, 0), (2, 0), (2, 1), (2, 2), (2, 3)]
    with pytest.raises(IndexError):
        split_index(8, widths)


def test_concat_keeps_provenance():
    fm = concat_width([FeatureMap(torch.zeros(1, 1, 2), "a", "x"), FeatureMap(torch.zeros(1, 2, 2), "b", "x")])
    assert fm.source == "a+b" and fm.extractor == "x" and fm.shape == (1, 3, 2)


# -- build_guidance --------------------------------------------------------------


def test_self_match_is_identity():
    rng = np.random.default_rng(0)
    ref = rng.normal(size=(3, 4, 6))
    style = rng.normal(size=(3, 4, 6))
    g = build_guidance(torch.tensor(ref), [torch.tensor(ref)], [torch.tensor(style)], [torch.rand(3, 4, 3)])
    rows, cols = np.meshgrid(range(3), range(4), indexing="ij")
    assert np.array_equal(g.index_map.numpy(), np.stack([rows, cols], -1))
    assert torch.equal(g.features, torch.tensor(style))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3),
       st.integers(0, 10_000))
def test_guidance_matches_brute_force(h, w, hr, wr, n, seed):
    content, refs_c, refs_s, cols = _random_case(np.random.default_rng(seed), h, w, hr, wr, n)
    g = build_guidance(torch.tensor(content), _t(refs_c), _t(refs_s), _t(cols))
    idx = brute_guidance(content, refs_c)
    assert np.array_equal(g.index_map.numpy(), idx)
    stack_s, stack_col = np.concatenate(refs_s, 1), np.concatenate(cols, 1)
    assert np.array_equal(g.features.numpy(), stack_s[idx[..., 0], idx[..., 1]])
    assert np.array_equal(g.colors.numpy(), stack_col[idx[..., 0], idx[..., 1]])
    assert (g.index_map[..., 1] < n * wr).all()


def test_ties_resolve_to_smallest_p_then_q():
    v = torch.tensor([1.0, 2.0, 3.0], dtype=f64)
    other = torch.tensor([-1.0, 0.5, 0.0], dtype=f64)
    ref = torch.stack([torch.stack([other, v, v]), torch.stack([v, other, v])])  # (2, 3, 3)
    g = build_guidance(v.reshape(1, 1, 3), [ref, ref.clone()], [ref, ref.clone()], [torch.zeros(2, 3, 3)] * 2)
    assert g.index_map[0, 0].tolist() == [0, 1]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_argmin_invariant_to_positive_scaling(seed, alpha):
    rng = np.random.default_rng(seed)
    content, refs_c, refs_s, cols = _random_case(rng, 3, 3, 2, 3, 2)
    base = build_guidance(torch.tensor(content), _t(refs_c), _t(refs_s), _t(cols)).index_map
    scaled_c = content * rng.uniform(0.1, 10.0, size=(3, 3, 1)) * alpha
    scaled_r = [r * rng.uniform(0.1, 10.0, size=r.shape[:2] + (1,)) for r in refs_c]
    assert torch.equal(build_guidance(torch.tensor(scaled_c), _t(refs_c), _t(refs_s), _t(cols)).index_map, base)
    assert torch.equal(build_guidance(torch.tensor(content), _t(scaled_r), _t(refs_s), _t(cols)).index_map, base)


def test_content_scaled_by_three_same_map():
    content, refs_c, refs_s, cols = _random_case(np.random.default_rng(5), 2, 2, 2, 2, 2)
    a = build_guidance(torch.tensor(content), _t(refs_c), _t(refs_s), _t(cols)).index_map
    b = build_guidance(torch.tensor(3 * content), _t(refs_c), _t(refs_s), _t(cols)).index_map
    assert torch.equal(a, b)


def test_guidance_errors():
    x = torch.zeros(2, 2, 3)
    with pytest.raises(ValueError):
        build_guidance(x, [], [], [])
    with pytest.raises(ValueError):
        build_guidance(x, [x], [x, x], [x])
    with pytest.raises(ValueError):
        build_guidance(x, [x], [x], [torch.zeros(1, 2, 3)])


# -- losses ----------------------------------------------------------------------


def test_feature_loss_zero_on_identity():
    x = torch.randn(3, 3, 4, dtype=f64)
    assert feature_loss(x, x, x).item() == pytest.approx(0.0, abs=1e-15)


def test_feature_loss_shape_mismatch():
    with pytest.raises(ValueError):
        feature_loss(torch.zeros(2, 2, 3), torch.zeros(2, 2, 3), torch.zeros(2, 1, 3))


def test_feature_loss_value():
    r = torch.tensor([[[1.0, 0.0]]], dtype=f64)
    g = torch.tensor([[[0.0, 2.0]]], dtype=f64)
    c = torch.tensor([[[1.0, 3.0]]], dtype=f64)
    assert feature_loss(r, g, c, lam=0.5).item() == pytest.approx(1.0 + 0.5 * 9.0)


@pytest.mark.parametrize("seed", range(5))
def test_feature_loss_gradient(seed):
    g = torch.Generator().manual_seed(seed)
    r = torch.randn(2, 2, 4, generator=g, dtype=f64, requires_grad=True)
    guide, content = torch.randn(2, 2, 4, generator=g, dtype=f64), torch.randn(2, 2, 4, generator=g, dtype=f64)
    (grad,) = torch.autograd.grad(feature_loss(r, guide, content), r)
    for i in range(r.numel()):
        fd = central_difference(lambda: feature_loss(r, guide, content), r, i, 1e-6)
        assert rel_err(grad.reshape(-1)[i].item(), fd) < 1e-5


def test_color_loss_convention():
    assert color_loss(torch.zeros(1, 1, 3), torch.ones(1, 1, 3)).item() == 3.0
    x = torch.rand(2, 3, 3)
    assert color_loss(x, x).item() == 0.0
    with pytest.raises(ValueError):
        color_loss(torch.zeros(1, 1, 3), torch.zeros(1, 2, 3))


def test_color_loss_gradient():
    g = torch.Generator().manual_seed(0)
    a = torch.rand(3, 2, 3, generator=g, dtype=f64, requires_grad=True)
    b = torch.rand(3, 2, 3, generator=g, dtype=f64)
    (grad,) = torch.autograd.grad(color_loss(a, b), a)
    for i in range(a.numel()):
        assert abs(grad.reshape(-1)[i].item() - central_difference(lambda: color_loss(a, b), a, i, 1e-6)) < 1e-6


def _identity_setup(size=16, seed=0):
    ext = ExtractorWeights.seeded(seed, channels=(4, 8)).to(f64)
    img = torch.rand(size, size, 3, generator=torch.Generator().manual_seed(seed), dtype=f64)
    feat = extract(img, ext)
    small = downsample(img, feat.data.shape[:2])
    return ext, img, feat, build_guidance(feat, [feat], [feat], [small])


def test_coarse_loss_zero_on_identity_style():
    ext, img, feat, guide = _identity_setup()
    assert coarse_loss(img, guide, feat, ext).item() == pytest.approx(0.0, abs=1e-12)


def test_coarse_loss_rejects_other_extractor():
    ext, img, feat, guide = _identity_setup()
    with pytest.raises(ValueError):
        coarse_loss(img, guide, feat, ExtractorWeights.seeded(9, channels=(4, 8)).to(f64))


def test_coarse_pixel_gradient_finite_differences():
    ext, img, feat, guide = _identity_setup(16, 1)
    other = torch.rand(16, 16, 3, generator=torch.Generator().manual_seed(7), dtype=f64)
    x = other.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(coarse_loss(x, guide, feat, ext), x)
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in rng.choice(x.numel(), 24, replace=False):
        fd = central_difference(lambda: coarse_loss(other, guide, feat, ext), other, int(i), 1e-6)
        worst = max(worst, rel_err(grad.reshape(-1)[int(i)].item(), fd))
    assert worst < 1e-4


def test_guidance_maps_dataclass_fields():
    _, _, _, guide = _identity_setup(8)
    assert isinstance(guide, GuidanceMaps)
    assert guide.features.shape[:2] == guide.index_map.shape[:2] == guide.colors.shape[:2]
