import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dyrf.io import quantize, save_png
from dyrf.pseudo import (MANIFEST, PSEUDO_NAME, PseudoReferenceSet, import_pseudo_refs, load_pseudo_set,
                         match_offsets, propagate_frame, propagate_style, render_timelapse, select_keyframes)
from dyrf.render import Camera, look_at
from helpers import tiny_field

f64 = torch.float64


def brute_offsets(query, source, patch, radius):
    """Every window offset in nearest-first order, full patch SSD with edge padding, strict < wins."""
    h, w, _ = query.shape
    half = patch // 2
    qp = np.pad(query, ((half, half), (half, half), (0, 0)), mode="edge")
    sp = np.pad(source, ((half, half), (half, half), (0, 0)), mode="edge")
    offs = sorted(((dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)),
                  key=lambda o: (o[0] ** 2 + o[1] ** 2, o[0], o[1]))
    out = np.zeros((h, w, 2), dtype=int)
    for y in range(h):
        for x in range(w):
            best = np.inf
            for dy, dx in offs:
                ty, tx = y + dy, x + dx
                if not (0 <= ty < h and 0 <= tx < w):
                    continue
                cost = 0.0
                for py in range(-half, half + 1):
                    for px in range(-half, half + 1):
                        q = qp[y + half + py, x + half + px]
                        s = sp[ty + half + py, tx + half + px]
                        cost += ((q - s) ** 2).sum()
                if cost < best:
                    best, out[y, x] = cost, (dy, dx)
    return out


def _img(seed, h=16, w=16):
    return np.random.default_rng(seed).uniform(size=(h, w, 3))


# -- keyframes -------------------------------------------------------------------


def test_keyframes_examples():
    assert select_keyframes(8, 0, 4) == [0, 2, 5, 7]
    assert select_keyframes(8, 3, 8) == list(range(8))
    assert select_keyframes(8, 5, 1) == [5]


def test_keyframes_rejects_n_above_t():
    with pytest.raises(ValueError):
        select_keyframes(4, 0, 5)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.data())
def test_keyframes_contract(t, data):
    n = data.draw(st.integers(1, t))
    k = data.draw(st.integers(0, t - 1))
    kf = select_keyframes(t, k, n)
    assert len(kf) == n and k in kf and kf == sorted(set(kf))
    assert all(0 <= i < t for i in kf)
    assert kf == select_keyframes(t, k, n)


# -- patch matching --------------------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_match_offsets_equals_brute_force(seed):
    q, s = _img(seed, 12, 12), _img(seed + 100, 12, 12)
    got, _ = match_offsets(q, s, 3, 3)
    assert np.array_equal(got, brute_offsets(q, s, 3, 3))


def test_match_offsets_translation_brute_force():
    src = _img(7)
    q = np.roll(src, 2, axis=1)
    got, _ = match_offsets(q, src, 5, 4)
    ref = brute_offsets(q, src, 5, 4)
    assert np.array_equal(got, ref)
    assert np.all(ref[3:-3, 5:-3] == (0, -2))


def test_identical_frame_reproduces_reference():
    src = _img(1)
    style = _img(2)
    assert np.array_equal(propagate_frame(style, src, src.copy()), style)


def test_translated_frame_translates_style():
    src = _img(3)
    style = _img(4)
    out = propagate_frame(style, src, np.roll(src, 2, axis=1), patch=5, window=9, levels=1)
    assert np.allclose(out[3:-3, 5:-3], np.roll(style, 2, axis=1)[3:-3, 5:-3], atol=1e-12)


def test_translated_frame_with_pyramid():
    src = _img(5, 32, 32)
    style = _img(6, 32, 32)
    out = propagate_frame(style, src, np.roll(src, 2, axis=1), patch=5, window=9, levels=3)
    assert np.allclose(out[4:-4, 6:-4], np.roll(style, 2, axis=1)[4:-4, 6:-4], atol=1e-12)


def test_identity_style_reconstructs_frames():
    frames = [torch.tensor(_img(s)) for s in range(3)]
    out = propagate_style(frames[0], frames, 0, window=7)
    for f, o in zip(frames, out):
        assert (quantize(o.numpy()).astype(int) - quantize(f.numpy()).astype(int)).__abs__().max() <= 1


def test_propagate_keeps_reference_bit_exact_and_deterministic():
    frames = [torch.tensor(_img(s)) for s in range(3)]
    style = torch.tensor(_img(9))
    a = propagate_style(style, frames, 1, window=7)
    b = propagate_style(style, frames, 1, window=7)
    assert torch.equal(a[1], style)
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_propagate_rejects_size_mismatch():
    with pytest.raises(ValueError):
        propagate_style(torch.zeros(4, 4, 3), [torch.zeros(4, 4, 3), torch.zeros(5, 4, 3)], 0)


def test_even_patch_rejected():
    with pytest.raises(ValueError):
        propagate_frame(_img(0), _img(0), _img(1), patch=4)


def test_window_larger_than_image_still_matches():
    src = _img(3, 4, 4)
    out = propagate_frame(_img(4, 4, 4), src, src, patch=3, window=21, levels=3)
    assert out.shape == (4, 4, 3)


# -- time-lapse ------------------------------------------------------------------


def _cam():
    return Camera(4, 4, 2, 2, 4, 4, look_at((0, 0, 3), (0, 0, 0), up=(0, 1, 0)), near=0.5, far=6.0)


def test_timelapse_static_field_frames_identical():
    f = tiny_field(seed=0, n_frames=4)
    with torch.no_grad():
        for p in list(f.density_planes)[1::2] + list(f.app_planes)[1::2]:
            p.copy_(p[..., :1].expand_as(p))  # every time-bearing plane constant along t
    frames = render_timelapse(f, _cam(), 4, 16)
    assert all(torch.allclose(frames[0], x, atol=1e-12) for x in frames[1:])


def test_timelapse_single_frame_and_determinism():
    f = tiny_field(seed=1, n_frames=1)
    a = render_timelapse(f, _cam(), 1, 16)
    b = render_timelapse(f, _cam(), 1, 16)
    assert len(a) == 1 and torch.equal(a[0], b[0])


# -- persistence and import ------------------------------------------------------


def _quantized(seed, h=4, w=5):
    return torch.tensor(quantize(_img(seed, h, w)) / 255.0, dtype=torch.float32)


def test_set_save_load_roundtrip(tmp_path):
    frames = [_quantized(s) for s in range(4)]
    PseudoReferenceSet(frames, 2, 1, [0, 2, 3]).save(tmp_path)
    manifest = json.loads((tmp_path / MANIFEST).read_text())
    assert manifest == {"T": 4, "k": 2, "N": 3, "keyframes": [0, 2, 3], "camera": 1}
    back = load_pseudo_set(tmp_path)
    assert all(torch.equal(a, b) for a, b in zip(frames, back.frames))


def test_import_replaces_reference_frame(tmp_path):
    frames = [_quantized(s) for s in range(4)]
    for i, f in enumerate(frames):
        save_png(tmp_path / (PSEUDO_NAME % i), f)
    style = _quantized(99)
    s = import_pseudo_refs(tmp_path, style, 1, 4, 2)
    assert torch.equal(s.frames[1], style)
    assert all(torch.equal(s.frames[i], frames[i]) for i in (0, 2, 3))
    out = tmp_path / "out"
    s.save(out)
    for i in (0, 2, 3):
        assert (out / (PSEUDO_NAME % i)).read_bytes() == (tmp_path / (PSEUDO_NAME % i)).read_bytes()


def test_import_wrong_count_or_size(tmp_path):
    for i in range(3):
        save_png(tmp_path / (PSEUDO_NAME % i), _quantized(i))
    with pytest.raises(ValueError):
        import_pseudo_refs(tmp_path, _quantized(0), 0, 4)
    with pytest.raises(ValueError):
        import_pseudo_refs(tmp_path, _quantized(0, 6, 6), 0, 3)


def test_set_rejects_mixed_sizes():
    with pytest.raises(ValueError):
        PseudoReferenceSet([torch.zeros(2, 2, 3), torch.zeros(3, 2, 3)], 0, 0, [0])
