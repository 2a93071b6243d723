import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dyrf import synth
from dyrf.features import ExtractorWeights
from dyrf.metrics import (MetricReport, consistency_per_pair, metric_consistency, metric_ref_perceptual, warp)
from dyrf.synth import ground_truth_flow, render_ground_truth

EXT = ExtractorWeights.seeded(0, channels=(4, 8))


def _structured(size=32):
    rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.stack([(rows // 4) % 2, (cols // 4) % 2, ((rows + cols) // 8) % 2], -1).astype(np.float64)
    return 0.2 + 0.6 * img


def _blur(img):
    pad = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    return sum(pad[i:i + img.shape[0], j:j + img.shape[1]] for i in range(3) for j in range(3)) / 9.0


# -- ref-perceptual --------------------------------------------------------------


def test_reference_against_itself_is_zero():
    ref = _structured()
    assert metric_ref_perceptual([ref], ref, EXT) == pytest.approx(0.0, abs=1e-12)


def test_noise_scores_worse_than_blur():
    ref = _structured()
    noise = np.random.default_rng(0).uniform(size=ref.shape)
    assert metric_ref_perceptual([noise], ref, EXT) > metric_ref_perceptual([_blur(ref)], ref, EXT)


def test_duplicate_frame_keeps_mean():
    ref = _structured()
    frames = [_blur(ref), np.random.default_rng(1).uniform(size=ref.shape)]
    a = metric_ref_perceptual(frames, ref, EXT)
    b = metric_ref_perceptual(frames + frames, ref, EXT)
    assert a == pytest.approx(b, rel=1e-12)


def test_ref_perceptual_errors():
    with pytest.raises(ValueError):
        metric_ref_perceptual([], _structured(), EXT)
    with pytest.raises(ValueError):
        metric_ref_perceptual([_structured(16)], _structured(32), EXT)


# -- warp and consistency --------------------------------------------------------


def test_zero_flow_warp_is_identity():
    img = np.random.default_rng(0).uniform(size=(6, 7, 3))
    out, mask = warp(img, np.zeros((6, 7, 2)), np.ones((6, 7), bool))
    assert np.array_equal(out[mask], img[mask])
    assert mask[:-1, :-1].all()


def test_integer_flow_shifts():
    img = np.random.default_rng(1).uniform(size=(6, 7, 3))
    flow = np.zeros((6, 7, 2))
    flow[..., 0] = 2.0
    out, mask = warp(img, flow, np.ones((6, 7), bool))
    assert np.allclose(out[:-1, :4], img[:-1, 2:6])
    assert not mask[:, 5:].any()


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 999))
def test_warp_linear_image_exact(dx, dy, seed):
    # bilinear interpolation reproduces an affine image exactly wherever it is valid
    a, b, c = np.random.default_rng(seed).normal(size=3)
    ys, xs = np.meshgrid(np.arange(8.0), np.arange(9.0), indexing="ij")
    img = (a * xs + b * ys + c)[..., None]
    flow = np.broadcast_to(np.array([dx, dy]), (8, 9, 2))
    out, mask = warp(img, flow, np.ones((8, 9), bool))
    assert np.allclose(out[mask][:, 0], (a * (xs + dx) + b * (ys + dy) + c)[mask])


def test_identical_frames_zero_flow_zero_error():
    frames = [np.full((5, 5, 3), 0.3)] * 4
    flows = {i: (np.zeros((5, 5, 2)), np.ones((5, 5), bool)) for i in range(3)}
    assert metric_consistency(frames, flows, 1) == 0.0


def test_missing_flow_and_short_sequence():
    frames = [np.zeros((4, 4, 3))] * 3
    with pytest.raises(KeyError):
        metric_consistency(frames, {0: (np.zeros((4, 4, 2)), np.ones((4, 4), bool))}, 1)
    with pytest.raises(ValueError):
        metric_consistency(frames, {}, 7)


def test_ground_truth_frames_are_consistent():
    spec = synth.orbit_spheres(32)
    cam = spec.cameras[2]
    frames = [render_ground_truth(spec, cam, t)[0] for t in range(spec.n_frames)]
    flows = {i: ground_truth_flow(spec, cam, i, cam, i + 1) for i in range(spec.n_frames - 1)}
    assert metric_consistency(frames, flows, 1) < 1e-3
    long_flows = {0: ground_truth_flow(spec, cam, 0, cam, 7)}
    assert consistency_per_pair(frames, long_flows, 7)[0] < 1e-3


def test_flicker_scores_worse():
    spec = synth.orbit_spheres(32)
    cam = spec.cameras[0]
    frames = [render_ground_truth(spec, cam, t)[0] for t in range(spec.n_frames)]
    flows = {i: ground_truth_flow(spec, cam, i, cam, i + 1) for i in range(spec.n_frames - 1)}
    rng = np.random.default_rng(0)
    flicker = [np.clip(f + rng.normal(0, 0.05, size=f.shape), 0, 1) for f in frames]
    assert metric_consistency(flicker, flows, 1) > metric_consistency(frames, flows, 1)


# -- report ----------------------------------------------------------------------


def test_report_roundtrip_exact(tmp_path):
    r = MetricReport(0.1 + 0.2, 1 / 3, 2e-17, {"ref_perceptual_c0": [0.1, 1 / 7]}, {"no_coarse.ref_perceptual": 0.4},
                     {"seed": 3})
    r.save(tmp_path / "r.json")
    back = MetricReport.load(tmp_path / "r.json")
    assert back == r and back.to_json() == r.to_json()


def test_report_rejects_negative_or_nan():
    with pytest.raises(ValueError):
        MetricReport(-0.1, 0.0, 0.0)
    with pytest.raises(ValueError):
        MetricReport(0.0, float("nan"), 0.0)
