import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlmir.config import ConfigError, DegradationLabel, HazeParams, RaindropParams, SynthParams
from vlmir.manifest import ManifestError, load_manifest
from vlmir.synthesis import (
    add_gaussian_noise,
    apply_haze,
    build_corpus,
    degrade,
    generate_scene,
    haze_depth_field,
    raindrop_layout,
    sample_patch,
    synth_haze,
    synth_raindrop,
    write_toy_scenes,
)


def _gt(seed=0, size=32):
    return generate_scene(seed, size)[0]


def test_default_noise_level():
    assert SynthParams().noise_sigma == pytest.approx(50 / 255)
    assert SynthParams().noise_sigma == pytest.approx(0.19608, abs=1e-5)


def test_noise_is_seeded_and_bounded():
    gt = _gt()
    a = add_gaussian_noise(gt, seed=4)
    assert np.array_equal(a, add_gaussian_noise(gt, seed=4))
    assert not np.array_equal(a, add_gaussian_noise(gt, seed=5))
    assert a.min() >= 0 and a.max() <= 1 and a.dtype == np.float32
    with pytest.raises(ValueError):
        add_gaussian_noise(gt, sigma=0)


def test_noise_std_on_mid_gray():
    gray = np.full((256, 256, 3), 0.5, np.float32)
    sigma = 0.1
    diff = (add_gaussian_noise(gray, sigma, seed=0) - gray).astype(np.float64)
    interior = diff[(diff > -0.5) & (diff < 0.5)]
    assert abs(interior.std() / sigma - 1) < 0.02


def test_haze_closed_forms():
    gt = _gt()
    np.testing.assert_allclose(apply_haze(gt, np.zeros(gt.shape[:2]), 0.8, 2.0), gt, atol=1e-7)
    np.testing.assert_allclose(apply_haze(gt, np.ones(gt.shape[:2]), 0.8, 1e4), 0.8, atol=1e-6)
    beta, A = 1.7, 0.9
    depth = np.full(gt.shape[:2], math.log(2) / beta)
    np.testing.assert_allclose(apply_haze(gt, depth, A, beta), gt / 2 + A / 2, atol=1e-6)


def test_haze_depth_field_is_smooth_and_bounded():
    d = haze_depth_field((64, 64), 8, np.random.default_rng(0))
    assert d.min() >= 0 and d.max() <= 1
    assert np.abs(np.diff(d, axis=0)).max() < 0.2


def test_haze_seeded():
    gt = _gt()
    assert np.array_equal(synth_haze(gt, seed=3), synth_haze(gt, seed=3))
    with pytest.raises(ConfigError):
        HazeParams(airlight=(0.2, 0.5))


def test_raindrop_without_drops_is_identity():
    gt = _gt()
    assert np.array_equal(synth_raindrop(gt, RaindropParams(count=(0, 0), coverage=(0, 1)), seed=1), gt)


def test_raindrop_seeded_and_localized():
    gt = _gt()
    out, mask = synth_raindrop(gt, seed=2, return_mask=True)
    assert np.array_equal(out, synth_raindrop(gt, seed=2))
    assert mask.any()
    np.testing.assert_array_equal(out[~mask], gt[~mask].astype(np.float32))


def test_raindrop_coverage_over_many_seeds():
    params = RaindropParams()
    coverage = [raindrop_layout((64, 64), params, np.random.default_rng(s))[0].mean() for s in range(100)]
    lo, hi = params.coverage
    assert min(coverage) >= lo and max(coverage) <= hi


def test_sample_patch_contracts():
    gt, lq = _gt(0), _gt(1)
    g, q = sample_patch(gt, lq, 32, hflip=False, vflip=False, seed=0)
    assert np.array_equal(g, gt) and np.array_equal(q, lq)
    # shared transform: a marker pair stays aligned
    marked_gt, marked_lq = gt.copy(), lq.copy()
    marked_gt[3, 5] = marked_lq[3, 5] = [1.0, 0.0, 1.0]
    for seed in range(10):
        g, q = sample_patch(marked_gt, marked_lq, 20, seed=seed)
        assert np.array_equal(np.argwhere((g == [1, 0, 1]).all(-1)), np.argwhere((q == [1, 0, 1]).all(-1)))
    assert np.array_equal(gt[:, ::-1][:, ::-1], gt)
    with pytest.raises(ValueError):
        sample_patch(gt, lq, 33)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), label=st.sampled_from(list(DegradationLabel)))
def test_degradations_stay_in_range(seed, label):
    gt = _gt(seed % 50, 24)
    out = degrade(gt, label, SynthParams(), seed)
    assert out.shape == gt.shape and out.min() >= 0 and out.max() <= 1


def test_build_corpus_cardinality_and_determinism(tmp_path):
    gt_dir = write_toy_scenes(tmp_path / "gt", 10, 24, seed=0)
    m = build_corpus(gt_dir, ["noise", "haze", "raindrop"], SynthParams(seed=1), tmp_path / "a")
    assert len(m) == 30
    assert [r.degradation for r in m.records[:3]] == list(DegradationLabel)
    assert m.metadata["synth_params"]["seed"] == 1 and m.metadata["mode"] == "universal"
    build_corpus(gt_dir, ["noise", "haze", "raindrop"], SynthParams(seed=1), tmp_path / "b")
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert a == b
    for r in m.records:
        assert (tmp_path / "a" / r.lq_path).read_bytes() == (tmp_path / "b" / r.lq_path).read_bytes()


def test_single_task_corpus(tmp_path):
    gt_dir = write_toy_scenes(tmp_path / "gt", 4, 24)
    m = build_corpus(gt_dir, ["haze"], SynthParams(), tmp_path / "haze")
    assert {r.degradation for r in m.records} == {DegradationLabel.HAZE}
    assert m.metadata["mode"] == "degradation-specific"


def test_cycle_assignment(tmp_path):
    gt_dir = write_toy_scenes(tmp_path / "gt", 6, 24)
    m = build_corpus(gt_dir, ["noise", "haze", "raindrop"], SynthParams(), tmp_path / "c", assign="cycle")
    assert len(m) == 6
    assert [r.degradation.value for r in m.records] == ["raindrop", "haze", "noise"] * 2


def test_build_corpus_errors(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ManifestError):
        build_corpus(tmp_path / "empty", ["noise"], SynthParams(), tmp_path / "out")
    with pytest.raises(ValueError):
        build_corpus(tmp_path / "empty", [], SynthParams(), tmp_path / "out")


def test_manifest_validation(tmp_path):
    gt_dir = write_toy_scenes(tmp_path / "gt", 2, 24)
    m = build_corpus(gt_dir, ["noise"], SynthParams(), tmp_path / "m")
    loaded = load_manifest(tmp_path / "m" / "manifest.json")
    assert [r.id for r in loaded.records] == [r.id for r in m.records]
    (tmp_path / "m" / m.records[0].lq_path).unlink()
    with pytest.raises(ManifestError, match="does not exist"):
        load_manifest(tmp_path / "m" / "manifest.json")
    data = json.loads((tmp_path / "m" / "manifest.json").read_text())
    data["records"].append(dict(data["records"][1]))
    (tmp_path / "m" / "dup.json").write_text(json.dumps(data))
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(tmp_path / "m" / "dup.json", validate=False).validate(check_files=False)
