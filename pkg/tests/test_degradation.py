import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepsent import resample
from deepsent.bands import BANDS, group_of
from deepsent.degradation import (BandDegradation, Dataset, DegradationError, DegradationParams,
                                  DegradationRecord, SplitSpec, build_dataset, hr_patch_of, replay,
                                  simulate_lr_stack, tile_origins)
from deepsent.synthetic import synthetic_scene

IDENTITY = DegradationParams(shift_range=0.0, contrast_range=(1.0, 1.0), brightness_range=(0.0, 0.0),
                             blur_sigma_range=(0.0, 0.0), noise_sigma_range=(0.0, 0.0), n_lr_images=2)


@pytest.fixture(scope="module")
def hr36():
    return synthetic_scene(36, 36, seed=5)


def test_reference_patch_sizes():
    hr = synthetic_scene(288, 288, seed=0)
    lr, rec = simulate_lr_stack(hr, DegradationParams(n_lr_images=9))
    assert len(rec.instances) == 9
    for b, s in lr.series.items():
        assert s.n_images == 9
        assert s.shape == {10: (96, 96), 20: (48, 48), 60: (16, 16)}[group_of(b).gsd_m]


def test_identity_degradation_is_bicubic_downsample(hr36):
    lr, _ = simulate_lr_stack(hr36, IDENTITY)
    for b in BANDS:
        want = resample.downsample(hr36[b].astype(np.float64), group_of(b).upscale_to_output)
        for img in lr.series[b].images:
            np.testing.assert_allclose(img, want, atol=1e-6)


@given(st.integers(0, 2**63 - 1))
@settings(max_examples=5, deadline=None)
def test_same_seed_bitwise(seed):
    hr = synthetic_scene(18, 18, seed=1)
    p = DegradationParams(seed=seed, n_lr_images=2)
    a, ra = simulate_lr_stack(hr, p, "x")
    b, rb = simulate_lr_stack(hr, p, "x")
    assert ra == rb
    for band in BANDS:
        assert a.series[band].images.tobytes() == b.series[band].images.tobytes()


def test_seed_and_patch_id_change_draws(hr36):
    _, r0 = simulate_lr_stack(hr36, DegradationParams(seed=0, n_lr_images=2), "a")
    _, r1 = simulate_lr_stack(hr36, DegradationParams(seed=1, n_lr_images=2), "a")
    _, r2 = simulate_lr_stack(hr36, DegradationParams(seed=0, n_lr_images=2), "b")
    assert r0.instances[0].dx != r1.instances[0].dx
    assert r0.instances[0].dx != r2.instances[0].dx


def test_record_ranges_and_shared_shift(hr36):
    p = DegradationParams(n_lr_images=5)
    _, rec = simulate_lr_stack(hr36, p)
    for inst in rec.instances:
        assert abs(inst.dx) <= p.shift_range and abs(inst.dy) <= p.shift_range
        assert set(inst.bands) == set(BANDS)
        for bd in inst.bands.values():
            assert p.contrast_range[0] <= bd.contrast <= p.contrast_range[1]
            assert p.brightness_range[0] <= bd.brightness <= p.brightness_range[1]
            assert p.blur_sigma_range[0] <= bd.blur_sigma <= p.blur_sigma_range[1]
            assert p.noise_sigma_range[0] <= bd.noise_sigma <= p.noise_sigma_range[1]


def test_band_subset_draws_are_stable(hr36):
    # per-band streams: dropping bands does not change the draws of the others
    p = DegradationParams(n_lr_images=2)
    _, full = simulate_lr_stack(hr36, p)
    _, part = simulate_lr_stack({b: hr36[b] for b in ("B03", "B12")}, p)
    for a, b in zip(full.instances, part.instances):
        assert (a.dx, a.dy) == (b.dx, b.dy)
        assert a.bands["B12"] == b.bands["B12"]


def test_replay_bitwise(hr36):
    lr, rec = simulate_lr_stack(hr36, DegradationParams(n_lr_images=3))
    again = replay(hr36, DegradationRecord.from_dict(json.loads(json.dumps(rec.to_dict()))))
    for b in BANDS:
        assert again.series[b].images.tobytes() == lr.series[b].images.tobytes()


def test_replay_zero_shift_matches_fresh_simulation(hr36):
    p = DegradationParams(n_lr_images=2, seed=3)
    _, rec = simulate_lr_stack(hr36, p)
    edited = dataclasses.replace(rec, instances=[dataclasses.replace(i, dx=0.0, dy=0.0) for i in rec.instances])
    got = replay(hr36, edited)
    fresh, _ = simulate_lr_stack(hr36, dataclasses.replace(p, shift_range=0.0))
    for b in BANDS:
        assert got.series[b].images.tobytes() == fresh.series[b].images.tobytes()


def test_replay_mismatch(hr36):
    _, rec = simulate_lr_stack(hr36, DegradationParams(n_lr_images=1))
    with pytest.raises(DegradationError):
        replay({b: hr36[b] for b in BANDS[:5]}, rec)
    with pytest.raises(DegradationError):
        replay({b: v[:18, :18] for b, v in hr36.items()}, rec)


def test_indivisible_patch():
    with pytest.raises(DegradationError):
        simulate_lr_stack({"B02": np.zeros((20, 20))}, DegradationParams())


def test_param_validation():
    with pytest.raises(DegradationError):
        DegradationParams(contrast_range=(1.2, 1.0))
    with pytest.raises(DegradationError):
        DegradationParams(blur_sigma_range=(-0.1, 0.5))
    with pytest.raises(DegradationError):
        DegradationParams(n_lr_images=0)


def test_split_counts():
    assert SplitSpec().counts(4) == {"train": 2, "val": 1, "test": 1}
    assert SplitSpec().counts(10) == {"train": 8, "val": 1, "test": 1}
    assert SplitSpec().counts(100) == {"train": 80, "val": 10, "test": 10}
    assert SplitSpec(1.0, 0.0, 0.0).counts(3) == {"train": 3, "val": 0, "test": 0}
    with pytest.raises(DegradationError):
        SplitSpec(0.5, 0.5, 0.5)


@given(st.integers(1, 200), st.floats(0.05, 0.9), st.floats(0.0, 1.0))
@settings(max_examples=100, deadline=None)
def test_split_counts_sum(n, tr, frac):
    rest = 1.0 - tr
    spec = SplitSpec(tr, rest * frac, rest - rest * frac)
    c = spec.counts(n)
    assert sum(c.values()) == n
    assert min(c.values()) >= 0


def test_tiling_arithmetic():
    assert len(tile_origins(576, 576, 288)) == 4
    assert tile_origins(600, 300, 288) == [(0, 0), (288, 0)]


def _overlap(a, b):
    ar0, ac0, ar1, ac1 = a
    br0, bc0, br1, bc1 = b
    return ar0 < br1 and br0 < ar1 and ac0 < bc1 and bc0 < ac1


def test_build_dataset(tmp_path):
    scenes = {"a": synthetic_scene(72, 72, seed=1), "b": synthetic_scene(36, 54, seed=2)}
    man = build_dataset(scenes, 18, SplitSpec(), DegradationParams(n_lr_images=2, seed=4), tmp_path / "ds")
    assert len(man["patches"]) == 16 + 6
    ds = Dataset(tmp_path / "ds")
    assert {k: len(v) for k, v in man["splits"].items()} == SplitSpec().counts(22)
    entries = ds.entries
    for i, a in enumerate(entries):
        for b in entries[i + 1:]:
            if a.scene_id == b.scene_id and a.split != b.split:
                assert not _overlap(a.footprint(), b.footprint())
    e = ds.split("test")[0]
    lr, hr = ds.load(e)
    patch = {k: v[e.row:e.row + 18, e.col:e.col + 18] for k, v in scenes[e.scene_id].items()}
    for b, v in hr_patch_of(hr).items():
        np.testing.assert_array_equal(v, patch[b].astype(np.float32))
    again = replay(patch, DegradationRecord.from_dict(e.record))
    for b in BANDS:
        assert again.series[b].images.tobytes() == lr.series[b].images.tobytes()


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_build_dataset_deterministic(tmp_path):
    scenes = {"a": synthetic_scene(54, 54, seed=3)}
    p = DegradationParams(n_lr_images=2, seed=9)
    build_dataset(scenes, 18, SplitSpec(), p, tmp_path / "one")
    build_dataset(scenes, 18, SplitSpec(), p, tmp_path / "two")
    assert _tree(tmp_path / "one") == _tree(tmp_path / "two")


def test_scene_smaller_than_patch(tmp_path):
    with pytest.raises(DegradationError):
        build_dataset({"a": synthetic_scene(18, 18)}, 36, SplitSpec(), DegradationParams(), tmp_path)
    with pytest.raises(DegradationError):
        build_dataset({"a": synthetic_scene(36, 36)}, 20, SplitSpec(), DegradationParams(), tmp_path)


def test_noise_only_changes_with_sigma(hr36):
    b = "B02"
    base = BandDegradation(1.0, 0.0, 0.0, 0.0, 7)
    from deepsent.degradation import degrade_band
    clean = degrade_band(hr36[b], b, 0.0, 0.0, base)
    noisy = degrade_band(hr36[b], b, 0.0, 0.0, dataclasses.replace(base, noise_sigma=0.01))
    assert not np.array_equal(clean, noisy)
    assert abs(float((noisy - clean).std()) - 0.01 / 3) < 0.003
