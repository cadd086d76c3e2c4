"""Acceptance gate: one test per primary criterion, each reporting a PASS/FAIL line."""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from deepsent.bands import BANDS, group_of, parse_band_list
from deepsent.cli import ABLATION_BAND_SETS, main
from deepsent.crossres import UpsampleBlock
from deepsent.degradation import Dataset, DegradationParams, SplitSpec, build_dataset, simulate_lr_stack
from deepsent.fusion import FeatureVolume, FusionBlock, fuse_unpadded, pad_to_pow2, recursive_fuse
from deepsent.metrics import PSNR_CAP_DB, artifact_heatmap, cpsnr, cssim, sam_consistency
from deepsent.network import DeepSent, NetworkConfig, forward_all_bands, stack_inputs
from deepsent.resample import resize
from deepsent.scene import BandSeries, BandStatistics, SceneStack
from deepsent.synthetic import synthetic_scene
from deepsent.training import TrainConfig, bicubic_baseline, evaluate_split, train

from conftest import ACCEPTANCE_LINES, fd_param_check, random_stack
from test_metrics import cmse_oracle, cssim_oracle

TEN = parse_band_list("10m")


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# -- 1 -------------------------------------------------------------------------


def test_criterion_1_fusion_padding_and_gating():
    t0 = time.perf_counter()
    block = FusionBlock(8, torch.Generator().manual_seed(0))
    bad = []
    with torch.no_grad():
        for t in range(1, 17):
            x = torch.randn(2, t, 8, 6, 6, generator=torch.Generator().manual_seed(t))
            padded = recursive_fuse(pad_to_pow2(FeatureVolume.full(x)), block)
            if not torch.equal(padded, fuse_unpadded(x, block)):
                bad.append(f"pad T={t}")
            # gating: garbage in masked slots must not leak, and an all-masked partner is a no-op
            vol = pad_to_pow2(FeatureVolume.full(x))
            junk = vol.values.clone()
            junk[:, t:] = 1e3
            if not torch.equal(recursive_fuse(FeatureVolume(junk, vol.mask), block), padded):
                bad.append(f"gate T={t}")
        x = torch.randn(1, 2, 8, 6, 6)
        if not torch.equal(recursive_fuse(FeatureVolume(x, torch.tensor([1.0, 0.0])), block), x[:, 0]):
            bad.append("masked pair")
        if not torch.equal(recursive_fuse(FeatureVolume.full(x), block), x[:, 0] + block(x[:, :1], x[:, 1:])[:, 0]):
            bad.append("gated update")
    dt = time.perf_counter() - t0
    report(1, not bad and dt < 10, f"bitwise padding/gating for T=1..16, mismatches={bad}, {dt:.2f}s")


# -- 2 -------------------------------------------------------------------------


def test_criterion_2_shape_contract():
    stack = random_stack(np.random.default_rng(0), 96, 96, 9)
    model = DeepSent(NetworkConfig.micro(seed=0), BandStatistics.from_stacks([stack]))
    shapes = {b: stack.series[b].shape for b in BANDS}
    errors = []
    out = forward_all_bands(stack, model)
    if sorted(out) != sorted(BANDS) or any(v.shape != (288, 288) for v in out.values()):
        errors.append("full stack")
    for name, spec in ABLATION_BAND_SETS.items():
        subsets = [[b] for b in TEN] if spec is None else [parse_band_list(spec)]
        for bands in subsets:
            res = forward_all_bands(stack.subset(bands), model, bands if spec is None else TEN)
            if any(v.shape != (288, 288) or not np.isfinite(v).all() for v in res.values()):
                errors.append(name)
    for n in range(1, 10):
        res = forward_all_bands(stack.subset(None, n), model, ["B02", "B05", "B09"])
        if any(v.shape != (288, 288) for v in res.values()):
            errors.append(f"N_I={n}")
    ok = not errors and shapes["B02"] == (96, 96) and shapes["B05"] == (48, 48) and shapes["B01"] == (16, 16)
    report(2, ok, f"96/48/16 -> 288 for 12 bands, 5 band sets, N_I 1..9; errors={errors}")


# -- 3 -------------------------------------------------------------------------


def test_criterion_3_gradient_checks():
    t0 = time.perf_counter()
    fb = FusionBlock(4, torch.Generator().manual_seed(1)).double()
    x = torch.randn(2, 4, 4, 5, 5, dtype=torch.float64)
    vol = FeatureVolume(x, torch.tensor([1.0, 1.0, 1.0, 0.0], dtype=torch.float64))
    w = torch.randn(2, 4, 5, 5, dtype=torch.float64)
    e_fuse = fd_param_check(lambda: (recursive_fuse(vol, fb) * w).sum(), list(fb.parameters()))

    ub = UpsampleBlock(4, 3, torch.Generator().manual_seed(2)).double()
    xu = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    wu = torch.randn(1, 4, 9, 9, dtype=torch.float64)
    e_up = fd_param_check(lambda: (ub(xu) * wu).sum(), list(ub.parameters()))

    scene = random_stack(np.random.default_rng(7), 12, 12, 2, ["B02", "B05", "B09"])
    m = DeepSent(NetworkConfig.micro(seed=2, merge_init="normal"), BandStatistics.from_stacks([scene])).double()
    inputs = stack_inputs([scene], torch.float64)
    we = torch.randn(36, 36, dtype=torch.float64)
    loss = lambda: (m(inputs, "B05")[0] * we).sum()
    loss().backward()
    used = [p for p in m.parameters() if p.grad is not None]
    n = max(20, sum(p.numel() for p in used) // 100)
    e_net = fd_param_check(loss, used, n_samples=n)
    dt = time.perf_counter() - t0
    ok = e_fuse < 1e-3 and e_up < 1e-3 and e_net < 1e-2 and dt < 120
    report(3, ok, f"fusion {e_fuse:.1e}, upsample {e_up:.1e}, end-to-end {e_net:.1e}, {dt:.1f}s")


# -- 4 -------------------------------------------------------------------------


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(4)
    worst_p, worst_s, n_ssim = 0.0, 0.0, 0
    for _ in range(200):
        h, w = (int(v) for v in rng.integers(11, 17, size=2))
        d = int(rng.integers(0, 4))
        d_ssim = int(rng.integers(0, (min(h, w) - 11) // 2 + 1))
        hr = rng.uniform(0, 1, (h, w))
        sr = hr + rng.normal(0, 0.1, (h, w))
        want = cmse_oracle(sr, hr, d)
        want_p = min(PSNR_CAP_DB, 10 * np.log10(1.0 / want)) if want >= 1e-10 else PSNR_CAP_DB
        worst_p = max(worst_p, abs(cpsnr(sr, hr, d) - want_p))
        worst_s = max(worst_s, abs(cssim(sr, hr, d_ssim) - cssim_oracle(sr, hr, d_ssim)))
        n_ssim += 1
    x = rng.uniform(0, 1, (16, 16))
    cap = cpsnr(x + 0.25, x, 3) == PSNR_CAP_DB
    big = rng.uniform(0, 1, (22, 22))
    base = big[3:19, 3:19]
    shifts = [cpsnr(big[3 + dy:19 + dy, 3 + dx:19 + dx], base, 3) == PSNR_CAP_DB
              for dy in range(-3, 4) for dx in range(-3, 4)]
    ok = worst_p <= 1e-9 and worst_s <= 1e-9 and n_ssim > 0 and cap and all(shifts)
    report(4, ok, f"200 pairs, max |dPSNR|={worst_p:.1e}, max |dSSIM|={worst_s:.1e} ({n_ssim} cSSIM), "
                  f"cap={cap}, shift invariance={all(shifts)}")


# -- 5, 6, 7: one shared micro training run ------------------------------------------------


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    scenes = {f"s{i}": synthetic_scene(144, 144, seed=i) for i in range(3)}
    build_dataset(scenes, 72, SplitSpec(8 / 12, 1 / 12, 3 / 12), DegradationParams(seed=1), root)
    ds = Dataset(root)
    cfg = TrainConfig(learning_rate=2e-4, max_epochs=200, patience=150, max_steps=300,
                      targets_per_patch=0, n_images_min=1, n_images_max=9)
    t0 = time.perf_counter()
    ckpt = train(ds, cfg, NetworkConfig.micro(seed=0))
    return ds, ckpt, time.perf_counter() - t0


def test_criterion_5_overfit_sanity(toy_run):
    ds, ckpt, dt = toy_run
    n_train = len(ds.split("train"))
    base = evaluate_split(bicubic_baseline, ds, "train", with_ssim=False).mean_cpsnr()
    fit = evaluate_split(ckpt.model, ds, "train", with_ssim=False).mean_cpsnr()
    ok = n_train == 8 and ckpt.state.step <= 300 and fit - base >= 1.0 and dt < 600
    report(5, ok, f"{n_train} patches, {ckpt.state.step} steps: model {fit:.2f} dB vs bicubic {base:.2f} dB "
                  f"(gain {fit - base:+.2f}), {dt:.0f}s")


def test_criterion_6_temporal_trend(toy_run):
    ds, ckpt, _ = toy_run
    n1 = evaluate_split(ckpt.model, ds, "test", n_images=1, with_ssim=False).mean_cpsnr()
    n4 = evaluate_split(ckpt.model, ds, "test", n_images=4, with_ssim=False).mean_cpsnr()
    report(6, n4 >= n1 - 0.1, f"held-out N_I=4 {n4:.2f} dB vs N_I=1 {n1:.2f} dB")


def test_criterion_7_spectral_trend(toy_run):
    ds, ckpt, _ = toy_run
    full = evaluate_split(ckpt.model, ds, "test", targets=TEN, with_ssim=False).mean_cpsnr()
    single = float(np.mean([evaluate_split(ckpt.model, ds, "test", bands=[b], with_ssim=False).mean_cpsnr()
                            for b in TEN]))
    report(7, full >= single - 0.1, f"10 m bands: 12-band input {full:.2f} dB vs single-band {single:.2f} dB")


# -- 8 -------------------------------------------------------------------------


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_cli_determinism(tmp_path):
    cfg = {"simulation": {"patch_size": 36, "split": {"train": 0.5, "val": 0.25, "test": 0.25},
                          "degradation": {"n_lr_images": 3}},
           "network": {"feature_channels": 4, "eb_resblocks": 1},
           "training": {"max_epochs": 2, "patience": 1, "seed": 5}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["synth-hr", "--out", str(tmp_path / "hr"), "--n-scenes", "2", "--size", "72"]) == 0
    codes = []
    for run in ("a", "b"):
        codes.append(main(["simulate", "--hr", str(tmp_path / "hr"), "--out", str(tmp_path / f"ds_{run}"),
                           "--config", str(tmp_path / "cfg.json"), "--seed", "9"]))
        codes.append(main(["train", "--dataset", str(tmp_path / "ds_a"), "--out", str(tmp_path / f"run_{run}"),
                           "--config", str(tmp_path / "cfg.json")]))
    same_ds = _tree(tmp_path / "ds_a") == _tree(tmp_path / "ds_b")
    log_a = (tmp_path / "run_a" / "loss_log.jsonl").read_bytes()
    same_log = log_a == (tmp_path / "run_b" / "loss_log.jsonl").read_bytes()
    same_model = (tmp_path / "run_a" / "model.dpsnt").read_bytes() == (tmp_path / "run_b" / "model.dpsnt").read_bytes()
    ok = codes == [0, 0, 0, 0] and same_ds and same_log and same_model and len(log_a) > 0
    report(8, ok, f"exit codes {codes}, dataset identical={same_ds}, loss log identical={same_log}, "
                  f"weights identical={same_model}")


# -- 9 -------------------------------------------------------------------------


def test_criterion_9_consistency_protocol():
    hr = synthetic_scene(72, 72, seed=11)
    lr = simulate_lr_stack(hr, DegradationParams(n_lr_images=4, seed=2))[0]
    h10, w10 = lr.grid10()
    stub = {b: resize(s.images[0].astype(np.float64), (3 * h10, 3 * w10)) for b, s in lr.series.items()}
    cons = sam_consistency(stub, lr)

    rng = np.random.default_rng(9)
    const = SceneStack({b: BandSeries(b, np.repeat(rng.uniform(0, 0.5, (1,) + (36 // group_of(b).downscale_vs_10m,) * 2),
                                                   5, axis=0)) for b in BANDS})
    zero = not artifact_heatmap(const).any()

    flip = SceneStack({b: BandSeries(b, np.repeat(rng.uniform(0, 0.5, (1,) + (36 // group_of(b).downscale_vs_10m,) * 2),
                                                  6, axis=0)) for b in BANDS})
    imgs = flip.series["B04"].images.copy()
    imgs[3, 20, 9] += 0.8
    flip.series["B04"] = BandSeries("B04", imgs)
    heat = artifact_heatmap(flip)
    y, x = np.unravel_index(np.argmax(heat), heat.shape)
    near = abs(int(y) - 20) <= 1 and abs(int(x) - 9) <= 1
    ok = cons <= 1e-3 and zero and near
    report(9, ok, f"bicubic stub consistency {cons:.2e} rad, constant heat-map zero={zero}, "
                  f"flip peak at {(int(y), int(x))} vs (20, 9)")
