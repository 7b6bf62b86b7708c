"""End-to-end acceptance gate.

Each numbered test prints exactly one PASS/FAIL line (bypassing pytest's
capture so it always reaches the terminal) and asserts the same condition.
"""

import sys
import time

import numpy as np
import pytest
import scipy.stats

from conftest import randomize_out_convs, tiny_config
from layerdiff.crops import CropPlan, crop_array, make_crop_plan
from layerdiff.data import BACKGROUND_GRAY, generate_shapes, tokenize
from layerdiff.noise import bilinear_downsample, sample_gaussian, sinc_downsample
from layerdiff.params import finite_diff_check
from layerdiff.sampler import SamplerConfig, sample
from layerdiff.schedule import ShiftConfig, cosine_logsnr, shifted_point
from layerdiff.tensor import Tensor
from layerdiff.train import (Adam, TrainConfig, fit, layered_loss,
                             prepare_step_inputs, train_step)
from layerdiff.unet import (ModelConfig, build_model, count_flops,
                            single_resolution_config, stack_init)


def _report(num: int, name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    line = f"ACCEPTANCE {num} [{name}]: {status}{suffix}"
    print(f"\n{line}")
    print(line, file=sys.__stdout__)  # visible even under pytest capture
    assert ok, f"acceptance criterion {num} ({name}) failed: {detail}"


def test_criterion_01_sinc_noise_stays_white_gaussian():
    start = time.perf_counter()
    fields = sample_gaussian(1, 16, 16, seed=0, batch=10**4)
    down = sinc_downsample(fields.data, 2).reshape(10**4, 64)
    var = down.var(axis=0, ddof=1)
    corr = np.corrcoef(down, rowvar=False)
    off = np.abs(corr[~np.eye(64, dtype=bool)])
    normal_ok = True
    for pix in range(0, 64, 9):
        res = scipy.stats.anderson(down[:, pix], dist="norm")
        crit_1pct = res.critical_values[list(res.significance_level).index(1.0)]
        normal_ok &= res.statistic < crit_1pct
    elapsed = time.perf_counter() - start
    ok = (0.94 <= var.min() and var.max() <= 1.06 and off.max() < 0.05
          and normal_ok and elapsed < 60)
    _report(1, "sinc noise whiteness/gaussianity", ok,
            f"var [{var.min():.3f},{var.max():.3f}], max|rho| {off.max():.3f}, "
            f"AD ok {normal_ok}, {elapsed:.1f}s")


def test_criterion_02_bilinear_noise_loses_variance():
    rng = np.random.default_rng(1)
    noise = rng.standard_normal((2000, 1, 16, 16))
    var = bilinear_downsample(noise, 2).var()
    ok = abs(var - 0.25) <= 0.03
    _report(2, "bilinear contrast", ok, f"variance {var:.4f} vs 0.25 +/- 0.03")


def test_criterion_03_layered_loss_matches_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        k = int(rng.integers(1, 4))
        preds = [Tensor(rng.normal(size=(2, 3, 8, 8))) for _ in range(k)]
        targets = [rng.normal(size=(2, 3, 8, 8)) for _ in range(k)]
        weights = [float(rng.uniform(0.1, 2.0)) for _ in range(k)]
        got = layered_loss(preds, targets, weights).item()
        want = sum(w * np.mean((p.data - t) ** 2)
                   for p, t, w in zip(preds, targets, weights))
        worst = max(worst, abs(got - want))
    single = layered_loss([preds[0]], [targets[0]], [1.0]).item()
    single_want = float(np.mean((preds[0].data - targets[0]) ** 2))
    ok = worst <= 1e-6 and abs(single - single_want) <= 1e-12
    _report(3, "summed objective equals loop oracle", ok,
            f"max |delta| {worst:.2e}")


def test_criterion_04_end_to_end_gradient_check():
    start = time.perf_counter()
    cfg = ModelConfig(resolutions=(16, 8), hidden_dims=(8, 8),
                      inner_dims=(8,), blocks_per_level=1, embed_dim=8,
                      groups=4, precision="f64")
    model = build_model(cfg, seed=0)
    randomize_out_convs(model, seed=1)
    ds = generate_shapes(2, 16, seed=0)
    images, tokens = ds.stacked()
    tc = TrainConfig(batch_size=2, shifts=(1.0, 0.125), total_steps=1)
    latents, targets, t, _ = prepare_step_inputs(
        cfg, images, tc, np.random.default_rng(0))

    def f(params):
        preds = model.forward(latents, t, tokens)
        return layered_loss(preds, targets, tc.weights_for(2))

    coords = sum(min(p.data.size, 2) for _, p in model.params.items())
    err = finite_diff_check(f, model.params, max_coords_per_param=2,
                            rng=np.random.default_rng(3))
    elapsed = time.perf_counter() - start
    ok = err < 1e-4 and coords >= 200 and elapsed < 300
    _report(4, "train-step finite-difference gradients", ok,
            f"max rel err {err:.2e} over {coords} coords, {elapsed:.0f}s")


def test_criterion_05_crop_coherence():
    start = time.perf_counter()
    doubling_ok = True
    for seed in range(10**4):
        plan = make_crop_plan(np.random.default_rng(seed), 16, 3)
        x, y, w, h = plan.base_rect
        rects = plan.image_rects
        for level in range(2):
            f = 2 ** (2 - level)
            doubling_ok &= rects[level] == (x * f, y * f, w * f, h * f)

    rng = np.random.default_rng(0)
    img = rng.normal(size=(2, 3, 64, 64))
    commute = 0.0
    for seed in range(300):
        plan = make_crop_plan(np.random.default_rng(seed), 16, 3)
        rects = plan.image_rects
        a = bilinear_downsample(crop_array(img, rects[0]), 2)
        b = crop_array(bilinear_downsample(img, 2), rects[1])
        commute = max(commute, float(np.abs(a - b).max()))

    cfg = tiny_config()
    model = build_model(cfg, seed=4)
    randomize_out_convs(model)
    latents = [rng.normal(size=(2, 3, r, r)).astype(np.float32)
               for r in cfg.resolutions]
    t = rng.uniform(0.1, 0.9, size=2)
    tokens = np.stack([tokenize("red circle center")] * 2)
    plain = model.forward(latents, t, tokens)
    full = model.forward(latents, t, tokens,
                         crop_plan=CropPlan.full(cfg.base_res, cfg.num_levels))
    forward_gap = max(float(np.abs(a.data - b.data).max())
                      for a, b in zip(plain, full))
    elapsed = time.perf_counter() - start
    ok = (doubling_ok and commute <= 1e-6 and forward_gap <= 1e-5
          and elapsed < 120)
    _report(5, "coordinated crop coherence", ok,
            f"doubling {doubling_ok}, commutation {commute:.2e}, "
            f"full-crop forward gap {forward_gap:.2e}, {elapsed:.0f}s")


def test_criterion_06_isolated_downsampling():
    start = time.perf_counter()
    cfg = tiny_config()
    model = build_model(cfg, seed=5)
    randomize_out_convs(model)
    rng = np.random.default_rng(6)
    latents = [rng.normal(size=(2, 3, r, r)).astype(np.float32)
               for r in cfg.resolutions]
    t = rng.uniform(0.1, 0.9, size=2)
    tokens = np.stack([tokenize("blue square left")] * 2)
    probe_a, probe_b = {}, {}
    model.forward(latents, t, tokens, probe=probe_a)
    model.forward([np.zeros_like(latents[0])] + latents[1:], t, tokens,
                  probe=probe_b)
    identical = (
        np.array_equal(probe_a["inner.bottom"], probe_b["inner.bottom"])
        and np.array_equal(probe_a["trunk.pre_upsample.depth0"],
                           probe_b["trunk.pre_upsample.depth0"])
    )
    changed = not np.array_equal(probe_a["trunk.pre_upsample.depth1"],
                                 probe_b["trunk.pre_upsample.depth1"])
    elapsed = time.perf_counter() - start
    ok = identical and changed and elapsed < 30
    _report(6, "higher levels isolated from trunk", ok,
            f"lower trunk bit-identical {identical}, "
            f"upper stage responds {changed}")


def test_criterion_07_schedule_properties():
    cfg = ShiftConfig(shifts=(1.0, 0.125, 0.03125))
    ts = np.linspace(0.0, 1.0, 10**4)
    worst_vp = 0.0
    ordered = True
    level0_match = True
    for t in ts:
        pts = [shifted_point(float(t), lvl, cfg) for lvl in range(3)]
        worst_vp = max(worst_vp, max(abs(p.alpha**2 + p.sigma**2 - 1.0)
                                     for p in pts))
        ordered &= pts[0].lam > pts[1].lam > pts[2].lam
        level0_match &= pts[0].lam == cosine_logsnr(float(t))
    ok = worst_vp < 1e-9 and ordered and level0_match
    _report(7, "shifted schedule properties", ok,
            f"max |a^2+s^2-1| {worst_vp:.1e}, ordered {ordered}, "
            f"base unshifted {level0_match}")


def test_criterion_08_stacking_partition():
    short = build_model(tiny_config(resolutions=(8,), hidden_dims=(16,)),
                        seed=0)
    snapshot = short.params.state_dict()
    tall, manifest = stack_init(tiny_config(), snapshot, seed=1)
    names = set(tall.params.names())
    copied, fresh = set(manifest["copied"]), set(manifest["fresh"])
    partition_ok = (copied | fresh == names and not (copied & fresh)
                    and copied == names & set(snapshot))
    bits_ok = all(np.array_equal(tall.params[n].data, snapshot[n])
                  for n in copied)
    ok = partition_ok and bits_ok and len(fresh) > 0
    _report(8, "model stacking copy/fresh partition", ok,
            f"{len(copied)} copied, {len(fresh)} fresh, "
            f"bit-exact {bits_ok}")


def test_criterion_09_flops_direction():
    ref = ("reference at publication scale (hyperparameters unpublished, "
           "not reproducible here): 2.04e12 vs 2.20e12; 2.79e12 vs 3.24e12")
    results = []
    for cfg in (
        tiny_config(resolutions=(32, 16), hidden_dims=(8, 16)),
        tiny_config(resolutions=(64, 32, 16), hidden_dims=(8, 8, 16)),
    ):
        layered = count_flops(cfg).total
        single = count_flops(single_resolution_config(cfg)).total
        results.append((len(cfg.resolutions), layered, single))
    print(f"\n{ref}")
    for levels, layered, single in results:
        print(f"  {levels}-level: layered {layered:.4e} vs single "
              f"{single:.4e} ({layered / single:.1%})")
    ok = all(layered < single for _, layered, single in results)
    _report(9, "layered FLOPs strictly below single-resolution", ok,
            ", ".join(f"{lv}-level {la / si:.1%}"
                      for lv, la, si in results))


@pytest.fixture(scope="module")
def desk_scale_run():
    cfg = ModelConfig(resolutions=(32, 16), hidden_dims=(16, 32),
                      inner_dims=(32, 32), blocks_per_level=1,
                      embed_dim=32, groups=8)
    model = build_model(cfg, seed=0)
    dataset = generate_shapes(2048, 32, seed=0)
    tc = TrainConfig(batch_size=16, learning_rate=3e-4, total_steps=2000,
                     seed=0, shifts=(1.0, 0.125), warmup_steps=100,
                     checkpoint_every=0)
    start = time.perf_counter()
    metrics = fit(model, dataset, tc)
    return model, tc, metrics, time.perf_counter() - start


def test_criterion_10_desk_scale_training(desk_scale_run):
    model, tc, metrics, train_seconds = desk_scale_run
    head = float(np.mean([m.loss_total for m in metrics[:100]]))
    tail = float(np.mean([m.loss_total for m in metrics[-100:]]))

    scfg = SamplerConfig(caption="red circle center", num_steps=64, seed=1,
                         shifts=tc.shifts)
    img = sample(model, scfg)
    deterministic = np.array_equal(img, sample(model, scfg))

    img01 = (img + 1.0) / 2.0
    blob = np.abs(img01 - BACKGROUND_GRAY).max(axis=0) > 0.1
    if not blob.any():
        blob = np.zeros(img01.shape[1:], dtype=bool)
        blob[12:20, 12:20] = True
    red, blue = img01[0][blob].mean(), img01[2][blob].mean()

    ok = (tail < 0.5 * head and deterministic and red > blue
          and train_seconds < 3600)
    _report(10, "desk-scale training run", ok,
            f"loss {head:.4f}->{tail:.4f} (ratio {tail / head:.2f}), "
            f"deterministic {deterministic}, red {red:.3f} vs blue "
            f"{blue:.3f}, {train_seconds / 60:.1f} min")


def test_criterion_11_noise_mode_ablation_plumbing():
    cfg = tiny_config()
    dataset = generate_shapes(16, 16, seed=0)
    runs = {}
    for mode in ("sinc", "independent"):
        model = build_model(cfg, seed=0)
        tc = TrainConfig(batch_size=4, total_steps=3, seed=0,
                         shifts=(1.0, 0.125), noise_mode=mode,
                         checkpoint_every=0)
        opt = Adam(tc)
        steps = [train_step(model, dataset.stacked(list(range(4))), s, tc, opt)
                 for s in range(3)]
        runs[mode] = (model, steps)
    shapes_match = all(
        runs["sinc"][0].params[n].data.shape
        == runs["independent"][0].params[n].data.shape
        for n in runs["sinc"][0].params.names()
    )
    schema_match = all(
        len(a.loss_per_level) == len(b.loss_per_level)
        and set(vars(a)) == set(vars(b))
        for a, b in zip(runs["sinc"][1], runs["independent"][1])
    )
    ok = shapes_match and schema_match
    _report(11, "noise-mode ablation plumbing", ok,
            f"shapes match {shapes_match}, metrics schema match {schema_match}")
