"""Acceptance criteria, one test per criterion.

Each test records its outcome in ``conftest.ACCEPTANCE`` so the terminal
summary prints one PASS/FAIL line per criterion, then asserts.
"""

import json
from fractions import Fraction
import time

import numpy as np
import pytest

import conftest
import test_net
from oracles import (adam_scalar, anova_sums, degrade_by_dft, edge_sharpness_direct, mask_by_hand,
                     mse_two_pass, numeric_grad, rel_error, roi_mean_loops, ssim_direct)
from volsr import cli, metrics, stats
from volsr.kspace import ConfigError, DegradeConfig, build_mask, default_window, degrade, make_training_pair
from volsr.net import (NetworkConfig, concat_backward, concat_forward, conv3d_backward, conv3d_forward,
                       maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, upconv2_backward,
                       upconv2_forward)
from volsr.phantom import corpus_specs, generate, measure_diameter
from volsr.sweep import run_sweep
from volsr.train import (ABLATION_FIELDS, OptimizerState, TrainConfig, ablation, adam_step, loss_l1,
                         loss_l2, score, super_resolve, train)
from volsr.volume import Roi3D, Volume3D

pytestmark = pytest.mark.slow

SEEDS20 = range(20)

# phantom-scale experiment shared by the reproduction, sweep and diameter criteria
DIMS = (64, 64, 32)
WINDOW = default_window(DIMS)
NET = NetworkConfig(levels=3, base_channels=8)
EPOCHS = 15
N_TRAIN, N_TEST = 40, 8


def record(label, ok, detail):
    conftest.ACCEPTANCE.append((label, bool(ok), detail))
    assert ok, f"{label}: {detail}"


def _pairs(specs, cfg=DegradeConfig()):
    return [make_training_pair(generate(s)[0], cfg, DIMS, WINDOW) for s in specs]


@pytest.fixture(scope="module")
def experiment():
    """Train the residual l1 network on 40 phantoms and keep the held-out set."""
    train_specs = corpus_specs(N_TRAIN, 1, dims=DIMS, window=WINDOW)
    test_specs = corpus_specs(N_TEST, 2, dims=DIMS, window=WINDOW)
    train_pairs = _pairs(train_specs)
    t0 = time.perf_counter()
    res = train(train_pairs, NET, TrainConfig(epochs=EPOCHS, seed=0))
    elapsed = time.perf_counter() - t0
    test = [generate(s) for s in test_specs]
    pairs = [make_training_pair(v, DegradeConfig(), DIMS, WINDOW) for v, _ in test]
    return {"params": res.params, "train_pairs": train_pairs, "test": test, "pairs": pairs,
            "train_s": elapsed}


# ---------------------------------------------------------------- 1-3 degradation


def test_01_degradation_matches_dft_oracle():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        data = rng.uniform(size=(8, 8, 8))
        f, p = rng.choice([0.25, 0.5, 0.75, 1.0]), rng.choice([0.625, 0.75, 1.0])
        cfg = DegradeConfig(f, f, p, p)
        worst = max(worst, float(np.abs(degrade(Volume3D(data), cfg).data - degrade_by_dft(data, f, p)).max()))
    elapsed = time.perf_counter() - t0
    record("1 degradation oracle", worst < 1e-10 and elapsed < 10,
           f"max abs deviation {worst:.2e} over 20 volumes in {elapsed:.2f} s")


def test_02_mask_arithmetic():
    kept = build_mask(256, 0.5, 0.75).count
    bad = []
    for n in range(4, 65):
        for f in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0):
            for p in (0.625, 0.75, 0.875, 1.0):
                if Fraction(str(f)) * n < 2:
                    # an empty band is rejected rather than silently zeroing the axis
                    with pytest.raises(ConfigError):
                        build_mask(n, f, p)
                elif not np.array_equal(build_mask(n, f, p).keep, np.fft.fftshift(mask_by_hand(n, f, p))):
                    bad.append((n, f, p))
    record("2 mask arithmetic", kept == 96 and not bad,
           f"n=256 f=0.5 p=0.75 keeps {kept} lines; {len(bad)} mismatches for n in [4, 64]")


def test_03_identity_degradation():
    rng = np.random.default_rng(3)
    worst = 0.0
    # the degraded axes need even lengths: on an odd axis the mask rule drops the +n/2 line
    for shape in ((8, 8, 8), (5, 6, 10), (16, 12, 6)):
        data = rng.uniform(size=shape)
        out = degrade(Volume3D(data), DegradeConfig(1.0, 1.0, 1.0, 1.0)).data
        worst = max(worst, float(np.linalg.norm(out - data) / np.linalg.norm(data)))
    record("3 identity degradation", worst < 1e-10, f"relative error {worst:.2e}")


# ---------------------------------------------------------------- 4-6 network and training


def _layer_error(forward, backward, args, seed):
    rng = np.random.default_rng(1000 + seed)
    out, cache = forward(*args)
    g = rng.normal(size=out.shape)
    grads = backward(g, cache)
    grads = grads if isinstance(grads, tuple) else (grads,)
    return max(rel_error(grad, numeric_grad(lambda: float(np.sum(forward(*args)[0] * g)), arg))
               for arg, grad in zip(args, grads))


def _layer_cases(seed):
    rng = np.random.default_rng(seed)
    shape = test_net._shape
    ci, co = (int(v) for v in rng.integers(1, 4, size=2))
    x = rng.normal(size=(int(rng.integers(1, 3)), ci, *shape(rng, 2, 5)))
    yield "conv3d", conv3d_forward, conv3d_backward, (x, rng.normal(size=(co, ci, 3, 3, 3)), rng.normal(size=co))
    r = rng.normal(size=(1, 2, *shape(rng)))
    r[np.abs(r) < 1e-3] = 0.5
    yield "relu", relu_forward, relu_backward, (r,)
    m = rng.normal(size=(2, 2, *shape(rng, 1, 3, even=True)))
    yield "maxpool", maxpool2_forward, maxpool2_backward, (m,)
    u = rng.normal(size=(1, ci, *shape(rng, 1, 4)))
    yield "upconv", upconv2_forward, upconv2_backward, (u, rng.normal(size=(ci, co, 2, 2, 2)), rng.normal(size=co))
    s = shape(rng)
    yield "concat", concat_forward, concat_backward, (rng.normal(size=(1, 2, *s)), rng.normal(size=(1, 3, *s)))


def _loss_error(fn, seed):
    rng = np.random.default_rng(seed)
    pred = rng.normal(size=(2, 1, 3, 3, 3))
    target = pred + rng.choice([-1, 1], size=pred.shape) * rng.uniform(0.01, 1, size=pred.shape)
    _, grad = fn(pred, target)
    return rel_error(grad, numeric_grad(lambda: fn(pred, target)[0], pred))


def _net_error(seed, residual):
    cfg = NetworkConfig(levels=2, base_channels=2, residual=residual)
    net, params, x = test_net._net(cfg, seed, (1, 1, 8, 8, 8))
    g = np.random.default_rng(seed + 1).normal(size=x.shape)

    def f():
        return float(np.sum(net.forward(x) * g))

    net.forward(x)
    grads, dx = net.backward(g, return_input_grad=True)
    errs = [rel_error(grads[k], numeric_grad(f, params[k])) for k in
            ("enc0.conv0.w", "enc1.conv1.b", "dec0.up.w", "dec0.conv0.w", "head.w", "head.b")]
    return max(errs + [rel_error(dx, numeric_grad(f, x))])


def test_04_gradient_checks():
    t0 = time.perf_counter()
    worst = {}
    for seed in SEEDS20:
        for name, fwd, bwd, args in _layer_cases(seed):
            worst[name] = max(worst.get(name, 0.0), _layer_error(fwd, bwd, args, seed))
        for name, fn in (("l1", loss_l1), ("l2", loss_l2)):
            worst[name] = max(worst.get(name, 0.0), _loss_error(fn, seed))
        # the residual add and final ReLU are only reachable through the whole net
        worst["net residual"] = max(worst.get("net residual", 0.0), _net_error(seed, True))
        worst["net plain"] = max(worst.get("net plain", 0.0), _net_error(seed, False))
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    record("4 gradient checks", top < 1e-5 and elapsed < 120,
           f"worst relative error {top:.1e} ({max(worst, key=worst.get)}) over 20 seeds in {elapsed:.0f} s")


def test_05_adam_trajectory():
    grads = np.random.default_rng(5).normal(size=10)
    expected = adam_scalar(0.3, grads.tolist())
    params, state = {"t": np.array([0.3])}, OptimizerState()
    worst = 0.0
    for g, e in zip(grads, expected):
        adam_step(params, {"t": np.array([g])}, state, 1e-3)
        worst = max(worst, abs(float(params["t"][0]) - e))
    record("5 ADAM trajectory", worst < 1e-12, f"max deviation {worst:.1e} over 10 steps")


def test_06_overfit_smoke():
    dims = (32, 32, 32)
    # noiseless, so the targets are learnable; target noise alone sets an l1 floor near 0.3 x initial
    specs = corpus_specs(4, 3, dims=dims, n_vessels=2, roi_size=1, window=(24, 24), noise_sigma=0.0)
    pairs = [make_training_pair(generate(s)[0], DegradeConfig(), dims, (32, 32)) for s in specs]
    t0 = time.perf_counter()
    # 4 volumes in batches of 2 is 2 steps per epoch
    res = train(pairs, NetworkConfig(levels=2, base_channels=8),
                TrainConfig(loss="l1", lr=1e-3, batch_size=2, epochs=150, seed=0))
    elapsed = time.perf_counter() - t0
    losses = [row[2] for row in res.history]
    ratio = losses[-1] / losses[0]
    record("6 overfit smoke", len(losses) == 300 and ratio < 0.1 and elapsed < 600,
           f"final/initial loss {ratio:.3f} after {len(losses)} steps in {elapsed:.0f} s")


# ---------------------------------------------------------------- 7-9 experiments


def test_07_super_resolution_direction(experiment):
    lr = [p[0] for p in experiment["pairs"]]
    hr = [p[1] for p in experiment["pairs"]]
    sr_s = score(super_resolve(NET, experiment["params"], lr), hr)
    lr_s = score(lr, hr)
    ok = sr_s["ssim_mean"] > lr_s["ssim_mean"] and sr_s["mse_mean"] < lr_s["mse_mean"]
    record("7 super-resolution direction", ok and experiment["train_s"] < 45 * 60,
           f"SSIM {lr_s['ssim_mean']:.4f} -> {sr_s['ssim_mean']:.4f}, "
           f"MSE {lr_s['mse_mean']:.2e} -> {sr_s['mse_mean']:.2e}, training {experiment['train_s']:.0f} s")


ABLATION_TRAIN, ABLATION_EPOCHS = N_TRAIN, EPOCHS


def test_08_ablation_direction(experiment, tmp_path):
    pairs = experiment["train_pairs"][:ABLATION_TRAIN]
    rep = ablation(pairs, experiment["pairs"], NET, TrainConfig(epochs=ABLATION_EPOCHS, seed=0))
    rep.write(tmp_path / "ablation.csv")
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    schema = (lines[0].split(",") == ABLATION_FIELDS and len(lines) == 5
              and [(r["architecture"], r["loss"]) for r in rep.rows]
              == [("residual_unet", "l1"), ("residual_unet", "l2"), ("unet", "l1"), ("unet", "l2")])
    base = rep.baseline["ssim_mean"]
    beats = all(r["ssim_mean"] > base for r in rep.rows)
    detail = ", ".join(f"{r['architecture']}/{r['loss']} {r['ssim_mean']:.4f}" for r in rep.rows)
    record("8 ablation direction", schema and beats, f"LR {base:.4f}; {detail}")


def test_09_sweep_peak(experiment):
    clean = [v for v, _ in experiment["test"]]
    rep = run_sweep(NET, experiment["params"], clean, DegradeConfig(), DIMS, WINDOW)
    best = rep.best_fraction()
    curve = " ".join(f"{s:.3f}" for s in rep.column("ssim_mean"))
    record("9 sweep peak", len(rep.rows) == 10 and best in (0.4, 0.5, 0.6),
           f"argmax fraction {best:.1f}; SR SSIM by fraction {curve}")


# ---------------------------------------------------------------- 10-11 oracles


def test_10_metric_oracles():
    rng = np.random.default_rng(10)
    worst = {"ssim": 0.0, "mse": 0.0, "edge": 0.0, "snr": 0.0, "cnr": 0.0}
    for _ in range(20):
        a, b = rng.uniform(size=(2, 8, 8, 8))
        worst["ssim"] = max(worst["ssim"], abs(metrics.ssim(a, b) - ssim_direct(a, b)))
        worst["mse"] = max(worst["mse"], abs(metrics.mse(a, b) - mse_two_pass(a, b)))
        data = rng.uniform(0.1, 1.0, size=(12, 12, 12))
        spacing = tuple(rng.uniform(0.8, 1.5, size=3))
        center = np.asarray(data.shape) * np.asarray(spacing) / 2
        contour = metrics.circle_contour(center, 1.5, normal=rng.normal(size=3), n_points=90)
        v = Volume3D(data, spacing)
        worst["edge"] = max(worst["edge"], abs(metrics.edge_sharpness(v, contour)
                                               - edge_sharpness_direct(data, spacing, contour)))
        boxes = []
        for _ in range(3):
            lo = rng.integers(0, 8, size=3)
            hi = lo + rng.integers(1, 5, size=3)
            boxes.append((lo, hi, Roi3D(lo, hi)))
        (lo0, hi0, r0), (lo1, hi1, r1), (lo2, hi2, r2) = boxes
        m0, m1, m2 = (roi_mean_loops(data, lo, hi) for lo, hi in ((lo0, hi0), (lo1, hi1), (lo2, hi2)))
        worst["snr"] = max(worst["snr"], abs(metrics.snr(v, r0, r1) - m0 / m1))
        worst["cnr"] = max(worst["cnr"], abs(metrics.cnr(v, r0, r2) - m0 / m2))
    # hard step on a 1 mm grid: square rod with walls on voxel faces
    idx = np.arange(24) + 0.5
    inside = np.abs(idx - 12) < 6
    rod = Volume3D(((inside[:, None, None] & inside[None, :, None]) * np.ones((1, 1, 24))).astype(float))
    square = np.array([[6.0, 6.0, 12.0], [18.0, 6.0, 12.0], [18.0, 18.0, 12.0], [6.0, 18.0, 12.0]])
    step = metrics.edge_sharpness(rod, square)
    top = max(worst.values())
    # "exactly" in double precision: the 0.1 mm profile step is not a binary fraction
    record("10 metric oracles", top < 1e-9 and abs(step - 1.0) < 1e-12,
           f"worst deviation {top:.1e} ({max(worst, key=worst.get)}); hard-step edge {step!r} per mm")


def test_11_statistics_oracles():
    bias, lo, hi = stats.bland_altman([1, 2, 3], [2, 2, 5])
    ba_err = max(abs(bias - 1), abs(lo + 0.96), abs(hi - 2.96))
    rng = np.random.default_rng(11)
    icc_err = 0.0
    for _ in range(20):
        n, k = int(rng.integers(2, 12)), int(rng.integers(2, 5))
        table = rng.normal(size=(n, 1)) + rng.uniform(0.1, 2) * rng.normal(size=(n, k))
        msb, msw = anova_sums(table)
        icc_err = max(icc_err, abs(stats.icc_oneway(table)[0] - (msb - msw) / (msb + (k - 1) * msw)))
    med_err = max(abs(stats.f_quantile(0.5, d, d) - 1) for d in (1, 2, 3, 5, 10, 30, 100))
    trip = max(abs(stats.f_cdf(stats.f_quantile(p, d1, d2), d1, d2) - p)
               for p in (0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.975, 0.99)
               for d1 in (1, 2, 7, 40) for d2 in (1, 3, 12, 90))
    ok = ba_err < 1e-12 and icc_err < 1e-12 and med_err < 1e-8 and trip < 1e-9
    record("11 statistics oracles", ok,
           f"Bland-Altman {ba_err:.1e}, ICC {icc_err:.1e}, F median {med_err:.1e}, CDF round trip {trip:.1e}")


# ---------------------------------------------------------------- 12 diameters


def test_12_diameter_direction(experiment):
    lo = [(n - w) // 2 for n, w in zip(DIMS[:2], WINDOW)]
    lr = [p[0] for p in experiment["pairs"]]
    sr = super_resolve(NET, experiment["params"], lr)
    diam = {"clean": [], "lr": [], "sr": []}
    for (_, truth), (lr_v, hr_v), sr_v in zip(experiment["test"], experiment["pairs"], sr):
        off = np.array([lo[0] * hr_v.spacing[0], lo[1] * hr_v.spacing[1], 0.0])
        for vt in truth.vessels:
            c = np.asarray(vt.center) - off
            for key, v in (("clean", hr_v), ("lr", lr_v), ("sr", sr_v)):
                diam[key].append(measure_diameter(v, c, vt.axis))
    m = {k: float(np.mean(v)) for k, v in diam.items()}
    n = len(diam["clean"])
    ok = n >= 20 and m["lr"] >= m["clean"] and abs(m["sr"] - m["clean"]) < abs(m["lr"] - m["clean"])
    record("12 diameter direction", ok,
           f"{n} vessels; mean FWHM clean {m['clean']:.3f}, LR {m['lr']:.3f}, SR {m['sr']:.3f} mm")


# ---------------------------------------------------------------- 13 determinism


def _e2e(out):
    assert cli.main(["e2e", "--seed", "7", "--out-dir", str(out), "-q"]) == 0
    return json.loads((out / "manifest.json").read_text())


def test_13_e2e_determinism(tmp_path):
    a, b = _e2e(tmp_path / "a"), _e2e(tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    artifacts = [p for p in files_a if p.name != "manifest.json"]
    same = files_a == files_b and all(
        (tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes() for p in artifacts)
    checks = a["outputs"] == b["outputs"] and len(a["outputs"]) == len(artifacts)
    strip = ("timings", "wall_time_s")
    rest_equal = {k: v for k, v in a.items() if k not in strip} == {k: v for k, v in b.items() if k not in strip}
    stages = [s["name"] for s in a["stages"]]
    rep = {t: np.mean([float(r.split(",")[1]) for r in
                       (tmp_path / "a" / f"report_{t}.csv").read_text().splitlines()[1:]]) for t in ("lr", "sr")}
    record("13 e2e determinism", same and checks and rest_equal,
           f"{len(artifacts)} artifacts byte-identical across two seed-7 runs; "
           f"held-out SSIM LR {rep['lr']:.4f} -> SR {rep['sr']:.4f}")
    # the stage graph and held-out improvement are part of the same contract; reuse the run
    assert len(stages) == 7 and rep["sr"] > rep["lr"], (stages, rep)
