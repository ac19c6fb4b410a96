"""Acceptance criteria 1-10. Each test records one pass/fail line, printed at
the end of the session by the hook in conftest.py."""

import time

import numpy as np
import pytest
from scipy.spatial import cKDTree

from mitodet import candidates as cd
from mitodet import metrics, mining, nn, stain, synth, wsi
from mitodet import registration as reg
from mitodet.experiment import ExperimentConfig, run_experiment
from oracles import max_matching_oracle, spearman_oracle, suppression_oracle
from test_registration import shifted_pair

RESULTS = {}


def record(n, ok, detail):
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, RESULTS[n]


def test_criterion_1_parameter_counts():
    t0 = time.time()
    counts = {g: nn.param_count(nn.build_network(g)) for g in (1.0, 0.8, 0.6)}
    ok = abs(counts[1.0] - 26.9e6) / 26.9e6 <= 0.005
    ok &= abs(counts[0.8] - 17.1e6) / 17.1e6 <= 0.03
    ok &= abs(counts[0.6] - 9.5e6) / 9.5e6 <= 0.03
    single = counts[1.0] / counts[0.6]
    ensemble = 10 * counts[1.0] / counts[0.6]
    ok &= round(single, 1) == 2.8 and round(ensemble) == 28
    dt = time.time() - t0
    ok &= dt < 1.0
    record(1, ok, f"counts {counts[1.0]:,} / {counts[0.8]:,} / {counts[0.6]:,}; "
                  f"ratios {single:.2f}x, {ensemble:.1f}x; {dt:.2f}s")


def test_criterion_2_shape_contract():
    spec = nn.build_network(0.125)
    m = nn.init_params(spec, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    x = rng.uniform(-0.5, 0.5, (1, 148, 148, 3)).astype(np.float32)
    one = nn.forward(m, x[:, :100, :100])
    dense = nn.forward(m, x)
    err = 0.0
    for i in range(13):
        for j in range(13):
            patch = x[:, 4 * i : 4 * i + 100, 4 * j : 4 * j + 100]
            err = max(err, float(np.abs(nn.forward(m, patch)[0, 0, 0] - dense[0, i, j]).max()))
    ok = one.shape == (1, 1, 1, 2) and dense.shape == (1, 13, 13, 2) and err < 1e-5
    record(2, ok, f"100x100 -> {one.shape[1:]}, 148x148 -> {dense.shape[1:]}, max dense diff {err:.2e}")


def test_criterion_3_hed_math():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.01, 1.0, (64, 64, 3))
    rt = float(np.abs(stain.hed_to_rgb(stain.rgb_to_hed(p)) - p).max())
    m = stain.DEFAULT_STAINS
    lin = 0.0
    for a, b, c in rng.uniform(0, 3, (200, 3)):
        od = a * m.hematoxylin + b * m.eosin + c * m.dab
        s = stain.rgb_to_hed((np.exp(-od) - 1e-6)[None, None])[0, 0]
        lin = max(lin, float(np.abs(s - [a, b, c]).max()))
    aug = stain.stain_augment(p, stain.StainAugmentParams(sigma=0.0), rng)
    same = np.array_equal(aug, stain.hed_to_rgb(stain.rgb_to_hed(p)))
    ok = rt < 1e-4 and lin < 1e-4 and same
    record(3, ok, f"roundtrip {rt:.1e}, OD linearity {lin:.1e}, sigma=0 identity {same}")


def _fd_check():
    spec = nn.NetworkSpec(gamma=1.0, input_size=11, channels=2, layers=(
        nn.LayerSpec("conv", 3, (3, 3), 1), nn.LayerSpec("leaky_relu"),
        nn.LayerSpec("conv", 4, (3, 3), 2), nn.LayerSpec("relu"),
        nn.LayerSpec("maxpool", kernel=(2, 2)),
        nn.LayerSpec("dense", 5), nn.LayerSpec("dropout", rate=0.3),
        nn.LayerSpec("dense", 2), nn.LayerSpec("softmax")))
    m = nn.init_params(spec, np.random.default_rng(0), dtype=np.float64)
    x = np.random.default_rng(1).standard_normal((3, 11, 11, 2))
    t = np.array([[0.2, 0.8], [1.0, 0.0], [0.6, 0.4]])

    def loss():
        return nn.loss_and_grads(m, x, t, l2=1e-3, rng=np.random.default_rng(5))[0]

    _, gw, gb = nn.loss_and_grads(m, x, t, l2=1e-3, rng=np.random.default_rng(5))
    worst = {}
    h = 1e-6
    for li, ls in enumerate(spec.layers):
        if not ls.has_params:
            continue
        for arr, grad in ((m.weights[li], gw[li]), (m.biases[li], gb[li])):
            flat, gflat = arr.reshape(-1), grad.reshape(-1)
            for k in np.random.default_rng(li).choice(flat.size, min(8, flat.size), replace=False):
                old = flat[k]
                flat[k] = old + h
                up = loss()
                flat[k] = old - h
                down = loss()
                flat[k] = old
                num = (up - down) / (2 * h)
                rel = abs(num - gflat[k]) / max(abs(num) + abs(gflat[k]), 1e-8)
                worst[ls.kind] = max(worst.get(ls.kind, 0.0), rel)
    return worst


def test_criterion_4_gradients():
    t0 = time.time()
    worst = _fd_check()
    dt = time.time() - t0
    ok = set(worst) == {"conv", "dense"} and max(worst.values()) < 1e-3 and dt < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(4, ok, f"max relative error: {detail} (through leaky_relu, relu, maxpool, dropout, softmax); {dt:.1f}s")


def test_criterion_5_registration():
    t0 = time.time()
    cfg = reg.RegistrationConfig(n_tiles=3, min_tissue=0.0)
    exact = []
    for v in [(40, -25), (-256, 256), (256, -256), (131, 7), (-3, -199), (0, 0)]:
        a, b = shifted_pair(np.random.default_rng(abs(v[0]) + 7), 1200, v)
        g = reg.global_register(a, b, cfg, np.random.default_rng(0), tissue=np.ones(a.shape))
        exact.append(g.shift == reg.ShiftVector(*v))
    noisy = []
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        v = tuple(int(c) for c in rng.integers(-256, 257, 2))
        a, b = shifted_pair(rng, 1200, v)
        b = b + rng.normal(0, 0.05, b.shape)
        g = reg.global_register(a, b, cfg, np.random.default_rng(seed), tissue=np.ones(a.shape)).shift
        noisy.append(abs(g.dx - v[0]) <= 1 and abs(g.dy - v[1]) <= 1)
    a, b = shifted_pair(np.random.default_rng(3), 1024, (40, -25))
    a[:512, :512] = 1.0
    b[:512, :512] = 1.0
    rng = np.random.default_rng(1)
    positions = [(0, 0)] + [tuple(rng.integers(0, 513, 2)) for _ in range(9)]
    blank = reg.global_register(a, b, reg.RegistrationConfig(tile_size=512, max_shift=256),
                                positions=positions).shift == reg.ShiftVector(40, -25)
    dt = time.time() - t0
    ok = all(exact) and all(noisy) and blank and dt < 120
    record(5, ok, f"exact {sum(exact)}/{len(exact)}, noisy within 1px {sum(noisy)}/20, "
                  f"blank tile tolerated {blank}; {dt:.1f}s")


def test_criterion_6_candidates():
    t0 = time.time()
    rng = np.random.default_rng(0)
    agree = 0
    for i in range(50):
        img = rng.uniform(0, 1, (256, 256, 3))
        d = (20.0, 40.0, 100.0)[i % 3]
        got = [(c.x, c.y) for c in cd.detect_candidates(img, cd.DetectorParams(d=d, t=0.6))]
        agree += got == suppression_oracle(img, d, 0.6)
    found = planted = 0
    for seed in (100, 101, 102, 103):
        s = synth.generate_slide(synth.SynthConfig(seed=seed))
        pts = np.array([(c.x, c.y) for c in cd.detect_candidates(s.image)])
        dist, _ = cKDTree(pts).query(s.mitoses)
        found += int((dist <= 30).sum())
        planted += len(s.mitoses)
    dt = time.time() - t0
    recall = found / planted
    ok = agree == 50 and recall >= 0.99 and dt < 300
    record(6, ok, f"oracle agreement {agree}/50, recall {recall:.3f} of {planted} planted (d=100, t=0.6); {dt:.0f}s")


@pytest.mark.slow
def test_criterion_7_end_to_end(tmp_path):
    res = run_experiment(ExperimentConfig(), tmp_path)
    c = res.checks
    f1 = {k: v[1] for k, v in res.best.items()}
    ok = all(c.values()) and res.seconds < 1800
    record(7, ok, f"(a) student F1 {f1['student']:.3f} {'ok' if c['test_f1'] else 'FAIL'}; "
                  f"(b) ensemble {f1['ensemble']:.3f} vs single {f1['single']:.3f} "
                  f"{'ok' if c['ensemble_vs_single'] else 'FAIL'}; "
                  f"(c) student vs ensemble {'ok' if c['student_vs_ensemble'] else 'FAIL'}; "
                  f"(d) span student {res.spans['student']:.3f} vs single {res.spans['single']:.3f} "
                  f"{'ok' if c['student_span'] else 'FAIL'}; {res.seconds / 60:.1f} min")


def test_criterion_8_hotspot_grading():
    mask = wsi.TissueMask(np.ones((1000, 1000), bool), 16)
    rng = np.random.default_rng(0)
    cluster = np.column_stack([rng.uniform(7800, 8200, (30, 2)), np.full(30, 0.99)])
    far = np.column_stack([[500, 15500, 500, 15500, 15500], [500, 500, 15500, 15500, 8000], np.full(5, 0.99)])
    count, _ = wsi.hotspot(np.vstack([cluster, far]), mask)
    g = wsi.grade(count)
    bounds = [wsi.grade(c) for c in (6, 7, 20, 21)]
    ok = count >= 30 and g == 3 and bounds == [1, 2, 2, 3]
    record(8, ok, f"cluster count {count} grade {g}; grades at 6/7/20/21 = {bounds}")


def test_criterion_9_metrics():
    rng = np.random.default_rng(0)
    agree = 0
    for _ in range(100):
        pred = rng.uniform(0, 120, (rng.integers(0, 11), 2))
        truth = rng.uniform(0, 120, (rng.integers(0, 11), 2))
        agree += metrics.match_f1(pred, truth).tp == max_matching_oracle(pred, truth, 30.0)
    kappa = metrics.kappa_quadratic([1, 1, 2, 2, 3, 3], [1, 2, 1, 3, 2, 3])
    worst = 0.0
    for _ in range(50):
        x, y = rng.integers(0, 5, 12), rng.integers(0, 5, 12)
        if len(set(x)) > 1 and len(set(y)) > 1:
            worst = max(worst, abs(metrics.spearman(x, y) - spearman_oracle(x.tolist(), y.tolist())))
    ok = agree == 100 and abs(kappa - 0.5) <= 1e-12 and worst < 1e-12
    record(9, ok, f"matching oracle {agree}/100, kappa {kappa!r} (hand value 0.5), spearman max diff {worst:.1e}")


def test_criterion_10_determinism():
    checks = {}
    cfg = synth.SynthConfig(width=900, height=900, n_mitoses=8, shift=(30, -20), jitter=4, seed=11)
    p1, p2 = synth.generate_pair(cfg), synth.generate_pair(cfg)
    checks["synth"] = np.array_equal(p1.he.image, p2.he.image) and np.array_equal(p1.phh3, p2.phh3)
    c1, c2 = cd.detect_candidates(p1.he.image), cd.detect_candidates(p2.he.image)
    checks["candidates"] = c1 == c2
    rcfg = reg.RegistrationConfig(tile_size=512, n_tiles=6)
    g1 = reg.global_register(p1.he.image, p1.phh3, rcfg, np.random.default_rng(0), workers=1)
    g8 = reg.global_register(p1.he.image, p1.phh3, rcfg, np.random.default_rng(0), workers=8)
    checks["registration"] = g1 == g8
    checks["mining"] = all(np.array_equal(a[1], b[1]) for a, b in zip(
        mining.build_bootstrap_datasets(5, np.arange(1, 50.0), 3, 40, 7),
        mining.build_bootstrap_datasets(5, np.arange(1, 50.0), 3, 40, 7)))
    patches = cd.extract_patches(p1.he.image, [(c.x, c.y) for c in c1[:16]], 128)
    labels = np.array([1, 0] * 8)
    data = nn.PatchDataset(patches, labels)
    tcfg = nn.TrainConfig(epochs=2, batch=4, steps_per_epoch=2, seed=3)
    m1 = nn.train(data, data, nn.build_network(0.0625), tcfg)
    m2 = nn.train(data, data, nn.build_network(0.0625), tcfg)
    checks["training"] = all(np.array_equal(a, b) for a, b in zip(m1.weights, m2.weights) if a is not None)
    ens1 = mining.EnsembleModel([m1, nn.init_params(m1.spec, np.random.default_rng(1))], workers=1)
    ens8 = mining.EnsembleModel(ens1.members, workers=8)
    img = p1.he.image[:400, :400]
    mask = wsi.tissue_mask(img)
    pm1 = wsi.dense_probability_map(img, ens1, mask, tile_cells=20, workers=1)
    pm8 = wsi.dense_probability_map(img, ens8, mask, tile_cells=20, workers=8)
    checks["inference"] = np.array_equal(pm1.values, pm8.values)
    pm1.values[:] = np.random.default_rng(2).uniform(0.7, 1.0, pm1.values.shape)
    d1, d2 = wsi.postprocess(pm1), wsi.postprocess(pm1)
    checks["postprocess"] = np.array_equal(d1, d2)
    big = wsi.TissueMask(np.ones((500, 500), bool), 16)
    dets = np.column_stack([np.random.default_rng(4).uniform(0, 8000, (60, 2)), np.ones(60)])
    checks["hotspot"] = wsi.hotspot(dets, big) == wsi.hotspot(dets.copy(), big)
    ok = all(checks.values())
    record(10, ok, "bit-identical: " + ", ".join(f"{k} {'ok' if v else 'FAIL'}" for k, v in checks.items()))
