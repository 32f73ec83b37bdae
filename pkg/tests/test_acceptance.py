"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Every test measures its own wall-clock time and fails if it exceeds the
criterion's runtime limit. Run with ``pytest tests/test_acceptance.py -v -s``
(the verdict lines are printed even without ``-s``).
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from hsiplastic.calibrate import DarkFrame, ReferenceSpectrum, reflectance
from hsiplastic.classify import (
    Dataset,
    LinearModel,
    MLPModel,
    ModelKind,
    TrainConfig,
    dataset_loss,
    loss_and_grad,
)
from hsiplastic.cube_io import CalibrationState, SpectralCube
from hsiplastic.metrics import roc_auc, roc_auc_bruteforce
from hsiplastic.pipeline import (
    CPU_BUDGET_MS,
    FULL_CUBE_SHAPE,
    ExperimentConfig,
    bench,
    random_reflectance_cube,
    run_eval,
    run_train,
    split_indices,
)
from hsiplastic.register import DegenerateConfigurationError, Homography, estimate_homography
from hsiplastic.synth import SynthParams, synth_gen

SEEDS = (0, 1, 2)
# training schedule for the synthetic benchmark (see README)
BENCHMARK_TRAIN = TrainConfig(epochs=100, batch_size=256)


@pytest.fixture
def verdict(capsys):
    """Print one line per criterion and fail if the check or the time limit fails."""

    def report(number, title, ok, detail, started, limit_s):
        elapsed = time.perf_counter() - started
        passed = bool(ok) and elapsed < limit_s
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} {'PASS' if passed else 'FAIL'} | {title} | {detail} | "
                  f"{elapsed:.1f}s (limit {limit_s:.0f}s)")
        assert ok, detail
        assert elapsed < limit_s, f"took {elapsed:.1f}s, limit {limit_s}s"

    return report


# --------------------------------------------------------------------------- 1

def test_criterion_1_calibration_identities(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(20):
        b, h, w = rng.integers(1, 8), rng.integers(1, 16), rng.integers(1, 16)
        dark = rng.integers(0, 200, size=(b, h, w)).astype(np.float64)
        ref = dark.max(axis=(1, 2)) + rng.integers(100, 4000, size=b)
        wl = np.linspace(660, 1700, b)
        d, r = DarkFrame(dark), ReferenceSpectrum(ref)
        for signal, expect in [
            (dark, 0.0),
            (np.broadcast_to(ref[:, None, None], dark.shape), 1.0),
            ((dark + ref[:, None, None]) / 2, 0.5),
        ]:
            out, valid = reflectance(SpectralCube(signal.astype(np.float32), wl), d, r)
            assert valid.all()
            worst = max(worst, float(np.abs(out.data - expect).max()))

    # integer counts and integer (a, c) keep a*x + c exact in float32
    base_dark = rng.integers(0, 100, size=(4, 8, 8)).astype(np.float64)
    base_ref = base_dark.max(axis=(1, 2)) + rng.integers(500, 2000, size=4)
    base_sig = rng.integers(0, 2500, size=(4, 8, 8)).astype(np.float64)
    wl = np.linspace(660, 1700, 4)
    base, _ = reflectance(SpectralCube(base_sig.astype(np.float32), wl), DarkFrame(base_dark),
                          ReferenceSpectrum(base_ref))
    affine_worst = 0.0
    for _ in range(100):
        a, c = int(rng.integers(1, 50)), int(rng.integers(0, 1000))
        out, _ = reflectance(SpectralCube((a * base_sig + c).astype(np.float32), wl),
                             DarkFrame(a * base_dark + c), ReferenceSpectrum(a * base_ref + c))
        affine_worst = max(affine_worst, float(np.abs(out.data - base.data).max()))
    ok = worst <= 1e-6 and affine_worst <= 1e-6
    verdict(1, "calibration identities", ok,
            f"max |err| identities {worst:.2e}, affine over 100 draws {affine_worst:.2e} (tol 1e-6)", t0, 10)


# --------------------------------------------------------------------------- 2

def test_criterion_2_homography_recovery(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(50):
        m = np.eye(3)
        m[:2, :2] += rng.normal(0, 0.3, (2, 2))
        m[:2, 2] = rng.uniform(-100, 100, 2)
        m[2, :2] = rng.normal(0, 5e-4, 2)
        src = rng.uniform(0, 1000, (8, 2))
        hom = np.c_[src, np.ones(8)] @ m.T
        dst = hom[:, :2] / hom[:, 2:]
        h, _ = estimate_homography((src, dst))
        worst = max(worst, float(np.abs(h.apply(src) - dst).max()))
    degenerate = {
        "collinear": np.array([[0.0, 0], [1, 2], [2, 4], [3, 6], [5, 10], [8, 16]]),
        "three collinear of four": np.array([[0.0, 0], [1, 1], [2, 2], [0, 5]]),
        "coincident": np.ones((6, 2)),
    }
    rejected = 0
    for pts in degenerate.values():
        try:
            estimate_homography((pts, 2 * pts + 1))
        except DegenerateConfigurationError:
            rejected += 1
    ok = worst < 1e-6 and rejected == len(degenerate)
    verdict(2, "homography recovery", ok,
            f"max reprojection error {worst:.2e} px over 50 (tol 1e-6); "
            f"{rejected}/{len(degenerate)} degenerate sets rejected", t0, 10)


# --------------------------------------------------------------------------- 3

KINK_MARGIN = 1e-3


def _near_kink(model, x):
    """True when a hinge or ReLU kink lies close enough to bias a finite difference."""
    if isinstance(model, LinearModel):
        if model.kind is not ModelKind.SVM:
            return False
        z = x @ model.weights + model.bias
        return bool(np.any(np.abs(np.abs(z) - 1.0) < KINK_MARGIN))
    h = x
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = h @ w + b
        if np.any(np.abs(z) < KINK_MARGIN):
            return True
        h = np.maximum(z, 0)
    return False


def _random_point(kind, rng, bands=5):
    x = rng.random((5, bands))
    y = np.array([0, 1, 1, 0, 1])
    if kind is ModelKind.MLP:
        model = MLPModel.initialize(bands, rng)
        model = model.with_params([p + rng.normal(0, 0.1, p.shape) for p in model.params()])
    else:
        model = LinearModel(rng.normal(0, 1, bands), float(rng.normal()), kind)
    return model, x, y


def _max_relative_error(model, x, y, l2, h=1e-5, floor=1e-6):
    data = Dataset(x, y)
    _, grads = loss_and_grad(model, x, y, l2)
    params = model.params()
    worst = 0.0
    for k, p in enumerate(params):
        for i in range(p.size):
            orig = p.flat[i]
            p.flat[i] = orig + h
            up = dataset_loss(model.with_params(params), data, l2)
            p.flat[i] = orig - h
            down = dataset_loss(model.with_params(params), data, l2)
            p.flat[i] = orig
            num = (up - down) / (2 * h)
            ana = grads[k].flat[i]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst


def test_criterion_3_gradient_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    results = {}
    for kind, l2 in [(ModelKind.LOGISTIC, 1e-3), (ModelKind.SVM, 1e-4), (ModelKind.MLP, 1e-4)]:
        worst = 0.0
        points = 0
        while points < 20:
            model, x, y = _random_point(kind, rng)
            if _near_kink(model, x):
                continue
            worst = max(worst, _max_relative_error(model, x, y, l2))
            points += 1
        results[kind.value] = worst
    ok = all(v < 1e-4 for v in results.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in results.items())
    verdict(3, "gradient oracle", ok, f"max relative error over 20 points each: {detail} (tol 1e-4)", t0, 60)


# --------------------------------------------------------------------------- 4

def test_criterion_4_auc_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    worst = 0.0
    for i in range(100):
        n = int(rng.integers(2, 2001))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        # every other instance draws scores from a small set, so ties are common
        scores = rng.integers(0, 10, n).astype(float) if i % 2 else rng.random(n)
        worst = max(worst, abs(roc_auc(scores, labels) - roc_auc_bruteforce(scores, labels)))
    example = roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    ok = worst <= 1e-12 and example == 0.75
    verdict(4, "AUC oracle equivalence", ok,
            f"max |fast - brute force| {worst:.1e} over 100 (tol 1e-12); worked example {example}", t0, 60)


# --------------------------------------------------------------------------- 5 and 6

def _benchmark(tmp_path, seed, kinds, modality):
    scenes = tmp_path / f"scenes_{seed}"
    if not scenes.exists():
        synth_gen(SynthParams(), seed, scenes)
    aucs, accs = {}, {}
    for kind in kinds:
        train = TrainConfig(**{**BENCHMARK_TRAIN.to_dict(), "seed": seed})
        cfg = ExperimentConfig.from_dict({"manifest_dir": str(scenes), "model": kind, "modality": modality,
                                          "split_seed": seed, "out_dir": str(tmp_path / f"out_{seed}")})
        cfg.train = train
        res = run_train(cfg)
        ev = run_eval(res.model_path, cfg.test_manifests, cfg.out_dir, modality, figures=False)
        aucs[kind], accs[kind] = ev.pooled.auc, ev.pooled.accuracy
    return aucs, accs


def test_criterion_5_model_ordering(verdict, tmp_path):
    t0 = time.perf_counter()
    rows, ok = [], True
    for seed in SEEDS:
        aucs, _ = _benchmark(tmp_path, seed, ["mlp", "logistic", "svm"], "HSI")
        gap = aucs["mlp"] - max(aucs["logistic"], aucs["svm"])
        ok &= aucs["mlp"] >= 0.95 and gap >= 0.10
        rows.append(f"seed {seed}: MLP {aucs['mlp']:.3f} LR {aucs['logistic']:.3f} SVM {aucs['svm']:.3f}")
    verdict(5, "model ordering (test AUC)", ok, "; ".join(rows) + " (need MLP>=0.95, gap>=0.10)", t0, 300)


def test_criterion_6_modality_gap(verdict, tmp_path):
    t0 = time.perf_counter()
    rows, ok = [], True
    for seed in SEEDS:
        _, hsi = _benchmark(tmp_path, seed, ["mlp"], "HSI")
        _, rgb = _benchmark(tmp_path, seed, ["mlp"], "RGB")
        ok &= hsi["mlp"] - rgb["mlp"] >= 0.05
        rows.append(f"seed {seed}: HSI {hsi['mlp']:.3f} RGB {rgb['mlp']:.3f}")
    verdict(6, "modality gap (MLP pooled test accuracy)", ok, "; ".join(rows) + " (need gap>=0.05)", t0, 300)


# --------------------------------------------------------------------------- 7

def test_criterion_7_latency_budget(verdict, tmp_path):
    t0 = time.perf_counter()
    h, w, b = FULL_CUBE_SHAPE
    model = MLPModel.initialize(b, np.random.default_rng(7))
    cube = random_reflectance_cube(h, w, b, seed=7)
    reports = [bench(model, cube, repetitions=5, workers=k) for k in (1, 2)]
    (tmp_path / "bench.json").write_text(json.dumps(reports))
    ok = all(r["median_ms"] <= CPU_BUDGET_MS and len(r["samples_ms"]) == 5 for r in reports)
    detail = ", ".join(f"{r['workers']} worker(s) median {r['median_ms']:.0f} ms" for r in reports)
    verdict(7, "latency budget (1052x1588x33 MLP)", ok, f"{detail} (budget {CPU_BUDGET_MS:.0f} ms)", t0, 120)


# --------------------------------------------------------------------------- 8

def _cli(*args):
    proc = subprocess.run([sys.executable, "-m", "hsiplastic.cli", *map(str, args)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def _pipeline_run(root):
    root.mkdir()
    (root / "synth.json").write_text(json.dumps({"height": 48, "width": 64}))
    (root / "exp.json").write_text(json.dumps({
        "manifest_dir": "scenes", "model": "mlp", "modality": "HSI", "out_dir": "out",
        "train": {"epochs": 10, "batch_size": 256},
    }))
    _cli("synth-gen", root / "synth.json", "--seed", 8, "--out-dir", root / "scenes", "--workers", 1)
    _cli("train", root / "exp.json", "--seed", 8, "--workers", 1)
    _cli("eval", root / "exp.json", "--seed", 8, "--workers", 1)
    _cli("render", root / "exp.json", "--seed", 8, "--out-dir", root / "render", "--workers", 1)
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.suffix in (".json", ".ppm") and p.parent.name in ("out", "render")}


def test_criterion_8_end_to_end_determinism(verdict, tmp_path):
    t0 = time.perf_counter()
    first = _pipeline_run(tmp_path / "run1")
    second = _pipeline_run(tmp_path / "run2")
    models = [p for p in first if p.name.startswith("model_")]
    reports = [p for p in first if p.suffix == ".json" and not p.name.startswith("model_")]
    maps = [p for p in first if p.suffix == ".ppm"]
    differing = [str(p) for p in first if first[p] != second.get(p)]
    ok = first.keys() == second.keys() and not differing and models and reports and maps
    verdict(8, "end-to-end determinism", ok,
            f"{len(models)} model, {len(reports)} report and {len(maps)} map files compared; "
            f"{len(differing)} differ", t0, 300)


# --------------------------------------------------------------------------- 9

def test_criterion_9_split_protocol(verdict):
    t0 = time.perf_counter()
    n = 100_000
    train, discarded, val = split_indices(n, seed=9)
    sets = [set(train.tolist()), set(discarded.tolist()), set(val.tolist())]
    disjoint = not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    covers = len(sets[0] | sets[1] | sets[2]) == n
    ok = len(val) == n // 2 and abs(len(train) - n // 4) <= 1 and disjoint and covers
    verdict(9, "split protocol audit", ok,
            f"|val|={len(val)} |train|={len(train)} |discarded|={len(discarded)}, disjoint={disjoint}", t0, 10)
