"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

The training criteria share one session-scoped run of the default toy
configuration (``configs/acceptance.json``), so the whole file takes roughly
an hour and a half of CPU time.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from fewshape.config import RunConfig
from fewshape.criterion import hungarian
from fewshape.geometry import RotatedBox, box_corners, box_to_gaussian, gwd_loss_term, rotated_iou, wasserstein_sq
from fewshape.numerics.io import file_sha256
from fewshape.pipeline.bench import bench_complexity
from fewshape.pipeline.synth import SceneConfig, generate_scene
from fewshape.pipeline.train import train

import gradsuite
from oracles import brute_force_assignment, raster_iou, wasserstein_eig

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "acceptance.json"
CPU_BUDGET = 30 * 60
pytestmark = pytest.mark.slow


def _cpu():
    return time.process_time()


# --------------------------------------------------------------- gradients

def test_gradient_suite(criterion):
    t0 = _cpu()
    worst = {}
    for name, builder in {**gradsuite.LOSSES, **gradsuite.BLOCKS}.items():
        worst[name] = max(gradsuite.run_case(builder, seed) for seed in range(100))
    elapsed = _cpu() - t0
    bad = {k: v for k, v in worst.items() if not v < gradsuite.TOLERANCE}
    ok = not bad and elapsed < 120
    detail = (f"{len(worst)} losses/blocks x 100 configs, worst rel err {max(worst.values()):.1e} "
              f"({max(worst, key=worst.get)}), {elapsed:.0f} s CPU")
    assert criterion("gradient suite", ok, detail + (f"; over tolerance: {bad}" if bad else ""))


# --------------------------------------------------------------------- GWD

def _random_box(rng) -> RotatedBox:
    return RotatedBox(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(1, 60), rng.uniform(1, 60),
                      rng.uniform(-math.pi / 2, math.pi / 2))


def test_gwd_oracle_suite(criterion):
    t0 = _cpu()
    rng = np.random.default_rng(2024)
    sym = d2 = scale = 0.0
    for _ in range(1000):
        r = _random_box(rng)
        a = box_to_gaussian(r)
        b = box_to_gaussian(RotatedBox(r.x, r.y, r.h, r.w, r.theta + math.pi / 2))
        sym = max(sym, np.abs(a.sigma - b.sigma).max() / np.abs(a.sigma).max())
        g1, g2 = box_to_gaussian(_random_box(rng)), box_to_gaussian(_random_box(rng))
        ref = wasserstein_eig(g1.m, g1.sigma, g2.m, g2.sigma)
        d2 = max(d2, abs(wasserstein_sq(g1, g2) - ref) / max(1.0, abs(ref)))
    for _ in range(200):
        p, q = _random_box(rng), _random_box(rng)
        base = gwd_loss_term(p, q)
        for s in (0.1, 1.0, 10.0, 100.0):
            scale = max(scale, abs(gwd_loss_term(p.scaled(s), q.scaled(s)) - base))
    elapsed = _cpu() - t0
    ok = sym < 1e-12 and d2 < 1e-10 and scale < 1e-9 and elapsed < 10
    assert criterion("GWD oracle suite", ok,
                     f"swap symmetry {sym:.1e}, d2 vs eig {d2:.1e}, scale drift {scale:.1e}, {elapsed:.1f} s CPU")


# --------------------------------------------------------------- Hungarian

def test_hungarian_vs_brute_force(criterion):
    t0 = _cpu()
    rng = np.random.default_rng(7)
    mismatches = 0
    for i in range(1000):
        t = int(rng.integers(1, 8))
        p = int(rng.integers(t, 8))
        c = rng.uniform(0, 10, size=(p, t)) if i % 2 else rng.integers(0, 20, size=(p, t)).astype(float)
        if i % 3 == 0:
            c = c.T
        m = hungarian(c)
        got = math.fsum(c[r, k] for r, k in m.pairs)
        mismatches += got != brute_force_assignment(c)
    elapsed = _cpu() - t0
    ok = mismatches == 0 and elapsed < 30
    assert criterion("Hungarian vs brute force", ok,
                     f"{mismatches}/1000 total-cost mismatches (T <= 7), {elapsed:.1f} s CPU")


# --------------------------------------------------------------------- IoU

def test_rotated_iou_vs_raster(criterion):
    t0 = _cpu()
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(500):
        a = np.array([rng.uniform(20, 44), rng.uniform(20, 44), rng.uniform(2, 30), rng.uniform(2, 30),
                      rng.uniform(-math.pi / 2, math.pi / 2)])
        b = a + [rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-1, 10), rng.uniform(-1, 10),
                 rng.uniform(-1, 1)]
        ca, cb = box_corners(a), box_corners(b)
        worst = max(worst, abs(rotated_iou(ca, cb) - raster_iou(ca, cb, 512)))
    elapsed = _cpu() - t0
    ok = worst < 0.01 and elapsed < 60
    assert criterion("rotated IoU vs raster", ok, f"max |delta| {worst:.4f} over 500 pairs, {elapsed:.1f} s CPU")


# -------------------------------------------------------------- complexity

def test_complexity_claim(criterion):
    t0 = _cpu()
    rep = bench_complexity(width=32, token_counts=(448, 4480))
    ratio = rep.timing_ratio(448, 4480)
    elapsed = _cpu() - t0
    ok = abs(rep.dense_quadratic_ratio - 1426) <= 1 and ratio is not None and ratio >= 25 and elapsed < 120
    timing = f"{ratio:.1f}x" if ratio is not None else "skipped"
    assert criterion("complexity claim", ok, f"analytic dense/#5 ratio {rep.dense_quadratic_ratio:.2f}, "
                                             f"measured N=4480 vs 448 {timing}, {elapsed:.0f} s CPU")


# ---------------------------------------------------------------- training

def acceptance_config(**changes) -> RunConfig:
    return RunConfig.from_dict({**RunConfig.load(CONFIG).to_dict(), **changes})


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    cfg = acceptance_config()
    return cfg, train(cfg, out_dir=tmp_path_factory.mktemp("default"), cpu_budget=CPU_BUDGET)


def _f_within_budget(res) -> float:
    inside = [f for f, c in zip(res.val_f, res.val_cpu) if c <= CPU_BUDGET]
    return max(inside, default=0.0)


def test_end_to_end_training(criterion, default_run, tmp_path):
    _, res = default_run
    best = _f_within_budget(res)
    scene = generate_scene(0, SceneConfig(max_boxes=3), "train", 1)
    cfg = RunConfig(epochs=300, batch_size=1, train_scenes=1, val_scenes=0, eval_every=1000)
    over = train(cfg, ([scene], [scene]), tmp_path, max_steps=300)
    tail = over.history[-20:]
    det_gap = float(np.mean([r["L_det"] for r in tail])) - 2 / 3
    gap = float(np.mean([r["L_total"] for r in tail])) - 2 / 3
    ok = best >= 0.80 and det_gap < 0.02 and gap < 0.02
    curve = " ".join(f"{f:.3f}@{c / 60:.0f}m" for f, c in zip(res.val_f, res.val_cpu))
    assert criterion("end-to-end toy training", ok,
                     f"best val F within 30 CPU-min {best:.3f} (curve {curve}); "
                     f"1-scene overfit detection loss {det_gap:+.4f} and total loss {gap:+.4f} above the 2/3 floor")


def test_budget_trends(criterion, default_run, tmp_path_factory):
    cfg, res = default_run
    f5 = _f_within_budget(res)
    few = train(acceptance_config(budgets=(4, 8, 16)), out_dir=tmp_path_factory.mktemp("b3"), cpu_budget=CPU_BUDGET)
    ada = train(acceptance_config(adaptive_fraction=0.25), out_dir=tmp_path_factory.mktemp("ada"),
                cpu_budget=CPU_BUDGET)
    f3, fa = _f_within_budget(few), _f_within_budget(ada)
    ok = f3 < f5 and abs(fa - f5) <= 0.02
    assert criterion("budget trends", ok, f"F #3-analog (4,8,16) {f3:.3f} < #5-analog {cfg.budgets} {f5:.3f}; "
                                          f"adaptive 25% {fa:.3f} (|delta| {abs(fa - f5):.3f} <= 0.02)")


def test_determinism(criterion, tmp_path):
    cfg = RunConfig(epochs=2, train_scenes=16, val_scenes=8)
    a = train(cfg, out_dir=tmp_path / "a")
    b = train(cfg, out_dir=tmp_path / "b")
    same_ckpt = a.checkpoint_sha256 == b.checkpoint_sha256 == file_sha256(b.checkpoint)
    same_report = a.report.to_dict() == b.report.to_dict()
    same_bytes = (tmp_path / "a" / "val_report.json").read_bytes() == (tmp_path / "b" / "val_report.json").read_bytes()
    ok = same_ckpt and same_report and same_bytes
    assert criterion("determinism", ok, f"checkpoint sha256 {a.checkpoint_sha256[:16]} vs {b.checkpoint_sha256[:16]}, "
                                        f"EvalReports {'identical' if same_report and same_bytes else 'differ'}")
