"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``python3 -m pytest tests/test_acceptance.py -v``; the
per-criterion lines appear in the "acceptance criteria" summary section.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from framedistill import tensorgrad as tg
from framedistill.cli import run_bench
from framedistill.config import (DistillSection, FinetuneSection, Intrinsics, ProbeSection, RigConfig,
                                 RunConfig, StudentSection, SynthSection, TeacherSize, load_rig_config)
from framedistill.frameio import LidarFrame, read_labels, read_lidar_frame
from framedistill.geometry import RigidTransform, project_points
from framedistill.metrics import ConfusionMatrix, accumulate, scores
from framedistill.sync import split_manifest
from framedistill.trainer import distill, evaluate, finetune, linear_probe

from .gradcases import run_suite
from .oracles import metrics_oracle, pinhole_oracle, random_rotation
from .pipeline import build_dataset, run_pipeline, tiny_run

RESULTS: dict[int, str] = {}


def record(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {name}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def pipeline_run(noise_sigma: float, frames: int) -> RunConfig:
    """Default student and optimiser settings at batch 4 on the synthetic rig."""
    return RunConfig(
        seed=0,
        student=StudentSection(),
        distill=DistillSection(epochs=25, batch=4),
        probe=ProbeSection(batch=4),
        finetune=FinetuneSection(batch=4),
        teacher_size=TeacherSize(80, 60),
        synth=SynthSection(frames=frames, noise_sigma=noise_sigma),
    )


# -- 1. gradients ---------------------------------------------------------------

def test_c1_gradient_suite():
    t0 = time.perf_counter()
    worst = run_suite(instances=20, seed=0)
    dt = time.perf_counter() - t0
    w = max(worst.values())
    detail = f"worst rel err {w:.2e} over {len(worst)} cases x 20 instances in {dt:.1f} s"
    record(1, "finite-difference gradients", w < 1e-6 and dt < 60, detail)


# -- 2. distillation loss fixtures -----------------------------------------------

def test_c2_loss_fixtures():
    g = tg.l2_normalize(np.random.default_rng(0).normal(size=(3, 4)), axis=1)
    zero = tg.distill_loss(g, g.copy())[0]
    orth = tg.distill_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))[0]
    one = tg.distill_loss(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 0.0], [0.0, -1.0]]))[0]
    ok = abs(zero) < 1e-6 and abs(orth - math.sqrt(2)) < 1e-6 and abs(one - 1.0) < 1e-6
    record(2, "distillation loss fixtures", ok, f"0 -> {zero:.3g}, sqrt2 -> {orth:.9f}, 1 -> {one:.9f}")


# -- 3. projection ----------------------------------------------------------------

def test_c3_projection_oracle():
    rng = np.random.default_rng(2024)
    worst, mismatched, valid = 0.0, 0, 0
    for _ in range(1000):
        R, t = random_rotation(rng), rng.normal(size=3)
        k = rng.normal(scale=0.05, size=4)
        w, h = int(rng.integers(40, 400)), int(rng.integers(30, 300))
        intr = Intrinsics(*rng.uniform(50, 400, 2), rng.uniform(0, w), rng.uniform(0, h), w, h, *k)
        rig = RigConfig(intr, RigidTransform(R, t), min_depth=0.1)
        p = rng.normal(scale=3, size=3).astype(np.float32)
        # keep a good share of points in front of the camera
        if rng.random() < 0.5:
            cam = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 5)])
            p = (R.T @ (cam - t)).astype(np.float32)
        proj = project_points(rig, LidarFrame(1, np.append(p, 1.0).astype(np.float32)[None]))
        ov, u, v, px, py = pinhole_oracle(p.astype(np.float64), R, t, intr.fx, intr.fy, intr.cx, intr.cy,
                                          w, h, 0.1, *k)
        if bool(proj.valid[0]) != ov or (ov and (proj.px[0], proj.py[0]) != (px, py)):
            mismatched += 1
        if ov:
            valid += 1
            worst = max(worst, abs(proj.u[0] - u), abs(proj.v[0] - v))
    hand = project_points(RigConfig(Intrinsics(100.0, 100.0, 64.0, 48.0, 128, 96), RigidTransform.identity()),
                          LidarFrame(1, np.array([[0.5, -0.3, 2.0, 1.0]], np.float32)))
    hand_ok = bool(hand.valid[0]) and (hand.px[0], hand.py[0]) == (89, 33)
    ok = mismatched == 0 and worst < 1e-9 and valid > 100 and hand_ok
    record(3, "projection oracle", ok,
           f"{valid}/1000 valid, max |du|,|dv| {worst:.1e}, {mismatched} mismatches, (89,33) fixture "
           f"{'ok' if hand_ok else 'wrong'}")


# -- 4. metrics ----------------------------------------------------------------

def test_c4_metrics_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(1, 7))
        n = int(rng.integers(1, 1001))
        gt = rng.integers(0, k, n)
        gt[rng.random(n) < 0.1] = 65535
        gt[0] = rng.integers(0, k)
        pred = rng.integers(0, k, n)
        s = scores(accumulate(ConfusionMatrix.empty(k), gt, pred))
        ref = metrics_oracle(gt, pred, k)
        for key in ("miou", "macc", "oacc"):
            worst = max(worst, abs(s[key] - ref[key]))
        a, b = np.asarray(s["per_class_iou"]), np.asarray(ref["per_class_iou"])
        assert np.array_equal(np.isnan(a), np.isnan(b))
        worst = max(worst, float(np.nanmax(np.abs(a - b), initial=0.0)))
    fx = scores(accumulate(ConfusionMatrix.empty(2), [0, 0, 1, 1], [0, 1, 1, 1]))
    fixture = abs(fx["miou"] - 7 / 12) < 1e-12
    record(4, "metrics oracle", worst < 1e-12 and fixture,
           f"max abs diff {worst:.1e} over 100 instances, 7/12 fixture {'ok' if fixture else 'wrong'}")


# -- 5. end-to-end pipeline -----------------------------------------------------

def test_c5_end_to_end(tmp_path_factory):
    t0 = time.perf_counter()
    run = pipeline_run(noise_sigma=0.1, frames=200)
    root = tmp_path_factory.mktemp("c5")
    m = build_dataset(root, run)
    rig = load_rig_config(root / "rig.json")
    train, _, test = split_manifest(m)
    student, _ = distill(train, rig, run)
    probe, _ = linear_probe(student, train, run, "pseudo")
    real = evaluate(probe, test, "real").scores
    pseudo = evaluate(probe, test, "pseudo").scores
    dt = time.perf_counter() - t0
    ok = real["miou"] >= 0.80 and real["oacc"] >= 0.90 and pseudo["miou"] > 0 and dt <= 1800
    record(5, "end-to-end synthetic pipeline", ok,
           f"real mIoU {real['miou']:.4f} oAcc {real['oacc']:.4f}, pseudo mIoU {pseudo['miou']:.4f} "
           f"oAcc {pseudo['oacc']:.4f}, {len(test)} test frames, {dt:.0f} s")


# -- 6. fine-tuning vs probe ------------------------------------------------------

def test_c6_finetune_vs_probe(tmp_path_factory):
    run = pipeline_run(noise_sigma=0.0, frames=60)
    root = tmp_path_factory.mktemp("c6")
    m = build_dataset(root, run)
    train, _, _ = split_manifest(m)
    student, _ = distill(train, load_rig_config(root / "rig.json"), run)
    probe, prep = linear_probe(student, train, run, "pseudo")
    _, frep = finetune(probe, train, run, "pseudo")
    p, f = prep.metrics["miou"], frep.metrics["miou"]
    record(6, "fine-tune keeps probe train mIoU", f >= p - 0.005,
           f"probe {p:.4f}, finetune {f:.4f} on {len(train)} noiseless train frames")


# -- 7. depth vs throughput -------------------------------------------------------

def test_c7_bench_depths():
    rows = run_bench(RunConfig(), [8, 16, 24], repeats=10)
    hz = [r["hz"] for r in rows]
    ok = hz[0] > hz[1] > hz[2] and hz[0] >= 15 and rows[0]["points"] == 5760
    record(7, "inference throughput by depth", ok,
           ", ".join(f"D={r['depth']}: {r['hz']:.1f} Hz {r['peak_mem_mb']:.1f} MB" for r in rows)
           + f" on {rows[0]['points']}-point frames")


# -- 8. determinism -------------------------------------------------------------

def test_c8_determinism(tmp_path_factory, capsys):
    cfg_dir = tmp_path_factory.mktemp("c8cfg")
    from framedistill.config import save_run_config

    save_run_config(tiny_run(), cfg_dir / "run.json")
    a, b = tmp_path_factory.mktemp("c8a"), tmp_path_factory.mktemp("c8b")
    run_pipeline(capsys, a, cfg_dir / "run.json")
    run_pipeline(capsys, b, cfg_dir / "run.json")
    files = sorted(p.relative_to(a) for p in a.rglob("*")
                   if p.is_file() and not p.name.endswith(".timing.json"))
    differ = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    kinds = {"checkpoints": sum(f.suffix == ".ckpt" for f in files),
             "labels": sum(f.suffix == ".lbl" for f in files),
             "reports": sum(f.name.endswith((".report.json", ".csv", ".txt")) for f in files)}
    ok = not differ and all(kinds.values())
    record(8, "byte-identical reruns", ok,
           f"{len(files)} files compared ({kinds}), {len(differ)} differ {differ[:3]}")


# -- 9. pseudo-label agreement ----------------------------------------------------

def test_c9_transfer_agreement(tmp_path_factory):
    run = pipeline_run(noise_sigma=0.1, frames=50)
    root = tmp_path_factory.mktemp("c9")
    m = build_dataset(root, run)
    agree = total = 0
    for rec in m:
        gt = read_lidar_frame(m.resolve(rec.lidar)).labels
        pl = read_labels(m.resolve(rec.labels))
        keep = pl != 65535
        agree += int(np.sum(pl[keep] == gt[keep]))
        total += int(keep.sum())
    rate = agree / total
    record(9, "pseudo-label transfer agreement", rate >= 0.95,
           f"{rate:.4f} over {total} projected points in {len(m)} frames")
