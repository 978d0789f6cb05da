"""Command-line driver: one subcommand per pipeline stage.

Exit codes: 0 success, 1 validation failure, 2 bad input or config, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import tracemalloc
from pathlib import Path

import numpy as np

from .config import IGNORE_ID, RunConfig, load_rig_config, load_run_config
from .errors import ConfigError, FormatError, ValidationError
from .frameio import read_image, read_lidar_frame, read_mask, write_image, write_labels
from .geometry import project_points, render_overlay
from .labelspace import builtin_structural_map, load_label_map, remap_labels, transfer_labels
from .metrics import format_csv, format_table, scores_json
from .student import Checkpoint, StudentConfig, init_params, load_checkpoint, save_checkpoint
from .sync import pair_frames, read_manifest, split_counts, split_manifest, with_labels, write_manifest

EXIT_OK, EXIT_VALIDATION, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("framedistill")


def _manifest(args):
    return read_manifest(args.manifest)


def _rig(args, manifest=None):
    if args.rig:
        return load_rig_config(args.rig)
    if manifest is not None and manifest.root is not None and (manifest.root / "rig.json").exists():
        return load_rig_config(manifest.root / "rig.json")
    raise ConfigError("no --rig given and no rig.json next to the manifest")


def _load_ckpt(path, run: RunConfig) -> Checkpoint:
    ckpt = load_checkpoint(path)
    ckpt.check_config(StudentConfig.from_run_config(run))
    return ckpt


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


# -- stages -------------------------------------------------------------------

def cmd_synth(args, run: RunConfig) -> int:
    from .synthgen import emit_dataset

    n = args.frames if args.frames is not None else run.synth.frames
    m = emit_dataset(n, run.seed, args.out, run.synth, (run.teacher_size.w, run.teacher_size.h),
                     run.teacher_dim, run.classes, run.sync.max_dt_ns)
    _emit({"out": str(args.out), "records": len(m), "paired": sum(r.paired for r in m)})
    return EXIT_OK


def cmd_pair(args, run: RunConfig) -> int:
    root = Path(args.data)
    lidar = sorted((root / "lidar").glob("*.lfrm"))
    if not lidar:
        raise ValidationError(f"{root / 'lidar'}: no .lfrm files")
    lidar_ts = [read_lidar_frame(p).timestamp_ns for p in lidar]
    order = np.argsort(lidar_ts, kind="stable")
    lidar_ts = [lidar_ts[i] for i in order]
    lidar_rel = [lidar[i].relative_to(root).as_posix() for i in order]
    images = sorted((root / "images").glob("*.ppm"), key=lambda p: int(p.stem))
    image_ts = [int(p.stem) for p in images]

    def sibling(sub: str, ext: str):
        out = []
        for t in image_ts:
            p = root / sub / f"{t}{ext}"
            out.append(p.relative_to(root).as_posix() if p.exists() else None)
        return out

    m = pair_frames(lidar_ts, image_ts, run.sync.max_dt_ns, lidar_rel,
                    [p.relative_to(root).as_posix() for p in images],
                    sibling("masks", ".pgm"), sibling("features", ".fmap"))
    out = Path(args.out) if args.out else root / "manifest.jsonl"
    if out.parent.resolve() != root.resolve():
        raise ConfigError("pair --out must live in the dataset directory (paths are relative to it)")
    write_manifest(m, out)
    _emit({"manifest": str(out), "records": len(m), "paired": sum(r.paired for r in m)})
    return EXIT_OK


def cmd_split(args, run: RunConfig) -> int:
    m = _manifest(args)
    parts = split_manifest(m)
    out = Path(args.out) if args.out else Path(args.manifest).parent
    if out.resolve() != Path(args.manifest).parent.resolve():
        raise ConfigError("split --out must be the manifest directory (paths are relative to it)")
    counts = {}
    for name, part in zip(("train", "val", "test"), parts):
        write_manifest(part, out / f"{name}.jsonl")
        counts[name] = len(part)
    assert tuple(counts.values()) == split_counts(len(m))
    _emit(counts)
    return EXIT_OK


def _label_map(args, run: RunConfig):
    if args.label_map:
        return load_label_map(args.label_map, run.classes, run.class_names)
    if args.structural:
        names = json.loads(Path(args.source_names).read_text(encoding="utf-8"))
        return builtin_structural_map(names, args.structural)
    return None


def cmd_pseudolabel(args, run: RunConfig) -> int:
    m = _manifest(args)
    rig = _rig(args, m)
    lmap = _label_map(args, run)
    root = m.root
    (root / "labels").mkdir(exist_ok=True)
    paths, written = [], 0
    for rec in m:
        if not rec.paired or rec.mask is None:
            paths.append(rec.labels)
            continue
        frame = read_lidar_frame(m.resolve(rec.lidar))
        mask = read_mask(m.resolve(rec.mask))
        labels = transfer_labels(project_points(rig, frame), mask, args.occlusion_tol)
        if lmap is not None:
            labels = remap_labels(labels, lmap)
        bad = (labels >= run.classes) & (labels != IGNORE_ID)
        if np.any(bad):
            raise ValidationError(f"{rec.mask}: mask ids outside [0, {run.classes}); pass a label map")
        rel = f"labels/{frame.timestamp_ns}.lbl"
        write_labels(labels, root / rel)
        paths.append(rel)
        written += 1
    out = Path(args.out) if args.out else Path(args.manifest)
    write_manifest(with_labels(m, paths), out)
    _emit({"manifest": str(out), "label_files": written})
    return EXIT_OK


def cmd_project(args, run: RunConfig) -> int:
    from .synthgen import PALETTE

    m = _manifest(args)
    rig = _rig(args, m)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for rec in m:
        if not rec.paired:
            continue
        frame = read_lidar_frame(m.resolve(rec.lidar))
        image = read_image(m.resolve(rec.image))
        proj = project_points(rig, frame)
        if rec.mask is not None:
            ids = transfer_labels(proj, read_mask(m.resolve(rec.mask)))
            colors = np.zeros((len(frame), 3), np.uint8)
            known = ids < len(PALETTE)
            colors[known] = PALETTE[ids[known]]
        else:
            depth = np.clip(proj.depth / 10.0, 0, 1)
            colors = np.column_stack([255 * (1 - depth), 255 * depth, np.zeros(len(frame))])
        write_image(render_overlay(image, proj, colors), out / f"{frame.timestamp_ns}.ppm")
        n += 1
    _emit({"overlays": n, "out": str(out)})
    return EXIT_OK


def _write_train_outputs(ckpt: Checkpoint, report, out: Path) -> None:
    save_checkpoint(ckpt, out)
    report.checkpoint = out.name
    report.write(out.with_suffix(".report.json"))


def cmd_distill(args, run: RunConfig) -> int:
    from .trainer import distill

    m = _manifest(args)
    ckpt, report = distill(m, _rig(args, m), run)
    _write_train_outputs(ckpt, report, Path(args.out))
    _emit(report.to_dict())
    return EXIT_OK


def cmd_probe(args, run: RunConfig) -> int:
    from .trainer import linear_probe

    ckpt = _load_ckpt(args.ckpt, run)
    out_ckpt, report = linear_probe(ckpt, _manifest(args), run, args.labels)
    _write_train_outputs(out_ckpt, report, Path(args.out))
    _emit(report.to_dict())
    return EXIT_OK


def cmd_finetune(args, run: RunConfig) -> int:
    from .trainer import finetune

    ckpt = _load_ckpt(args.ckpt, run)
    out_ckpt, report = finetune(ckpt, _manifest(args), run, args.labels)
    _write_train_outputs(out_ckpt, report, Path(args.out))
    _emit(report.to_dict())
    return EXIT_OK


def cmd_eval(args, run: RunConfig) -> int:
    from .trainer import evaluate

    ckpt = _load_ckpt(args.ckpt, run)
    res = evaluate(ckpt, _manifest(args), args.labels)
    prefix = Path(args.out)
    title = f"{args.labels}-label evaluation ({res.frames} frames)"
    table = format_table(res.scores, run.class_names, title)
    prefix.with_suffix(".txt").write_text(table, encoding="utf-8")
    prefix.with_suffix(".csv").write_text(format_csv(res.scores, run.class_names), encoding="utf-8")
    body = {"reference": args.labels, "frames": res.frames,
            **scores_json(res.scores, run.class_names)}
    prefix.with_suffix(".json").write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")
    sys.stderr.write(table)
    _emit(body)
    return EXIT_OK


def bench_frame(run: RunConfig, seed: int = 0):
    """A fixed full-sweep frame from a closed synthetic room."""
    from .synthgen import generate_scene, random_pose, sensor_spec, simulate_lidar

    scene = generate_scene(seed)
    pose = random_pose(scene, np.random.default_rng(seed))
    s = run.synth
    return simulate_lidar(scene, sensor_spec(s, pose), 1)


def run_bench(run: RunConfig, depths: list[int], repeats: int = 10, warmup: int = 2) -> list[dict]:
    """Inference throughput (Hz) and traced peak memory per backbone depth."""
    from .trainer import predict

    frame = bench_frame(run, run.seed)
    rows = []
    base = StudentConfig.from_run_config(run)
    for depth in depths:
        cfg = StudentConfig(**{**base.__dict__, "depth": depth})
        ckpt = Checkpoint(cfg, init_params(cfg, run.seed))
        for _ in range(warmup):
            predict(ckpt, frame)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            predict(ckpt, frame)
            times.append(time.perf_counter() - t0)
        tracemalloc.start()
        predict(ckpt, frame)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        rows.append({"depth": depth, "points": len(frame), "hz": 1.0 / float(np.median(times)),
                     "peak_mem_mb": peak / 2**20})
    return rows


def cmd_bench(args, run: RunConfig) -> int:
    depths = [int(d) for d in args.depth.split(",") if d.strip()]
    if not depths or min(depths) < 1:
        raise ConfigError("--depth needs a comma-separated list of positive integers")
    rows = run_bench(run, depths, args.repeats)
    lines = [f"{'depth':>5}  {'points':>6}  {'Hz':>8}  {'peak MB':>8}"]
    for r in rows:
        lines.append(f"{r['depth']:>5}  {r['points']:>6}  {r['hz']:>8.2f}  {r['peak_mem_mb']:>8.2f}")
    sys.stderr.write("\n".join(lines) + "\n")
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    _emit(rows)
    return EXIT_OK


# -- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="framedistill", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def stage(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="RunConfig JSON")
        sp.set_defaults(func=fn)
        return sp

    sp = stage("synth", cmd_synth, "write a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--frames", type=int)

    sp = stage("pair", cmd_pair, "pair lidar frames with their closest images")
    sp.add_argument("--data", required=True, help="dataset directory with lidar/ and images/")
    sp.add_argument("--out")

    sp = stage("split", cmd_split, "70/15/15 temporal split into train/val/test manifests")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out")

    sp = stage("project", cmd_project, "write lidar-on-image overlay PPMs")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--rig")
    sp.add_argument("--out", required=True)

    sp = stage("pseudolabel", cmd_pseudolabel, "transfer mask labels onto lidar points")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--rig")
    sp.add_argument("--out", help="manifest to write (default: update in place)")
    sp.add_argument("--label-map", help="src<TAB>target|IGNORE text file")
    sp.add_argument("--structural", choices=("pseudo", "real"),
                    help="builtin four-class map over --source-names")
    sp.add_argument("--source-names", help="JSON array of source class names")
    sp.add_argument("--occlusion-tol", type=float, default=None,
                    help="drop points more than this many metres behind the nearest point on their pixel")

    for name, fn, help_ in (("distill", cmd_distill, "distill teacher features into the student"),):
        sp = stage(name, fn, help_)
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--rig")
        sp.add_argument("--out", required=True, help="checkpoint path")

    for name, fn, help_ in (("probe", cmd_probe, "linear probe on frozen features"),
                            ("finetune", cmd_finetune, "fine-tune all layers with layer decay")):
        sp = stage(name, fn, help_)
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--out", required=True, help="checkpoint path")
        sp.add_argument("--labels", choices=("pseudo", "real"), default="pseudo")

    sp = stage("eval", cmd_eval, "score predictions against pseudo or real labels")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--labels", choices=("pseudo", "real"), default="real")
    sp.add_argument("--out", required=True, help="report prefix; writes .txt, .csv and .json")

    sp = stage("bench", cmd_bench, "inference throughput per backbone depth")
    sp.add_argument("--depth", default="8,16,24")
    sp.add_argument("--repeats", type=int, default=10)
    sp.add_argument("--out")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        run = load_run_config(args.config)
        return args.func(args, run)
    except ValidationError as exc:
        sys.stderr.write(f"validation failure: {exc}\n")
        return EXIT_VALIDATION
    except (ConfigError, FormatError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        sys.stderr.write(f"bad input: {exc}\n")
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        sys.stderr.write(f"internal error: {type(exc).__name__}: {exc}\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
