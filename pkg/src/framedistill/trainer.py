"""Distillation, linear probing, fine-tuning, inference and evaluation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import IGNORE_ID, RigConfig, RunConfig
from .errors import ValidationError
from .frameio import LidarFrame, read_feature_map, read_labels, read_lidar_frame
from .geometry import project_points
from .metrics import ConfusionMatrix, accumulate, scores, scores_json
from .student import (
    Checkpoint,
    FrameRouting,
    StudentConfig,
    add_grads,
    backward,
    build_routing,
    classify_head,
    classify_head_backward,
    distill_head,
    distill_head_backward,
    forward,
    init_params,
    layer_index,
)
from .sync import ManifestRecord, PairManifest
from .tensorgrad import OptState, adamw_step, bilinear_resize, cross_entropy, distill_loss, l2_normalize

log = logging.getLogger(__name__)

CLASSIFIER = ("classifier.W", "classifier.b")
TEACHER_MIN_NORM = 1e-6


@dataclass
class TrainReport:
    stage: str
    epochs: int
    epoch_losses: list[float]
    seed: int
    fingerprint: str
    checkpoint: str | None = None
    skipped_batches: int = 0
    metrics: dict | None = None
    wall_clock_s: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock_s")
        return d

    def write(self, path: str | Path) -> None:
        """Write the deterministic report and a separate ``.timing.json`` sidecar."""
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        timing = path.with_suffix(".timing.json")
        timing.write_text(json.dumps({"wall_clock_s": self.wall_clock_s}) + "\n", encoding="utf-8")


# -- data preparation -------------------------------------------------------

@dataclass(eq=False)
class DistillSample:
    source: str
    routing: FrameRouting
    valid: np.ndarray  # indices of points with a teacher target
    targets: np.ndarray  # (len(valid), C) unit rows
    points: np.ndarray | None = None  # raw (N, 4) input, kept for augmentation


def teacher_targets(fm_data: np.ndarray, rig: RigConfig, frame: LidarFrame):
    """Indices of usable points and their normalized teacher vectors.

    The teacher map is bilinearly resized to the camera resolution and read at
    each point's rounded pixel. Points landing on teacher pixels with no
    descriptor (zero vectors) are dropped.
    """
    k = rig.intrinsics
    full = bilinear_resize(fm_data, k.height, k.width)
    proj = project_points(rig, frame)
    idx = np.flatnonzero(proj.valid)
    vec = full[proj.py[idx], proj.px[idx]].astype(np.float64)
    keep = np.linalg.norm(vec, axis=1) > TEACHER_MIN_NORM
    return idx[keep], l2_normalize(vec[keep], axis=1)


def prepare_distill_samples(manifest: PairManifest, rig: RigConfig, cfg: StudentConfig) -> list[DistillSample]:
    samples = []
    for rec in manifest:
        if not rec.paired or rec.featmap is None:
            continue
        frame = read_lidar_frame(manifest.resolve(rec.lidar))
        if len(frame) == 0:
            continue
        fm = read_feature_map(manifest.resolve(rec.featmap))
        if fm.channels != cfg.teacher_dim:
            raise ValidationError(
                f"{rec.featmap}: teacher has {fm.channels} channels, config expects {cfg.teacher_dim}")
        valid, targets = teacher_targets(fm.data, rig, frame)
        samples.append(DistillSample(rec.lidar, build_routing(cfg, frame.points), valid, targets,
                                     frame.points))
    return samples


@dataclass(eq=False)
class LabeledSample:
    source: str
    routing: FrameRouting
    labels: np.ndarray


def record_labels(manifest: PairManifest, rec: ManifestRecord, frame: LidarFrame,
                  label_source: str) -> np.ndarray | None:
    if label_source == "real":
        return frame.labels
    if label_source != "pseudo":
        raise ValueError(f"label source must be 'pseudo' or 'real', got {label_source!r}")
    if rec.labels is None:
        return None
    labels = read_labels(manifest.resolve(rec.labels))
    if len(labels) != len(frame):
        raise ValidationError(f"{rec.labels}: {len(labels)} labels for {len(frame)} points in {rec.lidar}")
    return labels


def prepare_labeled_samples(manifest: PairManifest, cfg: StudentConfig,
                            label_source: str = "pseudo") -> list[LabeledSample]:
    samples = []
    for rec in manifest:
        frame = read_lidar_frame(manifest.resolve(rec.lidar))
        labels = record_labels(manifest, rec, frame, label_source)
        if labels is None or len(frame) == 0:
            continue
        bad = (labels >= cfg.n_classes) & (labels != IGNORE_ID)
        if np.any(bad):
            raise ValidationError(f"{rec.lidar}: labels outside [0, {cfg.n_classes}) and not IGNORE")
        samples.append(LabeledSample(rec.lidar, build_routing(cfg, frame.points), labels))
    return samples


def _batches(n: int, batch: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch):
        yield perm[start:start + batch]


def _copy_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


# -- distillation -----------------------------------------------------------

def distill(manifest: PairManifest, rig: RigConfig, run: RunConfig,
            samples: list[DistillSample] | None = None) -> tuple[Checkpoint, TrainReport]:
    """Train the backbone and distillation head to match teacher descriptors."""
    t0 = time.perf_counter()
    cfg = StudentConfig.from_run_config(run)
    d = run.distill
    if samples is None:
        samples = prepare_distill_samples(manifest, rig, cfg)
    if not any(len(s.valid) for s in samples):
        raise ValidationError("distill: no manifest record has a point with a teacher target")
    params = init_params(cfg, run.seed)
    state = OptState(lr=d.lr, weight_decay=d.weight_decay)
    rng = np.random.default_rng(run.seed)
    aug_rng = np.random.default_rng([run.seed, 1])  # separate stream keeps the shuffle order fixed
    losses, skipped = [], 0
    for epoch in range(d.epochs):
        batch_losses = []
        for idx in _batches(len(samples), d.batch, rng):
            items = [samples[i] for i in idx if len(samples[i].valid)]
            if not items:
                skipped += 1
                continue
            if d.yaw_augment:
                items = [_rotated(s, cfg, aug_rng.uniform(-np.pi, np.pi)) for s in items]
            loss, grads = _distill_batch(params, cfg, items, d.eq1_pooling)
            adamw_step(params, grads, state)
            batch_losses.append(loss)
        losses.append(float(np.mean(batch_losses)))
        log.info("distill epoch %d/%d loss %.6f", epoch + 1, d.epochs, losses[-1])
    report = TrainReport("distill", d.epochs, losses, run.seed, cfg.fingerprint(),
                         skipped_batches=skipped, wall_clock_s=time.perf_counter() - t0)
    return Checkpoint(cfg, params, state), report


def _rotated(s: DistillSample, cfg: StudentConfig, yaw: float) -> DistillSample:
    if s.points is None:
        raise ValueError(f"{s.source}: sample was prepared without raw points")
    c, sn = np.cos(yaw), np.sin(yaw)
    pts = s.points.astype(np.float64)
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    pts[:, 0] = c * x - sn * y
    pts[:, 1] = sn * x + c * y
    return DistillSample(s.source, build_routing(cfg, pts), s.valid, s.targets, s.points)


def _distill_batch(params, cfg: StudentConfig, items: list[DistillSample], pooling: str):
    feats, caches, outs, pres = [], [], [], []
    for s in items:
        h, cache = forward(params, cfg, None, routing=s.routing)
        out, pre = distill_head(params, h[s.valid])
        feats.append(h)
        caches.append(cache)
        outs.append(out)
        pres.append(pre)
    if pooling == "per_batch":
        loss, g = distill_loss(np.concatenate(outs), np.concatenate([s.targets for s in items]))
        splits = np.cumsum([len(s.valid) for s in items])[:-1]
        douts = np.split(g, splits)
    else:
        parts = [distill_loss(o, s.targets) for o, s in zip(outs, items)]
        loss = float(np.mean([p[0] for p in parts]))
        douts = [p[1] / len(items) for p in parts]
    grads: dict[str, np.ndarray] = {}
    for s, h, cache, pre, dout in zip(items, feats, caches, pres, douts):
        dsel, ghead = distill_head_backward(params, h[s.valid], pre, dout)
        dh = np.zeros_like(h)
        dh[s.valid] = dsel
        add_grads(grads, ghead)
        add_grads(grads, backward(params, cfg, cache, dh))
    return loss, grads


def distill_eval_loss(ckpt: Checkpoint, samples: list[DistillSample]) -> float:
    """Distillation loss pooled over all valid points of ``samples`` (no update)."""
    outs, targets = [], []
    for s in samples:
        if not len(s.valid):
            continue
        h, _ = forward(ckpt.params, ckpt.config, None, routing=s.routing)
        outs.append(distill_head(ckpt.params, h[s.valid])[0])
        targets.append(s.targets)
    return distill_loss(np.concatenate(outs), np.concatenate(targets))[0]


# -- supervised stages ------------------------------------------------------

def _check_has_labels(samples: list[LabeledSample], stage: str) -> None:
    if not samples or not any(np.any(s.labels != IGNORE_ID) for s in samples):
        raise ValidationError(f"{stage}: every label in the manifest is IGNORE; refusing to train")


def train_metrics(ckpt: Checkpoint, samples: list[LabeledSample]) -> dict:
    cm = ConfusionMatrix.empty(ckpt.config.n_classes)
    for s in samples:
        h, _ = forward(ckpt.params, ckpt.config, None, routing=s.routing)
        cm = accumulate(cm, s.labels, argmax_labels(classify_head(ckpt.params, h)))
    return scores(cm) if cm.total else {}


def linear_probe(ckpt: Checkpoint, manifest: PairManifest, run: RunConfig, label_source: str = "pseudo",
                 samples: list[LabeledSample] | None = None) -> tuple[Checkpoint, TrainReport]:
    """Train only the classifier on frozen backbone features."""
    t0 = time.perf_counter()
    cfg = ckpt.config
    p = run.probe
    if samples is None:
        samples = prepare_labeled_samples(manifest, cfg, label_source)
    _check_has_labels(samples, "probe")
    feats = [forward(ckpt.params, cfg, None, routing=s.routing)[0] for s in samples]
    params = _copy_params(ckpt.params)
    head = {k: params[k] for k in CLASSIFIER}
    state = OptState(lr=p.lr, weight_decay=p.weight_decay)
    rng = np.random.default_rng(run.seed)
    losses, skipped = [], 0
    for epoch in range(p.epochs):
        batch_losses = []
        for idx in _batches(len(samples), p.batch, rng):
            labels = np.concatenate([samples[i].labels for i in idx])
            if not np.any(labels != IGNORE_ID):
                skipped += 1
                continue
            h = np.concatenate([feats[i] for i in idx])
            loss, dlogits = cross_entropy(classify_head(head, h), labels, IGNORE_ID)
            _, g = classify_head_backward(head, h, dlogits)
            adamw_step(head, g, state)
            batch_losses.append(loss)
        losses.append(float(np.mean(batch_losses)))
        log.info("probe epoch %d/%d loss %.6f", epoch + 1, p.epochs, losses[-1])
    params.update(head)
    out = Checkpoint(cfg, params, state)
    metrics = scores_json(train_metrics(out, samples), run.class_names)
    report = TrainReport("probe", p.epochs, losses, run.seed, cfg.fingerprint(),
                         skipped_batches=skipped, metrics=metrics,
                         wall_clock_s=time.perf_counter() - t0)
    return out, report


def layer_decay_scales(cfg: StudentConfig, decay: float) -> dict[str, float]:
    """Learning-rate multiplier per parameter: ``decay ** (L - 1 - layer)``."""
    from .student import param_shapes

    n_layers = cfg.depth + 2
    return {name: decay ** (n_layers - 1 - layer_index(name, cfg.depth))
            for name, _ in param_shapes(cfg)}


def finetune(ckpt: Checkpoint, manifest: PairManifest, run: RunConfig, label_source: str = "pseudo",
             samples: list[LabeledSample] | None = None) -> tuple[Checkpoint, TrainReport]:
    """Train backbone and classifier together with layer-wise learning-rate decay."""
    t0 = time.perf_counter()
    cfg = ckpt.config
    f = run.finetune
    if samples is None:
        samples = prepare_labeled_samples(manifest, cfg, label_source)
    _check_has_labels(samples, "finetune")
    params = _copy_params(ckpt.params)
    scales = layer_decay_scales(cfg, f.layer_decay)
    state = OptState(lr=f.lr, weight_decay=f.weight_decay)
    rng = np.random.default_rng(run.seed)
    losses, skipped = [], 0
    for epoch in range(f.epochs):
        batch_losses = []
        for idx in _batches(len(samples), f.batch, rng):
            items = [samples[i] for i in idx]
            labels = np.concatenate([s.labels for s in items])
            if not np.any(labels != IGNORE_ID):
                skipped += 1
                continue
            fwd = [forward(params, cfg, None, routing=s.routing) for s in items]
            h = np.concatenate([x[0] for x in fwd])
            loss, dlogits = cross_entropy(classify_head(params, h), labels, IGNORE_ID)
            dh, grads = classify_head_backward(params, h, dlogits)
            start = 0
            for s, (hs, cache) in zip(items, fwd):
                stop = start + len(hs)
                add_grads(grads, backward(params, cfg, cache, dh[start:stop]))
                start = stop
            adamw_step(params, grads, state, scales)
            batch_losses.append(loss)
        losses.append(float(np.mean(batch_losses)))
        log.info("finetune epoch %d/%d loss %.6f", epoch + 1, f.epochs, losses[-1])
    out = Checkpoint(cfg, params, state)
    metrics = scores_json(train_metrics(out, samples), run.class_names)
    report = TrainReport("finetune", f.epochs, losses, run.seed, cfg.fingerprint(),
                         skipped_batches=skipped, metrics=metrics,
                         wall_clock_s=time.perf_counter() - t0)
    return out, report


# -- inference --------------------------------------------------------------

def argmax_labels(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the smallest class id on ties
    return np.argmax(logits, axis=1).astype(np.uint16)


def predict(ckpt: Checkpoint, frame, classifier: dict[str, np.ndarray] | None = None,
            cfg: StudentConfig | None = None, routing: FrameRouting | None = None) -> np.ndarray:
    """Per-point class ids from lidar alone."""
    if cfg is not None:
        ckpt.check_config(cfg)
    head = classifier if classifier is not None else {k: ckpt.params[k] for k in CLASSIFIER}
    h, _ = forward(ckpt.params, ckpt.config, frame, routing=routing)
    return argmax_labels(classify_head(head, h))


@dataclass
class EvalResult:
    confusion: ConfusionMatrix
    scores: dict
    frames: int = 0
    predictions: dict[str, np.ndarray] = field(default_factory=dict)


def evaluate(ckpt: Checkpoint, manifest: PairManifest, label_source: str = "real",
             keep_predictions: bool = False) -> EvalResult:
    """Score predictions against per-point reference labels (real GT or pseudo-labels)."""
    cm = ConfusionMatrix.empty(ckpt.config.n_classes)
    frames = 0
    preds = {}
    for rec in manifest:
        frame = read_lidar_frame(manifest.resolve(rec.lidar))
        ref = record_labels(manifest, rec, frame, label_source)
        if ref is None or len(frame) == 0:
            continue
        pred = predict(ckpt, frame)
        if keep_predictions:
            preds[rec.lidar] = pred
        cm = accumulate(cm, ref, pred)
        frames += 1
    if cm.total == 0:
        raise ValidationError(f"evaluate: no {label_source} reference labels in the manifest")
    return EvalResult(cm, scores(cm), frames, preds)
