"""Finite-difference gradient checks for every differentiable op and the full student.

Each case builds a random float64 instance, a scalar objective ``f`` and the
analytic gradients, then compares against central differences. Instances whose
ReLU pre-activations sit within ``KINK_MARGIN`` of zero are redrawn: the
objective is not differentiable there and differences straddling the kink are
meaningless.
"""

from __future__ import annotations

import numpy as np

from framedistill import tensorgrad as tg
from framedistill.student import (
    StudentConfig,
    backward,
    build_routing,
    classify_head,
    classify_head_backward,
    distill_head,
    distill_head_backward,
    forward,
    init_params,
)

from .oracles import numeric_grad, rel_error

EPS = 1e-3
KINK_MARGIN = 0.05


def _weighted(R):
    return lambda y: float(np.sum(R * y))


def case_linear(rng):
    x, W, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
    R = rng.normal(size=(5, 3))
    f = lambda: float(np.sum(R * tg.linear(x, W, b)))
    dx, dW, db = tg.linear_backward(R, x, W)
    return max(rel_error(dx, numeric_grad(f, x, EPS)), rel_error(dW, numeric_grad(f, W, EPS)),
               rel_error(db, numeric_grad(f, b, EPS)))


def case_relu(rng):
    x = rng.normal(size=(6, 4))
    x = np.where(np.abs(x) < KINK_MARGIN, np.sign(x) * KINK_MARGIN + x, x)
    R = rng.normal(size=x.shape)
    f = lambda: float(np.sum(R * tg.relu(x)))
    return rel_error(tg.relu_backward(R, x), numeric_grad(f, x, EPS))


def case_l2_normalize(rng):
    x = rng.normal(size=(5, 4))
    R = rng.normal(size=x.shape)
    f = lambda: float(np.sum(R * tg.l2_normalize(x, axis=1)))
    return rel_error(tg.l2_normalize_backward(R, x, axis=1), numeric_grad(f, x, EPS))


def case_scatter_gather(rng):
    n_cells = 4
    ids = rng.integers(0, n_cells, 7)
    x = rng.normal(size=(7, 3))
    g = rng.normal(size=(n_cells, 3))
    Rg = rng.normal(size=(n_cells, 3))
    Rp = rng.normal(size=(7, 3))
    fs = lambda: float(np.sum(Rg * tg.grid_scatter_mean(x, ids, n_cells)))
    fg = lambda: float(np.sum(Rp * tg.grid_gather(g, ids)))
    return max(rel_error(tg.grid_scatter_mean_backward(Rg, ids, n_cells), numeric_grad(fs, x, EPS)),
               rel_error(tg.grid_gather_backward(Rp, ids, n_cells), numeric_grad(fg, g, EPS)))


def case_distill_loss(rng):
    # differentiate through the normalization so perturbed inputs stay on the sphere
    s = rng.normal(size=(5, 4))
    t = tg.l2_normalize(rng.normal(size=(5, 4)), axis=1)
    f = lambda: tg.distill_loss(tg.l2_normalize(s, axis=1), t)[0]
    _, g = tg.distill_loss(tg.l2_normalize(s, axis=1), t)
    return rel_error(tg.l2_normalize_backward(g, s, axis=1), numeric_grad(f, s, EPS))


def case_cross_entropy(rng):
    logits = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, 6)
    labels[rng.random(6) < 0.3] = 65535
    f = lambda: tg.cross_entropy(logits, labels)[0]
    return rel_error(tg.cross_entropy(logits, labels)[1], numeric_grad(f, logits, EPS))


def _student_instance(rng):
    cfg = StudentConfig(embed_dim=int(rng.integers(2, 9)), depth=int(rng.integers(1, 4)),
                        grid_cells=4, cell_size=0.5, teacher_dim=3, n_classes=3)
    n = int(rng.integers(1, 6))
    pts = np.column_stack([rng.uniform(-1, 1, (n, 3)), rng.uniform(0, 1, n)])
    params = {k: v + rng.normal(scale=0.1, size=v.shape) * (v.ndim == 1)
              for k, v in init_params(cfg, int(rng.integers(2**31)), dtype=np.float64).items()}
    routing = build_routing(cfg, pts)
    teacher = tg.l2_normalize(rng.normal(size=(n, 3)), axis=1)
    labels = rng.integers(0, 3, n)
    return cfg, params, routing, teacher, labels


def _student_objective(cfg, params, routing, teacher, labels):
    h, cache = forward(params, cfg, None, routing=routing)
    out, pre = distill_head(params, h)
    ld, gd = tg.distill_loss(out, teacher)
    logits = classify_head(params, h)
    lc, gc = tg.cross_entropy(logits, labels)
    return ld + lc, (h, cache, pre, gd, gc)


def case_student(rng):
    for _ in range(200):
        inst = _student_instance(rng)
        cfg, params, routing, teacher, labels = inst
        _, (h, cache, pre, gd, gc) = _student_objective(*inst)
        a_min = min(float(np.min(np.abs(a))) for _, a, _ in cache.layers)
        d_min = float(np.min(np.linalg.norm(distill_head(params, h)[0] - teacher, axis=1)))
        if a_min > KINK_MARGIN and d_min > KINK_MARGIN:
            break
    else:  # pragma: no cover
        raise RuntimeError("no kink-free student instance found")
    dfe, g_distill = distill_head_backward(params, h, pre, gd)
    dfc, g_cls = classify_head_backward(params, h, gc)
    grads = backward(params, cfg, cache, dfe + dfc)
    grads.update(g_distill)
    grads.update(g_cls)
    f = lambda: _student_objective(cfg, params, routing, teacher, labels)[0]
    return max(rel_error(grads[k], numeric_grad(f, params[k], EPS)) for k in params)


CASES = {
    "linear": case_linear,
    "relu": case_relu,
    "l2_normalize": case_l2_normalize,
    "scatter_gather": case_scatter_gather,
    "distill_loss": case_distill_loss,
    "cross_entropy": case_cross_entropy,
    "student": case_student,
}


def run_suite(instances: int = 20, seed: int = 0) -> dict[str, float]:
    """Worst relative error per case over ``instances`` random draws."""
    worst = {}
    for i, (name, case) in enumerate(CASES.items()):
        worst[name] = max(case(np.random.default_rng([seed, i, k])) for k in range(instances))
    return worst
