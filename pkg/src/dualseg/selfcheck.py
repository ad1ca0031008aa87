"""Fast built-in checks: gradients, pseudo-label rules, EMA schedule, projection round trip.

Each check returns ``(name, ok, detail)``.  :func:`run_all` runs every suite
and the CLI reports the first failure.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .branches import BranchConfig, forward_2d, init_branch_params
from .dmf import fuse_2d, fuse_3d, init_dmf_params
from .geometry import build_pairs, project_points
from .gradcheck import check_gradients
from .plo import DELETED, optimize_2d, optimize_3d
from .synth import generate_scene, render_views
from .tensor import Tensor
from .trainer import EmaState, ema_update


def check_gradients_suite(seed: int = 0) -> tuple[str, bool, str]:
    rng = np.random.default_rng(seed)
    t = lambda *s: Tensor(rng.normal(size=s), requires_grad=True)
    worst = 0.0
    a, b = t(4, 5), t(5, 3)
    x, w, bias = t(1, 6, 6, 2), t(3, 3, 2, 3), t(3)
    labels = rng.integers(0, 3, 4)
    cases = [
        (lambda: T.tsum(T.relu(T.mul(a, a))), [a]),
        (lambda: T.cross_entropy(T.matmul(a, b), labels, 3), [a, b]),
        (lambda: T.tsum(T.mul(T.softmax(T.matmul(a, b), -1), T.matmul(a, b))), [a, b]),
        (lambda: T.tsum(T.mul(T.conv(x, w, bias), T.conv(x, w, bias))), [x, w, bias]),
        (lambda: T.tsum(T.sq_l2(T.upsample_nearest(T.conv(x, w, None, stride=2, padding=0)), -1)), [x, w]),
    ]
    for fn, ts in cases:
        worst = max(worst, check_gradients(fn, ts))
    p = init_dmf_params([8], [8], 2, rng)
    f3, f2 = t(5, 8), t(5, 8)
    for k in p:
        p[k].requires_grad = True
    worst = max(worst, check_gradients(
        lambda: T.tsum(T.mul(fuse_3d(f3, f2, p, 0, 2), fuse_2d(f2, f3, p, 0, 2))),
        [f3, f2] + list(p.values()), max_entries=6, rng=rng))
    cfg = BranchConfig((4, 8), 3)
    bp = init_branch_params(cfg, rng)
    imgs = rng.random((1, 8, 8, 3))
    worst = max(worst, check_gradients(
        lambda: T.tsum(T.mul(forward_2d(imgs, bp, cfg).logits, 0.1)),
        list(bp.values()), max_entries=4, rng=rng))
    return "gradients", worst <= 1e-4, f"worst relative error {worst:.2e}"


def check_plo_suite(seed: int = 0, n: int = 2000) -> tuple[str, bool, str]:
    rng = np.random.default_rng(seed)
    coarse = rng.integers(0, 4, n)
    other = rng.integers(0, 4, n)
    conf = rng.random(n)
    covered = rng.random(n) < 0.8
    for t in (0.6, 0.85, 0.9, 0.95):
        got3 = optimize_3d(coarse, other, conf, t)
        got2 = optimize_2d(coarse, other, conf, t, covered)
        for i in range(n):
            keep3 = other[i] == coarse[i] or conf[i] > t
            keep2 = (covered[i] and other[i] == coarse[i]) or conf[i] > t
            if got3[i] != (coarse[i] if keep3 else DELETED) or got2[i] != (coarse[i] if keep2 else DELETED):
                return "plo", False, f"mismatch at element {i} for t_conf={t}"
    return "plo", True, f"{n} triples x 4 thresholds agree"


def check_ema_suite(k: int = 50, t_ema: float = 0.9) -> tuple[str, bool, str]:
    start, target = 1.0, -0.5
    state = EmaState(T.ParamSet({"w": Tensor(np.full(3, start))}), t_ema)
    student = T.ParamSet({"w": Tensor(np.full(3, target))})
    ema_update(state, student)
    if not np.array_equal(state.teacher["w"].data, student["w"].data):
        return "ema", False, "step 0 is not an exact copy"
    state = EmaState(T.ParamSet({"w": Tensor(np.full(3, start))}), t_ema)
    for _ in range(k):
        ema_update(state, student)
    keep = np.prod([min(1 - 1 / (s + 1), t_ema) for s in range(k)])
    expect = target + (start - target) * keep
    err = float(np.abs(state.teacher["w"].data - expect).max())
    return "ema", err <= 1e-12, f"deviation from unrolled product {err:.1e}"


def check_projection_suite(seed: int = 0) -> tuple[str, bool, str]:
    scene = generate_scene(seed)
    for view in render_views(scene, 2, seed=seed):
        pairs = build_pairs(scene, view)
        proj = project_points(scene.points[pairs.point_index], view.camera)
        if not (np.array_equal(proj.rows, pairs.rows) and np.array_equal(proj.cols, pairs.cols)):
            return "projection", False, f"view {view.index}: pair does not re-project to its pixel"
        err = np.abs(proj.depth - view.depth[pairs.rows, pairs.cols])
        if pairs.count and err.max() > 1e-6:
            return "projection", False, f"view {view.index}: depth disagreement {err.max():.1e}"
    return "projection", True, "all pairs re-project exactly"


SUITES = (check_gradients_suite, check_plo_suite, check_ema_suite, check_projection_suite)


def run_all() -> list[tuple[str, bool, str]]:
    results = []
    for suite in SUITES:
        try:
            results.append(suite())
        except Exception as exc:  # a crash is a failure, not an abort
            results.append((suite.__name__, False, f"{type(exc).__name__}: {exc}"))
    return results
