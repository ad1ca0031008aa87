"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 1-6 are oracle checks and take seconds.  Criteria 7-10 share one
session-scoped set of training runs on the default synthetic dataset
(five ladder models x three seeds plus a zero-weight consistency run), so the
first of them to execute pays for all.
"""

import dataclasses
import json
import time

import numpy as np
import pytest

from dualseg import tensor as T
from dualseg.branches import BranchConfig, forward_2d, forward_3d, init_branch_params, voxelize
from dualseg.dataset import GenConfig
from dualseg.dmf import attention_weights, fuse_2d, fuse_3d, init_dmf_params
from dualseg.geometry import CorrespondenceSet, build_pairs, densify_on_image, project_points
from dualseg.gradcheck import check_gradients
from dualseg.metrics import compute_metrics
from dualseg.plo import DELETED, optimize_2d, optimize_3d
from dualseg.synth import generate_scene, render_views
from dualseg.tensor import ParamSet, Tensor
from dualseg.trainer import ABLATION_LADDER, EmaState, RunConfig, ema_update, train

from oracles import OP_KINDS, loop_metrics, naive_densify, op_case, plo_rule, straight_line

SEEDS = (0, 1, 2)
T_CONF_SWEEP = (0.6, 0.85, 0.9, 0.95)


# ---------------------------------------------------------------- 1. gradients

def _micro_networks(rng):
    """FD cases for the fusion block and both branch U-Nets, all in float64."""
    cases = []
    p = init_dmf_params([8], [4], 4, rng)
    for t in p.values():
        t.data = t.data + rng.normal(scale=0.3, size=t.shape)
        t.requires_grad = True
    f3 = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    f2 = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    r3, r2 = Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(3, 4)))
    cases.append((lambda: T.add(T.tsum(T.mul(fuse_3d(f3, f2, p, 0, 4), r3)),
                                T.tsum(T.mul(fuse_2d(f2, f3, p, 0, 4), r2))), [f3, f2] + list(p.values())))

    cfg = BranchConfig(widths=(3, 4), n_classes=3)
    bp = init_branch_params(cfg, rng)
    for t in bp.values():  # off the ReLU kink that zero biases create on empty cells
        t.data = t.data + rng.normal(scale=0.1, size=t.shape)
    pts = np.array([[0.02, 0.02, 0.02], [0.12, 0.07, 0.03], [0.17, 0.18, 0.08], [0.06, 0.16, 0.13]])
    grid = voxelize(pts, rng.random((4, 3)), 0.05, extent=(0.2, 0.2, 0.2), multiple=2)
    labels3 = np.array([0, 1, 2, 1])
    b3 = [t for k, t in bp.items() if k.startswith("b3d")]
    cases.append((lambda: T.cross_entropy(forward_3d(grid, bp, cfg, hook=lambda s, f: T.mul(f, 1.5)).logits,
                                          labels3, 3), b3))
    img = rng.random((1, 8, 8, 3))
    labels2 = rng.integers(0, 3, 64)
    b2 = [t for k, t in bp.items() if k.startswith("b2d")]
    cases.append((lambda: T.cross_entropy(forward_2d(img, bp, cfg).logits, labels2, 3), b2))
    return cases


def test_criterion_1_gradient_suite(acceptance):
    start = time.perf_counter()
    worst, n = 0.0, 0
    for i in range(126):  # 7 randomized cases per differentiable op
        kind = OP_KINDS[i % len(OP_KINDS)]
        fn, inputs = op_case(kind, np.random.default_rng(10_000 + i))
        worst = max(worst, check_gradients(fn, inputs, h=1e-5))
        n += 1
    rng = np.random.default_rng(7)
    for fn, inputs in _micro_networks(rng):
        worst = max(worst, check_gradients(fn, inputs, h=1e-5, max_entries=8, rng=rng))
        n += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and n >= 100 and elapsed < 120
    acceptance(1, ok, f"{n} cases, worst relative error {worst:.2e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2. pseudo-label rules

def test_criterion_2_plo_oracle(acceptance):
    rng = np.random.default_rng(2024)
    n = 10_000
    coarse = rng.integers(0, 6, n)
    vote = np.where(rng.random(n) < 0.4, coarse, rng.integers(0, 6, n))
    vote[rng.random(n) < 0.05] = DELETED
    conf = rng.random(n)
    conf[:100] = 0.9
    conf[100:200] = 0.85
    covered = vote != DELETED
    mismatches = 0
    kept3, kept2 = [], []
    for t in T_CONF_SWEEP:
        got3 = optimize_3d(coarse, vote, conf, t)
        got2 = optimize_2d(coarse, vote, conf, t, covered)
        ref3 = np.array([plo_rule(c, v, g, t) for c, v, g in zip(coarse, vote, conf)])
        ref2 = np.array([plo_rule(c, v, g, t, cv) for c, v, g, cv in zip(coarse, vote, conf, covered)])
        mismatches += int((got3 != ref3).sum() + (got2 != ref2).sum())
        kept3.append(got3 != DELETED)
        kept2.append(got2 != DELETED)
    monotone = all(not (b & ~a).any() for kept in (kept3, kept2) for a, b in zip(kept, kept[1:]))
    ok = mismatches == 0 and monotone
    acceptance(2, ok, f"{mismatches} mismatches over {n} triples x {len(T_CONF_SWEEP)} thresholds, "
                      f"monotone in t_conf: {monotone}")
    assert ok


# ---------------------------------------------------------------- 3. EMA

def test_criterion_3_ema_closed_form(acceptance):
    rng = np.random.default_rng(3)
    worst = 0.0
    for start, k, cap in [(1, 500, 0.999), (5, 120, 0.9), (900, 300, 0.999), (2, 64, 0.5)]:
        w0, s = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        state = EmaState(_ps(w0), cap, step=start)
        for _ in range(k):
            ema_update(state, _ps(s))
        prod = 1.0
        for j in range(start, start + k):
            prod *= min(1.0 - 1.0 / (j + 1), cap)
        worst = max(worst, float(np.abs(state.teacher["w"].data - s - prod * (w0 - s)).max()))
    first = EmaState(_ps(rng.normal(size=5)), 0.999)
    target = rng.normal(size=5)
    ema_update(first, _ps(target))
    copy_exact = np.array_equal(first.teacher["w"].data, target)
    ok = worst <= 1e-12 and copy_exact
    acceptance(3, ok, f"worst deviation from unrolled product {worst:.1e}, s=0 exact copy: {copy_exact}")
    assert ok


def _ps(a):
    return ParamSet({"w": Tensor(np.array(a, dtype=np.float64))})


# ---------------------------------------------------------------- 4. fusion

def test_criterion_4_dmf_oracle(acceptance):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        heads = int(rng.choice([1, 2, 4]))
        d1, d2 = heads * int(rng.integers(1, 3)), heads * int(rng.integers(1, 3))
        n = int(rng.integers(1, 4))
        p = init_dmf_params([d1], [d2], heads, rng)
        for t in p.values():
            t.data = t.data + rng.normal(scale=0.3, size=t.shape)
        f3, f2 = rng.normal(size=(n, d1)), rng.normal(size=(n, d2))
        w3 = {k[len("dmf.s0.to3d."):]: t.data for k, t in p.items() if k.startswith("dmf.s0.to3d.")}
        w2 = {k[len("dmf.s0.to2d."):]: t.data for k, t in p.items() if k.startswith("dmf.s0.to2d.")}
        worst = max(worst,
                    np.abs(fuse_3d(Tensor(f3), Tensor(f2), p, 0, heads).data - straight_line(f3, f2, w3, heads)).max(),
                    np.abs(fuse_2d(Tensor(f2), Tensor(f3), p, 0, heads).data - straight_line(f2, f3, w2, heads)).max())
    row_err = 0.0
    for _ in range(200):
        a = attention_weights(Tensor(rng.normal(scale=3, size=(7, 4, 2))), Tensor(rng.normal(scale=3, size=(7, 4, 2))))
        row_err = max(row_err, float(np.abs(a.data.sum(1) - 1).max()))
    p = init_dmf_params([8], [8], 4, rng)
    for t in p.values():
        t.data = t.data + rng.normal(scale=0.3, size=t.shape)
    p["dmf.s0.to3d.v"].data[...] = 0.0
    f3, f2 = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    e = np.broadcast_to(p["dmf.s0.to3d.expand.b"].data, (5, 8))
    expect = np.concatenate([e, f3], -1) @ p["dmf.s0.to3d.out.w"].data + p["dmf.s0.to3d.out.b"].data
    zero_v = np.array_equal(fuse_3d(Tensor(f3), Tensor(f2), p, 0, 4).data, expect)
    ok = worst <= 1e-10 and row_err <= 1e-9 and zero_v
    acceptance(4, ok, f"1000 instances worst {worst:.1e}, attention row error {row_err:.1e}, zero-V exact: {zero_v}")
    assert ok


# ---------------------------------------------------------------- 5. geometry

def test_criterion_5_geometry_round_trip(acceptance):
    total = bad_pixel = 0
    depth_err = 0.0
    for seed in range(12):
        scene = generate_scene(seed)
        for view in render_views(scene, 3, seed=seed):
            pairs = build_pairs(scene, view)
            proj = project_points(scene.points[pairs.point_index], view.camera)
            total += pairs.count
            bad_pixel += int(((proj.rows != pairs.rows) | (proj.cols != pairs.cols)).sum())
            depth_err = max(depth_err, float(np.abs(proj.depth - view.depth[pairs.rows, pairs.cols]).max()))
    rng = np.random.default_rng(5)
    dense_mismatch = 0
    for _ in range(200):
        h, w = int(rng.integers(3, 14)), int(rng.integers(3, 14))
        flat = rng.choice(h * w, size=int(rng.integers(0, h * w // 2 + 1)), replace=False)
        pairs = CorrespondenceSet(np.arange(flat.size), flat // w, flat % w, h, w)
        vec = rng.random((flat.size, 5))
        window = int(rng.choice([1, 3, 5, 9]))
        dense, cov = densify_on_image(vec, pairs, window)
        ref_dense, ref_cov = naive_densify(vec, pairs, window)
        dense_mismatch += int(not (np.array_equal(cov, ref_cov) and dense.tobytes() == ref_dense.tobytes()))
    ok = total > 0 and bad_pixel == 0 and depth_err <= 1e-6 and dense_mismatch == 0
    acceptance(5, ok, f"{total} pairs, {bad_pixel} off-pixel, max depth error {depth_err:.1e}, "
                      f"{dense_mismatch}/200 densification mismatches")
    assert ok


# ---------------------------------------------------------------- 6. metrics

def test_criterion_6_metrics_oracle(acceptance):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(1000):
        c = int(rng.integers(2, 9))
        cm = rng.integers(0, 30, (c, c)) * (rng.random((c, c)) < 0.7)
        if rng.random() < 0.3:
            k = rng.integers(0, c)
            cm[k, :] = 0
            cm[:, k] = 0
        if cm.sum() == 0:
            cm[0, 0] = 1
        m = compute_metrics(cm)
        ref = loop_metrics(cm.tolist())
        worst = max(worst, abs(m.miou - ref[0]), abs(m.macc - ref[1]), abs(m.oa - ref[2]))
    ex = compute_metrics(np.array([[1, 1], [0, 2]]))
    example = abs(ex.miou - 7 / 12) <= 1e-15 and ex.macc == 0.75 and ex.oa == 0.75
    ok = worst <= 1e-12 and example
    acceptance(6, ok, f"1000 matrices worst {worst:.1e}, worked example (7/12, 0.75, 0.75): {example}")
    assert ok


# ---------------------------------------------------------------- training runs for 7-10

@pytest.fixture(scope="session")
def ladder(tmp_path_factory):
    root = tmp_path_factory.mktemp("ladder")
    dataset = GenConfig().build()
    cache: dict = {}
    runs = {}
    for name in ABLATION_LADDER:
        for seed in SEEDS:
            cfg = RunConfig(seed=seed).with_ablation(name)
            runs[name, seed] = train(cfg, dataset, out_dir=root / name / f"seed_{seed}", prepared=cache)
    zero = dataclasses.replace(RunConfig(seed=0), lambda_c=0.0)
    runs["full_lambda0", 0] = train(zero, dataset, out_dir=root / "full_lambda0" / "seed_0", prepared=cache)
    return {"root": root, "dataset": dataset, "cache": cache, "runs": runs}


def _val(run, modality):
    return run.final_eval.to_json()[modality]["mIoU"]


def _mean(runs, name, modality):
    return float(np.mean([_val(runs[name, s], modality) for s in SEEDS]))


@pytest.mark.slow
def test_criterion_7_trend_over_baseline(ladder, acceptance):
    runs = ladder["runs"]
    gain3 = 100 * (_mean(runs, "full", "3d") - _mean(runs, "baseline", "3d"))
    gain2 = 100 * (_mean(runs, "full", "2d") - _mean(runs, "baseline", "2d"))
    slowest = max(r.seconds for r in runs.values())
    ok = gain3 >= 3.0 and gain2 >= 3.0 and slowest < 15 * 60
    acceptance(7, ok, f"full minus baseline over {len(SEEDS)} seeds: 3D {gain3:+.2f}, 2D {gain2:+.2f} points; "
                      f"slowest run {slowest:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_8_ablation_ordering(ladder, acceptance):
    runs = ladder["runs"]
    names = list(ABLATION_LADDER)
    means = [100 * (_mean(runs, n, "3d") + _mean(runs, n, "2d")) / 2 for n in names]
    drops = [a - b for a, b in zip(means, means[1:]) if b < a]
    ok = len(drops) == 0 or (len(drops) == 1 and drops[0] <= 0.5)
    table = ", ".join(f"{n} {m:.2f}" for n, m in zip(names, means))
    acceptance(8, ok, f"mean val mIoU (3D and 2D averaged, {len(SEEDS)} seeds): {table}")
    assert ok


@pytest.mark.slow
def test_criterion_9_determinism(ladder, acceptance, tmp_path):
    again = train(RunConfig(seed=0).with_ablation("full"), ladder["dataset"], out_dir=tmp_path,
                  prepared=ladder["cache"])
    first = (ladder["root"] / "full" / "seed_0" / "metrics.jsonl").read_bytes()
    second = (tmp_path / "metrics.jsonl").read_bytes()
    same = first == second and json.dumps(again.log) == json.dumps(ladder["runs"]["full", 0].log)
    acceptance(9, same, f"full seed 0 trained twice: metric logs bitwise identical: {same} ({len(first)} bytes)")
    assert same


@pytest.mark.slow
def test_criterion_10_consistency_effect(ladder, acceptance):
    runs = ladder["runs"]
    with_c = runs["full", 0].final_eval.pair_l2
    without = runs["full_lambda0", 0].final_eval.pair_l2
    ok = with_c < without
    acceptance(10, ok, f"val paired-output L2 at seed 0: lambda_c=5 {with_c:.4f} vs lambda_c=0 {without:.4f}")
    assert ok
