"""Two-stream semi-supervised training.

Phase 1 trains the original stream on labeled scenes only.  Phase 2 adds one
unlabeled scene per step: the pseudo-label stream labels it, the labels are
filtered by cross-modal voting, and the original stream is trained on them.
After each optimiser step the pseudo-label stream tracks the original stream
by an exponential moving average whose coefficient ramps as
``min(1 - 1/(s+1), t_ema)``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .branches import BranchConfig, voxelize
from .checkpoint import save_params
from .dataset import Dataset, read_dataset
from .errors import ConfigError, ContractError, TrainingDiverged
from .geometry import CorrespondenceSet, build_pairs, densify_on_image
from .metrics import ConfusionMatrix, compute_metrics
from .model import DualInput, ModelConfig, forward_dual, init_params
from .plo import (DELETED, densify_2d_pseudo, extract_coarse, optimize_2d, optimize_3d, summarize,
                  to_ignore, write_debug_dump)
from .tensor import ParamSet, Tensor

log = logging.getLogger(__name__)

ABLATION_LADDER = {
    "baseline": dict(pseudo_labels=False, ema=False, plo_consistency=False, dmf=False),
    "model_a": dict(pseudo_labels=True, ema=False, plo_consistency=False, dmf=False),
    "model_b": dict(pseudo_labels=True, ema=True, plo_consistency=False, dmf=False),
    "model_c": dict(pseudo_labels=True, ema=True, plo_consistency=True, dmf=False),
    "full": dict(pseudo_labels=True, ema=True, plo_consistency=True, dmf=True),
}


@dataclass
class RunConfig:
    """Training run settings; defaults follow the reference hyperparameters."""

    dataset_dir: str | None = None
    output_dir: str | None = None
    seed: int = 0
    epochs: int = 15
    phase1_fraction: float = 2 / 3  # 100 of 150 epochs
    steps_per_epoch: int = 16
    lr: float = 0.01
    lr_power: float = 0.0
    momentum: float = 0.9
    lambda_c: float = 5.0
    lambda_c_rampup: float = 2 / 3
    t_conf: float = 0.9
    t_ema: float = 0.999
    heads: int = 4
    n_views: int = 3
    window: int = 9
    voxel_size: float = 0.05
    widths: list = field(default_factory=lambda: [16, 32, 64])
    dtype: str = "float32"
    eval_every: int = 1
    pseudo_labels: bool = True
    ema: bool = True
    plo_consistency: bool = True
    dmf: bool = True
    plo_dump: bool = False

    HELP = {
        "dataset_dir": "dataset directory written by gen-data",
        "output_dir": "where checkpoints, metrics.jsonl and dumps go",
        "seed": "parameter init and data order seed",
        "epochs": "total epochs E",
        "phase1_fraction": "share of epochs trained on labeled data only (100/150)",
        "steps_per_epoch": "optimiser steps per epoch",
        "lr": "SGD base learning rate (reference: 0.01)",
        "lr_power": "poly decay lr * (1 - step/total)^power; 0 keeps lr constant",
        "momentum": "SGD momentum (not given in the reference; 0.9 is the usual choice)",
        "lambda_c": "consistency loss weight (reference: 5)",
        "lambda_c_rampup": "share of training over which the consistency weight ramps up to lambda_c (0 = constant)",
        "t_conf": "pseudo-label confidence threshold (reference: 0.9)",
        "t_ema": "EMA coefficient cap (reference: 0.999)",
        "heads": "attention heads in each fusion module (reference: 4)",
        "n_views": "views per scene used in training (reference: 3)",
        "window": "odd densification window in pixels",
        "voxel_size": "voxel edge in metres (reference: 0.05)",
        "widths": "encoder channel widths per scale",
        "dtype": "float32 or float64 training precision",
        "eval_every": "validate every k epochs (and always after the last)",
        "pseudo_labels": "ablation: supervise unlabeled data with pseudo labels",
        "ema": "ablation: EMA teacher instead of the current student",
        "plo_consistency": "ablation: cross-modal label filtering + consistency loss",
        "dmf": "ablation: dual-modal fusion modules",
        "plo_dump": "write per-view retained/deleted pseudo-label counts",
    }

    def validate(self) -> None:
        checks = [
            (self.epochs >= 1, "epochs must be >= 1"),
            (0.0 <= self.phase1_fraction <= 1.0, "phase1_fraction must be in [0, 1]"),
            (self.steps_per_epoch >= 1, "steps_per_epoch must be >= 1"),
            (self.lr >= 0 and math.isfinite(self.lr), "lr must be finite and >= 0"),
            (self.lr_power >= 0 and math.isfinite(self.lr_power), "lr_power must be finite and >= 0"),
            (0.0 <= self.momentum < 1.0, "momentum must be in [0, 1)"),
            (self.lambda_c >= 0, "lambda_c must be >= 0"),
            (0.0 <= self.lambda_c_rampup <= 1.0, "lambda_c_rampup must be in [0, 1]"),
            (0.0 <= self.t_conf <= 1.0, "t_conf must be in [0, 1]"),
            (0.0 < self.t_ema < 1.0, "t_ema must be in (0, 1)"),
            (self.heads >= 1, "heads must be >= 1"),
            (self.n_views >= 1, "n_views must be >= 1"),
            (self.window >= 1 and self.window % 2 == 1, "window must be odd and >= 1"),
            (self.voxel_size > 0, "voxel_size must be positive"),
            (len(self.widths) >= 1 and min(self.widths) >= 1, "widths must be positive"),
            (self.dtype in ("float32", "float64"), "dtype must be float32 or float64"),
            (self.eval_every >= 1, "eval_every must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.dmf:
            for w in self.widths:
                if w % self.heads:
                    raise ConfigError(f"heads={self.heads} must divide every width, got {w}")

    @property
    def phase1_epochs(self) -> int:
        return int(math.floor(self.epochs * self.phase1_fraction + 0.5))

    def model_config(self, n_classes: int) -> ModelConfig:
        return ModelConfig(BranchConfig(tuple(self.widths), n_classes, self.voxel_size), self.heads, self.dmf)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def with_ablation(self, name: str) -> "RunConfig":
        return dataclasses.replace(self, **ABLATION_LADDER[name])


# ---------------------------------------------------------------------------
# EMA teacher


@dataclass
class EmaState:
    teacher: ParamSet
    t_ema: float = 0.999
    step: int = 0

    def alpha(self) -> float:
        return min(1.0 - 1.0 / (self.step + 1), self.t_ema)


def ema_update(state: EmaState, student: ParamSet) -> ParamSet:
    """``teacher <- a * teacher + (1 - a) * student`` for every parameter, then ``step += 1``."""
    if not state.teacher.shape_compatible(student):
        raise ContractError("teacher and student parameters are not shape-compatible")
    a = state.alpha()
    for name, t in state.teacher.items():
        s = student[name].data
        t.data = (a * t.data + (1.0 - a) * s).astype(t.data.dtype)
    state.step += 1
    return state.teacher


# ---------------------------------------------------------------------------
# losses


def consistency_loss(y3d: Tensor, y2d: Tensor) -> Tensor:
    """Mean over pairs of the squared L2 distance between paired output rows."""
    if y3d.shape != y2d.shape:
        raise ContractError(f"paired outputs differ in shape: {y3d.shape} vs {y2d.shape}")
    if y3d.shape[0] == 0:
        log.warning("consistency loss over zero pairs; returning 0")
        return Tensor(np.zeros((), dtype=y3d.dtype))
    return T.mean(T.sq_l2(T.sub(y3d, y2d), axis=-1))


@dataclass
class LossReport:
    L3D_l: float
    L2D_l: float
    L3D_u: float
    L2D_u: float
    Lc: float
    lambda_c: float
    total: float

    def check(self, tol: float = 1e-9) -> bool:
        s = self.L3D_l + self.L2D_l + self.L3D_u + self.L2D_u + self.lambda_c * self.Lc
        return abs(s - self.total) <= tol * max(1.0, abs(self.total))


def total_loss(l3d_l: Tensor, l2d_l: Tensor, l3d_u: Tensor | None, l2d_u: Tensor | None,
               lc: Tensor | None, lambda_c: float) -> tuple[Tensor, LossReport]:
    """Sum of the four cross-entropy terms plus ``lambda_c`` times the consistency term.

    Missing unlabeled terms count as 0 (phase 1).
    """
    if lambda_c < 0:
        raise ConfigError("lambda_c must be >= 0")
    zero = Tensor(np.zeros((), dtype=l3d_l.dtype))
    l3d_u = zero if l3d_u is None else l3d_u
    l2d_u = zero if l2d_u is None else l2d_u
    lc = zero if lc is None else lc
    total = T.add(T.add(T.add(l3d_l, l2d_l), T.add(l3d_u, l2d_u)), T.mul(lc, float(lambda_c)))
    vals = [float(t.data) for t in (l3d_l, l2d_l, l3d_u, l2d_u, lc)]
    report = LossReport(*vals, lambda_c=float(lambda_c),
                        total=vals[0] + vals[1] + vals[2] + vals[3] + float(lambda_c) * vals[4])
    return total, report


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class PreparedScene:
    scene_id: str
    x: DualInput
    labels_3d: np.ndarray  # (N,)
    targets_2d: np.ndarray  # (B*H*W,) labels projected + densified from the 3D labels, ignore = C
    eval_2d: np.ndarray  # (B*H*W,) rendered pixel labels, VOID = C
    rendered: np.ndarray  # (B*H*W,) bool, pixel shows a point
    pairs: list[CorrespondenceSet]
    pair_offsets: np.ndarray  # start of each view's block in the concatenated pair arrays


def project_labels_to_image(labels: np.ndarray, pairs: CorrespondenceSet, n_classes: int,
                            window: int) -> np.ndarray:
    """(H, W) targets from point labels: one-hot at paired pixels, window-pooled, argmax.

    Uncovered pixels get the ignore label ``n_classes``.
    """
    onehot = np.eye(n_classes)[labels[pairs.point_index]]
    dense, covered = densify_on_image(onehot, pairs, window)
    return np.where(covered, dense.argmax(axis=-1), n_classes)


def prepare_scene(scene, views, n_classes: int, voxel_size: float, room_size, window: int,
                  n_views: int | None = None, max_grid: int = 32) -> PreparedScene:
    views = views[:n_views] if n_views else views
    grid = voxelize(scene.points, scene.colors, voxel_size, extent=room_size, max_grid=max_grid)
    pairs = [build_pairs(scene, v) for v in views]
    h, w = views[0].image.shape[:2]
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64)
    x = DualInput(grid, np.stack([v.image for v in views]),
                  cat([p.point_index for p in pairs]),
                  cat([np.full(p.count, k, dtype=np.int64) for k, p in enumerate(pairs)]),
                  cat([p.rows for p in pairs]), cat([p.cols for p in pairs]))
    rendered = np.stack([np.isfinite(v.depth) for v in views])
    targets = np.stack([project_labels_to_image(scene.labels, p, n_classes, window) for p in pairs])
    # empty background shows no surface; leave it unsupervised
    targets = np.where(rendered, targets, n_classes)
    offsets = np.concatenate([[0], np.cumsum([p.count for p in pairs])])
    return PreparedScene(scene.scene_id, x, scene.labels.copy(), targets.reshape(-1),
                         np.stack([v.pixel_labels for v in views]).reshape(-1),
                         rendered.reshape(-1), pairs, offsets)


def pseudo_targets(probs_3d: np.ndarray, probs_2d: np.ndarray, u: PreparedScene, n_classes: int,
                   t_conf: float, window: int, use_plo: bool) -> tuple[np.ndarray, np.ndarray, dict]:
    """Per-point and per-pixel training targets for an unlabeled scene (ignore = C).

    Without cross-modal optimisation every coarse label is used.  With it, a
    point survives if any of its pairs agrees or its confidence passes
    ``t_conf``; a rendered pixel survives if the densified 3D vote at it
    agrees or its confidence passes.  Unpaired points and unvoted pixels are
    judged by confidence alone.
    """
    c3, g3 = extract_coarse(probs_3d)
    c2, g2 = extract_coarse(probs_2d)
    c = n_classes
    if not use_plo:
        return c3, np.where(u.rendered, c2, c), {}
    pp, pix = u.x.pair_point, u.x.pair_pixel
    keep3 = g3 > t_conf
    pair_kept = optimize_3d(c3[pp], c2[pix], g3[pp], t_conf) != DELETED
    keep3[pp[pair_kept]] = True
    t3 = np.where(keep3, c3, c)

    b = len(u.pairs)
    hw = probs_2d.shape[0] // b
    t2 = np.full(probs_2d.shape[0], c, dtype=np.int64)
    dump = {}
    for k, pairs in enumerate(u.pairs):
        sl = slice(k * hw, (k + 1) * hw)
        vote, covered = densify_2d_pseudo(probs_3d[pairs.point_index], pairs, window)
        opt = optimize_2d(c2[sl], vote.reshape(-1), g2[sl], t_conf, covered.reshape(-1))
        opt = np.where(u.rendered[sl], opt, DELETED)
        t2[sl] = to_ignore(opt, c)
        dump[f"{u.scene_id}/view_{k}"] = {
            "3d": summarize(c3[pairs.point_index], np.where(keep3[pairs.point_index], c3[pairs.point_index], DELETED), c),
            "2d": summarize(c2[sl][u.rendered[sl]], opt[u.rendered[sl]], c)}
    return t3, t2, dump


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    cm_3d: ConfusionMatrix
    cm_2d: ConfusionMatrix
    pair_l2: float  # mean squared L2 distance between paired output rows

    def to_json(self) -> dict:
        return {"3d": compute_metrics(self.cm_3d).to_json("3d"),
                "2d": compute_metrics(self.cm_2d).to_json("2d"),
                "pair_l2": self.pair_l2}


def evaluate(params: ParamSet, model_cfg: ModelConfig, scenes: list[PreparedScene],
             dtype=np.float32) -> EvalResult:
    """Confusion matrices over points and non-VOID rendered pixels, summed in scene order."""
    c = model_cfg.branch.n_classes
    frozen = ParamSet({k: Tensor(p.data) for k, p in params.items()})
    cm3, cm2 = ConfusionMatrix(c), ConfusionMatrix(c)
    l2_sum, l2_n = 0.0, 0
    for s in scenes:
        out = forward_dual(frozen, s.x, model_cfg, dtype)
        p3, p2 = out.probs_3d.data, out.probs_2d.data
        cm3.accumulate(s.labels_3d, p3.argmax(-1), ignore=c)
        cm2.accumulate(s.eval_2d, p2.argmax(-1), ignore=c)
        if s.x.n_pairs:
            d = p3[s.x.pair_point].astype(np.float64) - p2[s.x.pair_pixel].astype(np.float64)
            l2_sum += float((d * d).sum())
            l2_n += s.x.n_pairs
    return EvalResult(cm3, cm2, l2_sum / l2_n if l2_n else 0.0)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ParamSet
    teacher: ParamSet | None
    log: list[dict]
    final_eval: EvalResult | None
    seconds: float


class _Cycler:
    """Endless shuffled pass over ids; reshuffles after every full pass."""

    def __init__(self, ids: list[str], rng: np.random.Generator):
        self.ids, self.rng, self.queue = list(ids), rng, []

    def __next__(self) -> str:
        if not self.queue:
            self.queue = [self.ids[i] for i in self.rng.permutation(len(self.ids))]
        return self.queue.pop(0)


def _dump_diagnostics(out_dir, payload: dict) -> str:
    d = Path(out_dir) if out_dir else Path(tempfile.mkdtemp(prefix="dualseg_nan_"))
    d.mkdir(parents=True, exist_ok=True)
    path = d / "nan_dump.json"
    path.write_text(json.dumps(payload, indent=1, sort_keys=True, default=str))
    return str(path)



def poly_lr(base: float, step: int, total: int, power: float) -> float:
    """``base * (1 - step/total)^power`` for 0-based ``step``; power 0 is a constant rate."""
    if power == 0:
        return float(base)
    return float(base) * (1.0 - step / total) ** power


def consistency_weight(lambda_c: float, step: int, ramp_steps: int) -> float:
    """Weight of the consistency term at optimizer step ``step`` (0-based).

    Sigmoid-shaped ramp exp(-5 (1 - t)^2) with t = step / ramp_steps, capped at
    ``lambda_c``; ``ramp_steps`` 0 gives a constant weight.
    """
    if ramp_steps <= 0 or step >= ramp_steps:
        return float(lambda_c)
    t = step / ramp_steps
    return float(lambda_c) * math.exp(-5.0 * (1.0 - t) ** 2)


def train(cfg: RunConfig, dataset: Dataset | None = None, out_dir=None,
          prepared: dict[str, PreparedScene] | None = None) -> TrainResult:
    """Train per ``cfg``; writes metrics.jsonl and checkpoints when an output dir is set."""
    cfg.validate()
    start = time.perf_counter()
    if dataset is None:
        if not cfg.dataset_dir:
            raise ConfigError("dataset_dir is required")
        dataset = read_dataset(cfg.dataset_dir)
    if not dataset.labeled:
        raise ConfigError("dataset split has no labeled scenes")
    out_dir = out_dir or cfg.output_dir
    out_path = Path(out_dir) if out_dir else None
    if out_path:
        out_path.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(cfg.dtype)
    c = dataset.n_classes
    model_cfg = cfg.model_config(c)
    params = init_params(model_cfg, cfg.seed, dtype)
    cache = prepared if prepared is not None else {}

    def get(sid: str) -> PreparedScene:
        if sid not in cache:
            cache[sid] = prepare_scene(dataset.scenes[sid], dataset.views[sid], c, cfg.voxel_size,
                                       dataset.room_size, cfg.window, cfg.n_views)
        return cache[sid]

    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    labeled_iter = _Cycler(dataset.labeled, np.random.default_rng(seeds[0]))
    unlabeled_iter = _Cycler(dataset.unlabeled, np.random.default_rng(seeds[1])) if dataset.unlabeled else None
    val_scenes = [get(s) for s in dataset.val]
    use_unlabeled_ever = cfg.pseudo_labels and unlabeled_iter is not None
    lam_max = cfg.lambda_c if cfg.plo_consistency else 0.0
    ramp_steps = int(round(cfg.lambda_c_rampup * cfg.epochs * cfg.steps_per_epoch))
    global_step = 0
    total_steps = cfg.epochs * cfg.steps_per_epoch

    ema_state: EmaState | None = None
    velocity: dict[str, np.ndarray] = {}
    history: list[dict] = []
    log_fh = open(out_path / "metrics.jsonl", "w") if out_path else None
    final_eval = None
    try:
        for epoch in range(1, cfg.epochs + 1):
            unlabeled_on = use_unlabeled_ever and epoch > cfg.phase1_epochs
            if epoch == cfg.phase1_epochs + 1 and out_path:
                save_params(params, out_path / "ckpt_phase1",
                            meta={"model": model_cfg.to_dict(), "run": cfg.to_dict(), "epoch": epoch - 1})
            if cfg.ema and use_unlabeled_ever and ema_state is None:  # teacher tracks the student from step 0
                ema_state = EmaState(params.copy(requires_grad=False), cfg.t_ema)
            sums = np.zeros(7)
            for step in range(cfg.steps_per_epoch):
                params.zero_grad()
                lab = get(next(labeled_iter))
                out = forward_dual(params, lab.x, model_cfg, dtype)
                l3l = T.cross_entropy(out.logits_3d, lab.labels_3d, c)
                l2l = T.cross_entropy(out.logits_2d, lab.targets_2d, c)
                y3 = [T.gather(out.probs_3d, lab.x.pair_point)]
                y2 = [T.gather(out.probs_2d, lab.x.pair_pixel)]
                l3u = l2u = None
                if unlabeled_on:
                    u = get(next(unlabeled_iter))
                    s_out = forward_dual(params, u.x, model_cfg, dtype)
                    if ema_state is not None:
                        t_out = forward_dual(ema_state.teacher, u.x, model_cfg, dtype)
                        tp3, tp2 = t_out.probs_3d.data, t_out.probs_2d.data
                    else:
                        tp3, tp2 = s_out.probs_3d.data, s_out.probs_2d.data
                    t3, t2, dump = pseudo_targets(tp3.astype(np.float64), tp2.astype(np.float64), u, c,
                                                  cfg.t_conf, cfg.window, cfg.plo_consistency)
                    if cfg.plo_dump and out_path and dump:
                        write_debug_dump(out_path / f"plo_e{epoch:03d}_s{step:03d}.json", dump)
                    l3u = T.cross_entropy(s_out.logits_3d, t3, c)
                    l2u = T.cross_entropy(s_out.logits_2d, t2, c)
                    y3.append(T.gather(s_out.probs_3d, u.x.pair_point))
                    y2.append(T.gather(s_out.probs_2d, u.x.pair_pixel))
                lc = consistency_loss(T.concat(y3, axis=0), T.concat(y2, axis=0))
                lam = consistency_weight(lam_max, global_step, ramp_steps)
                global_step += 1
                total, report = total_loss(l3l, l2l, l3u, l2u, lc, lam)
                if not np.isfinite(report.total):
                    path = _dump_diagnostics(out_path, {
                        "epoch": epoch, "step": step, "losses": dataclasses.asdict(report),
                        "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in params.items()}})
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}", path)
                T.backward(total)
                T.sgd_step(params, poly_lr(cfg.lr, global_step - 1, total_steps, cfg.lr_power), cfg.momentum,
                           velocity)
                if ema_state is not None:
                    ema_update(ema_state, params)
                    if any(t.grad is not None for t in ema_state.teacher.values()):
                        raise ContractError("gradient reached the teacher parameters")
                sums += [report.L3D_l, report.L2D_l, report.L3D_u, report.L2D_u, report.Lc, report.total, lam]
            means = sums / cfg.steps_per_epoch
            entry = {"epoch": epoch, "unlabeled": bool(unlabeled_on),
                     **dict(zip(["L3D_l", "L2D_l", "L3D_u", "L2D_u", "Lc", "total", "lambda_c"], means.tolist()))}
            if val_scenes and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                final_eval = evaluate(params, model_cfg, val_scenes, dtype)
                entry["val"] = final_eval.to_json()
            history.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()
            log.info("epoch %d total %.4f", epoch, entry["total"])
    finally:
        if log_fh:
            log_fh.close()
    if out_path:
        meta = {"model": model_cfg.to_dict(), "run": cfg.to_dict(), "epoch": cfg.epochs}
        save_params(params, out_path / "ckpt_final", meta=meta)
        if ema_state is not None:
            save_params(ema_state.teacher, out_path / "ckpt_teacher", meta=meta)
    return TrainResult(params, ema_state.teacher if ema_state else None, history, final_eval,
                       time.perf_counter() - start)
