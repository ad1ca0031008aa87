"""Synthetic dataset assembly and the on-disk directory format.

Layout::

    manifest.json
    scenes/<scene_id>/points.f32  colors.f32  labels.u16
    scenes/<scene_id>/view_<k>.rgb.f32  view_<k>.labels.u16  view_<k>.depth.f32  view_<k>.camera.json

All arrays are raw little-endian with shapes recorded in the manifest.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .geometry import Camera
from .synth import (CameraConfig, LabeledScene, SceneConfig, ViewSample, generate_scene,
                    render_views, split_dataset)

FORMAT = "dualseg-dataset-v1"
VAL_SEED_OFFSET = 1_000_000


@dataclass
class Dataset:
    n_classes: int
    image_size: tuple[int, int]
    scenes: dict[str, LabeledScene]
    views: dict[str, list[ViewSample]]
    labeled: list[str]
    unlabeled: list[str]
    val: list[str]
    room_size: tuple[float, float, float]
    meta: dict = field(default_factory=dict)

    @property
    def void_label(self) -> int:
        return self.n_classes


@dataclass
class GenConfig:
    """Settings for ``gen-data``."""

    seed: int = 0
    n_train: int = 64
    n_val: int = 16
    labeled_ratio: float = 0.1
    n_views: int = 3

    HELP = {
        "seed": "dataset seed; scenes and split are pure functions of it",
        "n_train": "training scenes (desk scale: 64)",
        "n_val": "held-out validation scenes (16)",
        "labeled_ratio": "labeled share of training scenes (reference: 0.1 or 0.2)",
        "n_views": "rendered views per scene (reference: 3)",
    }

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        cfg = cls(**d)
        if not 0 < cfg.labeled_ratio <= 1:
            raise ConfigError("labeled_ratio must be in (0, 1]")
        if cfg.n_train < 1 or cfg.n_val < 0 or cfg.n_views < 1:
            raise ConfigError("need n_train >= 1, n_val >= 0, n_views >= 1")
        return cfg

    def build(self) -> "Dataset":
        return build_dataset(self.seed, self.n_train, self.n_val, self.labeled_ratio, self.n_views)


def build_dataset(seed: int = 0, n_train: int = 64, n_val: int = 16, labeled_ratio: float = 0.1,
                  n_views: int = 3, scene_cfg: SceneConfig | None = None,
                  camera_cfg: CameraConfig | None = None) -> Dataset:
    """Train scenes use seeds ``seed*10_000 + i``; validation scenes sit ``VAL_SEED_OFFSET`` above."""
    scene_cfg = scene_cfg or SceneConfig()
    camera_cfg = camera_cfg or CameraConfig()
    if n_train < 1 or n_val < 0:
        raise ConfigError("need n_train >= 1 and n_val >= 0")
    scenes, views = {}, {}
    train_ids, val_ids = [], []
    for i in range(n_train + n_val):
        is_val = i >= n_train
        k = i - n_train if is_val else i
        sid = f"val_{k:04d}" if is_val else f"train_{k:04d}"
        s_seed = seed * 10_000 + k + (VAL_SEED_OFFSET if is_val else 0)
        scene = generate_scene(s_seed, scene_cfg, scene_id=sid)
        scenes[sid] = scene
        views[sid] = render_views(scene, n_views, seed=s_seed, cfg=camera_cfg, room_size=scene_cfg.room_size)
        (val_ids if is_val else train_ids).append(sid)
    labeled, unlabeled = split_dataset(train_ids, labeled_ratio, seed)
    meta = {"seed": seed, "labeled_ratio": labeled_ratio, "n_views": n_views,
            "scene_config": scene_cfg.to_dict(),
            "camera_config": {k: (list(v) if isinstance(v, tuple) else v)
                              for k, v in camera_cfg.__dict__.items()}}
    return Dataset(scene_cfg.n_classes, (camera_cfg.height, camera_cfg.width), scenes, views,
                   labeled, unlabeled, val_ids, tuple(scene_cfg.room_size), meta)


def _write(path: Path, arr: np.ndarray, code: str) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype=code).tobytes())


def _read(path: Path, code: str, shape) -> np.ndarray:
    return np.frombuffer(path.read_bytes(), dtype=code).reshape(shape)


def write_dataset(ds: Dataset, root, force: bool = False) -> Path:
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"{root} exists and is not empty")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for sid, scene in ds.scenes.items():
        d = root / "scenes" / sid
        d.mkdir(parents=True)
        _write(d / "points.f32", scene.points, "<f4")
        _write(d / "colors.f32", scene.colors, "<f4")
        _write(d / "labels.u16", scene.labels, "<u2")
        for v in ds.views[sid]:
            k = v.index
            _write(d / f"view_{k}.rgb.f32", v.image, "<f4")
            _write(d / f"view_{k}.labels.u16", v.pixel_labels, "<u2")
            _write(d / f"view_{k}.depth.f32", v.depth, "<f4")
            (d / f"view_{k}.camera.json").write_text(
                json.dumps(dict(v.camera.to_dict(), scene_id=sid, index=k), indent=1, sort_keys=True))
        split = "val" if sid in ds.val else ("labeled" if sid in ds.labeled else "unlabeled")
        entries.append({"id": sid, "split": split, "n_points": scene.n_points,
                        "n_views": len(ds.views[sid]), "rng_seed": scene.rng_seed})
    manifest = {"format": FORMAT, "n_classes": ds.n_classes, "void_label": ds.void_label,
                "image_size": list(ds.image_size), "room_size": list(ds.room_size),
                "scenes": entries, "split": {"labeled": ds.labeled, "unlabeled": ds.unlabeled,
                                             "val": ds.val}, "meta": ds.meta}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def read_dataset(root) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise ConfigError(f"dataset manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    if "split" not in manifest:
        raise ConfigError("dataset manifest has no split")
    h, w = manifest["image_size"]
    c = manifest["n_classes"]
    scenes, views = {}, {}
    for e in manifest["scenes"]:
        sid, n = e["id"], e["n_points"]
        d = root / "scenes" / sid
        scenes[sid] = LabeledScene(
            points=_read(d / "points.f32", "<f4", (n, 3)).astype(np.float64),
            colors=_read(d / "colors.f32", "<f4", (n, 3)).astype(np.float64),
            labels=_read(d / "labels.u16", "<u2", (n,)).astype(np.int64),
            scene_id=sid, rng_seed=e.get("rng_seed", 0), n_classes=c)
        vs = []
        for k in range(e["n_views"]):
            cam_d = json.loads((d / f"view_{k}.camera.json").read_text())
            vs.append(ViewSample(
                camera=Camera.from_dict(cam_d),
                image=_read(d / f"view_{k}.rgb.f32", "<f4", (h, w, 3)).astype(np.float64),
                pixel_labels=_read(d / f"view_{k}.labels.u16", "<u2", (h, w)).astype(np.int64),
                depth=_read(d / f"view_{k}.depth.f32", "<f4", (h, w)).astype(np.float64),
                scene_id=sid, index=k))
        views[sid] = vs
    sp = manifest["split"]
    return Dataset(c, (h, w), scenes, views, list(sp["labeled"]), list(sp["unlabeled"]),
                   list(sp["val"]), tuple(manifest["room_size"]), manifest.get("meta", {}))
