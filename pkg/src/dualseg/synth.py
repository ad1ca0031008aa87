"""Procedural labeled rooms and point-splatting renders.

A scene is a box-shaped room (floor + four walls) holding box, cylinder and
sphere objects.  Every primitive belongs to one class and is painted with a
class colour plus per-object jitter, simple directional shading and
per-point noise.  Colours of some object classes overlap on purpose so that
shape, not colour alone, separates them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ArgumentError, ConfigError
from .geometry import Camera, project_points

FLOOR, WALL = 0, 1
_OBJECT_KINDS = ("tall_box", "flat_box", "cylinder", "sphere")
_PALETTE = np.array([
    [0.55, 0.45, 0.35],  # floor
    [0.78, 0.78, 0.72],  # wall
    [0.30, 0.42, 0.70],  # tall box
    [0.38, 0.48, 0.64],  # flat box, close to tall box
    [0.72, 0.34, 0.28],  # cylinder
    [0.70, 0.42, 0.26],  # sphere, close to cylinder
])
_LIGHT = np.array([0.3, 0.5, 0.8]) / np.linalg.norm([0.3, 0.5, 0.8])


@dataclass
class SceneConfig:
    n_classes: int = 6
    n_points: int = 4096
    room_size: tuple[float, float, float] = (1.2, 1.2, 0.6)
    objects_per_class: int = 2
    class_proportions: tuple[float, ...] | None = None
    object_color_jitter: float = 0.08
    color_noise: float = 0.05

    def proportions(self) -> np.ndarray:
        if self.class_proportions is not None:
            p = np.asarray(self.class_proportions, dtype=np.float64)
            if p.shape != (self.n_classes,) or (p < 0).any() or p.sum() <= 0:
                raise ConfigError("class_proportions must hold one non-negative weight per class")
            return p / p.sum()
        if self.n_classes == 2:
            return np.array([0.5, 0.5])
        p = np.full(self.n_classes, 0.5 / (self.n_classes - 2))
        p[FLOOR] = p[WALL] = 0.25
        return p

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.n_points < 1:
            raise ConfigError("n_points must be positive")
        if self.n_classes > 2 and self.objects_per_class < 1:
            raise ConfigError("object classes have zero primitives")
        if min(self.room_size) <= 0:
            raise ConfigError("room_size must be positive")
        self.proportions()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["room_size"] = list(self.room_size)
        if self.class_proportions is not None:
            d["class_proportions"] = list(self.class_proportions)
        return d


@dataclass
class CameraConfig:
    height: int = 64
    width: int = 64
    fov_deg: float = 75.0
    splat_radius: float = 1.0
    distance_range: tuple[float, float] = (0.30, 0.42)  # from room centre, fraction of room width
    height_range: tuple[float, float] = (0.75, 0.98)  # fraction of room height


@dataclass
class LabeledScene:
    points: np.ndarray  # (N, 3) metres
    colors: np.ndarray  # (N, 3) in [0, 1]
    labels: np.ndarray  # (N,) in [0, C)
    scene_id: str
    rng_seed: int
    n_classes: int

    @property
    def n_points(self) -> int:
        return int(self.points.shape[0])


@dataclass
class ViewSample:
    camera: Camera
    image: np.ndarray  # (H, W, 3)
    pixel_labels: np.ndarray  # (H, W), VOID == n_classes
    depth: np.ndarray  # (H, W), +inf where VOID
    scene_id: str
    index: int = 0
    source: np.ndarray | None = field(default=None, repr=False)  # provenance point per pixel, -1 if none
    splatted: np.ndarray | None = field(default=None, repr=False)  # filled by a neighbour's splat


def _f32_exact(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _allocate(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``total`` proportional to ``weights``."""
    raw = total * weights / weights.sum()
    base = np.floor(raw).astype(np.int64)
    rest = total - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:rest]] += 1
    return base


class _Primitive:
    def __init__(self, label, kind, params, color):
        self.label, self.kind, self.params, self.color = label, kind, params, color

    def area(self) -> float:
        p = self.params
        if self.kind in ("floor",):
            return p["sx"] * p["sy"]
        if self.kind == "walls":
            return 2 * (p["sx"] + p["sy"]) * p["sz"]
        if self.kind in ("tall_box", "flat_box"):
            w, d, h = p["size"]
            return w * d + 2 * (w + d) * h
        if self.kind == "cylinder":
            return 2 * math.pi * p["r"] * p["h"] + math.pi * p["r"] ** 2
        return 4 * math.pi * p["r"] ** 2

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """``n`` uniform surface points and their outward normals."""
        p = self.params
        u = rng.random((n, 2))
        if self.kind == "floor":
            pts = np.column_stack([u[:, 0] * p["sx"], u[:, 1] * p["sy"], np.zeros(n)])
            return pts, np.tile([0.0, 0.0, 1.0], (n, 1))
        if self.kind == "walls":
            sx, sy, sz = p["sx"], p["sy"], p["sz"]
            lengths = np.array([sx, sx, sy, sy])
            wall = rng.choice(4, size=n, p=lengths / lengths.sum())
            t, z = u[:, 0], u[:, 1] * sz
            pts = np.empty((n, 3))
            nrm = np.zeros((n, 3))
            for k, (xf, yf, normal) in enumerate([
                    (lambda t: t * sx, lambda t: 0 * t, (0, 1, 0)),
                    (lambda t: t * sx, lambda t: 0 * t + sy, (0, -1, 0)),
                    (lambda t: 0 * t, lambda t: t * sy, (1, 0, 0)),
                    (lambda t: 0 * t + sx, lambda t: t * sy, (-1, 0, 0))]):
                m = wall == k
                pts[m] = np.column_stack([xf(t[m]), yf(t[m]), z[m]])
                nrm[m] = normal
            return pts, nrm
        if self.kind in ("tall_box", "flat_box"):
            (w, d, h), (cx, cy) = p["size"], p["center"]
            areas = np.array([w * d, w * h, w * h, d * h, d * h])
            face = rng.choice(5, size=n, p=areas / areas.sum())
            a, b = u[:, 0] - 0.5, u[:, 1]
            pts = np.empty((n, 3))
            nrm = np.zeros((n, 3))
            m = face == 0
            pts[m] = np.column_stack([cx + a[m] * w, cy + (b[m] - 0.5) * d, np.full(m.sum(), h)])
            nrm[m] = (0, 0, 1)
            for k, sgn in ((1, -1), (2, 1)):
                m = face == k
                pts[m] = np.column_stack([cx + a[m] * w, np.full(m.sum(), cy + sgn * d / 2), b[m] * h])
                nrm[m] = (0, sgn, 0)
            for k, sgn in ((3, -1), (4, 1)):
                m = face == k
                pts[m] = np.column_stack([np.full(m.sum(), cx + sgn * w / 2), cy + a[m] * d, b[m] * h])
                nrm[m] = (sgn, 0, 0)
            return pts, nrm
        if self.kind == "cylinder":
            r, h, (cx, cy) = p["r"], p["h"], p["center"]
            side = rng.random(n) < (2 * h) / (2 * h + r)
            theta = 2 * math.pi * u[:, 0]
            rad = np.where(side, r, r * np.sqrt(u[:, 1]))
            z = np.where(side, u[:, 1] * h, h)
            pts = np.column_stack([cx + rad * np.cos(theta), cy + rad * np.sin(theta), z])
            nrm = np.where(side[:, None], np.column_stack([np.cos(theta), np.sin(theta), np.zeros(n)]),
                           np.array([0.0, 0.0, 1.0]))
            return pts, nrm
        r, (cx, cy) = p["r"], p["center"]
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return np.array([cx, cy, r]) + r * v, v


def _palette(n_classes: int) -> np.ndarray:
    if n_classes <= len(_PALETTE):
        return _PALETTE[:n_classes]
    extra = []
    for k in range(n_classes - len(_PALETTE)):
        hue = (0.13 + 0.61803 * k) % 1.0
        extra.append([0.5 + 0.3 * math.cos(2 * math.pi * (hue + s / 3)) for s in range(3)])
    return np.vstack([_PALETTE, extra])


def _place_objects(cfg: SceneConfig, rng: np.random.Generator, palette: np.ndarray) -> list[_Primitive]:
    sx, sy, sz = cfg.room_size
    placed: list[tuple[float, float, float]] = []  # (x, y, radius)
    prims = []
    for label in range(2, cfg.n_classes):
        kind = _OBJECT_KINDS[(label - 2) % len(_OBJECT_KINDS)]
        for _ in range(cfg.objects_per_class):
            if kind == "tall_box":
                size = (rng.uniform(0.12, 0.22), rng.uniform(0.12, 0.22), min(rng.uniform(0.28, 0.42), 0.9 * sz))
                foot = 0.5 * math.hypot(size[0], size[1])
            elif kind == "flat_box":
                size = (rng.uniform(0.22, 0.34), rng.uniform(0.22, 0.34), min(rng.uniform(0.06, 0.12), 0.9 * sz))
                foot = 0.5 * math.hypot(size[0], size[1])
            elif kind == "cylinder":
                size = (rng.uniform(0.06, 0.10), min(rng.uniform(0.20, 0.36), 0.9 * sz))
                foot = size[0]
            else:
                size = (min(rng.uniform(0.07, 0.12), 0.45 * sz),)
                foot = size[0]
            for _attempt in range(50):
                x = rng.uniform(foot + 0.02, sx - foot - 0.02)
                y = rng.uniform(foot + 0.02, sy - foot - 0.02)
                if all(math.hypot(x - px, y - py) > foot + pr + 0.02 for px, py, pr in placed):
                    break
            placed.append((x, y, foot))
            if kind in ("tall_box", "flat_box"):
                params = {"size": size, "center": (x, y)}
            elif kind == "cylinder":
                params = {"r": size[0], "h": size[1], "center": (x, y)}
            else:
                params = {"r": size[0], "center": (x, y)}
            color = np.clip(palette[label] + rng.normal(0.0, cfg.object_color_jitter, 3), 0, 1)
            prims.append(_Primitive(label, kind, params, color))
    return prims


def generate_scene(seed: int, cfg: SceneConfig | None = None, scene_id: str | None = None) -> LabeledScene:
    """Deterministic labeled room for ``seed``; per-class point counts follow the class proportions."""
    cfg = cfg or SceneConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    palette = _palette(cfg.n_classes)
    sx, sy, sz = cfg.room_size
    room_jitter = lambda label: np.clip(palette[label] + rng.normal(0.0, cfg.object_color_jitter, 3), 0, 1)
    prims = [_Primitive(FLOOR, "floor", {"sx": sx, "sy": sy}, room_jitter(FLOOR)),
             _Primitive(WALL, "walls", {"sx": sx, "sy": sy, "sz": sz}, room_jitter(WALL))]
    prims += _place_objects(cfg, rng, palette)

    per_class = _allocate(cfg.n_points, cfg.proportions())
    pts, cols, labs = [], [], []
    for label in range(cfg.n_classes):
        mine = [p for p in prims if p.label == label]
        if per_class[label] == 0 or not mine:
            continue
        areas = np.array([p.area() for p in mine])
        counts = rng.multinomial(per_class[label], areas / areas.sum())
        for prim, n in zip(mine, counts):
            if n == 0:
                continue
            xyz, normal = prim.sample(int(n), rng)
            shade = 0.75 + 0.25 * np.clip(normal @ _LIGHT, 0.0, 1.0)
            rgb = prim.color[None, :] * shade[:, None] + rng.normal(0.0, cfg.color_noise, (n, 3))
            pts.append(xyz)
            cols.append(np.clip(rgb, 0.0, 1.0))
            labs.append(np.full(n, label, dtype=np.int64))
    # the upper bound is rounded down to float32 so stored coordinates stay inside the box
    hi = np.array(cfg.room_size, dtype=np.float32)
    hi = np.where(hi.astype(np.float64) > np.array(cfg.room_size), np.nextafter(hi, np.float32(0)), hi)
    points = np.clip(np.concatenate(pts), 0.0, hi.astype(np.float64))
    return LabeledScene(points=_f32_exact(points), colors=_f32_exact(np.concatenate(cols)),
                        labels=np.concatenate(labs), scene_id=scene_id or f"scene_{seed}",
                        rng_seed=int(seed), n_classes=cfg.n_classes)


def look_at(position: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World->camera (R, t) for a camera at ``position`` facing ``target`` (z forward, y down)."""
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    if np.linalg.norm(right) < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.vstack([right, down, fwd])
    return rot, -rot @ position


def render_view(scene: LabeledScene, camera: Camera, splat_radius: float = 1.0, index: int = 0) -> ViewSample:
    """Z-buffered point splatting.

    A pixel onto which at least one point rounds shows the nearest such point
    (ties to the lower index).  Every other pixel shows the nearest point
    whose continuous projection lies strictly within ``splat_radius`` pixels
    of the pixel centre.  Pixels reached by neither are VOID with infinite
    depth.
    """
    h, w = camera.height, camera.width
    proj = project_points(scene.points, camera)
    idx = np.flatnonzero(proj.in_frame)
    pix = proj.rows[idx] * w + proj.cols[idx]
    depth = proj.depth[idx]
    zbuf = np.full(h * w, np.inf)
    np.minimum.at(zbuf, pix, depth)
    best = depth == zbuf[pix]
    src = np.full(h * w, np.iinfo(np.int64).max)
    np.minimum.at(src, pix[best], idx[best])
    src[~np.isfinite(zbuf)] = -1

    splatted = np.zeros(h * w, dtype=bool)
    reach = int(math.ceil(splat_radius)) if splat_radius > 0 else 0
    if reach:
        front = np.flatnonzero(proj.depth > 0)
        u, v, d = proj.u[front], proj.v[front], proj.depth[front]
        cand_pix, cand_d, cand_i = [], [], []
        for dr in range(-reach, reach + 1):
            for dc in range(-reach, reach + 1):
                rr = proj.rows[front] + dr
                cc = proj.cols[front] + dc
                ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
                ok &= (v - rr) ** 2 + (u - cc) ** 2 < splat_radius ** 2
                cand_pix.append(rr[ok] * w + cc[ok])
                cand_d.append(d[ok])
                cand_i.append(front[ok])
        cp, cd, ci = map(np.concatenate, (cand_pix, cand_d, cand_i))
        hole = src[cp] < 0
        cp, cd, ci = cp[hole], cd[hole], ci[hole]
        order = np.lexsort((ci, cd, cp))
        cp, cd, ci = cp[order], cd[order], ci[order]
        first = np.ones(cp.shape[0], dtype=bool)
        first[1:] = cp[1:] != cp[:-1]
        src[cp[first]], zbuf[cp[first]] = ci[first], cd[first]
        splatted[cp[first]] = True

    src, zbuf, splatted = src.reshape(h, w), zbuf.reshape(h, w), splatted.reshape(h, w)
    hit = src >= 0
    image = np.zeros((h, w, 3))
    image[hit] = scene.colors[src[hit]]
    labels = np.full((h, w), scene.n_classes, dtype=np.int64)
    labels[hit] = scene.labels[src[hit]]
    depth_map = _f32_exact(np.where(hit, zbuf, np.inf))
    return ViewSample(camera, image, labels, depth_map, scene.scene_id, index, src, splatted)


def make_camera(scene: LabeledScene, room_size, cfg: CameraConfig, angle: float,
                rng: np.random.Generator) -> Camera:
    sx, sy, sz = room_size
    centre = np.array([sx / 2, sy / 2])
    dist = rng.uniform(*cfg.distance_range) * min(sx, sy)
    height = rng.uniform(*cfg.height_range) * sz
    pos = np.array([centre[0] + dist * math.cos(angle), centre[1] + dist * math.sin(angle), height])
    rot, t = look_at(pos, scene.points.mean(axis=0))
    f = 0.5 * cfg.width / math.tan(math.radians(cfg.fov_deg) / 2)
    return Camera(f, f, cfg.width / 2, cfg.height / 2, rot, t, cfg.height, cfg.width)


def render_views(scene: LabeledScene, n_views: int = 3, seed: int = 0,
                 cfg: CameraConfig | None = None, room_size=None) -> list[ViewSample]:
    """``n_views`` renders from distinct in-room poses looking at the scene centroid."""
    if n_views < 1:
        raise ConfigError("n_views must be >= 1")
    cfg = cfg or CameraConfig()
    room_size = room_size or tuple(np.maximum(scene.points.max(axis=0), 1e-3))
    rng = np.random.default_rng(seed)
    start = rng.uniform(0, 2 * math.pi)
    views = []
    for k in range(n_views):
        angle = start + 2 * math.pi * k / n_views + rng.uniform(-0.25, 0.25) * (2 * math.pi / n_views)
        cam = make_camera(scene, room_size, cfg, angle, rng)
        views.append(render_view(scene, cam, cfg.splat_radius, index=k))
    return views


def split_dataset(scene_ids: list[str], labeled_ratio: float, seed: int) -> tuple[list[str], list[str]]:
    """Random labeled/unlabeled split with ``max(1, round_half_up(ratio * n))`` labeled ids."""
    if not 0.0 < labeled_ratio <= 1.0:
        raise ConfigError(f"labeled_ratio must be in (0, 1], got {labeled_ratio}")
    n = len(scene_ids)
    if n == 0:
        raise ArgumentError("no scenes to split")
    k = max(1, int(math.floor(labeled_ratio * n + 0.5)))
    perm = np.random.default_rng(seed).permutation(n)
    chosen = set(perm[:k].tolist())
    labeled = [s for i, s in enumerate(scene_ids) if i in chosen]
    unlabeled = [s for i, s in enumerate(scene_ids) if i not in chosen]
    return labeled, unlabeled
