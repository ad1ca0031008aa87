"""Pinhole projection, z-buffer visibility, point/pixel pairing and densification.

Pixel coordinates are (row, col) with ``col = round(fx * x / z + cx)`` and
``row = round(fy * y / z + cy)``, rounding half up, in the camera frame
``q = R p + t`` (x right, y down, z forward).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ConfigError


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world -> camera, 3x3
    translation: np.ndarray  # world -> camera, 3
    height: int
    width: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def validate(self, tol: float = 1e-9) -> None:
        r = self.rotation
        if not np.all(np.isfinite(r)) or np.abs(r.T @ r - np.eye(3)).max() > tol:
            raise ArgumentError("camera rotation is not orthonormal")
        if self.height < 1 or self.width < 1:
            raise ArgumentError("image size must be positive")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "height": self.height, "width": self.width}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], np.array(d["rotation"]),
                   np.array(d["translation"]), int(d["height"]), int(d["width"]))


def round_half_up(v: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(v) + 0.5).astype(np.int64)


def depth_tolerance(depth, rel: float = 1e-4, abs_: float = 1e-6):
    return rel * depth + abs_


@dataclass
class Projection:
    rows: np.ndarray
    cols: np.ndarray
    depth: np.ndarray
    in_frame: np.ndarray
    visible: np.ndarray
    u: np.ndarray  # continuous column coordinate
    v: np.ndarray  # continuous row coordinate


def project_points(points: np.ndarray, camera: Camera, zbuffer: np.ndarray | None = None,
                   eps_rel: float = 1e-4, eps_abs: float = 1e-6) -> Projection:
    """Project world points; ``visible`` also applies the z-buffer test when given.

    A point is visible when it lies in front of the camera, rounds into the
    image, and its depth is within ``eps_rel * depth + eps_abs`` of the
    z-buffer value at its pixel.
    """
    camera.validate()
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q = points @ camera.rotation.T + camera.translation
    z = q[:, 2]
    front = z > 0
    safe_z = np.where(front, z, 1.0)
    u = np.clip(camera.fx * q[:, 0] / safe_z + camera.cx, -1e9, 1e9)
    v = np.clip(camera.fy * q[:, 1] / safe_z + camera.cy, -1e9, 1e9)
    cols, rows = round_half_up(u), round_half_up(v)
    in_frame = front & (rows >= 0) & (rows < camera.height) & (cols >= 0) & (cols < camera.width)
    visible = in_frame.copy()
    if zbuffer is not None:
        idx = np.flatnonzero(in_frame)
        zb = zbuffer[rows[idx], cols[idx]]
        ok = np.abs(z[idx] - zb) <= depth_tolerance(z[idx], eps_rel, eps_abs)
        visible[idx[~ok]] = False
    return Projection(rows, cols, z, in_frame, visible, u, v)


@dataclass
class CorrespondenceSet:
    """Point/pixel pairs of one view; each pixel appears at most once."""

    point_index: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    height: int
    width: int
    scene_id: str = ""
    view_index: int = 0
    depth: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def count(self) -> int:
        return int(self.point_index.shape[0])

    @property
    def pixel_index(self) -> np.ndarray:
        return self.rows * self.width + self.cols

    def as_set(self) -> set[tuple[int, int, int]]:
        return set(zip(self.point_index.tolist(), self.rows.tolist(), self.cols.tolist()))


def build_pairs(scene, view) -> CorrespondenceSet:
    """Pair every visible point of ``scene`` with its pixel in ``view``.

    When several points pass the depth tolerance at one pixel, the nearest
    wins, ties going to the lower point index.
    """
    if scene.scene_id != view.scene_id:
        raise ArgumentError(f"view belongs to scene {view.scene_id!r}, not {scene.scene_id!r}")
    cam = view.camera
    proj = project_points(scene.points, cam, zbuffer=view.depth)
    idx = np.flatnonzero(proj.visible)
    pix = proj.rows[idx] * cam.width + proj.cols[idx]
    order = np.lexsort((idx, proj.depth[idx], pix))
    pix_sorted = pix[order]
    first = np.ones(order.shape[0], dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    keep = np.sort(idx[order[first]])
    return CorrespondenceSet(keep, proj.rows[keep], proj.cols[keep], cam.height, cam.width,
                             scene_id=scene.scene_id, view_index=view.index,
                             depth=proj.depth[keep])


def densify_on_image(vectors: np.ndarray, pairs: CorrespondenceSet, window: int
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Spread per-pair vectors onto the image plane.

    Projected pixels keep their own vector.  Every other pixel gets the mean
    of the projected vectors inside its centred ``window`` x ``window``
    neighbourhood; pixels with none are uncovered (mask False, vector 0).
    Window offsets are accumulated in row-major order.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"densification window must be odd and >= 1, got {window}")
    vectors = np.asarray(vectors)
    if vectors.shape[0] != pairs.count:
        raise ArgumentError(f"{vectors.shape[0]} vectors for {pairs.count} pairs")
    h, w, r = pairs.height, pairs.width, window // 2
    c = vectors.shape[1]
    sums = np.zeros((h + 2 * r, w + 2 * r, c), dtype=vectors.dtype)
    counts = np.zeros((h + 2 * r, w + 2 * r), dtype=np.int64)
    sums[pairs.rows + r, pairs.cols + r] = vectors
    counts[pairs.rows + r, pairs.cols + r] = 1
    acc = np.zeros((h, w, c), dtype=vectors.dtype)
    n = np.zeros((h, w), dtype=np.int64)
    for dr in range(window):
        for dc in range(window):
            acc += sums[dr:dr + h, dc:dc + w]
            n += counts[dr:dr + h, dc:dc + w]
    dense = np.zeros_like(acc)
    pooled = n > 0
    dense[pooled] = acc[pooled] / n[pooled][:, None]
    dense[pairs.rows, pairs.cols] = vectors
    covered = pooled  # a projected pixel always counts itself
    return dense, covered
