"""Toy 3D and 2D encoder-decoder branches.

Both branches are the same U-Net written over 3 (voxel grid) or 2 (image)
spatial axes.  Level 0 runs a 3x3(x3) conv at full resolution; every deeper
level halves the resolution with a 2-wide stride-2 conv followed by a 3x3
conv.  The decoder visits the bottleneck first (scale 0), then upsamples,
concatenates the skip and convolves once per level.  After every decoder
scale a fusion hook may rewrite the features of selected elements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import ParamSet, Tensor

Hook = Callable[[int, Tensor], Tensor]


@dataclass
class BranchConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    n_classes: int = 6
    voxel_size: float = 0.05
    max_grid: int = 32
    widths_2d: tuple[int, ...] | None = None  # defaults to ``widths``

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.widths_2d = self.widths if self.widths_2d is None else tuple(int(w) for w in self.widths_2d)
        for ws in (self.widths, self.widths_2d):
            if len(ws) < 1 or min(ws) < 1:
                raise ConfigError("widths must be a non-empty list of positive ints")
        if len(self.widths_2d) != len(self.widths):
            raise ConfigError("3D and 2D branches need the same number of scales")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")

    @property
    def n_scales(self) -> int:
        return len(self.widths)

    @property
    def fused_widths(self) -> list[int]:
        """3D feature width d1 at decoder scale j (0 = bottleneck)."""
        return [self.widths[self.n_scales - 1 - j] for j in range(self.n_scales)]

    @property
    def fused_widths_2d(self) -> list[int]:
        """2D feature width d2 at decoder scale j (0 = bottleneck)."""
        return [self.widths_2d[self.n_scales - 1 - j] for j in range(self.n_scales)]

    @property
    def grid_multiple(self) -> int:
        return 2 ** (self.n_scales - 1)


# ---------------------------------------------------------------------------
# voxelization


@dataclass
class VoxelGrid:
    features: np.ndarray  # (1, X, Y, Z, 4): mean colour + occupancy
    point_cells: np.ndarray  # (N, 3) integer cell coordinates at full resolution
    dims: tuple[int, int, int]

    def cell_index(self, scale_factor: int = 1) -> np.ndarray:
        """Flat cell index of every point on the grid coarsened by ``scale_factor``."""
        dims = tuple(d // scale_factor for d in self.dims)
        return np.ravel_multi_index(tuple((self.point_cells // scale_factor).T), dims)


def voxelize(points: np.ndarray, colors: np.ndarray, voxel_size: float,
             extent: Sequence[float] | None = None, max_grid: int = 32, multiple: int = 4) -> VoxelGrid:
    """Quantise points (origin at 0) into cells of ``voxel_size`` metres.

    ``extent`` fixes the covered box (defaults to the cloud's max corner);
    the grid is padded to a multiple of ``multiple`` cells per axis.
    """
    points = np.asarray(points, dtype=np.float64)
    extent = np.asarray(points.max(axis=0) if extent is None else extent, dtype=np.float64)
    used = np.maximum(np.ceil(extent / voxel_size - 1e-9).astype(np.int64), 1)
    dims = tuple(int(multiple * math.ceil(n / multiple)) for n in used)
    if max(dims) > max_grid:
        raise ConfigError(f"voxel grid {dims} exceeds max extent {max_grid}")
    cells = np.clip(np.floor(points / voxel_size).astype(np.int64), 0, used - 1)
    flat = np.ravel_multi_index(tuple(cells.T), dims)
    n_cells = int(np.prod(dims))
    counts = np.bincount(flat, minlength=n_cells).astype(np.float64)
    feats = np.zeros((n_cells, 4))
    occ = counts > 0
    for ch in range(3):
        sums = np.bincount(flat, weights=colors[:, ch], minlength=n_cells)
        feats[occ, ch] = sums[occ] / counts[occ]
    feats[:, 3] = occ
    return VoxelGrid(feats.reshape((1,) + dims + (4,)), cells, dims)


# ---------------------------------------------------------------------------
# network


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class UNet:
    """U-Net over ``nd`` spatial axes with parameters named ``<prefix>.<layer>.<w|b>``."""

    def __init__(self, cfg: BranchConfig, nd: int, in_channels: int, prefix: str):
        self.cfg, self.nd, self.cin, self.prefix = cfg, nd, in_channels, prefix
        self.widths = cfg.widths if nd == 3 else cfg.widths_2d

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        p = ParamSet()
        w, nd, k3 = self.widths, self.nd, (3,) * self.nd

        def conv_param(name, k, cin, cout):
            fan = int(np.prod(k)) * cin
            p[f"{self.prefix}.{name}.w"] = Tensor(_he(rng, k + (cin, cout), fan), requires_grad=True)
            p[f"{self.prefix}.{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)

        conv_param("enc0", k3, self.cin, w[0])
        for lvl in range(1, len(w)):
            conv_param(f"down{lvl}", (2,) * nd, w[lvl - 1], w[lvl])
            conv_param(f"enc{lvl}", k3, w[lvl], w[lvl])
        for lvl in range(len(w) - 2, -1, -1):
            conv_param(f"dec{lvl}", k3, w[lvl + 1] + w[lvl], w[lvl])
        conv_param("head", (1,) * nd, w[0], self.cfg.n_classes)
        return p

    def _conv(self, params, name, x, stride=1, act=True):
        y = T.conv(x, params[f"{self.prefix}.{name}.w"], params[f"{self.prefix}.{name}.b"], stride=stride,
                   padding=0 if stride > 1 else None)
        return T.relu(y) if act else y

    def encode(self, params: ParamSet, x: Tensor) -> list[Tensor]:
        skips = [self._conv(params, "enc0", x)]
        for lvl in range(1, self.cfg.n_scales):
            y = self._conv(params, f"down{lvl}", skips[-1], stride=2)
            skips.append(self._conv(params, f"enc{lvl}", y))
        return skips

    def decode_level(self, params: ParamSet, j: int, prev: Tensor | None, skips: list[Tensor]) -> Tensor:
        """Decoder feature at scale ``j`` (0 = bottleneck) from the previous scale's output."""
        if j == 0:
            return skips[-1]
        lvl = self.cfg.n_scales - 1 - j
        y = T.concat([T.upsample_nearest(prev, 2), skips[lvl]], axis=-1)
        return self._conv(params, f"dec{lvl}", y)

    def head(self, params: ParamSet, x: Tensor) -> Tensor:
        return self._conv(params, "head", x, act=False)


def gather_cells(feature: Tensor, cells: np.ndarray) -> tuple[Tensor, Tensor]:
    """(flattened feature map, rows at ``cells``)."""
    flat = T.reshape(feature, (-1, feature.shape[-1]))
    return flat, T.gather(flat, cells)


def write_back(flat: Tensor, f: Tensor, g: Tensor, cells: np.ndarray, shape) -> Tensor:
    """Replace rows at ``cells`` by the per-cell mean of ``g``.

    Written as ``F + scatter_mean(g - f)`` so ``g is f`` leaves F
    bit-identical; cells no element maps to are untouched.
    """
    if not isinstance(g, Tensor) or g.shape != f.shape:
        got = getattr(g, "shape", type(g).__name__)
        raise ContractError(f"fused features have shape {got}, expected {f.shape}")
    counts = np.bincount(cells, minlength=flat.shape[0]).astype(flat.dtype)
    weights = (1.0 / counts[cells])[:, None].astype(flat.dtype)
    delta = T.scatter_add(T.mul(T.sub(g, f), weights), cells, flat.shape[0])
    return T.reshape(T.add(flat, delta), shape)


def apply_hook(feature: Tensor, cells: np.ndarray, hook: Hook, scale: int) -> Tensor:
    """Hand ``feature`` rows at ``cells`` to ``hook`` and write the result back."""
    flat, f = gather_cells(feature, cells)
    g = hook(scale, f)
    if not isinstance(g, Tensor) or g.shape != f.shape:
        got = getattr(g, "shape", type(g).__name__)
        raise ContractError(f"fusion hook at scale {scale} returned {got}, expected {f.shape}")
    return write_back(flat, f, g, cells, feature.shape)


@dataclass
class BranchOutput:
    features: list[Tensor]  # decoder features per scale after hooks, spatial layout
    logits: Tensor  # (elements, C)
    probs: Tensor  # (elements, C), rows sum to 1
    extra: dict = field(default_factory=dict)


def make_branches(cfg: BranchConfig) -> tuple[UNet, UNet]:
    return UNet(cfg, 3, 4, "b3d"), UNet(cfg, 2, 3, "b2d")


def init_branch_params(cfg: BranchConfig, rng: np.random.Generator) -> ParamSet:
    u3, u2 = make_branches(cfg)
    p = u3.init_params(rng)
    p.update(u2.init_params(rng))
    return p


def forward_3d(grid: VoxelGrid, params: ParamSet, cfg: BranchConfig, hook: Hook | None = None,
               hook_points: np.ndarray | None = None, dtype=np.float64) -> BranchOutput:
    """Per-point class probabilities from the voxel U-Net.

    With a hook, the decoder features of the cells holding ``hook_points``
    (default: every point) are gathered per point, passed through the hook
    and scattered back at every decoder scale.
    """
    net = UNet(cfg, 3, 4, "b3d")
    n_pts = grid.point_cells.shape[0]
    hook_points = np.arange(n_pts) if hook_points is None else np.asarray(hook_points)
    skips = net.encode(params, Tensor(grid.features.astype(dtype)))
    x, feats = None, []
    for j in range(cfg.n_scales):
        x = net.decode_level(params, j, x, skips)
        if hook is not None:
            factor = 2 ** (cfg.n_scales - 1 - j)
            x = apply_hook(x, grid.cell_index(factor)[hook_points], hook, j)
        feats.append(x)
    logits_map = net.head(params, x)
    logits = T.gather(T.reshape(logits_map, (-1, cfg.n_classes)), grid.cell_index(1))
    return BranchOutput(feats, logits, T.softmax(logits, axis=-1))


def pixel_cells(view_index: np.ndarray, rows: np.ndarray, cols: np.ndarray, height: int, width: int,
                factor: int) -> np.ndarray:
    """Flat index into a (B, H/f, W/f) feature map for full-resolution pixels."""
    h, w = height // factor, width // factor
    return (view_index * h + rows // factor) * w + cols // factor


def forward_2d(images: np.ndarray, params: ParamSet, cfg: BranchConfig, hook: Hook | None = None,
               hook_pixels: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
               dtype=np.float64) -> BranchOutput:
    """Per-pixel class probabilities for a (B, H, W, 3) image batch.

    ``hook_pixels`` = (view, row, col) arrays of the elements handed to the
    hook (default: every pixel).
    """
    net = UNet(cfg, 2, 3, "b2d")
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    b, h, w, _ = images.shape
    if hook_pixels is None:
        vv, rr, cc = np.meshgrid(np.arange(b), np.arange(h), np.arange(w), indexing="ij")
        hook_pixels = (vv.ravel(), rr.ravel(), cc.ravel())
    skips = net.encode(params, Tensor(images.astype(dtype)))
    x, feats = None, []
    for j in range(cfg.n_scales):
        x = net.decode_level(params, j, x, skips)
        if hook is not None:
            factor = 2 ** (cfg.n_scales - 1 - j)
            x = apply_hook(x, pixel_cells(*hook_pixels, h, w, factor), hook, j)
        feats.append(x)
    logits = T.reshape(net.head(params, x), (-1, cfg.n_classes))
    return BranchOutput(feats, logits, T.softmax(logits, axis=-1))
