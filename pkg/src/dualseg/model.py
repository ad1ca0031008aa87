"""Dual-stream network: 3D and 2D branches coupled by per-scale fusion modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .branches import (BranchConfig, VoxelGrid, gather_cells, init_branch_params,
                       make_branches, pixel_cells, write_back)
from .dmf import DEFAULT_HEADS, fuse_2d, fuse_3d, init_dmf_params
from .errors import ConfigError
from .tensor import ParamSet, Tensor


@dataclass
class ModelConfig:
    branch: BranchConfig
    heads: int = DEFAULT_HEADS
    dmf: bool = True

    def validate(self) -> None:
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        if self.dmf:
            for d in self.branch.fused_widths + self.branch.fused_widths_2d:
                if d % self.heads:
                    raise ConfigError(f"heads={self.heads} does not divide fused width {d}")

    def to_dict(self) -> dict:
        b = self.branch
        return {"widths": list(b.widths), "widths_2d": list(b.widths_2d), "n_classes": b.n_classes,
                "voxel_size": b.voxel_size, "max_grid": b.max_grid, "heads": self.heads, "dmf": self.dmf}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        b = BranchConfig(tuple(d["widths"]), d["n_classes"], d["voxel_size"], d["max_grid"],
                         tuple(d["widths_2d"]))
        return cls(b, d["heads"], d["dmf"])


def init_params(cfg: ModelConfig, seed: int, dtype=np.float64) -> ParamSet:
    cfg.validate()
    rng = np.random.default_rng(seed)
    p = init_branch_params(cfg.branch, rng)
    if cfg.dmf:
        p.update(init_dmf_params(cfg.branch.fused_widths, cfg.branch.fused_widths_2d, cfg.heads, rng))
    return p.astype(dtype)


@dataclass
class DualInput:
    """Network inputs for one scene and its views, with pairs concatenated over views."""

    grid: VoxelGrid
    images: np.ndarray  # (B, H, W, 3)
    pair_point: np.ndarray  # (P,)
    pair_view: np.ndarray
    pair_row: np.ndarray
    pair_col: np.ndarray

    @property
    def n_pairs(self) -> int:
        return int(self.pair_point.shape[0])

    @property
    def pair_pixel(self) -> np.ndarray:
        """Flat index of each pair's pixel in the (B*H*W) output rows."""
        _, h, w, _ = self.images.shape
        return pixel_cells(self.pair_view, self.pair_row, self.pair_col, h, w, 1)


@dataclass
class DualOutput:
    logits_3d: Tensor  # (N, C)
    probs_3d: Tensor
    logits_2d: Tensor  # (B*H*W, C)
    probs_2d: Tensor


def forward_dual(params: ParamSet, x: DualInput, cfg: ModelConfig, dtype=np.float64) -> DualOutput:
    """Run both branches in lockstep, fusing paired features after every decoder scale."""
    u3, u2 = make_branches(cfg.branch)
    s3 = u3.encode(params, Tensor(x.grid.features.astype(dtype)))
    s2 = u2.encode(params, Tensor(x.images.astype(dtype)))
    _, h, w, _ = x.images.shape
    n_scales = cfg.branch.n_scales
    f3 = f2 = None
    for j in range(n_scales):
        f3 = u3.decode_level(params, j, f3, s3)
        f2 = u2.decode_level(params, j, f2, s2)
        if cfg.dmf and x.n_pairs:
            factor = 2 ** (n_scales - 1 - j)
            c3 = x.grid.cell_index(factor)[x.pair_point]
            c2 = pixel_cells(x.pair_view, x.pair_row, x.pair_col, h, w, factor)
            flat3, p3 = gather_cells(f3, c3)
            flat2, p2 = gather_cells(f2, c2)
            g3 = fuse_3d(p3, p2, params, j, cfg.heads)
            g2 = fuse_2d(p2, p3, params, j, cfg.heads)
            f3 = write_back(flat3, p3, g3, c3, f3.shape)
            f2 = write_back(flat2, p2, g2, c2, f2.shape)
    c = cfg.branch.n_classes
    logits3 = T.gather(T.reshape(u3.head(params, f3), (-1, c)), x.grid.cell_index(1))
    logits2 = T.reshape(u2.head(params, f2), (-1, c))
    return DualOutput(logits3, T.softmax(logits3, -1), logits2, T.softmax(logits2, -1))
