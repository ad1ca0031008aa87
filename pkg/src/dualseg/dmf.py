"""Dual-modal fusion: per-pair multi-head attention between paired 3D and 2D features.

For the 3D side of pair i (the 2D side swaps the modalities)::

    K, V = f3d W_k, f3d W_v           split into H heads of width d1/H
    Q    = f2d W_q                      split the same way
    A    = softmax over heads of sum_c K[h, c] * Q[h, c]
    m    = sum_h A[h] * V[h]            (d1/H)
    g3d  = concat(m W_e + b_e, f3d) W_o + b_o

The K/Q/V projections carry no bias, so a zero value projection makes the
attention branch contribute exactly ``b_e``.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import ParamSet, Tensor

DEFAULT_HEADS = 4


def attention_weights(keys: Tensor, queries: Tensor) -> Tensor:
    """(N, H, dh) keys and queries -> (N, H) weights, normalised over heads."""
    if keys.shape != queries.shape or keys.ndim != 3:
        raise ContractError(f"key/query shapes disagree: {keys.shape} vs {queries.shape}")
    scores = T.tsum(T.mul(keys, queries), axis=-1)
    return T.softmax(scores, axis=1)


def _fuse(f_self: Tensor, f_other: Tensor, params: ParamSet, prefix: str, heads: int) -> Tensor:
    if f_self.ndim != 2 or f_other.ndim != 2:
        raise ContractError("fusion inputs must be (pairs, width) matrices")
    if f_self.shape[0] != f_other.shape[0]:
        raise ContractError(f"pair count mismatch: {f_self.shape[0]} vs {f_other.shape[0]}")
    n, d = f_self.shape
    if d % heads:
        raise ContractError(f"{heads} heads do not divide feature width {d}")
    dh = d // heads
    k = T.reshape(T.matmul(f_self, params[f"{prefix}.k"]), (n, heads, dh))
    q = T.reshape(T.matmul(f_other, params[f"{prefix}.q"]), (n, heads, dh))
    v = T.reshape(T.matmul(f_self, params[f"{prefix}.v"]), (n, heads, dh))
    a = attention_weights(k, q)
    mixed = T.tsum(T.mul(T.reshape(a, (n, heads, 1)), v), axis=1)
    expanded = T.add(T.matmul(mixed, params[f"{prefix}.expand.w"]), params[f"{prefix}.expand.b"])
    cat = T.concat([expanded, f_self], axis=-1)
    return T.add(T.matmul(cat, params[f"{prefix}.out.w"]), params[f"{prefix}.out.b"])


def fuse_3d(f3d: Tensor, f2d: Tensor, params: ParamSet, scale: int, heads: int = DEFAULT_HEADS) -> Tensor:
    """Fused 3D features g(p_i): keys/values from the points, queries from their pixels."""
    return _fuse(f3d, f2d, params, f"dmf.s{scale}.to3d", heads)


def fuse_2d(f2d: Tensor, f3d: Tensor, params: ParamSet, scale: int, heads: int = DEFAULT_HEADS) -> Tensor:
    """Fused 2D features g(x_i): keys/values from the pixels, queries from their points."""
    return _fuse(f2d, f3d, params, f"dmf.s{scale}.to2d", heads)


def _side_params(p: ParamSet, prefix: str, d_self: int, d_other: int, heads: int,
                 rng: np.random.Generator) -> None:
    if d_self % heads:
        raise ContractError(f"{heads} heads do not divide feature width {d_self}")
    dh = d_self // heads

    def param(name, arr):
        p[f"{prefix}.{name}"] = Tensor(arr, requires_grad=True)

    param("k", rng.normal(0, 1 / math.sqrt(d_self), (d_self, d_self)))
    param("q", rng.normal(0, 1 / math.sqrt(d_other), (d_other, d_self)))
    param("v", rng.normal(0, 1 / math.sqrt(d_self), (d_self, d_self)))
    param("expand.w", rng.normal(0, 1 / math.sqrt(dh), (dh, d_self)))
    param("expand.b", np.zeros(d_self))
    # the f-half starts as identity so an untrained module passes features through
    out = np.vstack([rng.normal(0, 0.5 / math.sqrt(d_self), (d_self, d_self)), np.eye(d_self)])
    param("out.w", out)
    param("out.b", np.zeros(d_self))


def init_dmf_params(widths_3d, widths_2d, heads: int, rng: np.random.Generator) -> ParamSet:
    """Parameters for one fusion module per decoder scale."""
    p = ParamSet()
    for j, (d1, d2) in enumerate(zip(widths_3d, widths_2d)):
        _side_params(p, f"dmf.s{j}.to3d", d1, d2, heads, rng)
        _side_params(p, f"dmf.s{j}.to2d", d2, d1, heads, rng)
    return p
