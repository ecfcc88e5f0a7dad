"""Irrelevant-point correction of the neighbor feature matrix.

The neighborhood descriptor at the new center is compared with each member's
previous-stage descriptor. Their embedded difference yields per-member,
per-channel weights (softmax over members) and corrective codes, and the
product of the two is added to the embedded neighbor features before pooling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    DTYPE_TEST,
    LinearParams,
    MLPParams,
    Tensor,
    add,
    concat,
    expand_dims,
    gather,
    linear,
    mlp,
    mul,
    reshape,
    softmax_axis,
    sub,
)


@dataclass
class CdipParams:
    lq: LinearParams  # next-stage descriptor width -> h
    lk: LinearParams  # current descriptor width -> h
    mw: MLPParams  # h -> c
    mv: MLPParams  # h -> c

    def __post_init__(self):
        if self.lq.out_features != self.lk.out_features:
            raise ValueError("query and key embeddings must share their output width")
        if self.mw.out_features != self.mv.out_features:
            raise ValueError("weight and value MLPs must share their output width")

    @property
    def h(self) -> int:
        return self.lq.out_features

    @classmethod
    def init(cls, d_next: int, d_cur: int, c: int, rng, h: int = 16, dtype=DTYPE_TEST) -> "CdipParams":
        return cls(
            LinearParams.init(d_next, h, rng, dtype),
            LinearParams.init(d_cur, h, rng, dtype),
            MLPParams.init([h, h, c], rng, dtype, plain_last=True),
            MLPParams.init([h, h, c], rng, dtype, plain_last=True),
        )


@dataclass
class NeighborCorrection:
    w_re: Tensor  # (..., k, c), softmax over k
    v_st: Tensor  # (..., k, c)


def cdip_core(d_next: Tensor, d_cur: Tensor, members: np.ndarray, params: CdipParams) -> NeighborCorrection:
    """Batched correction: ``d_next`` (B, M, Dn), ``d_cur`` (B, Mp, Dc), ``members`` (B, M, k)."""
    if d_next.shape[-1] != params.lq.in_features:
        raise ValueError(f"next-stage descriptor width {d_next.shape[-1]} != {params.lq.in_features}")
    if d_cur.shape[-1] != params.lk.in_features:
        raise ValueError(f"member descriptor width {d_cur.shape[-1]} != {params.lk.in_features}")
    q = expand_dims(linear(d_next, params.lq), 2)  # (B, M, 1, h)
    k = gather(linear(d_cur, params.lk), members)  # (B, M, k, h)
    delta = sub(q, k)
    w = softmax_axis(mlp(delta, params.mw), axis=2)
    v = mlp(delta, params.mv)
    return NeighborCorrection(w, v)


def cdip_correction(d_center_next, d_members, params: CdipParams) -> NeighborCorrection:
    """Correction for one neighborhood.

    ``d_center_next`` is the (Dn,) descriptor of the neighborhood at the next
    stage, ``d_members`` the (k, Dc) current-stage descriptors of its members.
    Returns ``k x c`` weights and codes.
    """
    dn = d_center_next if isinstance(d_center_next, Tensor) else Tensor(d_center_next)
    dm = d_members if isinstance(d_members, Tensor) else Tensor(d_members)
    k = dm.shape[0]
    if k < 1:
        raise ValueError("a neighborhood needs at least one member")
    members = np.arange(k)[None, None, :]
    corr = cdip_core(reshape(dn, (1, 1, dn.shape[-1])), reshape(dm, (1,) + dm.shape), members, params)
    c = corr.w_re.shape[-1]
    return NeighborCorrection(reshape(corr.w_re, (k, c)), reshape(corr.v_st, (k, c)))


def embed_input(f_members: Optional[Tensor], rel: Tensor) -> Tensor:
    return rel if f_members is None else concat([f_members, rel], axis=-1)


def corrected_neighbor_features(f_members, rel, mlp_m: MLPParams,
                                corr: Optional[NeighborCorrection]) -> Tensor:
    """``M(concat(f, rel)) + w_re * v_st`` row by row; ``f_members`` may be None."""
    rel = rel if isinstance(rel, Tensor) else Tensor(rel)
    if f_members is not None and not isinstance(f_members, Tensor):
        f_members = Tensor(np.asarray(f_members, dtype=rel.dtype))
    base = mlp(embed_input(f_members, rel), mlp_m)
    if corr is None:
        return base
    if corr.w_re.shape != base.shape:
        raise ValueError(f"correction shape {corr.w_re.shape} != embedded shape {base.shape}")
    return add(base, mul(corr.w_re, corr.v_st))


def neighbor_row_variance(f_n) -> tuple[np.ndarray, np.ndarray]:
    """Spread of the rows of ``(..., k, c)`` neighbor matrices.

    Returns ``(mean_var, max_pair_dist)``: mean squared row-to-centroid
    distance, and the largest distance between two rows.
    """
    x = np.asarray(f_n.data if isinstance(f_n, Tensor) else f_n, dtype=np.float64)
    centered = x - x.mean(axis=-2, keepdims=True)
    mean_var = (centered ** 2).sum(axis=-1).mean(axis=-1)
    diff = x[..., :, None, :] - x[..., None, :, :]
    max_pair = np.sqrt((diff ** 2).sum(axis=-1)).max(axis=(-1, -2))
    return mean_var, max_pair
