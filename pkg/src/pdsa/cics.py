"""Global self-attention over descriptors, with key-point subsampling.

The attention output is added to pooled center features. For large stages
only ranked key points attend to each other, and every other center copies
the correction of the key assigned to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import Neighborhood
from .tensor import (
    DTYPE_TEST,
    LinearParams,
    Tensor,
    add,
    gather,
    linear,
    matmul,
    reshape,
    scale,
    softmax_axis,
    swapaxes,
)


@dataclass
class SatParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    out: LinearParams

    def __post_init__(self):
        widths = {self.q.out_features, self.k.out_features, self.v.out_features}
        if len(widths) != 1:
            raise ValueError("q, k and v projections must share an output width")

    @property
    def d_attn(self) -> int:
        return self.q.out_features

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.d_attn)

    @classmethod
    def init(cls, d: int, c: int, rng, d_attn=None, dtype=DTYPE_TEST) -> "SatParams":
        d_attn = d if d_attn is None else d_attn
        return cls(*(LinearParams.init(d, d_attn, rng, dtype) for _ in range(3)),
                    LinearParams.init(d_attn, c, rng, dtype))


@dataclass
class KeySelection:
    keys: np.ndarray  # sorted indices into the current centers
    assign: np.ndarray  # center -> key (center index)
    rho: float
    scores: np.ndarray | None = None

    def key_slot(self) -> np.ndarray:
        """Position of ``assign[i]`` inside ``keys``."""
        return np.searchsorted(self.keys, self.assign)


def sat_core(d: Tensor, params: SatParams, return_attn: bool = False):
    """Single-head scaled dot-product self-attention over axis -2 of ``d`` (B, N, D)."""
    q = linear(d, params.q)
    k = linear(d, params.k)
    v = linear(d, params.v)
    logits = scale(matmul(q, swapaxes(k, -1, -2)), params.scale)
    attn = softmax_axis(logits, axis=-1)
    out = linear(matmul(attn, v), params.out)
    return (out, attn) if return_attn else out


def sat_full(d_all, params: SatParams) -> Tensor:
    """Corrections for all ``N`` rows of the ``(N, d)`` descriptor matrix."""
    d = d_all if isinstance(d_all, Tensor) else Tensor(d_all)
    out = sat_core(reshape(d, (1,) + d.shape), params)
    return reshape(out, out.shape[1:])


def point_scores(w_mean: np.ndarray, members: np.ndarray, n_points: int) -> np.ndarray:
    """Sum of channel-mean weights each point receives over all neighborhoods.

    ``w_mean`` and ``members`` are (M, k).
    """
    return np.bincount(members.ravel(), weights=w_mean.ravel().astype(np.float64), minlength=n_points)


def select_keys(scores_c: np.ndarray, center_pts: np.ndarray, members: np.ndarray,
                coords_c: np.ndarray, rho: float) -> KeySelection:
    """Key selection from per-center scores.

    ``center_pts`` (M,) gives each center's point index in the grouping cloud,
    ``members`` (M, k) indexes the same cloud, ``coords_c`` (M, 3).
    """
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    m = len(scores_c)
    n_keys = min(m, math.ceil(rho * m - 1e-12))
    order = np.argsort(-scores_c, kind="stable")
    keys = np.sort(order[:n_keys])
    is_key = np.zeros(m, dtype=bool)
    is_key[keys] = True
    # map grouping-cloud point index -> key center index
    key_of_pt = {int(center_pts[c]): int(c) for c in keys}
    assign = np.empty(m, dtype=np.int64)
    for i in range(m):
        if is_key[i]:
            assign[i] = i
            continue
        inside = {key_of_pt[p] for p in members[i].tolist() if p in key_of_pt}
        if inside:
            cand = np.array(sorted(inside))
            assign[i] = cand[np.argmax(scores_c[cand])]
        else:
            d = np.sum((coords_c[keys] - coords_c[i]) ** 2, axis=1)
            assign[i] = keys[int(np.argmin(d))]
    return KeySelection(keys, assign, rho, scores_c)


def select_key_points(w_re_all, nbhs: list[Neighborhood], rho: float, coords=None) -> KeySelection:
    """Rank centers by the CDIP weight their points receive and keep the top fraction.

    ``w_re_all`` holds one ``(k, c)`` weight array per neighborhood. ``coords``
    are the grouping-cloud coordinates, used only for the nearest-key fallback.
    """
    members = np.stack([n.members for n in nbhs])
    center_pts = np.array([n.center for n in nbhs], dtype=np.int64)
    w_mean = np.stack([np.asarray(w.data if isinstance(w, Tensor) else w).mean(axis=-1) for w in w_re_all])
    n_points = int(max(members.max(), center_pts.max())) + 1
    if coords is not None:
        n_points = max(n_points, len(coords))
    scores = point_scores(w_mean, members, n_points)
    if coords is None:
        coords_c = np.zeros((len(nbhs), 3))
    else:
        coords_c = np.asarray(coords, dtype=np.float64)[center_pts]
    return select_keys(scores[center_pts], center_pts, members, coords_c, rho)


def sat_keypoint(d_all, sel: KeySelection, params: SatParams) -> Tensor:
    """Attention among key rows only; each center receives its key's output."""
    d = d_all if isinstance(d_all, Tensor) else Tensor(d_all)
    dk = gather(reshape(d, (1,) + d.shape), sel.keys[None])
    out_k = sat_core(dk, params)
    out = gather(out_k, sel.key_slot()[None])
    return reshape(out, out.shape[1:])


def apply_cics(f_pooled, corrections) -> Tensor:
    f_pooled = f_pooled if isinstance(f_pooled, Tensor) else Tensor(f_pooled)
    corrections = corrections if isinstance(corrections, Tensor) else Tensor(corrections)
    if f_pooled.shape != corrections.shape:
        raise ValueError(f"shape mismatch {f_pooled.shape} vs {corrections.shape}")
    return add(f_pooled, corrections)
