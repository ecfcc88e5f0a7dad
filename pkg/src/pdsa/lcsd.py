"""Octant distribution descriptor carried across encoder stages.

Each point's descriptor is eight blocks, one per octant around it. Block ``o``
sums the compressed previous-stage descriptors of neighbors lying in octant
``o``, each scaled by a weight that decays linearly from 1 near the center to
0 at the grouping radius. Stage 0 uses the constant 1 in place of the
compressed descriptor, so it is an 8-vector of weight sums.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geom import Neighborhood
from .tensor import LinearParams, Tensor, gather, linear, matmul, reshape, swapaxes

N_OCTANTS = 8


@dataclass
class Descriptor:
    d: object  # (N, 8 * a_dim) ndarray or Tensor
    stage: int = 0

    @property
    def width(self) -> int:
        return self.d.shape[-1]


@dataclass
class CompressedDescriptor:
    a: object  # (N, a_dim) ndarray or Tensor
    stage: int = 0

    @property
    def a_dim(self) -> int:
        return self.a.shape[-1]


def octant_index(offset) -> int:
    """Octant of a member offset ``p_member - p_center``; zeros count as nonnegative."""
    x, y, z = (float(v) for v in offset)
    return 4 * (x >= 0) + 2 * (y >= 0) + (z >= 0)


def octant_indices(offsets: np.ndarray) -> np.ndarray:
    nonneg = offsets >= 0
    return 4 * nonneg[..., 0] + 2 * nonneg[..., 1] + nonneg[..., 2]


def distance_weight(dist: float, radius: float, is_center: bool) -> float:
    if radius <= 0:
        raise ValueError("radius must be positive")
    if is_center:
        return 0.0
    return max(0.0, 1.0 - dist / radius)


def _member_octants(rel: np.ndarray) -> np.ndarray:
    # octant of the member offset -rel, without allocating the negation
    nonneg = rel <= 0
    return 4 * nonneg[..., 0] + 2 * nonneg[..., 1] + nonneg[..., 2]


def _member_weights(dist: np.ndarray, radius, use_distance: bool) -> np.ndarray:
    is_center = dist == 0
    if not use_distance:
        return np.where(is_center, 0.0, 1.0)
    if radius is None:
        radius = dist.max(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(is_center, 0.0, np.maximum(0.0, 1.0 - dist / radius))
    return np.nan_to_num(r, nan=0.0, posinf=0.0, neginf=0.0)


def octant_weights(rel: np.ndarray, dist: np.ndarray, radius=None, use_distance: bool = True) -> np.ndarray:
    """Indicator-times-weight matrix for grouped members.

    ``rel`` is ``(..., k, 3)`` center-minus-member, ``dist`` is ``(..., k)``.
    Returns ``(..., k, 8)`` holding ``t^o_j * r_j``. ``radius=None`` normalizes by
    each neighborhood's largest member distance (for k-NN groupings). With
    ``use_distance=False`` every non-center member gets weight 1.
    """
    octs = _member_octants(rel)
    r = _member_weights(dist, radius, use_distance)
    w = np.zeros(dist.shape + (N_OCTANTS,))
    np.put_along_axis(w, octs[..., None], r[..., None], axis=-1)
    return w


def octant_weight_sums(rel: np.ndarray, dist: np.ndarray, radius=None, use_distance: bool = True) -> np.ndarray:
    """``octant_weights(...).sum(axis=-2)`` without materializing the ``(..., k, 8)`` array."""
    octs = _member_octants(rel)
    r = _member_weights(dist, radius, use_distance)
    lead = octs.shape[:-1]
    rows = int(np.prod(lead, dtype=np.int64))
    slot = np.arange(rows)[:, None] * N_OCTANTS + octs.reshape(rows, -1)
    sums = np.bincount(slot.ravel(), weights=r.reshape(-1), minlength=rows * N_OCTANTS)
    return sums.reshape(lead + (N_OCTANTS,))


def _sorted_arrays(nbhs: Sequence[Neighborhood]):
    """Members sorted by point index so summation order is fixed."""
    members = np.stack([n.members for n in nbhs])
    rel = np.stack([n.rel for n in nbhs])
    dist = np.stack([n.dist for n in nbhs])
    order = np.argsort(members, axis=1, kind="stable")
    take = lambda x: np.take_along_axis(x, order.reshape(order.shape + (1,) * (x.ndim - 2)), axis=1)
    return take(members), take(rel), take(dist)


def aggregate_core(a: Tensor, members: np.ndarray, weights: np.ndarray) -> Tensor:
    """Batched octant aggregation.

    ``a`` (B, Mp, A), ``members`` (B, M, k), ``weights`` (B, M, k, 8)
    -> (B, M, 8 * A).
    """
    b, m, k = members.shape
    a_g = gather(a, members)  # (B, M, k, A)
    w = Tensor(np.ascontiguousarray(np.swapaxes(weights, -1, -2), dtype=a.dtype))
    out = matmul(w, a_g)  # (B, M, 8, A)
    return reshape(out, (b, m, N_OCTANTS * a.shape[-1]))


def init_descriptor(cloud, nbhs: Sequence[Neighborhood], radius: Optional[float] = None,
                    use_distance: bool = True) -> Descriptor:
    """Stage-0 descriptor: per-octant sums of distance weights (8 columns)."""
    if len(nbhs) != len(cloud):
        raise ValueError(f"need one neighborhood per point ({len(nbhs)} != {len(cloud)})")
    _, rel, dist = _sorted_arrays(nbhs)
    w = octant_weights(rel, dist, radius, use_distance)
    return Descriptor(w.sum(axis=1), stage=0)


def octant_centroid_descriptor(cloud, nbhs: Sequence[Neighborhood]) -> Descriptor:
    """Alternative stage-0 encoding: mean member offset per octant (24 columns).

    Empty octants contribute zeros. Only used as an ablation comparator.
    """
    _, rel, _ = _sorted_arrays(nbhs)
    return Descriptor(octant_centroids(rel), stage=0)


def octant_centroids(rel: np.ndarray) -> np.ndarray:
    off = -rel
    octs = octant_indices(off)
    onehot = (octs[..., None] == np.arange(N_OCTANTS)).astype(np.float64)  # (..., k, 8)
    sums = np.einsum("...ko,...kd->...od", onehot, off)
    cnt = onehot.sum(axis=-2)[..., None]
    cent = np.divide(sums, cnt, out=np.zeros_like(sums), where=cnt > 0)
    return cent.reshape(cent.shape[:-2] + (N_OCTANTS * 3,))


def compress_descriptor(desc: Descriptor, p: LinearParams) -> CompressedDescriptor:
    d = desc.d if isinstance(desc.d, Tensor) else Tensor(desc.d)
    if d.shape[-1] != p.in_features:
        raise ValueError(f"descriptor width {d.shape[-1]} != compressor input width {p.in_features}")
    return CompressedDescriptor(linear(d, p), stage=desc.stage)


def aggregate_descriptor(nbhs: Sequence[Neighborhood], a: CompressedDescriptor, radius=None,
                         use_distance: bool = True) -> Descriptor:
    """Next-stage descriptor at each neighborhood's center (8 * a_dim columns)."""
    a_t = a.a if isinstance(a.a, Tensor) else Tensor(a.a)
    if len(nbhs) == 0:
        return Descriptor(np.zeros((0, N_OCTANTS * a_t.shape[-1])), stage=a.stage + 1)
    members, rel, dist = _sorted_arrays(nbhs)
    w = octant_weights(rel, dist, radius, use_distance)
    a3 = reshape(a_t, (1,) + a_t.shape)
    d = aggregate_core(a3, members[None], w[None])
    return Descriptor(reshape(d, d.shape[1:]), stage=a.stage + 1)
