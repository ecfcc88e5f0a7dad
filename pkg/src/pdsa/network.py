"""PDSA encoder stages, the plain SA baseline, and classification / FP heads.

Geometry (sampling, grouping, relative offsets, octant weights) depends on
coordinates only, so it is computed once per cloud as a :class:`CloudPlan`
and reused. Forward passes run on batches of plans with equal shapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import geom
from .cdip import CdipParams, cdip_core, embed_input, neighbor_row_variance
from .cics import SatParams, point_scores, sat_core, select_keys
from .lcsd import N_OCTANTS, aggregate_core, octant_centroids, octant_weight_sums, octant_weights
from .tensor import (
    DTYPE_TEST,
    LinearParams,
    MLPParams,
    Tensor,
    add,
    concat,
    gather,
    linear,
    max_reduce,
    mlp,
    mul,
    reshape,
    sum_reduce,
)


@dataclass
class StageConfig:
    stride: int
    radius: float
    k: int
    la_blocks: int = 0


def _pd_tiny_stages():
    return [StageConfig(4, 0.4, 16), StageConfig(4, 0.8, 16)]


@dataclass
class ModelConfig:
    channels: int = 16
    stages: list[StageConfig] = field(default_factory=_pd_tiny_stages)
    a_dim: int = 3
    rho: float = 0.25
    hidden: int = 16
    variant: str = "pdsa"  # or "sa_baseline"
    cdip: bool = True
    dw: bool = True
    cics: bool = True
    init_encoding: str = "distribution"  # or "centroid"
    full_attention_max: int = 256
    n_classes: int = 4
    # test-harness-only alternatives to the additive correction: "a1", "a2"
    denoise: str = "add"

    def __post_init__(self):
        for s in self.stages:
            if s.stride < 1:
                raise ValueError("stage strides must be >= 1")
            if s.radius <= 0:
                raise ValueError("stage radii must be positive")
            if s.k < 1:
                raise ValueError("stage k must be >= 1")
        if self.variant not in ("pdsa", "sa_baseline"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.init_encoding not in ("distribution", "centroid"):
            raise ValueError(f"unknown init encoding {self.init_encoding!r}")
        if self.denoise not in ("add", "a1", "a2"):
            raise ValueError(f"unknown denoise mode {self.denoise!r}")

    @property
    def use_cdip(self) -> bool:
        return self.variant == "pdsa" and self.cdip

    @property
    def use_dw(self) -> bool:
        return self.variant == "pdsa" and self.dw

    @property
    def use_cics(self) -> bool:
        return self.variant == "pdsa" and self.cics

    def blocks(self) -> list[StageConfig]:
        """Stage list with LA blocks expanded into stride-1 stages."""
        out = []
        for s in self.stages:
            out.append(s)
            out.extend(StageConfig(1, s.radius, s.k) for _ in range(s.la_blocks))
        return out

    def block_widths(self) -> list[int]:
        widths = []
        for i, s in enumerate(self.stages):
            widths.extend([self.channels * 2 ** i] * (1 + s.la_blocks))
        return widths

    @property
    def init_width(self) -> int:
        return N_OCTANTS if self.init_encoding == "distribution" else 3 * N_OCTANTS

    @property
    def desc_width(self) -> int:
        return N_OCTANTS * self.a_dim


# -- parameters --------------------------------------------------------------

@dataclass
class StageParams:
    compress: LinearParams
    embed: MLPParams
    cdip: CdipParams
    sat: SatParams


@dataclass
class ModelParams:
    stages: list[StageParams]
    head: MLPParams
    decoder: Optional[list[MLPParams]] = None


def init_params(cfg: ModelConfig, seed: int = 0, dtype=DTYPE_TEST, decoder: bool = False,
                n_seg_classes: Optional[int] = None) -> ModelParams:
    rng = np.random.default_rng(seed)
    stages = []
    d_in = cfg.init_width
    c_in = 0
    widths = cfg.block_widths()
    for c in widths:
        stages.append(StageParams(
            compress=LinearParams.init(d_in, cfg.a_dim, rng, dtype),
            embed=MLPParams.init([c_in + 3, c], rng, dtype),
            cdip=CdipParams.init(cfg.desc_width, d_in, c, rng, cfg.hidden, dtype),
            sat=SatParams.init(cfg.desc_width, c, rng, dtype=dtype),
        ))
        d_in = cfg.desc_width
        c_in = c
    c_last = widths[-1]
    head = MLPParams.init([c_last, c_last, cfg.n_classes], rng, dtype, plain_last=True)
    dec = None
    if decoder:
        # one FP block per encoder block, coarse -> fine; the last lands on the input points
        dec = []
        skips = [0] + widths[:-1]
        c_coarse = c_last
        for skip in reversed(skips):
            out = max(skip, cfg.channels)
            dec.append(MLPParams.init([c_coarse + skip, out], rng, dtype))
            c_coarse = out
        n_seg = n_seg_classes or cfg.n_classes
        dec.append(MLPParams.init([c_coarse, c_coarse, n_seg], rng, dtype, plain_last=True))
    return ModelParams(stages, head, dec)


# -- geometry plans ----------------------------------------------------------

@dataclass
class StagePlan:
    centers: np.ndarray  # (M,) indices into the previous block's points
    members: np.ndarray  # (M, k)
    rel: np.ndarray  # (M, k, 3) center minus member
    dist: np.ndarray  # (M, k)
    refilled: np.ndarray  # (M,)
    radius: float
    w_dw: np.ndarray  # (M, k, 8) octant indicator times distance weight
    w_flat: np.ndarray  # (M, k, 8) octant indicator times non-center flag
    coords: np.ndarray  # (M, 3) center coordinates


@dataclass
class CloudPlan:
    coords: np.ndarray  # (N, 3)
    d0: dict  # encoding name -> (N, width)
    blocks: list[StagePlan]
    init_members: Optional[np.ndarray] = None  # (N, k) grouping behind d0, kept for rotation
    init_radius: float = 0.0


def _group(coords, centers, radius, k) -> StagePlan:
    members, refilled = geom.ball_query_indices(coords, centers, radius, k)
    rel = coords[centers][:, None, :] - coords[members]
    dist = np.sqrt(np.einsum("mkd,mkd->mk", rel, rel))
    return StagePlan(
        centers=centers, members=members, rel=rel, dist=dist, refilled=refilled, radius=radius,
        w_dw=octant_weights(rel, dist, radius, True),
        w_flat=octant_weights(rel, dist, radius, False),
        coords=coords[centers],
    )


def n_centers(m_prev: int, stride: int) -> int:
    return math.ceil(m_prev / stride)


def build_plan(coords: np.ndarray, cfg: ModelConfig) -> CloudPlan:
    coords = np.asarray(coords, dtype=np.float64)
    geom.PointCloud(coords)  # validation
    first = cfg.blocks()[0]
    n = len(coords)
    init = _group(coords, np.arange(n), first.radius, first.k)
    d0 = _initial_descriptors(init.rel, init.dist, first.radius)
    blocks = []
    cur = coords
    for s in cfg.blocks():
        if s.stride > len(cur):
            raise ValueError(f"stride {s.stride} exceeds current point count {len(cur)}")
        m = n_centers(len(cur), s.stride)
        centers = geom.farthest_point_sample(cur, m) if s.stride > 1 else np.arange(len(cur))
        plan = _group(cur, centers, s.radius, s.k)
        blocks.append(plan)
        cur = plan.coords
    return CloudPlan(coords, d0, blocks, init.members.astype(np.int32), first.radius)


_ENCODERS = {
    "distribution": lambda rel, dist, radius: octant_weight_sums(rel, dist, radius, True),
    "distribution_flat": lambda rel, dist, radius: octant_weight_sums(rel, dist, radius, False),
    "centroid": lambda rel, dist, radius: octant_centroids(rel),
}


def _initial_descriptors(rel: np.ndarray, dist: np.ndarray, radius: float, keys=None) -> dict:
    return {key: _ENCODERS[key](rel, dist, radius) for key in (keys or _ENCODERS)}


def initial_encoding(cfg: ModelConfig) -> str:
    """Key of ``CloudPlan.d0`` that the model reads."""
    if cfg.init_encoding == "centroid":
        return "centroid"
    return "distribution" if cfg.use_dw else "distribution_flat"


@dataclass
class PlanBatch:
    """Plans stacked along a leading batch axis."""

    coords: np.ndarray
    d0: dict
    blocks: list[dict]
    init_members: Optional[np.ndarray] = None
    init_radius: float = 0.0

    @property
    def size(self) -> int:
        return self.coords.shape[0]


def stack_plans(plans: Sequence[CloudPlan]) -> PlanBatch:
    blocks = []
    for i in range(len(plans[0].blocks)):
        sp = [p.blocks[i] for p in plans]
        blocks.append({name: np.stack([getattr(s, name) for s in sp])
                       for name in ("centers", "members", "rel", "dist", "refilled", "w_dw", "w_flat", "coords")}
                      | {"radius": sp[0].radius})
    has_init = all(p.init_members is not None for p in plans)
    return PlanBatch(
        coords=np.stack([p.coords for p in plans]),
        d0={k: np.stack([p.d0[k] for p in plans]) for k in plans[0].d0},
        blocks=blocks,
        init_members=np.stack([p.init_members for p in plans]) if has_init else None,
        init_radius=plans[0].init_radius,
    )


def rotate_batch(batch: PlanBatch, rot: np.ndarray, encodings=None) -> PlanBatch:
    """Apply one rotation per cloud, ``rot`` of shape (B, 3, 3), to a stacked batch.

    Rotations keep every distance, so sampling and grouping are reused; only
    offsets, coordinates and the octant-dependent weights are recomputed.
    The result equals re-planning the rotated clouds up to distance ties.
    ``encodings`` limits which initial descriptors are rebuilt (default: all).
    """
    if batch.init_members is None:
        raise ValueError("batch lacks the initial grouping needed to rotate descriptors")
    rot_t = np.swapaxes(np.asarray(rot, dtype=np.float64), 1, 2)
    coords = batch.coords @ rot_t
    b, n, k = batch.init_members.shape
    flat = (batch.init_members + (np.arange(b) * n)[:, None, None]).reshape(-1)
    rel0 = coords[:, :, None, :] - coords.reshape(-1, 3)[flat].reshape(b, n, k, 3)
    dist0 = np.sqrt(np.einsum("bnkd,bnkd->bnk", rel0, rel0))
    blocks = []
    for blk in batch.blocks:
        rel = (blk["rel"].reshape(b, -1, 3) @ rot_t).reshape(blk["rel"].shape)
        radius = blk["radius"]
        blocks.append(blk | {
            "rel": rel,
            "coords": blk["coords"] @ rot_t,
            "w_dw": octant_weights(rel, blk["dist"], radius, True),
            "w_flat": octant_weights(rel, blk["dist"], radius, False),
        })
    d0 = _initial_descriptors(rel0, dist0, batch.init_radius, encodings)
    return PlanBatch(coords, d0, blocks, batch.init_members, batch.init_radius)


# -- forward -----------------------------------------------------------------

@dataclass
class StageState:
    coords: np.ndarray  # (B, M, 3)
    features: Optional[Tensor]  # (B, M, c)
    descriptor: Tensor  # (B, M, d)


def initial_state(batch: PlanBatch, cfg: ModelConfig, dtype=DTYPE_TEST) -> StageState:
    d0 = batch.d0[initial_encoding(cfg)]
    return StageState(batch.coords, None, Tensor(d0.astype(dtype)))


def _keypoint_sat(d_next: Tensor, w_mean: np.ndarray, plan: dict, params: SatParams, rho: float, trace):
    b, m, _ = d_next.shape
    members = plan["members"]
    n_prev = int(members.max()) + 1
    keys, slots = [], []
    for i in range(b):
        scores = point_scores(w_mean[i], members[i], max(n_prev, int(plan["centers"][i].max()) + 1))
        sel = select_keys(scores[plan["centers"][i]], plan["centers"][i], members[i], plan["coords"][i], rho)
        keys.append(sel.keys)
        slots.append(sel.key_slot())
        if trace is not None:
            trace.setdefault("selections", []).append(sel)
    keys = np.stack(keys)
    out_k = sat_core(gather(d_next, keys), params)
    return gather(out_k, np.stack(slots))


def pdsa_forward(state: StageState, plan: dict, params: StageParams, cfg: ModelConfig,
                 trace: Optional[dict] = None) -> StageState:
    """One (P)DSA block on a batch.

    Order: group, aggregate the next-stage descriptor, embed and correct the
    neighbor matrix, max-pool over members, add the global correction. With
    every correction flag off this is exactly the plain SA block.
    """
    members = plan["members"]
    b, m, k = members.shape
    dtype = state.descriptor.dtype

    a = linear(state.descriptor, params.compress)
    weights = plan["w_dw"] if cfg.use_dw else plan["w_flat"]
    d_next = aggregate_core(a, members, weights)

    rel = Tensor(plan["rel"].astype(dtype))
    f_g = None if state.features is None else gather(state.features, members)
    f_n = mlp(embed_input(f_g, rel), params.embed)  # (B, M, k, c)

    corr = None
    if cfg.use_cdip:
        corr = cdip_core(d_next, state.descriptor, members, params.cdip)
        wv = mul(corr.w_re, corr.v_st)
        if cfg.denoise == "add":
            f_n = add(f_n, wv)
        elif cfg.denoise == "a1":
            f_n = mul(corr.w_re, add(corr.v_st, f_n))
    pooled, _ = max_reduce(f_n, axis=2)
    if corr is not None and cfg.denoise == "a2":
        pooled = add(pooled, max_reduce(wv, axis=2)[0])

    if cfg.use_cics:
        if m <= cfg.full_attention_max:
            sat = sat_core(d_next, params.sat)
        else:
            w_mean = (corr.w_re.data.mean(axis=-1) if corr is not None
                      else np.full((b, m, k), 1.0 / k))
            sat = _keypoint_sat(d_next, w_mean, plan, params.sat, cfg.rho, trace)
        pooled = add(pooled, sat)

    if trace is not None:
        trace["f_n"] = f_n
        trace["w_re"] = None if corr is None else corr.w_re
        trace["members"] = members
        trace["centers"] = plan["centers"]
    return StageState(plan["coords"], pooled, d_next)


def sa_baseline_forward(state: StageState, plan: dict, params: StageParams, cfg: ModelConfig,
                        trace: Optional[dict] = None) -> StageState:
    """Plain set abstraction (group, embed, max-pool); the descriptor is still aggregated."""
    base = ModelConfig(**{**cfg.__dict__, "variant": "sa_baseline"})
    return pdsa_forward(state, plan, params, base, trace)


def encode_batch(batch: PlanBatch, cfg: ModelConfig, params: ModelParams,
                 traces: Optional[list] = None) -> list[StageState]:
    dtype = params.stages[0].compress.weight.dtype
    state = initial_state(batch, cfg, dtype)
    states = []
    for i, (plan, sp) in enumerate(zip(batch.blocks, params.stages)):
        tr = {} if traces is not None else None
        state = pdsa_forward(state, plan, sp, cfg, tr)
        if traces is not None:
            traces.append(tr)
        states.append(state)
    return states


def encoder_forward(cloud, cfg: ModelConfig, params: ModelParams) -> list[StageState]:
    """Encode one cloud (``PointCloud`` or (N, 3) array); states carry a batch axis of 1."""
    coords = cloud.coords if isinstance(cloud, geom.PointCloud) else cloud
    return encode_batch(stack_plans([build_plan(coords, cfg)]), cfg, params)


def classify_head(state: StageState, params: ModelParams) -> Tensor:
    """Global max-pool over points, then the head MLP: (B, n_classes) logits."""
    pooled, _ = max_reduce(state.features, axis=1)
    return mlp(pooled, params.head)


def forward_logits(batch: PlanBatch, cfg: ModelConfig, params: ModelParams, traces=None) -> Tensor:
    return classify_head(encode_batch(batch, cfg, params, traces)[-1], params)


# -- feature propagation -----------------------------------------------------

def three_nn_weights(coarse: np.ndarray, fine: np.ndarray, n: int = 3):
    """Indices (F, n') and normalized inverse-distance weights of the nearest coarse points."""
    n = min(n, len(coarse))
    diff = fine[:, None, :] - coarse[None, :, :]
    dist = np.sqrt(np.einsum("fcd,fcd->fc", diff, diff))
    idx = np.argsort(dist, axis=1, kind="stable")[:, :n]
    d = np.take_along_axis(dist, idx, axis=1)
    w = 1.0 / np.maximum(d, 1e-8)
    return idx, w / w.sum(axis=1, keepdims=True)


def fp_interpolate(coarse: StageState, fine_coords: np.ndarray, fine_skip: Optional[Tensor],
                   mlp_p: MLPParams) -> Tensor:
    """Inverse-distance interpolation from ``coarse`` onto ``fine_coords`` (B, F, 3),
    concatenated with ``fine_skip`` and passed through ``mlp_p``."""
    feats = coarse.features
    idx, w = zip(*(three_nn_weights(c, f) for c, f in zip(coarse.coords, fine_coords)))
    idx, w = np.stack(idx), np.stack(w)
    g = gather(feats, idx)  # (B, F, n, c)
    wt = Tensor(w[..., None].astype(feats.dtype))
    interp = sum_reduce(mul(g, wt), axis=2)
    x = interp if fine_skip is None else concat([interp, fine_skip], axis=-1)
    return mlp(x, mlp_p)


def segment_forward(batch: PlanBatch, cfg: ModelConfig, params: ModelParams) -> Tensor:
    """Per-point logits (B, N, n_seg) via an FP decoder mirroring the encoder."""
    if params.decoder is None:
        raise ValueError("model parameters have no decoder")
    states = encode_batch(batch, cfg, params)
    fines = [(batch.coords, None)] + [(s.coords, s.features) for s in states[:-1]]
    cur = states[-1]
    for (coords, skip), fp in zip(reversed(fines), params.decoder[:-1]):
        feats = fp_interpolate(cur, coords, skip, fp)
        cur = StageState(coords, feats, cur.descriptor)
    return mlp(cur.features, params.decoder[-1])


def sample_row_variance(trace: dict, n: int, rng: np.random.Generator) -> np.ndarray:
    """Mean row variance of ``n`` randomly sampled neighbor matrices from a trace."""
    f = trace["f_n"].data
    b, m = f.shape[:2]
    flat = rng.choice(b * m, size=min(n, b * m), replace=False)
    rows = f.reshape(b * m, *f.shape[2:])[flat]
    return neighbor_row_variance(rows)[0]
