"""Training, evaluation, ablation sweeps and heat-map inspection on synthetic shapes."""

from __future__ import annotations

import ctypes
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .cdip import neighbor_row_variance
from .cics import point_scores, select_keys
from .data import KINDS, ShapeSpec, atomic_write_text, generate_shape, inject_outliers
from .geom import PointCloud
from .network import (
    CloudPlan,
    ModelConfig,
    build_plan,
    forward_logits,
    init_params,
    initial_encoding,
    rotate_batch,
    stack_plans,
)
from .tensor import (
    DTYPE_TRAIN,
    AdamWState,
    adamw_step,
    cross_entropy_label_smoothing,
    fresh_leaves,
    named_tensors,
    params_state,
    save_checkpoint,
)


_ALLOCATOR_TUNED = False


def tune_allocator() -> bool:
    """Keep freed training buffers on the glibc heap instead of returning them to the OS.

    Each step allocates and frees the same large activations; with the default
    mmap threshold every one of them costs fresh page faults. No-op elsewhere.
    """
    global _ALLOCATOR_TUNED
    if _ALLOCATOR_TUNED:
        return True
    try:
        libc = ctypes.CDLL("libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    # M_MMAP_THRESHOLD=-3 (32 MiB is the glibc cap), M_TRIM_THRESHOLD=-1, M_TOP_PAD=-2
    ok = mallopt(-3, 32 << 20) and mallopt(-1, 1 << 30) and mallopt(-2, 256 << 20)
    _ALLOCATOR_TUNED = bool(ok)
    return _ALLOCATOR_TUNED


@dataclass
class TrainConfig:
    lr: float = 0.002
    weight_decay: float = 1e-4
    epochs: int = 60
    batch: int = 32
    seed: int = 0
    smoothing: float = 0.1
    schedule: str = "cosine"  # or "constant"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    threads: int = 1
    # fresh random rotation of every training cloud at every step
    augment: bool = True


@dataclass
class DataConfig:
    n_points: int = 1024
    train_per_class: int = 200
    test_per_class: int = 50
    noise_sigma: float = 0.01
    rotate: bool = True
    outlier_fraction: float = 0.0
    outlier_spread: float = 1.0
    # test split seeds start here, so train and test never share a seed
    test_seed_offset: int = 200


@dataclass
class Dataset:
    plans: list[CloudPlan]
    labels: np.ndarray
    clouds: list[PointCloud] = field(repr=False, default_factory=list)

    def __len__(self):
        return len(self.labels)


def make_clouds(data: DataConfig, split: str) -> tuple[list[PointCloud], np.ndarray]:
    if split == "train":
        seeds = range(data.train_per_class)
    elif split == "test":
        seeds = range(data.test_seed_offset, data.test_seed_offset + data.test_per_class)
    else:
        raise ValueError(f"unknown split {split!r}")
    if split == "test" and data.test_per_class > 0 and data.train_per_class > data.test_seed_offset:
        raise ValueError("train seeds overlap the test split; raise test_seed_offset")
    clouds, labels = [], []
    for cls, kind in enumerate(KINDS):
        for s in seeds:
            c = generate_shape(ShapeSpec(kind, data.n_points, data.noise_sigma, s, data.rotate))
            if data.outlier_fraction > 0:
                c, _ = inject_outliers(c, data.outlier_fraction, data.outlier_spread, s * len(KINDS) + cls)
            clouds.append(c)
            labels.append(cls)
    return clouds, np.array(labels, dtype=np.int64)


_PLAN_CACHE: dict = {}


def _geometry_key(cfg: ModelConfig):
    return tuple((s.stride, s.radius, s.k) for s in cfg.blocks())


def load_split(data: DataConfig, cfg: ModelConfig, split: str) -> Dataset:
    """Clouds and their geometry plans; plans are cached per process since they are pure."""
    key = (split, tuple(sorted(data.__dict__.items())), _geometry_key(cfg))
    if key not in _PLAN_CACHE:
        clouds, labels = make_clouds(data, split)
        _PLAN_CACHE[key] = Dataset([build_plan(c.coords, cfg) for c in clouds], labels, clouds)
    return _PLAN_CACHE[key]


def clear_cache():
    _PLAN_CACHE.clear()


def learning_rate(tc: TrainConfig, step: int, total: int) -> float:
    if tc.schedule == "constant" or total <= 1:
        return tc.lr
    if tc.schedule != "cosine":
        raise ValueError(f"unknown schedule {tc.schedule!r}")
    return 0.5 * tc.lr * (1.0 + math.cos(math.pi * step / total))


def predict(params, cfg: ModelConfig, ds: Dataset, batch: int) -> np.ndarray:
    preds = []
    for s in range(0, len(ds), batch):
        logits = forward_logits(stack_plans(ds.plans[s:s + batch]), cfg, params)
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(params, cfg: ModelConfig, ds: Dataset, batch: int) -> float:
    if len(ds) == 0:
        return float("nan")
    return float(np.mean(predict(params, cfg, ds, batch) == ds.labels))


def _shard_grads(params, cfg, plans, labels, eps, n_total, rots=None):
    """Loss contribution and parameter grads of one shard, on private leaves."""
    local = fresh_leaves(params)
    batch = stack_plans(plans)
    if rots is not None:
        batch = rotate_batch(batch, rots, [initial_encoding(cfg)])
    logits = forward_logits(batch, cfg, local)
    loss = cross_entropy_label_smoothing(logits, labels, eps)
    weight = len(labels) / n_total
    loss.backward()
    grads = {name: None if t.grad is None else t.grad * t.grad.dtype.type(weight)
             for name, t in named_tensors(local)}
    correct = int(np.sum(np.argmax(logits.data, axis=1) == labels))
    return float(loss.data) * weight, grads, correct


def _batch_grads(params, cfg, plans, labels, eps, pool: Optional[ThreadPoolExecutor], threads: int,
                 rots=None):
    n = len(labels)
    if pool is None or threads <= 1 or n < 2:
        return _shard_grads(params, cfg, plans, labels, eps, n, rots)
    bounds = np.linspace(0, n, min(threads, n) + 1).astype(int)
    jobs = [pool.submit(_shard_grads, params, cfg, plans[a:b], labels[a:b], eps, n,
                        None if rots is None else rots[a:b])
            for a, b in zip(bounds[:-1], bounds[1:])]
    results = [j.result() for j in jobs]  # fixed shard order keeps the merge deterministic
    loss = sum(r[0] for r in results)
    grads = {}
    for name in results[0][1]:
        parts = [r[1][name] for r in results if r[1][name] is not None]
        grads[name] = None if not parts else sum(parts[1:], parts[0].copy())
    return loss, grads, sum(r[2] for r in results)


@dataclass
class TrainResult:
    params: object
    log: list[dict]
    best_epoch: int
    best_test_acc: float


def train_model(cfg: ModelConfig, tc: TrainConfig, train: Dataset, test: Dataset,
                out_dir: Optional[str] = None, on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train a classifier and optionally write ``log.csv``, ``final.ckpt`` and ``best.ckpt``.

    The log row for each epoch holds the mean training loss, the training
    accuracy seen during the epoch and the test accuracy after it.
    """
    tune_allocator()
    params = init_params(cfg, tc.seed, DTYPE_TRAIN)
    names = [n for n, _ in named_tensors(params)]
    arrays = params_state(params)
    opt = AdamWState()
    rng = np.random.default_rng(tc.seed)
    n = len(train)
    steps_per_epoch = -(-n // tc.batch) if n else 0
    total = steps_per_epoch * tc.epochs
    log_rows: list[dict] = []
    best = (-1.0, -1)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_log(out_dir, log_rows)
        save_checkpoint(os.path.join(out_dir, "final.ckpt"), arrays)
        save_checkpoint(os.path.join(out_dir, "best.ckpt"), arrays)

    pool = ThreadPoolExecutor(tc.threads) if tc.threads > 1 else None
    step = 0
    try:
        for epoch in range(1, tc.epochs + 1):
            order = rng.permutation(n)
            loss_sum, correct = 0.0, 0
            for s in range(0, n, tc.batch):
                idx = order[s:s + tc.batch]
                rots = Rotation.random(len(idx), random_state=rng).as_matrix() if tc.augment else None
                loss, grads, ok = _batch_grads(params, cfg, [train.plans[i] for i in idx],
                                               train.labels[idx], tc.smoothing, pool, tc.threads, rots)
                if not math.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {step + 1}")
                adamw_step(arrays, grads, opt, learning_rate(tc, step, total),
                           tc.beta1, tc.beta2, tc.eps, tc.weight_decay)
                step += 1
                loss_sum += loss * len(idx)
                correct += ok
            test_acc = accuracy(params, cfg, test, tc.batch)
            row = {"epoch": epoch, "loss": loss_sum / max(n, 1), "train_acc": correct / max(n, 1),
                   "test_acc": test_acc}
            log_rows.append(row)
            if out_dir is not None:
                _write_log(out_dir, log_rows)
                save_checkpoint(os.path.join(out_dir, "final.ckpt"), arrays)
            if test_acc > best[0]:
                best = (test_acc, epoch)
                if out_dir is not None:
                    save_checkpoint(os.path.join(out_dir, "best.ckpt"), arrays)
            if on_epoch is not None:
                on_epoch(row)
    finally:
        if pool is not None:
            pool.shutdown()
    assert names == [n for n, _ in named_tensors(params)]
    return TrainResult(params, log_rows, best[1], best[0])


def _write_log(out_dir: str, rows: list[dict]):
    lines = ["epoch,loss,train_acc,test_acc"]
    lines += [f"{r['epoch']},{r['loss']:.9g},{r['train_acc']:.9g},{r['test_acc']:.9g}" for r in rows]
    atomic_write_text(os.path.join(out_dir, "log.csv"), "\n".join(lines) + "\n")


# -- diagnostics ---------------------------------------------------------------

def neighborhood_variances(params, cfg: ModelConfig, ds: Dataset, n_samples: int, seed: int,
                           stage: int = 0, batch: int = 32) -> np.ndarray:
    """Row variance of the stage neighbor matrices at a fixed random sample of (cloud, center) pairs.

    The sample depends only on ``seed`` and the dataset geometry, so models
    trained with different flags are measured on the same neighborhoods.
    """
    m = ds.plans[0].blocks[stage].centers.shape[0]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(ds) * m, size=min(n_samples, len(ds) * m), replace=False)
    clouds, centers = np.divmod(picks, m)
    out = np.empty(len(picks))
    for s in range(0, len(ds), batch):
        sel = np.nonzero((clouds >= s) & (clouds < s + batch))[0]
        if len(sel) == 0:
            continue
        traces: list = []
        forward_logits(stack_plans(ds.plans[s:s + batch]), cfg, params, traces)
        f = traces[stage]["f_n"].data[clouds[sel] - s, centers[sel]]  # (S, k, c)
        out[sel] = neighbor_row_variance(f)[0]
    return out


def attention_heat(params, cfg: ModelConfig, plan: CloudPlan, rho: Optional[float] = None):
    """Per-point heat from stage-one denoising weights and the stage-one key selection.

    Heat sums the channel-mean weight each input point receives over all
    stage-one neighborhoods, min-max normalized to [0, 1]. Returns
    ``(heat (N,), selection)``.
    """
    if not cfg.use_cdip:
        raise ValueError("attention heat needs a model with the denoising correction enabled")
    traces: list = []
    forward_logits(stack_plans([plan]), cfg, params, traces)
    tr = traces[0]
    w_mean = tr["w_re"].data[0].mean(axis=-1).astype(np.float64)
    members = tr["members"][0]
    centers = tr["centers"][0]
    n = len(plan.coords)
    scores = point_scores(w_mean, members, n)
    lo, hi = scores.min(), scores.max()
    heat = (scores - lo) / (hi - lo) if hi > lo else np.zeros(n)
    sel = select_keys(scores[centers], centers, members, plan.coords[centers],
                      cfg.rho if rho is None else rho)
    return heat, sel


# -- ablation ----------------------------------------------------------------

LADDER = (
    ("baseline", dict(variant="sa_baseline")),
    ("+CDIP", dict(variant="pdsa", cdip=True, dw=False, cics=False)),
    ("+CDIP+Dw", dict(variant="pdsa", cdip=True, dw=True, cics=False)),
    ("+CDIP+Dw+CICS", dict(variant="pdsa", cdip=True, dw=True, cics=True)),
)


def ablation_variants(cfg: ModelConfig, sweep: str, a_dims: Sequence[int] = (1, 2, 3, 4)):
    if sweep == "ladder":
        return [(name, replace(cfg, **kw)) for name, kw in LADDER]
    if sweep == "a_dim":
        return [(f"a_dim={a}", replace(cfg, a_dim=a)) for a in a_dims]
    raise ValueError(f"unknown ablation sweep {sweep!r}")


@dataclass
class AblationRow:
    variant: str
    seed: int
    test_oa: float
    mean_nbr_var: float
    nbr_var: np.ndarray = field(repr=False, default=None)


def run_ablation(cfg: ModelConfig, tc: TrainConfig, data: DataConfig, seeds: Sequence[int],
                 sweep: str = "ladder", var_samples: int = 256, a_dims: Sequence[int] = (1, 2, 3, 4),
                 on_row: Optional[Callable[[AblationRow], None]] = None) -> list[AblationRow]:
    rows = []
    for seed in seeds:
        for name, vcfg in ablation_variants(cfg, sweep, a_dims):
            train = load_split(data, vcfg, "train")
            test = load_split(data, vcfg, "test")
            res = train_model(vcfg, replace(tc, seed=seed), train, test)
            oa = accuracy(res.params, vcfg, test, tc.batch)
            var = (neighborhood_variances(res.params, vcfg, test, var_samples, seed, batch=tc.batch)
                   if len(test) else np.zeros(0))
            row = AblationRow(name, seed, oa, float(var.mean()) if len(var) else float("nan"), var)
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    lines = ["variant,seed,test_oa,mean_nbr_var"]
    lines += [f"{r.variant},{r.seed},{r.test_oa:.9g},{r.mean_nbr_var:.9g}" for r in rows]
    return "\n".join(lines) + "\n"
