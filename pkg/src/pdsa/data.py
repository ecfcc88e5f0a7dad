"""Synthetic shapes, outlier injection, metrics and ASCII PLY IO.

Random numbers come from :class:`Xorshift64Star`, a fixed algorithm run on
numpy ``uint64`` lanes, so generated clouds are identical on every platform
and numpy version.
"""

from __future__ import annotations

import io
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geom import PointCloud

KINDS = ("sphere", "cube", "plane", "cylinder")

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_MULT = np.uint64(0x2545F4914F6CDD1D)


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x`` (used for seeding)."""
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


class Xorshift64Star:
    """xorshift64* (shifts 12, 25, 27; multiplier 0x2545F4914F6CDD1D) on parallel lanes.

    Lane ``i`` starts from ``splitmix64(seed + i)`` (never zero). Each step
    advances every lane once and emits the lane outputs in lane order.
    """

    def __init__(self, seed: int, lanes: int = 64):
        states = []
        for i in range(lanes):
            s = splitmix64((seed + i) & 0xFFFFFFFFFFFFFFFF)
            states.append(s or 0x9E3779B97F4A7C15)
        self.state = np.array(states, dtype=np.uint64)

    def next_u64(self, n: int) -> np.ndarray:
        lanes = len(self.state)
        steps = -(-n // lanes)
        out = np.empty((steps, lanes), dtype=np.uint64)
        x = self.state
        for t in range(steps):
            x ^= x >> np.uint64(12)
            x ^= (x << np.uint64(25)) & _MASK
            x ^= x >> np.uint64(27)
            out[t] = x * _MULT
        self.state = x
        return out.ravel()[:n]

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def normal(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller."""
        m = -(-n // 2)
        u1 = 1.0 - self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        return np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]


@dataclass
class ShapeSpec:
    kind: str
    n_points: int = 1024
    noise_sigma: float = 0.0
    seed: int = 0
    rotate: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}; expected one of {KINDS}")
        if self.n_points < 8:
            raise ValueError("n_points must be at least 8")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")


def _random_rotation(rng: Xorshift64Star) -> np.ndarray:
    u1, u2, u3 = rng.uniform(3)
    a, b = math.sqrt(1 - u1), math.sqrt(u1)
    qx, qy, qz, qw = a * math.sin(2 * math.pi * u2), a * math.cos(2 * math.pi * u2), \
        b * math.sin(2 * math.pi * u3), b * math.cos(2 * math.pi * u3)
    return np.array([
        [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
        [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
        [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
    ])


def _surface(kind: str, n: int, rng: Xorshift64Star) -> np.ndarray:
    # every surface is centered on the origin with a largest extent of 1
    if kind == "sphere":
        v = rng.normal(3 * n).reshape(n, 3)
        return 0.5 * v / np.linalg.norm(v, axis=1, keepdims=True)
    if kind == "plane":
        uv = rng.uniform(2 * n).reshape(n, 2) - 0.5
        return np.column_stack([uv, np.zeros(n)])
    if kind == "cube":
        face = np.minimum((rng.uniform(n) * 6).astype(np.int64), 5)
        uv = rng.uniform(2 * n).reshape(n, 2) - 0.5
        axis = face // 2
        side = np.where(face % 2 == 0, -0.5, 0.5)
        pts = np.empty((n, 3))
        for ax in range(3):
            o1, o2 = [a for a in range(3) if a != ax]
            sel = axis == ax
            pts[sel, ax] = side[sel]
            pts[sel, o1] = uv[sel, 0]
            pts[sel, o2] = uv[sel, 1]
        return pts
    # cylinder: radius 0.5, height 1, caps included by area (lateral : caps = 2 : 1)
    pick = rng.uniform(n)
    theta = 2 * np.pi * rng.uniform(n)
    h = rng.uniform(n) - 0.5
    rad = 0.5 * np.sqrt(rng.uniform(n))
    cap = pick >= 2.0 / 3.0
    top = rng.uniform(n) < 0.5
    r = np.where(cap, rad, 0.5)
    z = np.where(cap, np.where(top, 0.5, -0.5), h)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def generate_shape(spec: ShapeSpec) -> PointCloud:
    """Surface samples of ``spec.kind`` centered on the origin with unit largest extent.

    Optional random rotation, then isotropic Gaussian noise. Labels hold the
    kind's class id. Deterministic in ``spec.seed``.
    """
    cls = KINDS.index(spec.kind)
    rng = Xorshift64Star(splitmix64(spec.seed) ^ (cls << 48))
    pts = _surface(spec.kind, spec.n_points, rng)
    if spec.rotate:
        pts = pts @ _random_rotation(rng).T
    if spec.noise_sigma > 0:
        pts = pts + spec.noise_sigma * rng.normal(3 * spec.n_points).reshape(-1, 3)
    return PointCloud(pts, labels=np.full(spec.n_points, cls, dtype=np.int64))


def inject_outliers(cloud: PointCloud, fraction: float, spread: float, seed: int):
    """Replace ``floor(fraction * N)`` random points by uniform draws from a box.

    The box has half-width ``spread`` around the cloud's bounding-box center.
    Returns ``(new_cloud, mask)`` where ``mask`` flags the replaced points.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("outlier fraction must lie in [0, 1)")
    n = cloud.n
    n_out = int(math.floor(fraction * n + 1e-9))
    mask = np.zeros(n, dtype=bool)
    if n_out == 0:
        return PointCloud(cloud.coords.copy(), cloud.features, cloud.labels, cloud.scalars), mask
    rng = Xorshift64Star(splitmix64(seed) ^ 0x5EED0F0071E5)
    chosen = np.argsort(rng.uniform(n), kind="stable")[:n_out]
    mask[chosen] = True
    center = 0.5 * (cloud.coords.min(axis=0) + cloud.coords.max(axis=0))
    coords = cloud.coords.copy()
    coords[chosen] = center + spread * (2.0 * rng.uniform(3 * n_out).reshape(n_out, 3) - 1.0)
    return PointCloud(coords, cloud.features, cloud.labels, cloud.scalars), mask


# -- metrics -----------------------------------------------------------------

@dataclass
class MetricsReport:
    confusion: np.ndarray  # (C, C), rows = truth, cols = prediction
    miou: float
    oa: float
    macc: float
    per_class_iou: np.ndarray  # NaN for classes absent from truth and prediction

    def to_csv(self) -> str:
        tp, fp, fn = _tp_fp_fn(self.confusion)
        buf = io.StringIO()
        buf.write("class,tp,fp,fn,iou\n")
        for c in range(len(tp)):
            iou = self.per_class_iou[c]
            buf.write(f"{c},{tp[c]},{fp[c]},{fn[c]},{'nan' if np.isnan(iou) else f'{iou:.6f}'}\n")
        return buf.getvalue()


def _tp_fp_fn(conf):
    tp = np.diag(conf)
    return tp, conf.sum(axis=0) - tp, conf.sum(axis=1) - tp


def confusion_matrix(pred, truth, n_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"prediction and truth lengths differ ({pred.size} vs {truth.size})")
    for name, arr in (("prediction", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} label out of range [0, {n_classes})")
    return np.bincount(truth * n_classes + pred, minlength=n_classes ** 2).reshape(n_classes, n_classes)


def metrics_from_confusion(conf: np.ndarray) -> MetricsReport:
    conf = np.asarray(conf, dtype=np.int64)
    total = conf.sum()
    if total == 0:
        raise ValueError("cannot compute metrics on empty input")
    tp, fp, fn = _tp_fp_fn(conf)
    union = tp + fp + fn
    present = union > 0
    iou = np.full(len(tp), np.nan)
    iou[present] = tp[present] / union[present]
    in_truth = (tp + fn) > 0
    acc = tp[in_truth] / (tp + fn)[in_truth]
    return MetricsReport(conf, float(iou[present].mean()), float(tp.sum() / total), float(acc.mean()), iou)


def compute_metrics(pred, truth, n_classes: int) -> MetricsReport:
    """Confusion-based mIoU, OA and mAcc.

    Classes that occur in neither input are left out of the mIoU mean; mAcc
    averages over classes present in ``truth``.
    """
    if np.asarray(pred).size == 0:
        raise ValueError("cannot compute metrics on empty input")
    return metrics_from_confusion(confusion_matrix(pred, truth, n_classes))


# -- PLY ---------------------------------------------------------------------

_FLOAT_TYPES = {"float", "float32", "double", "float64"}
_INT_TYPES = {"int", "int32", "uint", "uint32", "int16", "uint16", "int8", "uint8", "char", "uchar", "short", "ushort"}


def atomic_write_text(path, text: str):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_cloud(path, cloud: PointCloud, scalars: Optional[dict] = None):
    """ASCII PLY with x, y, z, then ``label`` if the cloud has per-point labels,
    then any extra float columns (e.g. ``heat``) from ``scalars``."""
    cols = [("x", "float", cloud.coords[:, 0]), ("y", "float", cloud.coords[:, 1]),
            ("z", "float", cloud.coords[:, 2])]
    labels = cloud.labels
    if labels is not None and np.ndim(labels) == 1 and len(labels) == cloud.n:
        cols.append(("label", "int", np.asarray(labels, dtype=np.int64)))
    extra = dict(cloud.scalars or {})
    extra.update(scalars or {})
    for name, vals in extra.items():
        vals = np.asarray(vals, dtype=np.float64).ravel()
        if len(vals) != cloud.n:
            raise ValueError(f"scalar column {name!r} has {len(vals)} values for {cloud.n} points")
        cols.append((name, "float", vals))
    lines = ["ply", "format ascii 1.0", f"element vertex {cloud.n}"]
    lines += [f"property {t} {name}" for name, t, _ in cols]
    lines.append("end_header")
    fmt = ["%d" if t == "int" else "%.9g" for _, t, _ in cols]
    rows = zip(*(v for _, _, v in cols))
    body = "\n".join(" ".join(f % v for f, v in zip(fmt, row)) for row in rows)
    atomic_write_text(path, "\n".join(lines) + "\n" + body + ("\n" if cloud.n else ""))


def read_cloud(path) -> PointCloud:
    """Read the ASCII PLY subset written by :func:`write_cloud`.

    A ``label`` column becomes ``labels``; other non-coordinate columns land
    in ``cloud.scalars``.
    """
    with open(path) as f:
        lines = f.read().split("\n")
    if not lines or lines[0].strip() != "ply":
        raise ValueError("line 1: missing 'ply' magic")
    n_vertex = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    i = 1
    while True:
        if i >= len(lines):
            raise ValueError(f"line {i}: header has no end_header")
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ValueError(f"line {i}: only ascii PLY is supported")
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ValueError(f"line {i}: malformed element declaration")
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tok[2])
                except ValueError:
                    raise ValueError(f"line {i}: vertex count {tok[2]!r} is not an integer") from None
        elif tok[0] == "property":
            if len(tok) != 3:
                raise ValueError(f"line {i}: malformed property declaration")
            if in_vertex:
                if tok[1] not in _FLOAT_TYPES | _INT_TYPES:
                    raise ValueError(f"line {i}: unsupported property type {tok[1]!r}")
                props.append((tok[2], tok[1]))
        else:
            raise ValueError(f"line {i}: unexpected header keyword {tok[0]!r}")
    if n_vertex is None:
        raise ValueError(f"line {i}: header declares no vertex element")
    names = [p for p, _ in props]
    for axis in "xyz":
        if axis not in names:
            raise ValueError(f"line {i}: vertex element lacks property {axis!r}")
    body_start = i
    rows = []
    for j in range(n_vertex):
        ln = body_start + j
        if ln >= len(lines) or not lines[ln].strip():
            raise ValueError(f"line {ln + 1}: expected {n_vertex} vertex rows, found only {j}")
        parts = lines[ln].split()
        if len(parts) != len(props):
            raise ValueError(f"line {ln + 1}: expected {len(props)} values, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise ValueError(f"line {ln + 1}: non-numeric value") from None
    data = np.array(rows, dtype=np.float64).reshape(n_vertex, len(props))
    col = {name: data[:, k] for k, name in enumerate(names)}
    coords = np.column_stack([col["x"], col["y"], col["z"]])
    labels = col["label"].astype(np.int64) if "label" in col else None
    extra = {k: v for k, v in col.items() if k not in ("x", "y", "z", "label")}
    return PointCloud(coords, labels=labels, scalars=extra)
