"""Minimal reverse-mode differentiation over numpy arrays.

Every op records its parents and a closure that maps the output gradient to
parent gradients. ``Tensor.backward`` topologically sorts the recorded graph
and replays the closures in reverse, which is the tape.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass, fields, is_dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

DTYPE_TEST = np.float64
DTYPE_TRAIN = np.float32


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DTYPE_TEST)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DTYPE_TEST))


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _result(data, parents, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    return _result(y, (x,), lambda g: (g * (y > 0),))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


@dataclass
class LinearParams:
    weight: Tensor  # (out, in)
    bias: Tensor  # (out,)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, dtype=DTYPE_TEST) -> "LinearParams":
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in)).astype(dtype)
        b = rng.uniform(-bound, bound, size=(n_out,)).astype(dtype)
        return cls(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))


def linear(x: Tensor, p: LinearParams) -> Tensor:
    """``y = x @ W.T + b`` over the last axis of ``x``."""
    w, b = p.weight, p.bias
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear: input shape {x.shape} incompatible with weight shape {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[1])
    y = x2 @ w.data.T
    y += b.data
    y = y.reshape(*lead, w.shape[0])

    def backward(g):
        g2 = g.reshape(-1, w.shape[0])
        gx = (g2 @ w.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if w.requires_grad else None
        gb = np.ones(g2.shape[0], dtype=g2.dtype) @ g2 if b.requires_grad else None
        return gx, gw, gb

    return _result(y, (x, w, b), backward)


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, n: int, dtype=DTYPE_TEST) -> "LayerNormParams":
        return cls(Tensor(np.ones(n, dtype=dtype), requires_grad=True),
                   Tensor(np.zeros(n, dtype=dtype), requires_grad=True))


def layer_norm(x: Tensor, p: LayerNormParams, eps: float = 1e-5) -> Tensor:
    """Affine layer normalization over the last (channel) axis."""
    n = x.shape[-1]
    # row reductions as matrix-vector products: much faster than .mean(-1) for small n
    avg = np.full(n, 1.0 / n, dtype=x.dtype)
    x2 = x.data.reshape(-1, n)
    xc = x2 - (x2 @ avg)[:, None]
    inv = (1.0 / np.sqrt((xc * xc) @ avg + eps))[:, None]
    xhat = xc * inv
    gamma, beta = p.gamma, p.beta
    y = (xhat * gamma.data + beta.data).reshape(x.shape)

    def backward(g):
        g2 = g.reshape(-1, n)
        gx = None
        if x.requires_grad:
            gh = g2 * gamma.data
            gx = (inv * (gh - (gh @ avg)[:, None] - xhat * ((gh * xhat) @ avg)[:, None])).reshape(x.shape)
        ones = np.ones(g2.shape[0], dtype=g2.dtype)
        ggamma = ones @ (g2 * xhat) if gamma.requires_grad else None
        gbeta = ones @ g2 if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _result(y, (x, gamma, beta), backward)


@dataclass
class MLPParams:
    """Stack of linear layers; the first ``len(norms)`` are followed by LN and ReLU."""

    linears: list[LinearParams]
    norms: list[LayerNormParams]

    @property
    def in_features(self) -> int:
        return self.linears[0].in_features

    @property
    def out_features(self) -> int:
        return self.linears[-1].out_features

    @classmethod
    def init(cls, widths: Sequence[int], rng: np.random.Generator, dtype=DTYPE_TEST,
             plain_last: bool = False) -> "MLPParams":
        """``widths = [in, h1, ..., out]``. ``plain_last`` leaves the output layer raw."""
        lins = [LinearParams.init(a, b, rng, dtype) for a, b in zip(widths[:-1], widths[1:])]
        n_norm = len(lins) - 1 if plain_last else len(lins)
        norms = [LayerNormParams.init(lins[i].out_features, dtype) for i in range(n_norm)]
        return cls(lins, norms)


def layer_norm_relu(x: Tensor, p: LayerNormParams, eps: float = 1e-5) -> Tensor:
    """``relu(layer_norm(x))`` as one op, with in-place intermediates."""
    n = x.shape[-1]
    avg = np.full(n, 1.0 / n, dtype=x.dtype)
    x2 = x.data.reshape(-1, n)
    xhat = x2 - (x2 @ avg)[:, None]
    inv = (1.0 / np.sqrt(np.square(xhat) @ avg + eps))[:, None]
    xhat *= inv
    gamma, beta = p.gamma, p.beta
    y = xhat * gamma.data
    y += beta.data
    np.maximum(y, 0, out=y)

    def backward(g):
        g2 = g.reshape(-1, n)
        gy = g2 * (y > 0)
        ones = np.ones(g2.shape[0], dtype=g2.dtype)
        ggamma = ones @ (gy * xhat) if gamma.requires_grad else None
        gbeta = ones @ gy if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gy *= gamma.data
            t = gy * xhat
            a = (gy @ avg)[:, None]
            t2 = (t @ avg)[:, None]
            np.multiply(xhat, t2, out=t)
            gy -= a
            gy -= t
            gy *= inv
            gx = gy.reshape(x.shape)
        return gx, ggamma, gbeta

    return _result(y.reshape(x.shape), (x, gamma, beta), backward)


def mlp(x: Tensor, p: MLPParams) -> Tensor:
    for i, lin in enumerate(p.linears):
        x = linear(x, lin)
        if i < len(p.norms):
            x = layer_norm_relu(x, p.norms[i])
    return x


# -- reductions / normalizers ------------------------------------------------

def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for shape {x.shape}")
    axis %= x.ndim
    if x.shape[axis] == 0:
        raise ValueError(f"reduction over empty axis {axis} of shape {x.shape}")
    return axis


def softmax_axis(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    y = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


def max_reduce(x: Tensor, axis: int) -> tuple[Tensor, np.ndarray]:
    """Max over ``axis``; gradient flows to the (lowest-index) argmax only."""
    axis = _check_axis(x, axis)
    idx = np.argmax(x.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    y = np.take_along_axis(x.data, idx_k, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx_k, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(y, (x,), backward), idx


def mean_reduce(x: Tensor, axis: int) -> Tensor:
    axis = _check_axis(x, axis)
    n = x.shape[axis]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _result(x.data.mean(axis=axis), (x,), backward)


def sum_reduce(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        return _result(np.asarray(x.data.sum()), (x,),
                       lambda g: (np.broadcast_to(g, x.shape).copy(),))
    axis = _check_axis(x, axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(x.data.sum(axis=axis), (x,), backward)


# -- shape / indexing --------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _result(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def expand_dims(x: Tensor, axis: int) -> Tensor:
    return _result(np.expand_dims(x.data, axis), (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    axis %= xs[0].ndim
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in xs], axis=axis), xs, backward)


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of ``x`` (shape ``(B, M, C)``) at ``idx`` (shape ``(B, ...)``).

    Returns ``(B, ..., C)``; each batch entry indexes its own rows.
    """
    b, m, c = x.shape
    idx = np.asarray(idx)
    if idx.shape[0] != b:
        raise ValueError(f"gather: batch size {idx.shape[0]} != {b}")
    offs = (np.arange(b) * m).reshape((b,) + (1,) * (idx.ndim - 1))
    flat = (idx + offs).ravel()
    src = x.data.reshape(b * m, c)
    y = src[flat].reshape(idx.shape + (c,))

    def backward(g):
        # scatter-add as a sparse (rows x slots) product; row sums run in slot order
        scatter = sparse.csr_matrix((np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))),
                                    shape=(b * m, flat.size))
        return (np.asarray(scatter @ g.reshape(-1, c)).reshape(x.shape),)

    return _result(y, (x,), backward)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# -- losses ------------------------------------------------------------------

def cross_entropy_label_smoothing(logits: Tensor, labels, eps: float = 0.1) -> Tensor:
    """Mean over the batch of ``-sum_c q_c log softmax(logits)_c``.

    ``q = (1 - eps) * onehot + eps / C``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be (B, C), got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"label out of range [0, {c})")
    if not 0.0 <= eps < 1.0:
        raise ValueError("smoothing eps must lie in [0, 1)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    q = np.full((n, c), eps / c, dtype=logits.dtype)
    q[np.arange(n), labels] += 1.0 - eps
    loss = -(q * logp).sum() / n

    def backward(g):
        return (g * (np.exp(logp) - q) / n,)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# -- parameter trees ---------------------------------------------------------

def named_tensors(obj, prefix: str = "") -> list[tuple[str, Tensor]]:
    """Flatten a tree of dataclasses / lists / dicts into ``(path, Tensor)`` pairs."""
    out: list[tuple[str, Tensor]] = []
    join = (lambda k: f"{prefix}.{k}") if prefix else (lambda k: str(k))
    if isinstance(obj, Tensor):
        out.append((prefix, obj))
    elif is_dataclass(obj):
        for f in fields(obj):
            out.extend(named_tensors(getattr(obj, f.name), join(f.name)))
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            out.extend(named_tensors(v, join(i)))
    elif isinstance(obj, dict):
        for k, v in obj.items():
            out.extend(named_tensors(v, join(k)))
    return out


def tree_map(fn: Callable[[Tensor], Tensor], obj):
    if isinstance(obj, Tensor):
        return fn(obj)
    if is_dataclass(obj):
        return replace(obj, **{f.name: tree_map(fn, getattr(obj, f.name))
                               for f in fields(obj) if f.init})
    if isinstance(obj, list):
        return [tree_map(fn, v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(tree_map(fn, v) for v in obj)
    if isinstance(obj, dict):
        return {k: tree_map(fn, v) for k, v in obj.items()}
    return obj


def fresh_leaves(obj):
    """Same tree, new leaf tensors sharing data but owning their grads."""
    return tree_map(lambda t: Tensor(t.data, requires_grad=True), obj)


def cast_params(obj, dtype):
    return tree_map(lambda t: Tensor(t.data.astype(dtype), requires_grad=True), obj)


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict | None = None
    v: dict | None = None


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps_opt: float = 1e-8,
               weight_decay: float = 1e-4) -> AdamWState:
    """One AdamW update, in place on ``params``.

    Decoupled decay first (``p -= lr * wd * p``), then the bias-corrected Adam
    step. Parameters with no gradient entry are only decayed.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
    if state.m is None:
        state.m, state.v = {}, {}
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        if weight_decay:
            p -= p.dtype.type(lr * weight_decay) * p
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + eps_opt)
        p -= (lr * update).astype(p.dtype, copy=False)
    return state


# -- gradient checking -------------------------------------------------------

def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
               max_per_tensor: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the scalar from the current contents of ``params`` each call.
    Error per element is ``|analytic - numeric| / max(1, |numeric|)``. With
    ``max_per_tensor`` only that many randomly chosen entries of each tensor are
    perturbed.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        picks = np.arange(n)
        if max_per_tensor is not None and n > max_per_tensor:
            picks = rng.choice(n, size=max_per_tensor, replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            err = abs(ga.reshape(-1)[i] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"PDSACKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write ``name -> array`` entries atomically in the layout documented in the README.

    Layout (all integers little-endian): magic ``PDSACKPT``, u32 version,
    u32 entry count; then per entry u32 name length, UTF-8 name, u32 ndim,
    ndim x u64 dims, and the f32 data in row-major order.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", blob, pos)
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos + 4)
            pos += 4 + 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(blob):
                raise ValueError(f"{path}: truncated data for '{name}'")
            out[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out


def params_state(obj) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in named_tensors(obj)}


def load_params_into(obj, tensors: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into the leaves of ``obj``; mismatches name the parameter path."""
    named = dict(named_tensors(obj))
    missing = sorted(set(named) - set(tensors))
    if missing:
        raise ValueError(f"checkpoint lacks parameter '{missing[0]}'")
    extra = sorted(set(tensors) - set(named))
    if extra:
        raise ValueError(f"checkpoint has unexpected parameter '{extra[0]}'")
    for name, t in named.items():
        src = tensors[name]
        if src.shape != t.data.shape:
            raise ValueError(f"shape mismatch for parameter '{name}': checkpoint {src.shape}, model {t.data.shape}")
    for name, t in named.items():
        t.data[...] = tensors[name]
