"""Slow, loop-based reference implementations used as test oracles.

Nothing here calls into the vectorized package code except for parameter
containers, which are read as plain arrays.
"""

import math

import numpy as np


def dist(a, b):
    return math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))


def fps(coords, m, start=0):
    chosen = [start]
    while len(chosen) < m:
        best, best_d = None, -1.0
        for i in range(len(coords)):
            d = min(dist(coords[i], coords[c]) for c in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def ball_query(coords, centers, radius, k):
    out = []
    for c in centers:
        q = [j for j in range(len(coords)) if dist(coords[j], coords[c]) <= radius][:k]
        out.append((q + [q[0]] * (k - len(q)), k - len(q)))
    return out


def knn(coords, centers, k):
    out = []
    for c in centers:
        ranked = sorted(range(len(coords)), key=lambda j: (dist(coords[j], coords[c]), j))
        out.append(ranked[:k])
    return out


def octant(offset):
    x, y, z = offset
    return 4 * int(x >= 0) + 2 * int(y >= 0) + int(z >= 0)


def lcsd(coords, centers, members, a, radius, use_distance=True):
    """d[i] = concat over octants of sum_j t * r * a_j, with scalar loops."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if a.shape[0] == 1 and len(coords) > 1:
        a = np.repeat(a, len(coords), axis=0)
    width = a.shape[1]
    out = np.zeros((len(centers), 8 * width))
    for i, c in enumerate(centers):
        for j in sorted(members[i]):
            off = [float(coords[j][t]) - float(coords[c][t]) for t in range(3)]
            d = dist(coords[j], coords[c])
            if d == 0:
                r = 0.0
            elif use_distance:
                r = max(0.0, 1.0 - d / radius)
            else:
                r = 1.0
            o = octant(off)
            for ch in range(width):
                out[i, o * width + ch] += r * a[j, ch]
    return out


def linear(x, w, b):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(len(b))
    for o in range(len(b)):
        s = float(b[o])
        for i in range(len(x)):
            s += float(w[o, i]) * float(x[i])
        out[o] = s
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    n = len(x)
    mean = sum(x) / n
    var = sum((v - mean) ** 2 for v in x) / n
    return np.array([(x[i] - mean) / math.sqrt(var + eps) * gamma[i] + beta[i] for i in range(n)])


def mlp(x, p):
    """Row-wise MLP from an MLPParams-like object."""
    for i, lin in enumerate(p.linears):
        x = linear(x, lin.weight.data, lin.bias.data)
        if i < len(p.norms):
            x = layer_norm(x, p.norms[i].gamma.data, p.norms[i].beta.data)
            x = np.array([max(0.0, v) for v in x])
    return x


def softmax(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return np.array([x / s for x in e])


def cdip(d_next, d_members, params):
    """(w_re, v_st), each k x c, computed one member at a time."""
    q = linear(d_next, params.lq.weight.data, params.lq.bias.data)
    deltas = [q - linear(dm, params.lk.weight.data, params.lk.bias.data) for dm in d_members]
    logits = np.array([mlp(dl, params.mw) for dl in deltas])
    v = np.array([mlp(dl, params.mv) for dl in deltas])
    w = np.zeros_like(logits)
    for ch in range(logits.shape[1]):
        w[:, ch] = softmax(list(logits[:, ch]))
    return w, v


def attention(d, params):
    """Single-head self-attention over the rows of d, then the output map."""
    n = len(d)
    q = [linear(r, params.q.weight.data, params.q.bias.data) for r in d]
    k = [linear(r, params.k.weight.data, params.k.bias.data) for r in d]
    v = [linear(r, params.v.weight.data, params.v.bias.data) for r in d]
    scale = 1.0 / math.sqrt(len(q[0]))
    out = []
    for i in range(n):
        logits = [sum(float(a) * float(b) for a, b in zip(q[i], k[j])) * scale for j in range(n)]
        att = softmax(logits)
        mixed = sum(att[j] * v[j] for j in range(n))
        out.append(linear(mixed, params.out.weight.data, params.out.bias.data))
    return np.array(out)


def confusion(pred, truth, n_classes):
    conf = [[0] * n_classes for _ in range(n_classes)]
    for p, t in zip(pred, truth):
        conf[t][p] += 1
    return np.array(conf)


def metrics(pred, truth, n_classes):
    conf = confusion(pred, truth, n_classes)
    ious, accs = [], []
    for c in range(n_classes):
        tp = conf[c][c]
        fp = sum(conf[r][c] for r in range(n_classes)) - tp
        fn = sum(conf[c]) - tp
        if tp + fp + fn > 0:
            ious.append(tp / (tp + fp + fn))
        if tp + fn > 0:
            accs.append(tp / (tp + fn))
    oa = sum(conf[c][c] for c in range(n_classes)) / len(pred)
    return sum(ious) / len(ious), oa, sum(accs) / len(accs)


def sa_block(coords_prev, feats_prev, centers, members, embed):
    """Plain set abstraction: max over members of M(concat(f_j, p_i - p_j))."""
    out = []
    for i, c in enumerate(centers):
        rows = []
        for j in members[i]:
            rel = [float(coords_prev[c][t]) - float(coords_prev[j][t]) for t in range(3)]
            x = rel if feats_prev is None else list(feats_prev[j]) + rel
            rows.append(mlp(np.array(x), embed))
        out.append(np.max(np.array(rows), axis=0))
    return np.array(out)
