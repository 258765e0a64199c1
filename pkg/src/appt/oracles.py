"""Straight-line reference implementations used as independent oracles.

Nothing here goes through the autograd tensors: loops and plain numpy
only, so agreement with the optimised paths is meaningful.
"""

from __future__ import annotations

import math

import numpy as np


def sq_dist(p, q):
    total = 0.0
    for a, b in zip(p, q):
        diff = float(a) - float(b)
        total += diff * diff
    return total


def fps_oracle(coords, n_s, start):
    """Exhaustive greedy FPS: argmax of min distance to the chosen set, lowest index on ties."""
    n = len(coords)
    chosen = [start]
    while len(chosen) < n_s:
        best, best_d = None, -1.0
        for i in range(n):
            if i in chosen:
                continue
            d = min(sq_dist(coords[i], coords[j]) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def knn_oracle(coords, center, k):
    order = sorted(range(len(coords)), key=lambda i: (sq_dist(coords[i], center), i))
    return order[:k]


def matmul_oracle(a, b):
    m, kk = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(kk):
                s += float(a[i][t]) * float(b[t][j])
            out[i][j] = s
    return np.array(out)


def gelu_exact(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def _gelu_tanh(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def _layer_norm_row(row, gamma, beta, eps):
    mu = sum(row) / len(row)
    var = sum((v - mu) ** 2 for v in row) / len(row)
    return np.array([(v - mu) / math.sqrt(var + eps) * g + b for v, g, b in zip(row, gamma, beta)])


def _softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return np.array([v / s for v in e])


def mhsa_oracle(x, w, n_heads):
    """Attention computed one head and one query token at a time.

    ``w`` maps ``wq, wk, wv, wo`` and their ``.bias`` entries to arrays.
    """
    x = np.asarray(x, dtype=np.float64)
    T, d = x.shape
    dh = d // n_heads
    q = x @ w["wq"] + w["wq.bias"]
    k = x @ w["wk"] + w["wk.bias"]
    v = x @ w["wv"] + w["wv.bias"]
    mixed = np.zeros((T, d))
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(T):
            scores = [float(q[i, sl] @ k[j, sl]) / math.sqrt(dh) for j in range(T)]
            att = _softmax_row(scores)
            for j in range(T):
                mixed[i, sl] += att[j] * v[j, sl]
    return mixed @ w["wo"] + w["wo.bias"]


def block_oracle(x, tensors, l, n_heads, eps=1e-5, prenorm=True):
    """One encoder block written token by token from named arrays."""
    p = f"blocks.{l}."
    t = {k: np.asarray(v) for k, v in tensors.items()}
    attn_w = {k[len(p + "attn."):]: v for k, v in t.items() if k.startswith(p + "attn.")}
    x = np.asarray(x, dtype=np.float64)
    if prenorm:
        normed = np.stack([_layer_norm_row(r, t[p + "ln1.gamma"], t[p + "ln1.beta"], eps) for r in x])
    else:
        normed = x
    x = x + mhsa_oracle(normed, attn_w, n_heads)
    out = np.empty_like(x)
    for i, row in enumerate(x):
        h = _layer_norm_row(row, t[p + "ln2.gamma"], t[p + "ln2.beta"], eps)
        h = _gelu_tanh(h @ t[p + "mlp.w1"] + t[p + "mlp.w1.bias"])
        out[i] = row + h @ t[p + "mlp.w2"] + t[p + "mlp.w2.bias"]
    return out


def point_embed_oracle(groups, tensors):
    """Group embedder evaluated group by group, neighbour by neighbour."""
    t = {k: np.asarray(v) for k, v in tensors.items()}

    def dense(v, name):
        return v @ t[f"embed.{name}.weight"] + t[f"embed.{name}.bias"]

    out = []
    for group in np.asarray(groups, dtype=np.float64):
        stage1 = [dense(np.maximum(dense(pt, "s1.fc1"), 0.0), "s1.fc2") for pt in group]
        pooled = np.max(np.stack(stage1), axis=0)
        stage2 = [dense(np.maximum(dense(np.concatenate([pooled, h]), "s2.fc1"), 0.0), "s2.fc2")
                  for h in stage1]
        out.append(dense(np.max(np.stack(stage2), axis=0), "proj"))
    return np.stack(out)


def adamw_scalar_oracle(grad_fn, w0, steps, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar AdamW trace with decoupled decay applied before the Adam step."""
    w, m, v = float(w0), 0.0, 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(w)
        w = w * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        w = w - lr * m_hat / (math.sqrt(v_hat) + eps)
        trace.append(w)
    return trace


def min_pairwise_distance(coords):
    best = math.inf
    for i in range(len(coords)):
        for j in range(i + 1, len(coords)):
            best = min(best, math.sqrt(sq_dist(coords[i], coords[j])))
    return best
