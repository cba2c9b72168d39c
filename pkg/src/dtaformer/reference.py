"""Loop-based reference implementations used as independent oracles.

Everything here works on plain numpy arrays, one element at a time, and shares
no code with the torch path. Slow by design; meant for tiny instances.
"""
import math

import numpy as np


def softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def softmax_rows(a):
    return np.array([softmax(list(r)) for r in np.asarray(a, dtype=np.float64)])


def matmul(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            out[i, j] = sum(a[i, k] * b[k, j] for k in range(a.shape[1]))
    return out


def linear(x, weight, bias=None):
    """torch convention: weight is (out, in)."""
    y = matmul(x, np.asarray(weight).T)
    if bias is not None:
        y = y + np.asarray(bias)[None, :]
    return y


def relu(x):
    return np.where(np.asarray(x) > 0, x, 0.0)


def batchnorm(x, gamma, beta, eps=1e-5, mean=None, var=None):
    """Batch statistics (biased variance) unless running mean/var are given."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for c in range(x.shape[1]):
        col = x[:, c]
        mu = sum(col) / len(col) if mean is None else mean[c]
        v = sum((t - mu) ** 2 for t in col) / len(col) if var is None else var[c]
        out[:, c] = (col - mu) / math.sqrt(v + eps) * gamma[c] + beta[c]
    return out


def lbr(x, weight, bias, gamma, beta, eps=1e-5, mean=None, var=None):
    return relu(batchnorm(linear(x, weight, bias), gamma, beta, eps, mean, var))


def mlp2(x, w1, b1, w2, b2):
    return linear(relu(linear(x, w1, b1)), w2, b2)


def position_bias(cq, ck, w1, b1, w2, b2):
    out = np.zeros((len(cq), len(ck)))
    for i in range(len(cq)):
        for j in range(len(ck)):
            d = np.asarray(cq[i], dtype=np.float64) - np.asarray(ck[j], dtype=np.float64)
            out[i, j] = mlp2(d[None, :], w1, b1, w2, b2)[0, 0]
    return out


def wca_map(q, k, pi, bias, width):
    h, n = len(q), len(k)
    logits = np.zeros((h, n))
    for i in range(h):
        for j in range(n):
            dot = sum(q[i][c] * k[j][c] for c in range(len(q[i])))
            b = 0.0 if bias is None else bias[i][j]
            logits[i, j] = pi[j] * (dot / math.sqrt(width) + b)
    return softmax_rows(logits)


def aggregate(wm, v):
    return matmul(wm, v)


def reconstruct(s, t, wm):
    weights = softmax_rows(np.asarray(wm).T)
    return matmul(weights, s) + np.asarray(t, dtype=np.float64)


def vanilla_cross_attention(s, t, w_q, w_k, w_v):
    """Plain single-head scaled dot-product cross-attention, no weighting, no bias."""
    q, k, v = matmul(s, w_q), matmul(t, w_k), matmul(t, w_v)
    d = q.shape[1]
    out = np.zeros((len(q), v.shape[1]))
    for i in range(len(q)):
        w = softmax([sum(q[i, c] * k[j, c] for c in range(d)) / math.sqrt(d) for j in range(len(k))])
        for j in range(len(k)):
            out[i] += w[j] * v[j]
    return out


def pointwise_attention(s, w_qe, w_ke, w_ve, bias=None):
    q, k, v = matmul(s, w_qe), matmul(s, w_ke), matmul(s, w_ve)
    width = np.asarray(s).shape[1]
    att = matmul(q, k.T) / math.sqrt(width)
    if bias is not None:
        att = att + np.asarray(bias)
    return matmul(softmax_rows(att), v)


def channelwise_attention(s, w_qe, w_ke, w_ve):
    q, k, v = matmul(s, w_qe), matmul(s, w_ke), matmul(s, w_ve)
    width = np.asarray(s).shape[1]
    att = softmax_rows(matmul(k.T, q) / math.sqrt(width))
    return matmul(att, v.T).T


def glocal(x, local, glob):
    """local / glob: (w1, b1, w2, b2) tuples."""
    loc = mlp2(x, *local)
    g = mlp2(x, *glob)
    mean = [sum(g[:, c]) / len(g) for c in range(g.shape[1])]
    return np.hstack([loc, np.tile(mean, (len(x), 1))])


def top_h(logits, h):
    """Brute force: repeatedly take the largest remaining value, lower index first."""
    remaining = list(range(len(logits)))
    chosen = []
    for _ in range(h):
        best = remaining[0]
        for i in remaining[1:]:
            if logits[i] > logits[best]:
                best = i
        chosen.append(best)
        remaining.remove(best)
    return sorted(chosen)


def fps(xyz, k):
    """Greedy farthest point sampling from index 0 by explicit min-distance search."""
    pts = [tuple(float(c) for c in p) for p in xyz]
    chosen = [0]
    while len(chosen) < k:
        best, best_d = None, -1.0
        for i, p in enumerate(pts):
            d = min(sum((a - b) ** 2 for a, b in zip(p, pts[j])) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def knn(query, ref, k):
    out = []
    for q in query:
        d = [(sum((a - b) ** 2 for a, b in zip(q, r)), j) for j, r in enumerate(ref)]
        out.append([j for _, j in sorted(d)[:k]])
    return out


def interpolate(s, s_coords, t_coords, mode="trilinear"):
    s = np.asarray(s, dtype=np.float64)
    out = np.zeros((len(t_coords), s.shape[1]))
    kk = 1 if mode == "nearest" else min(3, len(s))
    for i, t in enumerate(t_coords):
        d = sorted((sum((a - b) ** 2 for a, b in zip(t, c)), j) for j, c in enumerate(s_coords))[:kk]
        if d[0][0] == 0 or kk == 1:
            out[i] = s[d[0][1]]
            continue
        w = [1.0 / dd for dd, _ in d]
        tot = sum(w)
        for (_, j), wj in zip(d, w):
            out[i] += wj / tot * s[j]
    return out


def cross_entropy(logits, labels):
    total = 0.0
    for row, y in zip(np.asarray(logits, dtype=np.float64), labels):
        p = softmax(list(row))
        total -= math.log(p[int(y)])
    return total / len(labels)


def momentum_sgd(p0, grad_fn, lr, momentum, weight_decay, steps):
    """Trajectory of v <- mu v + (g + wd p); p <- p - lr v, with v_0 = g_0 + wd p_0."""
    p, v, traj = p0, None, []
    for _ in range(steps):
        g = grad_fn(p) + weight_decay * p
        v = g if v is None else momentum * v + g
        p = p - lr * v
        traj.append(p)
    return traj
