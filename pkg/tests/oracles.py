"""Independent reference implementations used by the unit and acceptance tests.

Each oracle is written from the defining formula with plain loops or dense
masks and shares no code with the package beyond constants.
"""

from __future__ import annotations

import math

import numpy as np

from raunet.attention import NORM_EPS, SELF_PENALTY


def conv2d_loop(x, w, b=None, stride=1, pad=0):
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for a in range(n):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(c_in):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[a, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[a, o, i, j] = acc + (0.0 if b is None else b[o])
    return out


def conv2d_transpose_loop(x, w, stride=1, pad=0):
    """Scatter each input pixel times the kernel into the output, then crop the padding."""
    n, c_in, h, wd = x.shape
    _, c_out, k, _ = w.shape
    full = np.zeros((n, c_out, (h - 1) * stride + k, (wd - 1) * stride + k))
    for a in range(n):
        for c in range(c_in):
            for i in range(h):
                for j in range(wd):
                    full[a, :, i * stride : i * stride + k, j * stride : j * stride + k] += x[a, c, i, j] * w[c]
    return full[:, :, pad : full.shape[2] - pad, pad : full.shape[3] - pad]


def matmul_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for t in range(a.shape[1]):
                out[i, j] += a[i, t] * b[t, j]
    return out


def softmax_direct(x):
    e = np.exp(np.asarray(x, dtype=np.float64))
    return e / e.sum()


def attention_direct(q, k, v):
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        scores = np.array([q[i] @ k[j] / math.sqrt(q.shape[1]) for j in range(k.shape[0])])
        weights = softmax_direct(scores)
        out[i] = sum(weights[j] * v[j] for j in range(k.shape[0]))
    return out


def causal_shared_qk_attention(q, v):
    """Exact causal attention with keys q/|q|, excluding self except when it is the only candidate."""
    l, d = q.shape
    k = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), NORM_EPS)
    out = np.zeros((l, v.shape[1]))
    for i in range(l):
        cand = list(range(i)) if i > 0 else [0]
        scores = np.array([q[i] @ k[j] / math.sqrt(d) for j in cand])
        w = softmax_direct(scores - scores.max())
        out[i] = sum(wj * v[j] for wj, j in zip(w, cand))
    return out


def lsh_explicit_mask(q, v, buckets, m, scale):
    """Dense l x l evaluation of multi-round LSH attention from recorded bucket ids.

    Per round g, i may see j when j <= i, both share a bucket, and j's chunk in
    the (bucket, position) sort order is i's chunk or the one before.  The
    logit is q_i.k_j * scale minus SELF_PENALTY for j = i and minus
    log(#rounds where j shares i's bucket) otherwise.  Rounds are merged with
    weights exp(z_g - logsumexp_g z_g).
    """
    l = q.shape[0]
    k = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), NORM_EPS)
    s = (q @ k.T) * scale
    rounds = buckets.shape[0]
    i = np.arange(l)[:, None]
    j = np.arange(l)[None, :]
    causal = j <= i
    member = [(buckets[g][:, None] == buckets[g][None, :]) & causal for g in range(rounds)]
    count = sum(mb.astype(int) for mb in member)
    zs, outs = [], []
    for g in range(rounds):
        rank = np.empty(l, int)
        order = sorted(range(l), key=lambda p: (buckets[g][p], p))
        rank[order] = np.arange(l)
        chunk = rank // m
        window = (chunk[None, :] >= chunk[:, None] - 1) & (chunk[None, :] <= chunk[:, None])
        ok = member[g] & window
        logits = np.full((l, l), -np.inf)
        pen = np.where(i == j, SELF_PENALTY, np.log(np.maximum(count, 1)))
        logits[ok] = (s - pen)[ok]
        top = logits.max(1)
        z = np.log(np.exp(logits - top[:, None]).sum(1)) + top
        zs.append(z)
        outs.append(np.exp(logits - z[:, None]) @ v)
    zs = np.array(zs)
    top = zs.max(0)
    ztot = np.log(np.exp(zs - top).sum(0)) + top
    return sum(np.exp(zs[g] - ztot)[:, None] * outs[g] for g in range(rounds))


def dice_sets(pred, truth, c):
    x = {idx for idx, val in np.ndenumerate(pred) if val == c}
    y = {idx for idx, val in np.ndenumerate(truth) if val == c}
    if not x and not y:
        return 1.0
    return 2 * len(x & y) / (len(x) + len(y))


def confusion_loop(pred, truth, n_classes=4):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, t in zip(np.ravel(pred), np.ravel(truth)):
        cm[t, p] += 1
    return cm


def accuracy_confusion(cm):
    return np.trace(cm) / cm.sum()


def precision_confusion(cm, c):
    predicted = cm[:, c].sum()
    present = cm[c, :].sum()
    if predicted == 0:
        return 1.0 if present == 0 else 0.0
    return cm[c, c] / predicted


def cross_entropy_direct(logits, mask):
    n, m, h, w = logits.shape
    total = 0.0
    for a in range(n):
        for i in range(h):
            for j in range(w):
                p = softmax_direct(logits[a, :, i, j] - logits[a, :, i, j].max())
                total -= math.log(p[mask[a, i, j]])
    return total / (n * h * w)


def adam_reference(x0, grad_fn, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam trajectory written out from the update equations."""
    x, m, v = x0, 0.0, 0.0
    path = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
        path.append(x)
    return path
