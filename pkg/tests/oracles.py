"""Independent reference implementations used as test oracles.

These deliberately share no code with the library: plain loops and
first-principles formulas, kept slow and obvious.
"""
import numpy as np


def matmul_triple_loop(a, b):
    m, p = a.shape
    p2, q = b.shape
    assert p == p2
    out = np.zeros((m, q))
    for i in range(m):
        for j in range(q):
            acc = 0.0
            for k in range(p):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def conv2d_naive(x, weights, bias, stride, pad):
    """Sliding-window cross-correlation, one output element at a time."""
    batch, cin, h, w = x.shape
    cout, _, kh, kw = weights.shape
    xp = np.zeros((batch, cin, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((batch, cout, ho, wo))
    for b in range(batch):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * weights[o]) + bias[o]
    return out


def numerical_gradient(f, x, eps=1e-5):
    """Central finite differences of a scalar function at every coordinate
    of ``x`` (modified in place during probing, restored afterwards)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f()
        flat[i] = orig - eps
        f_minus = f()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    """Worst-coordinate relative error with an absolute floor so that
    near-zero gradients compare on an absolute scale."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def pairwise_auc(scores, labels):
    """O(N^2) definition: P(pos scored above neg), ties counting half."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def logloss_scalar_loop(probs, labels, clamp=1e-15):
    total = 0.0
    for p, y in zip(probs, labels):
        p = min(max(p, clamp), 1.0 - clamp)
        total += -(y * np.log(p) + (1 - y) * np.log(1 - p))
    return total / len(probs)
