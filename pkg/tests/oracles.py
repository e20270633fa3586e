"""Deliberately naive reference implementations used as test oracles."""
import math

import numpy as np


def loop_matmul(a, b):
    m, k = a.shape
    k2, p = b.shape
    assert k == k2
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def loop_conv_pool(frames, weight, bias):
    """1x1 conv (weight[c_in, c_out]) + ReLU at every cell, then spatial mean."""
    n, D, H, W = frames.shape
    out = np.zeros((n, weight.shape[1]))
    for f in range(n):
        for co in range(weight.shape[1]):
            total = 0.0
            for y in range(H):
                for x in range(W):
                    v = float(bias[co])
                    for ci in range(D):
                        v += float(weight[ci, co]) * float(frames[f, ci, y, x])
                    total += max(v, 0.0)
            out[f, co] = total / (H * W)
    return out


def loop_attend(A, S):
    n, D = S.shape
    return np.array([sum(float(A[i]) * float(S[i, d]) for i in range(n)) for d in range(D)])


def loop_affine(F, weight, bias):
    return np.array(
        [float(bias[c]) + sum(float(F[d]) * float(weight[d, c]) for d in range(len(F)))
         for c in range(weight.shape[1])]
    )


def direct_cross_entropy(logits, label):
    exps = [math.exp(float(z)) for z in logits]
    return -math.log(exps[label] / sum(exps))


def hand_adam_trace(grad_fn, x0, steps, lr=3e-4, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-by-scalar Adam written out longhand; returns every iterate."""
    x = [float(v) for v in x0]
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(np.array(x))
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            x[i] = x[i] - lr * mh / (math.sqrt(vh) + eps)
        trace.append(list(x))
    return np.array(trace)


def central_difference(f, x, eps=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + eps
        up = f(x)
        x[i] = orig - eps
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * eps)
    return g


def confusion_macro_f1(y_true, y_pred):
    """Macro F1 over classes appearing in either list, via an explicit confusion table."""
    classes = sorted(set(y_true) | set(y_pred))
    scores = []
    for c in classes:
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(scores) / len(scores)
