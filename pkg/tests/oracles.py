"""Brute-force references shared by the unit and acceptance tests."""

import itertools
import math

import numpy as np


def log_softmax(x):
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def rnnt_enumerate(logits, labels):
    """-log sum over every blank/label interleaving that ends on a blank."""
    lp = log_softmax(logits)
    T, U = lp.shape[0], len(labels)
    paths = []
    for label_slots in itertools.combinations(range(T + U - 1), U):
        t = u = 0
        s = 0.0
        for k in range(T + U):
            if k in label_slots:
                s += lp[t, u, labels[u]]
                u += 1
            else:
                s += lp[t, u, 0]
                t += 1
        paths.append(s)
    return -np.logaddexp.reduce(paths), len(paths)


def ctc_enumerate(logits, labels):
    """-log sum over every frame labelling whose collapse equals ``labels``."""
    lp = log_softmax(logits)
    T, V = lp.shape
    total = []
    for seq in itertools.product(range(V), repeat=T):
        out, prev = [], None
        for k in seq:
            if k != 0 and k != prev:
                out.append(k)
            prev = k
        if out == list(labels):
            total.append(sum(lp[t, k] for t, k in enumerate(seq)))
    return -np.logaddexp.reduce(total) if total else math.inf, len(total)


def central_diff(f, x, eps=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)
