"""Naive loop implementations used as independent references.

Nothing here touches the tape; everything is scalar Python arithmetic.
"""

import math

import numpy as np


def affine(x, w, b):
    t, d_in = x.shape
    d_out = w.shape[1]
    out = np.zeros((t, d_out))
    for i in range(t):
        for o in range(d_out):
            s = b[o]
            for k in range(d_in):
                s += x[i, k] * w[k, o]
            out[i, o] = s
    return out


def loop_softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    z = sum(e)
    return [v / z for v in e]


def loop_head(q, k, v, adjacency=None, scores=None):
    """One head over ``T`` tokens; ``scores`` weights the class row after softmax."""
    t, dh = q.shape
    out = np.zeros((t, v.shape[1]))
    for i in range(t):
        logits = []
        for j in range(t):
            s = 0.0
            for c in range(dh):
                s += q[i, c] * k[j, c]
            if adjacency is not None:
                s *= adjacency[i, j]
            logits.append(s / math.sqrt(dh))
        w = loop_softmax(logits)
        if scores is not None and i == 0:
            w = [w[0]] + [w[j] * scores[j - 1] for j in range(1, t)]
        for c in range(v.shape[1]):
            out[i, c] = sum(w[j] * v[j, c] for j in range(t))
    return out


def loop_attention(x, p, adjacency=None, scores=None):
    """Multi-head attention for one sample ``x`` of shape ``[T, d]``.

    ``p`` holds numpy arrays ``w_q, b_q, ..., w_o, b_o`` plus ``n_heads`` and
    ``d_head``.
    """
    h, dh = p["n_heads"], p["d_head"]
    q = affine(x, p["w_q"], p["b_q"])
    k = affine(x, p["w_k"], p["b_k"])
    v = affine(x, p["w_v"], p["b_v"])
    heads = []
    for hh in range(h):
        sl = slice(hh * dh, (hh + 1) * dh)
        heads.append(loop_head(q[:, sl], k[:, sl], v[:, sl], adjacency, scores))
    return affine(np.concatenate(heads, axis=1), p["w_o"], p["b_o"])


def loop_tas(q_cls, k, v, scores):
    t, d = k.shape
    logits = [sum(q_cls[c] * k[j, c] for c in range(d)) / math.sqrt(d) for j in range(t)]
    w = loop_softmax(logits)
    keep = [1.0] + list(scores)
    return np.array([sum(w[j] * keep[j] * v[j, c] for j in range(t)) for c in range(v.shape[1])])
