"""Naive scalar-loop transcriptions of every attention kernel.

These deliberately avoid the tensor module and vectorised numpy so that they
share no code path with the kernels they check. Inputs are 2-D arrays
(``[N, d]``); outputs are float64 arrays.
"""
from __future__ import annotations

import math

import numpy as np


def _softmax(xs):
    m = max(xs)
    es = [math.exp(x - m) for x in xs]
    s = 0.0
    for e in es:
        s += e
    return [e / s for e in es]


def _dot(a, b):
    s = 0.0
    for x, y in zip(a, b):
        s += x * y
    return s


def _rows(a):
    return [list(map(float, r)) for r in np.asarray(a, dtype=np.float64)]


def sa(q, k, v):
    q, k, v = _rows(q), _rows(k), _rows(v)
    d = len(q[0])
    out = []
    for qi in q:
        w = _softmax([_dot(qi, kj) / math.sqrt(d) for kj in k])
        out.append([sum(w[j] * v[j][c] for j in range(len(v))) for c in range(len(v[0]))])
    return np.array(out)


def la(q, k, v, w_proj):
    P = _rows(w_proj)
    k, v = _rows(k), _rows(v)
    pk = [[sum(P[a][j] * k[j][c] for j in range(len(k))) for c in range(len(k[0]))] for a in range(len(P))]
    pv = [[sum(P[a][j] * v[j][c] for j in range(len(v))) for c in range(len(v[0]))] for a in range(len(P))]
    return sa(q, pk, pv)


def ea(q, k, v):
    q, k, v = _rows(q), _rows(k), _rows(v)
    n, d, dv = len(q), len(q[0]), len(v[0])
    sq = [_softmax(qi) for qi in q]
    # softmax of k^T along its last axis: over tokens, separately per feature
    sk_cols = [_softmax([k[j][c] for j in range(n)]) for c in range(d)]
    ctx = [[sum(sk_cols[c][j] * v[j][e] for j in range(n)) for e in range(dv)] for c in range(d)]
    return np.array([[sum(sq[i][c] * ctx[c][e] for c in range(d)) for e in range(dv)] for i in range(n)])


def performer_phi(x, omega):
    x, om = _rows(x), _rows(omega)
    d, r = len(x[0]), len(om)
    scale = d ** -0.25
    out = []
    for row in x:
        xs = [scale * t for t in row]
        half_sq = 0.5 * _dot(xs, xs)
        out.append([math.exp(_dot(w, xs) - half_sq) / math.sqrt(r) for w in om])
    return out


def pa(q, k, v, omega):
    fq, fk = performer_phi(q, omega), performer_phi(k, omega)
    v = _rows(v)
    n, dv = len(v), len(v[0])
    out = []
    for i in range(len(fq)):
        weights = [_dot(fq[i], fk[j]) for j in range(n)]
        den = sum(weights)
        out.append([sum(weights[j] * v[j][e] for j in range(n)) / den for e in range(dv)])
    return np.array(out)


def xca(q, k, v, tau=None, mode="canonical"):
    q, k, v = _rows(q), _rows(k), _rows(v)
    n, d = len(q), len(q[0])
    if mode == "canonical":
        def colnorm(m):
            norms = [max(math.sqrt(sum(m[i][c] ** 2 for i in range(n))), 1e-12) for c in range(d)]
            return [[m[i][c] / norms[c] for c in range(d)] for i in range(n)]
        q, k = colnorm(q), colnorm(k)
        tau = 1.0 if tau is None else tau
    else:
        tau = n / 2.0 if tau is None else tau
    attn = []
    for c in range(d):
        attn.append(_softmax([sum(q[i][c] * k[i][e] for i in range(n)) / tau for e in range(d)]))
    # [attn v^T]^T: out[i][c] = sum_e attn[c][e] v[i][e]
    return np.array([[sum(attn[c][e] * v[i][e] for e in range(d)) for c in range(d)] for i in range(n)])


def aa(q, k, v, wq, wk, w_out):
    q, k, v = _rows(q), _rows(k), _rows(v)
    wq, wk = [float(t) for t in np.ravel(wq)], [float(t) for t in np.ravel(wk)]
    W = _rows(w_out)
    n, d = len(q), len(q[0])
    s = math.sqrt(d)
    alpha = _softmax([_dot(wq, qi) / s for qi in q])
    qg = [sum(alpha[i] * q[i][c] for i in range(n)) for c in range(d)]
    p = [[qg[c] * k[i][c] for c in range(d)] for i in range(n)]
    beta = _softmax([_dot(wk, pi) / s for pi in p])
    kg = [sum(beta[i] * p[i][c] for i in range(n)) for c in range(d)]
    out = []
    for i in range(n):
        u = [kg[c] * v[i][c] for c in range(d)]
        out.append([q[i][e] + sum(u[c] * W[c][e] for c in range(d)) for e in range(len(W[0]))])
    return np.array(out)


def window_sa(q, k, v, w, grid):
    H, W = grid
    q, k, v = (np.asarray(t, dtype=np.float64) for t in (q, k, v))
    out = np.zeros_like(v)
    for by in range(0, H, w):
        for bx in range(0, W, w):
            idx = [y * W + x for y in range(by, by + w) for x in range(bx, bx + w)]
            out[idx] = sa(q[idx], k[idx], v[idx])
    return out


def matmul(a, b):
    a, b = _rows(a), _rows(b)
    return np.array([[sum(a[i][t] * b[t][j] for t in range(len(b))) for j in range(len(b[0]))]
                     for i in range(len(a))])
