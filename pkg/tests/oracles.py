"""Reference computations written independently of the package internals."""

from __future__ import annotations

import numpy as np


def stencil_grad(f, x, h=1e-4):
    """Five-point (fourth-order) numerical gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        vals = []
        for k in (2, 1, -1, -2):
            xp = x.copy()
            xp[i] += k * h
            vals.append(float(f(xp)))
        g[i] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def grads_agree(a, b, rel=1e-4, atol=1e-8) -> bool:
    """Relative agreement, or both within ``atol`` of each other (e.g. zero second derivatives)."""
    diff = np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    return diff < atol or rel_err(a, b) < rel


def dense_norm_adj(n, edges):
    """``D^-1/2 (A + I) D^-1/2`` built entry by entry."""
    a = np.eye(n)
    for u, v in edges:
        a[u, v] = a[v, u] = 1.0
    d = a.sum(axis=1)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = a[i, j] / np.sqrt(d[i] * d[j])
    return out


def gcn_logits(w1, w2, adj, x):
    return adj @ np.maximum(adj @ x @ w1, 0.0) @ w2


def masked_ce(logits, labels, mask):
    rows = np.flatnonzero(mask)
    total = 0.0
    for r in rows:
        z = logits[r] - logits[r].max()
        total += -(z[labels[r]] - np.log(np.exp(z).sum()))
    return total / len(rows)


def gcn_ce_grads(w1, w2, adj, x, labels, mask):
    """Hand-derived gradient of masked CE for the two-layer bias-free GCN."""
    ax = adj @ x
    pre = ax @ w1
    h = np.maximum(pre, 0.0)
    ah = adj @ h
    logits = ah @ w2
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    onehot = np.eye(w2.shape[1])[labels]
    delta = (p - onehot) * (np.asarray(mask, float)[:, None] / mask.sum())
    g2 = ah.T @ delta
    dh = adj.T @ delta @ w2.T
    dpre = dh * (pre > 0)
    g1 = ax.T @ dpre
    return [g1, g2]


def mann_whitney_auc(scores, labels):
    """Pairwise count: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def pair_adjacency(w1, w2, x):
    """Generator adjacency, one pair at a time."""
    n = len(x)
    a = np.zeros((n, n))
    f = lambda u, v: (np.maximum(np.concatenate([u, v]) @ w1, 0.0) @ w2).item()
    for i in range(n):
        for j in range(n):
            s = 0.5 * (f(x[i], x[j]) + f(x[j], x[i]))
            a[i, j] = 1.0 / (1.0 + np.exp(-s))
    return a


def weighted_norm(a):
    a = a + np.eye(len(a))
    d = a.sum(axis=1)
    return a / np.sqrt(np.outer(d, d))


def gcn_matching_loss(x, phi, y, agg, theta):
    """Class-summed mean squared gradient mismatch on a two-layer GCN."""
    adj = weighted_norm(pair_adjacency(*phi, x))
    total = 0.0
    for c, target in agg.items():
        mask = y == c
        for g, t in zip(gcn_ce_grads(*theta, adj, x, y, mask), target):
            total += np.mean((g - t) ** 2)
    return total
