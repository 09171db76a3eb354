"""Straight-line reference forward pass written with explicit Python loops.

Shares nothing with the package beyond the parameter naming convention; used
only to cross-check the vectorized model.
"""
import math

import numpy as np


def route(ei, ej, Q, K, V):
    """Messages (C, d) and attention (H, C, C) for one target/source pair."""
    H, dk, d = Q.shape
    C = ei.shape[0]
    out = np.zeros((C, H * dk))
    alpha = np.zeros((H, C, C))
    for h in range(H):
        for c in range(C):
            q = Q[h] @ ei[c]
            scores = []
            for c2 in range(C):
                scores.append(float(q @ (K[h] @ ej[c2])) / math.sqrt(dk))
            top = max(scores)
            ex = [math.exp(s - top) for s in scores]
            total = sum(ex)
            for c2 in range(C):
                a = ex[c2] / total
                alpha[h, c, c2] = a
                out[c, h * dk:(h + 1) * dk] += a * (V[h] @ ej[c2])
    return out, alpha


def hyper(Et, psi):
    """Two-hop hypergraph propagation for one (R, d) slice."""
    n_edges, R = psi.shape
    mag = np.abs(psi)
    de = [max(sum(mag[e, r] for r in range(R)), 1e-8) ** -0.5 for e in range(n_edges)]
    dr = [max(sum(mag[e, r] for e in range(n_edges)), 1e-8) ** -0.5 for r in range(R)]
    hub = np.zeros((n_edges, Et.shape[1]))
    for e in range(n_edges):
        for r in range(R):
            hub[e] += de[e] * psi[e, r] * dr[r] * Et[r]
    hub = np.maximum(hub, 0.0)
    out = np.zeros_like(Et)
    for r in range(R):
        for e in range(n_edges):
            out[r] += dr[r] * psi[e, r] * de[e] * hub[e]
    return np.maximum(out, 0.0)


def forward(X, params, A_norm, G_norm, spatial_layers, temporal_layers, mode="classification",
            hypergraph=True):
    """Returns (predictions (R, C), attention dict keyed by (stack, layer, i, j, t))."""
    R, T, C = X.shape
    emb = params["embed"]
    d = emb.shape[1]
    attn = {}
    E = np.zeros((R, T, C, d))
    for r in range(R):
        for t in range(T):
            for c in range(C):
                E[r, t, c] = X[r, t, c] * emb[c]
    total = E.copy()
    for l in range(spatial_layers):
        Q, K, V = (params[f"spatial.{l}.{p}"] for p in "qkv")
        new = np.zeros_like(E)
        for t in range(T):
            for i in range(R):
                acc = np.zeros((C, d))
                for j in range(R):
                    if A_norm[i, j] != 0:
                        m, a = route(E[i, t], E[j, t], Q, K, V)
                        attn[("spatial", l, i, j, t)] = a
                        acc += A_norm[i, j] * m
                new[i, t] = np.maximum(acc, 0.0)
        if hypergraph:
            for t in range(T):
                for c in range(C):
                    new[:, t, c, :] += hyper(E[:, t, c, :], params["hyper.psi"])
        E = new
        total = total + E
    E = total
    total = E.copy()
    for l in range(temporal_layers):
        Q, K, V = (params[f"temporal.{l}.{p}"] for p in "qkv")
        new = E.copy()
        for t in range(T - 1):
            for i in range(R):
                acc = np.zeros((C, d))
                for j in range(R):
                    if G_norm[i, j] != 0:
                        m, a = route(E[i, t + 1], E[j, t], Q, K, V)
                        attn[("temporal", l, i, j, t)] = a
                        acc += G_norm[i, j] * m
                new[i, t + 1] = np.maximum(acc, 0.0)
        E = new
        total = total + E
    pred = np.zeros((R, C))
    for r in range(R):
        for c in range(C):
            lam = np.zeros(d)
            for t in range(T):
                lam += total[r, t, c]
            s = float(params["readout"][c] @ lam)
            pred[r, c] = 1.0 / (1.0 + math.exp(-s)) if mode == "classification" else s
    return pred, attn
