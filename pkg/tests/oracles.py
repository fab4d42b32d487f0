"""Slow, literal reference implementations used as test oracles.

Each one is written from the model's definition, not from the production
code path, so agreement is evidence rather than tautology.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


# --- Gaussian process ------------------------------------------------------

def gp_dense(X, y, Xs, tau, sigma2):
    """Posterior mean/variance in standardized space via an explicit inverse."""
    X = np.asarray(X, float)
    Xs = np.asarray(Xs, float)
    mu, sd = X.mean(0), X.std(0)
    sd[sd == 0] = 1.0
    Z, Zs = (X - mu) / sd, (Xs - mu) / sd
    ym, ys = y.mean(), y.std() or 1.0
    t = (y - ym) / ys

    def k(A, B):
        d = ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)
        return np.exp(-d / (2 * tau * tau))

    Kinv = np.linalg.inv(k(Z, Z) + sigma2 * np.eye(len(Z)))
    ks = k(Zs, Z)
    mean = ks @ Kinv @ t
    var = 1.0 - np.einsum("ij,jk,ik->i", ks, Kinv, ks)
    return mean * ys + ym, var * ys * ys


def gp_2x2(y0, y1, r, tau, sigma2, kx0, kx1):
    """Closed-form 2-point posterior mean for targets already centered/scaled.

    ``kx0``/``kx1`` are the kernel values between the query and each point.
    """
    a = 1.0 + sigma2
    b = math.exp(-r * r / (2 * tau * tau))
    det = a * a - b * b
    alpha0 = (a * y0 - b * y1) / det
    alpha1 = (a * y1 - b * y0) / det
    return kx0 * alpha0 + kx1 * alpha1


# --- Pareto ----------------------------------------------------------------

def pareto_bruteforce(acc, metric):
    """Indices of points no other point dominates (max acc, min metric)."""
    n = len(acc)
    out = []
    for i in range(n):
        dominated = False
        for j in range(n):
            if j == i:
                continue
            if acc[j] >= acc[i] and metric[j] <= metric[i] and (acc[j] > acc[i] or metric[j] < metric[i]):
                dominated = True
                break
        if not dominated:
            out.append(i)
    return out


# --- design space ------------------------------------------------------------

def all_cells(B):
    """Every canonical cell as a tuple of (in1, in2, op1, op2) per node."""
    per_node = []
    for i in range(2, B):
        per_node.append([(a, b, o1, o2) for a, b in itertools.combinations(range(i), 2)
                         for o1 in range(6) for o2 in range(6)])
    return list(itertools.product(*per_node))


# --- workload formulas -------------------------------------------------------

def layer_macs_params(kind, in_shape, out_shape, kernel):
    """Textbook MAC / parameter counts of one layer (bias-free)."""
    ih, iw, ic = in_shape
    oh, ow, oc = out_shape
    if kind == "conv":
        return oh * ow * oc * ic * kernel * kernel, oc * ic * kernel * kernel
    if kind == "dwconv":
        return oh * ow * oc * kernel * kernel, ic * kernel * kernel
    if kind == "linear":
        return ic * oc, ic * oc
    return 0, 0


# --- cost model loop nest ----------------------------------------------------

def _tiles(n, t):
    return [(s, min(t, n - s)) for s in range(0, n, t)]


def _extent(t, r, s, full):
    return min(full, (t - 1) * s + max(r, s))


def loop_nest_counts(ho, wo, hi, wi, c, k, r, s, depthwise, dataflow, th, tw, tc, tk, rows, cols):
    """Walk every DRAM-level tile in the dataflow's loop order and tally.

    Returns (cycles, dram, gbuf, rf). Conventions mirror the model's
    contract: OS iterates k,h,w,c and writes each output once while
    refetching weights per spatial tile; the others iterate k,c,h,w,
    fetch each weight once and spill partial sums between channel tiles.
    """
    cycles = dram = gbuf = 0
    r2 = r * r
    H, W, C, K = _tiles(ho, th), _tiles(wo, tw), _tiles(c, tc), _tiles(k, tk)
    if dataflow == "OS":
        order = [(kk, hh, ww, cc) for kk in K for hh in H for ww in W for cc in C]
    else:
        order = [(kk, hh, ww, cc) for kk in K for cc in C for hh in H for ww in W]
    seen_weights = set()
    for (k0, kt), (h0, ht), (w0, wt), (c0, ct) in order:
        macs = ht * wt * kt * ct * r2
        in_ch = kt if depthwise else ct
        dram += _extent(ht, r, s, hi) * _extent(wt, r, s, wi) * in_ch
        first_w = (k0, c0) not in seen_weights
        seen_weights.add((k0, c0))
        w_tile = kt * ct * r2
        if dataflow == "OS" or first_w:
            dram += w_tile
        outs = ht * wt * kt
        last_c = c0 + ct == c
        if dataflow == "OS":
            dram += outs if last_c else 0
        else:
            dram += outs if c0 == 0 else 2 * outs

        if dataflow == "NLR":
            g = 4 * macs
        else:
            in_reads = macs // r if dataflow == "RS" else macs
            if not depthwise:
                in_reads //= kt
            w_reads = w_tile if (dataflow != "WS" or first_w) else 0
            if dataflow == "OS":
                p = outs if last_c else 0
            else:
                p = outs if c0 == 0 else 2 * outs
            g = in_reads + w_reads + p
        gbuf += g

        if dataflow == "OS":
            per = math.ceil(ht * wt / rows) * math.ceil(kt / cols) * ct * r2
        elif dataflow == "RS":
            per = math.ceil(r * ct / rows) * math.ceil(ht / cols) * kt * wt * r
        else:
            per = math.ceil(ct / rows) * math.ceil(kt / cols) * ht * wt * r2
        cycles += per
    total_macs = ho * wo * k * c * r2
    return cycles, dram, gbuf, 4 * total_macs - gbuf


# --- finite differences ------------------------------------------------------

def central_difference(f, arrays, h=1e-5):
    """Central-difference gradient of scalar ``f()`` w.r.t. each array, perturbed in place."""
    out = {}
    for name, a in arrays.items():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            up = f()
            a[idx] = orig - h
            down = f()
            a[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out
