"""Hot numeric kernels: numba-jitted loops with pure-numpy fallbacks.

Every kernel exists twice with an identical signature: ``*_numba`` (compiled
with ``@njit`` when the numba backend is active) and ``*_numpy`` (vectorized
fallback).  The module-level aliases without suffix point at the variant
selected by :mod:`phylotopo.backend`.
"""

from __future__ import annotations

import numpy as np

from .backend import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# Two-pass Dirichlet-energy solver
#
# First pass (postorder): express each non-root node as x_u = c_u * x_parent
# + d_u, eliminating bottom-up.  Second pass (preorder): solve the root from
# its accumulated sums and back-substitute.
# ---------------------------------------------------------------------------


def _two_pass_impl(post, pre, parent, deg, leaf, x, c, dv, out):
    n = post.shape[0]
    d = x.shape[1]
    sum_c = np.zeros(n)
    sum_d = np.zeros((n, d))
    for idx in range(n - 1):
        u = post[idx]
        p = parent[u]
        if leaf[u]:
            cu = 0.0
            for j in range(d):
                dv[u, j] = x[u, j]
        else:
            cu = 1.0 / (deg[u] - sum_c[u])
            for j in range(d):
                dv[u, j] = sum_d[u, j] * cu
        c[u] = cu
        sum_c[p] += cu
        for j in range(d):
            sum_d[p, j] += dv[u, j]
    r = post[n - 1]
    denom = deg[r] - sum_c[r]
    for j in range(d):
        out[r, j] = sum_d[r, j] / denom
    for idx in range(1, n):
        u = pre[idx]
        p = parent[u]
        for j in range(d):
            out[u, j] = c[u] * out[p, j] + dv[u, j]


two_pass_numba = njit(_two_pass_impl)


def two_pass_numpy(post, pre, parent, deg, leaf, x, c, dv, out):
    n = post.shape[0]
    sum_c = np.zeros(n)
    sum_d = np.zeros_like(x)
    for u in post[:-1]:
        p = parent[u]
        if leaf[u]:
            cu = 0.0
            dv[u] = x[u]
        else:
            cu = 1.0 / (deg[u] - sum_c[u])
            dv[u] = sum_d[u] * cu
        c[u] = cu
        sum_c[p] += cu
        sum_d[p] += dv[u]
    r = post[-1]
    out[r] = sum_d[r] / (deg[r] - sum_c[r])
    for u in pre[1:]:
        out[u] = c[u] * out[parent[u]] + dv[u]


# ---------------------------------------------------------------------------
# Felsenstein pruning with per-node rescaling, plus the reverse sweep for
# per-edge branch-length gradients.  Gradients use the inside/outside ratio
# trick: numerator and denominator carry identical scale products, so scale
# factors cancel without log bookkeeping.
#
# Layout: node-indexed arrays over a rooted orientation; pmats[u] / dpmats[u]
# are P(q_e), P'(q_e) for the edge from u to its parent (unused at the root).
# ---------------------------------------------------------------------------


def _pruning_impl(post, pre, parent, leaf, child_off, child_list,
                  pmats, dpmats, tips, counts, eta, want_grad,
                  partials, down, up, grad):
    n = post.shape[0]
    npat = tips.shape[1]
    loglik = 0.0
    for idx in range(n):
        u = post[idx]
        if leaf[u]:
            for p_ in range(npat):
                for s in range(4):
                    partials[u, p_, s] = tips[u, p_, s]
        else:
            for p_ in range(npat):
                for s in range(4):
                    partials[u, p_, s] = 1.0
            for ci in range(child_off[u], child_off[u + 1]):
                v = child_list[ci]
                for p_ in range(npat):
                    for s in range(4):
                        acc = 0.0
                        for t in range(4):
                            acc += pmats[v, s, t] * partials[v, p_, t]
                        down[v, p_, s] = acc
                for p_ in range(npat):
                    for s in range(4):
                        partials[u, p_, s] *= down[v, p_, s]
            for p_ in range(npat):
                m = 0.0
                for s in range(4):
                    if partials[u, p_, s] > m:
                        m = partials[u, p_, s]
                if m <= 0.0:
                    return -np.inf, False
                for s in range(4):
                    partials[u, p_, s] /= m
                loglik += np.log(m) * counts[p_]
    r = post[n - 1]
    for p_ in range(npat):
        acc = 0.0
        for s in range(4):
            acc += eta[s] * partials[r, p_, s]
        if acc <= 0.0:
            return -np.inf, False
        loglik += np.log(acc) * counts[p_]

    if not want_grad:
        return loglik, True

    scratch = np.empty(4)
    for p_ in range(npat):
        for s in range(4):
            up[r, p_, s] = eta[s]
    for idx in range(1, n):
        u = pre[idx]
        p = parent[u]
        # above-plus-siblings vector at p for the edge (p, u)
        for p_ in range(npat):
            for s in range(4):
                tmp = up[p, p_, s]
                for ci in range(child_off[p], child_off[p + 1]):
                    w = child_list[ci]
                    if w != u:
                        tmp *= down[w, p_, s]
                up[u, p_, s] = tmp  # staging; transferred below
        g = 0.0
        for p_ in range(npat):
            num = 0.0
            den = 0.0
            for s in range(4):
                accn = 0.0
                accd = 0.0
                for t in range(4):
                    accn += dpmats[u, s, t] * partials[u, p_, t]
                    accd += pmats[u, s, t] * partials[u, p_, t]
                num += up[u, p_, s] * accn
                den += up[u, p_, s] * accd
            g += counts[p_] * num / den
        grad[u] = g
        if not leaf[u]:
            for p_ in range(npat):
                m = 0.0
                for s in range(4):
                    acc = 0.0
                    for t in range(4):
                        acc += up[u, p_, t] * pmats[u, t, s]
                    scratch[s] = acc
                    if acc > m:
                        m = acc
                for s in range(4):
                    up[u, p_, s] = scratch[s] / m
    return loglik, True


pruning_numba = njit(_pruning_impl)


def pruning_numpy(post, pre, parent, leaf, child_off, child_list,
                  pmats, dpmats, tips, counts, eta, want_grad,
                  partials, down, up, grad):
    n = post.shape[0]
    loglik = 0.0
    for u in post:
        if leaf[u]:
            partials[u] = tips[u]
            continue
        acc = 1.0
        for v in child_list[child_off[u]:child_off[u + 1]]:
            down[v] = partials[v] @ pmats[v].T
            acc = acc * down[v]
        m = acc.max(axis=1)
        if not np.all(m > 0.0):
            return -np.inf, False
        partials[u] = acc / m[:, None]
        loglik += float(np.log(m) @ counts)
    r = post[-1]
    site = partials[r] @ eta
    if not np.all(site > 0.0):
        return -np.inf, False
    loglik += float(np.log(site) @ counts)

    if not want_grad:
        return loglik, True

    up[r] = eta
    for u in pre[1:]:
        p = parent[u]
        tmp = up[p].copy()
        for w in child_list[child_off[p]:child_off[p + 1]]:
            if w != u:
                tmp = tmp * down[w]
        num = np.einsum("ps,st,pt->p", tmp, dpmats[u], partials[u])
        den = np.einsum("ps,st,pt->p", tmp, pmats[u], partials[u])
        grad[u] = float(counts @ (num / den))
        if not leaf[u]:
            transfer = tmp @ pmats[u]
            up[u] = transfer / transfer.max(axis=1)[:, None]
    return loglik, True


# ---------------------------------------------------------------------------
# Neighbor gather / scatter for GNN message passing.
# idx rows hold neighbor row indices into x, padded with -1.
# ---------------------------------------------------------------------------


def _gather_sum_impl(x, idx, out):
    r, k = idx.shape
    d = x.shape[1]
    for i in range(r):
        for j in range(k):
            t = idx[i, j]
            if t >= 0:
                for h in range(d):
                    out[i, h] += x[t, h]


gather_sum_numba = njit(_gather_sum_impl)


def gather_sum_numpy(x, idx, out):
    pad = np.vstack([x, np.zeros((1, x.shape[1]))])
    safe = np.where(idx < 0, x.shape[0], idx)
    out += pad[safe].sum(axis=1)


def _gather_sum_backward_impl(gout, idx, gx):
    r, k = idx.shape
    d = gout.shape[1]
    for i in range(r):
        for j in range(k):
            t = idx[i, j]
            if t >= 0:
                for h in range(d):
                    gx[t, h] += gout[i, h]


gather_sum_backward_numba = njit(_gather_sum_backward_impl)


def gather_sum_backward_numpy(gout, idx, gx):
    r, k = idx.shape
    flat = idx.ravel()
    valid = flat >= 0
    rows = np.repeat(np.arange(r), k)[valid]
    np.add.at(gx, flat[valid], gout[rows])


# ---------------------------------------------------------------------------
# Fused GRU cell: out = (1-z)*c + z*h with
#   r = sigmoid(mi[:, :d] + bi[:d] + mh[:, :d] + bh[:d])
#   z = sigmoid(... second block ...)
#   c = tanh(mi[:, 2d:] + bi[2d:] + r * (mh[:, 2d:] + bh[2d:]))
# where mi, mh are the input/state projections before bias.  The gate
# activations r, z, c are stashed for the backward pass.
# ---------------------------------------------------------------------------


def _gru_forward_impl(mi, mh, bi, bh, h, r, z, c, out):
    n, d = h.shape
    for i in range(n):
        for j in range(d):
            hn = mh[i, 2 * d + j] + bh[2 * d + j]
            rv = 1.0 / (1.0 + np.exp(-(mi[i, j] + bi[j] + mh[i, j] + bh[j])))
            zv = 1.0 / (1.0 + np.exp(
                -(mi[i, d + j] + bi[d + j] + mh[i, d + j] + bh[d + j])))
            cv = np.tanh(mi[i, 2 * d + j] + bi[2 * d + j] + rv * hn)
            r[i, j] = rv
            z[i, j] = zv
            c[i, j] = cv
            out[i, j] = cv + zv * (h[i, j] - cv)


gru_forward_numba = njit(_gru_forward_impl)


def gru_forward_numpy(mi, mh, bi, bh, h, r, z, c, out):
    d = h.shape[1]
    np.copyto(r, 1.0 / (1.0 + np.exp(-(mi[:, :d] + bi[:d] + mh[:, :d] + bh[:d]))))
    np.copyto(z, 1.0 / (1.0 + np.exp(
        -(mi[:, d:2 * d] + bi[d:2 * d] + mh[:, d:2 * d] + bh[d:2 * d]))))
    np.copyto(c, np.tanh(mi[:, 2 * d:] + bi[2 * d:]
                         + r * (mh[:, 2 * d:] + bh[2 * d:])))
    np.copyto(out, c + z * (h - c))


def _gru_backward_impl(gout, mh, bh, h, r, z, c, dmi, dmh, dbi, dbh, dh):
    n, d = h.shape
    for i in range(n):
        for j in range(d):
            rv = r[i, j]
            zv = z[i, j]
            cv = c[i, j]
            g = gout[i, j]
            hn = mh[i, 2 * d + j] + bh[2 * d + j]
            dz = g * (h[i, j] - cv) * zv * (1.0 - zv)
            dc = g * (1.0 - zv) * (1.0 - cv * cv)
            dr = dc * hn * rv * (1.0 - rv)
            dh[i, j] = g * zv
            dmi[i, j] = dr
            dmi[i, d + j] = dz
            dmi[i, 2 * d + j] = dc
            dmh[i, j] = dr
            dmh[i, d + j] = dz
            dmh[i, 2 * d + j] = dc * rv
            dbi[j] += dr
            dbi[d + j] += dz
            dbi[2 * d + j] += dc
            dbh[j] += dr
            dbh[d + j] += dz
            dbh[2 * d + j] += dc * rv


gru_backward_numba = njit(_gru_backward_impl)


def gru_backward_numpy(gout, mh, bh, h, r, z, c, dmi, dmh, dbi, dbh, dh):
    d = h.shape[1]
    hn = mh[:, 2 * d:] + bh[2 * d:]
    dz = gout * (h - c) * z * (1.0 - z)
    dc = gout * (1.0 - z) * (1.0 - c * c)
    dr = dc * hn * r * (1.0 - r)
    np.copyto(dh, gout * z)
    dmi[:, :d] = dr
    dmi[:, d:2 * d] = dz
    dmi[:, 2 * d:] = dc
    dmh[:, :d] = dr
    dmh[:, d:2 * d] = dz
    dmh[:, 2 * d:] = dc * r
    dbi += dmi.sum(axis=0)
    dbh += dmh.sum(axis=0)


def _scatter_sum_impl(x, dst, out):
    r = dst.shape[0]
    d = x.shape[1]
    for i in range(r):
        t = dst[i]
        for h in range(d):
            out[t, h] += x[i, h]


scatter_sum_numba = njit(_scatter_sum_impl)


def scatter_sum_numpy(x, dst, out):
    np.add.at(out, dst, x)


if USE_NUMBA:
    two_pass = two_pass_numba
    pruning = pruning_numba
    gather_sum = gather_sum_numba
    gather_sum_backward = gather_sum_backward_numba
    scatter_sum = scatter_sum_numba
    gru_forward = gru_forward_numba
    gru_backward = gru_backward_numba
else:
    two_pass = two_pass_numpy
    pruning = pruning_numpy
    gather_sum = gather_sum_numpy
    gather_sum_backward = gather_sum_backward_numpy
    scatter_sum = scatter_sum_numpy
    gru_forward = gru_forward_numpy
    gru_backward = gru_backward_numpy
