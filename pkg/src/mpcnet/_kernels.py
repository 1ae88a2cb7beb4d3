"""Compiled inner loops of the SLQ solver.

Matrices here are tiny (6x6), so explicit loops into preallocated buffers are
much faster than calling BLAS/LAPACK for every knot.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _mm(A, B, out):
    """out = A @ B"""
    for i in range(A.shape[0]):
        for j in range(B.shape[1]):
            acc = 0.0
            for k in range(A.shape[1]):
                acc += A[i, k] * B[k, j]
            out[i, j] = acc


@njit(cache=True, inline="always")
def _mtm(A, B, out):
    """out = A.T @ B"""
    for i in range(A.shape[1]):
        for j in range(B.shape[1]):
            acc = 0.0
            for k in range(A.shape[0]):
                acc += A[k, i] * B[k, j]
            out[i, j] = acc


@njit(cache=True, inline="always")
def _mv(A, x, out):
    for i in range(A.shape[0]):
        acc = 0.0
        for k in range(A.shape[1]):
            acc += A[i, k] * x[k]
        out[i] = acc


@njit(cache=True, inline="always")
def _mtv(A, x, out):
    for i in range(A.shape[1]):
        acc = 0.0
        for k in range(A.shape[0]):
            acc += A[k, i] * x[k]
        out[i] = acc


@njit(cache=True)
def _cholesky_solve(A, B, L):
    """Solve ``A X = B`` in place (B overwritten) for symmetric positive definite ``A``."""
    n = A.shape[0]
    for j in range(n):
        d = A[j, j]
        for k in range(j):
            d -= L[j, k] * L[j, k]
        if d <= 0.0:
            return False
        L[j, j] = math.sqrt(d)
        for i in range(j + 1, n):
            acc = A[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            L[i, j] = acc / L[j, j]
    for c in range(B.shape[1]):
        for i in range(n):
            acc = B[i, c]
            for k in range(i):
                acc -= L[i, k] * B[k, c]
            B[i, c] = acc / L[i, i]
        for i in range(n - 1, -1, -1):
            acc = B[i, c]
            for k in range(i + 1, n):
                acc -= L[k, i] * B[k, c]
            B[i, c] = acc / L[i, i]
    return True


@njit(cache=True)
def riccati_backward(Phi, Gam, lx, lu, lxx, luu, lux, Ex, eu, Nb, pad, S_f, s_f):
    """Constrained discrete Riccati recursion for ``x+ = Phi x + Gam u + w``.

    Per interval the input deviation is ``du = Ex dx + eu + Nb w``; ``Nb`` is the
    null-space basis padded with zero columns whose (otherwise singular) Hessian
    rows are replaced by ``pad``. Returns value Hessians and gradients at the
    ``N + 1`` knots, the expected value change per interval, gains, feedforward
    steps, the input gradient of the Q-function, the first-order predicted
    merit change of a full step and a success flag (false if a reduced Hessian
    is not positive definite).
    """
    N = lx.shape[0]
    n = Phi.shape[0]
    m = Gam.shape[1]
    S = np.empty((N + 1, n, n))
    s = np.empty((N + 1, n))
    dV = np.empty(N)
    K = np.empty((N, m, n))
    du = np.empty((N, m))
    Qu_out = np.empty((N, m))
    S[N] = S_f
    s[N] = s_f
    pred = 0.0
    SG = np.empty((n, m))
    PS = np.empty((n, n))
    Qxx = np.empty((n, n))
    Quu = np.empty((m, m))
    Qux = np.empty((m, n))
    Qx = np.empty(n)
    Qu = np.empty(m)
    QuuE = np.empty((m, n))
    tmp_mn = np.empty((m, n))
    tmp_nn = np.empty((n, n))
    g_u = np.empty(m)
    qx = np.empty(n)
    qw = np.empty(m)
    QN = np.empty((m, m))
    Hww = np.empty((m, m))
    Hwx = np.empty((m, n))
    rhs = np.empty((m, n + 1))
    L = np.zeros((m, m))
    vm = np.empty(m)
    vn = np.empty(n)
    for k in range(N - 1, -1, -1):
        Sn = S[k + 1]
        sn = s[k + 1]
        E = Ex[k]
        e = eu[k]
        Nk = Nb[k]
        _mm(Sn, Gam, SG)
        _mtv(Phi, sn, Qx)
        _mtv(Gam, sn, Qu)
        for i in range(n):
            Qx[i] += lx[k, i]
        for i in range(m):
            Qu[i] += lu[k, i]
        _mtm(Phi, Sn, PS)
        _mm(PS, Phi, Qxx)
        _mtm(Gam, SG, Quu)
        _mtm(SG, Phi, Qux)
        for i in range(n):
            for j in range(n):
                Qxx[i, j] += lxx[k, i, j]
        for i in range(m):
            for j in range(m):
                Quu[i, j] += luu[k, i, j]
            for j in range(n):
                Qux[i, j] += lux[k, i, j]
        _mm(Quu, E, QuuE)
        _mv(Quu, e, g_u)
        for i in range(m):
            g_u[i] += Qu[i]
        # qx = Qx + E' g_u + Qux' e
        _mtv(E, g_u, qx)
        _mtv(Qux, e, vn)
        for i in range(n):
            qx[i] += Qx[i] + vn[i]
        _mtv(Nk, g_u, qw)
        # Hxx = Qxx + E' QuuE + E' Qux + Qux' E
        _mtm(E, QuuE, tmp_nn)
        for i in range(n):
            for j in range(n):
                Qxx[i, j] += tmp_nn[i, j]
        _mtm(E, Qux, tmp_nn)
        for i in range(n):
            for j in range(n):
                Qxx[i, j] += tmp_nn[i, j] + tmp_nn[j, i]
        _mm(Quu, Nk, QN)
        _mtm(Nk, QN, Hww)
        for i in range(m):
            Hww[i, i] += pad[k, i]
        for i in range(m):
            for j in range(n):
                tmp_mn[i, j] = QuuE[i, j] + Qux[i, j]
        _mtm(Nk, tmp_mn, Hwx)
        for i in range(m):
            for j in range(n):
                rhs[i, j] = -Hwx[i, j]
            rhs[i, n] = -qw[i]
        if not _cholesky_solve(Hww, rhs, L):
            return S, s, dV, K, du, Qu_out, pred, False
        # S = Hxx + Hwx' Kw ; s = qx + Hwx' lw
        for i in range(n):
            for j in range(i, n):
                acc = 0.5 * (Qxx[i, j] + Qxx[j, i])
                for r in range(m):
                    acc += 0.5 * (Hwx[r, i] * rhs[r, j] + Hwx[r, j] * rhs[r, i])
                S[k, i, j] = acc
                S[k, j, i] = acc
            acc = qx[i]
            for r in range(m):
                acc += Hwx[r, i] * rhs[r, n]
            s[k, i] = acc
        _mv(Quu, e, vm)
        dv = 0.0
        qe = 0.0
        ql = 0.0
        for i in range(m):
            qe += Qu[i] * e[i]
            dv += 0.5 * e[i] * vm[i]
            ql += qw[i] * rhs[i, n]
        dV[k] = qe + dv + 0.5 * ql
        pred += ql + qe
        for i in range(m):
            for j in range(n):
                acc = E[i, j]
                for r in range(m):
                    acc += Nk[i, r] * rhs[r, j]
                K[k, i, j] = acc
            acc = e[i]
            for r in range(m):
                acc += Nk[i, r] * rhs[r, n]
            du[k, i] = acc
            Qu_out[k, i] = Qu[i]
    return S, s, dV, K, du, Qu_out, pred, True


@njit(cache=True)
def _barrier(h, mu, delta):
    if h >= delta:
        return -mu * math.log(h), -mu / h, mu / (h * h)
    z = (h - 2.0 * delta) / delta
    return mu * (-math.log(delta) + 0.5 * (z * z - 1.0)), mu * (h - 2.0 * delta) / (delta * delta), mu / (delta * delta)


@njit(cache=True)
def interval_costs(X, U, Xd, Phi_j, Gam_j, w_j, wts, Q, R, h, midx, Hx_t, Hu_t, h0_t, hm_t, mu, delta):
    """Quadrature tracking-plus-input cost and barrier cost of every interval."""
    N = U.shape[0]
    n = X.shape[1]
    m = U.shape[1]
    J = wts.shape[0]
    run = np.zeros(N)
    bar = np.zeros(N)
    e = np.empty(n)
    for k in range(N):
        acc = 0.0
        for j in range(J):
            for i in range(n):
                v = w_j[j, i] - Xd[k, j, i]
                for c in range(n):
                    v += Phi_j[j, i, c] * X[k, c]
                for c in range(m):
                    v += Gam_j[j, i, c] * U[k, c]
                e[i] = v
            quad = 0.0
            for i in range(n):
                for c in range(n):
                    quad += e[i] * Q[i, c] * e[c]
            acc += wts[j] * quad
        uq = 0.0
        for i in range(m):
            for c in range(m):
                uq += U[k, i] * R[i, c] * U[k, c]
        run[k] = acc + h * uq
        md = midx[k]
        b = 0.0
        for r in range(Hu_t.shape[1]):
            if hm_t[md, r] == 0.0:
                continue
            hv = h0_t[md, r]
            for c in range(n):
                hv += Hx_t[md, r, c] * X[k, c]
            for c in range(m):
                hv += Hu_t[md, r, c] * U[k, c]
            b += _barrier(hv, mu, delta)[0]
        bar[k] = h * b
    return run, bar


@njit(cache=True)
def quadratize(X, U, Xd, Phi_j, Gam_j, w_j, wts, Q, R, h, Lxx, Luu, Lux,
               midx, Gx_t, Gu_t, g0_t, Dp_t, Hx_t, Hu_t, h0_t, hm_t, mu, delta):
    """Derivatives of the interval costs and the affine constraint projection per interval."""
    N = U.shape[0]
    n = X.shape[1]
    m = U.shape[1]
    J = wts.shape[0]
    nin = Hu_t.shape[1]
    neq = Gu_t.shape[1]
    lx = np.zeros((N, n))
    lu = np.zeros((N, m))
    lxx = np.empty((N, n, n))
    luu = np.empty((N, m, m))
    lux = np.empty((N, m, n))
    Ex = np.zeros((N, m, n))
    eu = np.zeros((N, m))
    e = np.empty(n)
    Qe = np.empty(n)
    g = np.empty(neq)
    for k in range(N):
        for j in range(J):
            for i in range(n):
                v = w_j[j, i] - Xd[k, j, i]
                for c in range(n):
                    v += Phi_j[j, i, c] * X[k, c]
                for c in range(m):
                    v += Gam_j[j, i, c] * U[k, c]
                e[i] = v
            for i in range(n):
                v = 0.0
                for c in range(n):
                    v += Q[i, c] * e[c]
                Qe[i] = 2.0 * wts[j] * v
            for i in range(n):
                v = 0.0
                for c in range(n):
                    v += Phi_j[j, c, i] * Qe[c]
                lx[k, i] += v
            for i in range(m):
                v = 0.0
                for c in range(n):
                    v += Gam_j[j, c, i] * Qe[c]
                lu[k, i] += v
        for i in range(m):
            v = 0.0
            for c in range(m):
                v += R[i, c] * U[k, c]
            lu[k, i] += 2.0 * h * v
        lxx[k] = Lxx
        for i in range(m):
            for c in range(m):
                luu[k, i, c] = Luu[i, c] + 2.0 * h * R[i, c]
            for c in range(n):
                lux[k, i, c] = Lux[i, c]
        md = midx[k]
        for r in range(nin):
            if hm_t[md, r] == 0.0:
                continue
            hv = h0_t[md, r]
            for c in range(n):
                hv += Hx_t[md, r, c] * X[k, c]
            for c in range(m):
                hv += Hu_t[md, r, c] * U[k, c]
            _, d1, d2 = _barrier(hv, mu, delta)
            d1 *= h
            d2 *= h
            for i in range(n):
                lx[k, i] += Hx_t[md, r, i] * d1
                for c in range(n):
                    lxx[k, i, c] += Hx_t[md, r, i] * d2 * Hx_t[md, r, c]
            for i in range(m):
                lu[k, i] += Hu_t[md, r, i] * d1
                for c in range(m):
                    luu[k, i, c] += Hu_t[md, r, i] * d2 * Hu_t[md, r, c]
                for c in range(n):
                    lux[k, i, c] += Hu_t[md, r, i] * d2 * Hx_t[md, r, c]
        for r in range(neq):
            v = g0_t[md, r]
            for c in range(n):
                v += Gx_t[md, r, c] * X[k, c]
            for c in range(m):
                v += Gu_t[md, r, c] * U[k, c]
            g[r] = v
        for i in range(m):
            v = 0.0
            for r in range(neq):
                v -= Dp_t[md, i, r] * g[r]
            eu[k, i] = v
            for c in range(n):
                v = 0.0
                for r in range(neq):
                    v -= Dp_t[md, i, r] * Gx_t[md, r, c]
                Ex[k, i, c] = v
    return lx, lu, lxx, luu, lux, Ex, eu


@njit(cache=True)
def forward_rollout(x0, Phi, Gam, w, u_ff, K, x_ref, bound):
    """Roll out ``u_k = u_ff[k] + K[k] (x_k - x_ref[k])`` through ``x+ = Phi x + Gam u + w``.

    Returns knot states, applied inputs and ``ok=False`` once the state leaves
    ``|x| <= bound`` or turns non-finite (later entries then repeat the last state).
    """
    N = u_ff.shape[0]
    n = x0.shape[0]
    m = u_ff.shape[1]
    X = np.empty((N + 1, n))
    U = np.empty((N, m))
    X[0] = x0
    ok = True
    for k in range(N):
        for i in range(m):
            v = u_ff[k, i]
            for c in range(n):
                v += K[k, i, c] * (X[k, c] - x_ref[k, c])
            U[k, i] = v
        big = False
        for i in range(n):
            v = w[i]
            for c in range(n):
                v += Phi[i, c] * X[k, c]
            for c in range(m):
                v += Gam[i, c] * U[k, c]
            X[k + 1, i] = v
            if not (abs(v) <= bound):
                big = True
        if big:
            ok = False
            for j in range(k + 1, N):
                for i in range(m):
                    U[j, i] = U[k, i]
                for i in range(n):
                    X[j + 1, i] = X[k + 1, i]
            break
    return X, U, ok
