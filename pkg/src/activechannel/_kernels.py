"""Compiled deep-kernel log marginal likelihood and gradient.

Same maths as ``gp.log_marginal_likelihood`` chained through
``nn.mlp_backward``, fused into one numba function because NUTS calls it
hundreds of thousands of times per fit. The tests compare the two paths.
"""
import numpy as np
from numba import njit

LOG_2PI = np.log(2 * np.pi)
_JITTERS = np.array([0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2])


@njit(cache=True)
def _cholesky(A, L):
    n = A.shape[0]
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return False
        d = np.sqrt(s)
        L[j, j] = d
        for i in range(j + 1, n):
            t = A[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / d
        for i in range(j):
            L[i, j] = 0.0
    return True


@njit(cache=True)
def joint_lml_kernel(theta, X, y, sizes, want_grad, out):
    """Returns ``(status, value)``; writes the gradient into ``out``.

    ``status`` is 0 on success, 1 when the plain factorisation and every
    jitter level failed.
    """
    n = X.shape[0]
    nl = sizes.shape[0] - 1
    acts = [X]
    h = X
    pos = 0
    for k in range(nl):
        fi = sizes[k]
        fo = sizes[k + 1]
        W = theta[pos:pos + fi * fo].reshape((fo, fi))
        pos += fi * fo
        b = theta[pos:pos + fo]
        pos += fo
        z = np.dot(h, W.T)
        for i in range(n):
            for j in range(fo):
                z[i, j] += b[j]
        if k < nl - 1:
            for i in range(n):
                for j in range(fo):
                    z[i, j] = np.tanh(z[i, j])
            acts.append(z)
        h = z
    Z = h
    q = Z.shape[1]
    a = np.exp(theta[pos])
    l2 = np.exp(2.0 * theta[pos + 1])
    s = np.exp(theta[pos + 2])

    D = np.empty((n, n))
    Kf = np.empty((n, n))
    for i in range(n):
        D[i, i] = 0.0
        Kf[i, i] = a
        for j in range(i):
            d = 0.0
            for c in range(q):
                t = Z[i, c] - Z[j, c]
                d += t * t
            D[i, j] = d
            D[j, i] = d
            kv = a * np.exp(-0.5 * d / l2)
            Kf[i, j] = kv
            Kf[j, i] = kv

    A = np.empty((n, n))
    L = np.zeros((n, n))
    ok = False
    for jit in _JITTERS:
        for i in range(n):
            for j in range(n):
                A[i, j] = Kf[i, j]
            A[i, i] += s + jit
        if _cholesky(A, L):
            ok = True
            break
    if not ok:
        return 1, np.nan

    # beta = K^-1 y via two triangular solves
    w = np.empty(n)
    for i in range(n):
        t = y[i]
        for k in range(i):
            t -= L[i, k] * w[k]
        w[i] = t / L[i, i]
    beta = np.empty(n)
    for i in range(n - 1, -1, -1):
        t = w[i]
        for k in range(i + 1, n):
            t -= L[k, i] * beta[k]
        beta[i] = t / L[i, i]
    logdet = 0.0
    quad = 0.0
    for i in range(n):
        logdet += np.log(L[i, i])
        quad += y[i] * beta[i]
    value = -0.5 * quad - logdet - 0.5 * n * LOG_2PI
    if not want_grad:
        return 0, value

    # Linv (lower), then K^-1 = Linv^T Linv
    Li = np.zeros((n, n))
    for j in range(n):
        Li[j, j] = 1.0 / L[j, j]
        for i in range(j + 1, n):
            t = 0.0
            for k in range(j, i):
                t -= L[i, k] * Li[k, j]
            Li[i, j] = t / L[i, i]
    Kinv = np.dot(Li.T, Li)

    M = np.empty((n, n))
    g_a = 0.0
    g_l = 0.0
    tr = 0.0
    for i in range(n):
        tr += Kinv[i, i]
        for j in range(n):
            m = 0.5 * (beta[i] * beta[j] - Kinv[i, j]) * Kf[i, j]
            M[i, j] = m
            g_a += m
            g_l += m * D[i, j]
    bb = 0.0
    for i in range(n):
        bb += beta[i] * beta[i]
    P = theta.shape[0]
    out[P - 3] = g_a
    out[P - 2] = g_l / l2
    out[P - 1] = 0.5 * s * (bb - tr)

    delta = np.empty((n, q))
    MZ = np.dot(M, Z)
    for i in range(n):
        rs = 0.0
        for j in range(n):
            rs += M[i, j]
        for c in range(q):
            delta[i, c] = (-2.0 / l2) * (rs * Z[i, c] - MZ[i, c])

    pos = P - 3
    for k in range(nl - 1, -1, -1):
        fi = sizes[k]
        fo = sizes[k + 1]
        h_in = acts[k]
        for j in range(fo):
            t = 0.0
            for i in range(n):
                t += delta[i, j]
            out[pos - fo + j] = t
        pos -= fo
        gW = np.dot(delta.T, h_in)
        out[pos - fo * fi:pos] = gW.ravel()
        Wstart = pos - fo * fi
        pos -= fo * fi
        if k > 0:
            W = theta[Wstart:Wstart + fo * fi].reshape((fo, fi))
            nd = np.dot(delta, W)
            for i in range(n):
                for j in range(fi):
                    nd[i, j] *= 1.0 - h_in[i, j] * h_in[i, j]
            delta = nd
    return 0, value
