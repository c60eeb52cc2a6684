"""Newton's method for chain-structured objectives.

Phi(X) = sum_j c_j(X_j, X_{j+1}) + sum_j s_j(X_j) over node states X_0..X_M,
so the Hessian is block tridiagonal.  Derivatives come from central
differences of the cell and node terms; only nodes flagged free move.
"""
from __future__ import annotations

import numpy as np
from scipy.sparse import lil_matrix
from scipy.sparse.linalg import spsolve

__all__ = ["chain_newton"]


def _grad(f, x, step):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def _hess(f, x, step):
    n = x.size
    H = np.empty((n, n))
    f0 = f(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = step
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / step**2
        for k in range(i + 1, n):
            ek = np.zeros(n)
            ek[k] = step
            H[i, k] = H[k, i] = (f(x + ei + ek) - f(x + ei - ek) - f(x - ei + ek) + f(x - ei - ek)) / (4 * step**2)
    return H


def chain_newton(cell, node, X, free, feasible=None, max_iter=30, gtol=1e-11, step=1e-4):
    """Minimize the chain objective from X; returns (X, iterations, gradient norm).

    cell(j, a, b) and node(j, a) are the terms; ``free`` is a boolean mask
    over nodes; ``feasible(X)`` guards the line search.
    """
    X = np.array(X, dtype=float)
    M1, n = X.shape
    free = np.asarray(free, dtype=bool)
    idx = np.flatnonzero(free)
    if len(idx) == 0:
        return X, 0, 0.0
    pos = -np.ones(M1, dtype=int)
    pos[idx] = np.arange(len(idx))

    def total(Y):
        return sum(cell(j, Y[j], Y[j + 1]) for j in range(M1 - 1)) + sum(node(j, Y[j]) for j in range(M1))

    def pair(j, Y):
        return lambda z: cell(j, z[:n], z[n:])

    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        G = np.zeros((len(idx), n))
        Hs = lil_matrix((len(idx) * n, len(idx) * n))
        scale = step * max(1.0, float(np.max(np.abs(X))))
        for j in idx:
            b = pos[j] * n
            gj = _grad(lambda a: node(j, a), X[j], scale)
            Hjj = _hess(lambda a: node(j, a), X[j], scale)
            G[pos[j]] += gj
            Hs[b:b + n, b:b + n] = Hs[b:b + n, b:b + n].toarray() + Hjj
        for j in range(M1 - 1):
            if not (free[j] or free[j + 1]):
                continue
            z = np.concatenate([X[j], X[j + 1]])
            f = pair(j, X)
            gz = _grad(f, z, scale)
            Hz = _hess(f, z, scale)
            for a, k in ((0, j), (1, j + 1)):
                if not free[k]:
                    continue
                G[pos[k]] += gz[a * n:(a + 1) * n]
                for c, m in ((0, j), (1, j + 1)):
                    if free[m]:
                        r0, c0 = pos[k] * n, pos[m] * n
                        Hs[r0:r0 + n, c0:c0 + n] = Hs[r0:r0 + n, c0:c0 + n].toarray() \
                            + Hz[a * n:(a + 1) * n, c * n:(c + 1) * n]
        g = G.ravel()
        gnorm = float(np.max(np.abs(g)))
        if gnorm < gtol:
            break
        A = Hs.tocsr()
        d = np.asarray(spsolve(A, -g))
        if not np.all(np.isfinite(d)) or d @ g >= 0:
            d = -g  # Hessian not usable here
        base = total(X)
        t = 1.0
        moved = False
        for _ in range(40):
            Y = X.copy()
            Y[idx] += t * d.reshape(-1, n)
            if (feasible is None or feasible(Y)) and total(Y) <= base + 1e-4 * t * float(d @ g):
                X = Y
                moved = True
                break
            t *= 0.5
        if not moved:
            break
    return X, it, gnorm
