# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ADMM inner loop for small dense problems.

Mirrors evflex.qp._pykernel.admm_chunk; the solver selects this module
at import time when the extension built successfully.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, fabs, isfinite

KERNEL_NAME = "compiled"


cdef inline double _clip(double v, double lo, double hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


def admm_chunk(double[:, ::1] P, double[::1] q, double[:, ::1] A,
               double[::1] l, double[::1] u, double[::1] rho,
               double sigma, double alpha, double[:, ::1] L,
               double[::1] x, double[::1] z, double[::1] y,
               double[::1] einv, double[::1] dinv_c,
               int max_iter, int check_every, double eps_prim, double eps_dual):
    """See evflex.qp._pykernel.admm_chunk for the contract."""
    cdef int n = q.shape[0]
    cdef int m = l.shape[0]
    cdef cnp.ndarray[double, ndim=1] xt_ = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] rhs_ = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] zt_ = np.empty(m)
    cdef double[::1] xt = xt_
    cdef double[::1] rhs = rhs_
    cdef double[::1] zt = zt_
    cdef double r_prim = INFINITY
    cdef double r_dual = INFINITY
    cdef double acc, w, ri, axi
    cdef int it = 0, i, j
    cdef bint converged = False

    with nogil:
        while it < max_iter:
            it += 1
            # rhs = sigma*x - q + A^T (rho*z - y)
            for j in range(n):
                rhs[j] = sigma * x[j] - q[j]
            for i in range(m):
                w = rho[i] * z[i] - y[i]
                for j in range(n):
                    rhs[j] += A[i, j] * w
            # xt = (L L^T)^{-1} rhs  via forward/back substitution
            for j in range(n):
                acc = rhs[j]
                for i in range(j):
                    acc -= L[j, i] * xt[i]
                xt[j] = acc / L[j, j]
            for j in range(n - 1, -1, -1):
                acc = xt[j]
                for i in range(j + 1, n):
                    acc -= L[i, j] * xt[i]
                xt[j] = acc / L[j, j]
            # zt = A xt; relaxed updates
            for j in range(n):
                x[j] = alpha * xt[j] + (1.0 - alpha) * x[j]
            for i in range(m):
                acc = 0.0
                for j in range(n):
                    acc += A[i, j] * xt[j]
                zt[i] = acc
                w = alpha * acc + (1.0 - alpha) * z[i]
                z[i] = _clip(w + y[i] / rho[i], l[i], u[i])
                y[i] += rho[i] * (w - z[i])

            if it % check_every == 0 or it == max_iter:
                r_prim = 0.0
                for i in range(m):
                    acc = 0.0
                    for j in range(n):
                        acc += A[i, j] * x[j]
                    ri = fabs((acc - z[i]) * einv[i])
                    if ri > r_prim:
                        r_prim = ri
                r_dual = 0.0
                for j in range(n):
                    acc = q[j]
                    for i in range(n):
                        acc += P[j, i] * x[i]
                    for i in range(m):
                        acc += A[i, j] * y[i]
                    ri = fabs(acc * dinv_c[j])
                    if ri > r_dual:
                        r_dual = ri
                if r_prim <= eps_prim and r_dual <= eps_dual:
                    converged = True
                    break
                if not isfinite(r_prim) or not isfinite(r_dual):
                    break

    return it, r_prim, r_dual, converged
