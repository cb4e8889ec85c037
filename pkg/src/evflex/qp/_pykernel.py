"""Pure-numpy ADMM inner loop for small dense problems.

The compiled extension ``evflex._qpcore`` implements the same
``admm_chunk`` contract; :mod:`evflex.qp.solver` picks whichever is
importable. Keep the two implementations step-for-step identical.
"""

import numpy as np
from scipy.linalg import cho_solve

KERNEL_NAME = "python"


def admm_chunk(P, q, A, l, u, rho, sigma, alpha, L,
               x, z, y, einv, dinv_c,
               max_iter, check_every, eps_prim, eps_dual):
    """Run up to ``max_iter`` ADMM iterations in place on (x, z, y).

    All matrices are the Ruiz-scaled problem data; ``einv`` and
    ``dinv_c`` convert residuals back to the unscaled problem so the
    convergence test matches the solver's public tolerance contract.
    ``L`` is the lower Cholesky factor of P + sigma*I + A^T diag(rho) A.

    Returns (iterations_done, primal_residual, dual_residual, converged).
    """
    At = A.T
    r_prim = np.inf
    r_dual = np.inf
    it = 0
    while it < max_iter:
        it += 1
        rhs = sigma * x - q + At @ (rho * z - y)
        xt = cho_solve((L, True), rhs, check_finite=False)
        zt = A @ xt
        x[:] = alpha * xt + (1.0 - alpha) * x
        w = alpha * zt + (1.0 - alpha) * z
        z[:] = np.clip(w + y / rho, l, u)
        y += rho * (w - z)

        if it % check_every == 0 or it == max_iter:
            ax = A @ x
            r_prim = np.max(np.abs((ax - z) * einv), initial=0.0)
            r_dual = np.max(np.abs((P @ x + q + At @ y) * dinv_c), initial=0.0)
            if r_prim <= eps_prim and r_dual <= eps_dual:
                return it, r_prim, r_dual, True
            if not np.isfinite(r_prim) or not np.isfinite(r_dual):
                return it, r_prim, r_dual, False
    return it, r_prim, r_dual, False
