"""Dense/sparse convex QP solver: minimize 0.5 x'Px + q'x  s.t.  l <= Ax <= u.

Operator-splitting (ADMM) iteration with Ruiz equilibration, per-row step
sizes, residual-based step adaptation, and an active-set polish step that
tightens solutions to near machine precision. Small dense problems run
through a compiled inner loop when the ``evflex._qpcore`` extension built;
otherwise a step-identical numpy loop is used. Large structured problems
(the offline fleet program) use a sparse LDL-style path built on SuperLU.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

try:  # compiled hot loop; built by setup.py
    from evflex import _qpcore as _kernel
except ImportError:  # pragma: no cover - depends on build environment
    from evflex.qp import _pykernel as _kernel

from evflex.qp import _pykernel

__all__ = [
    "QpProblem",
    "QpSolution",
    "solve",
    "kkt_residuals",
    "dump_problem",
    "kernel_name",
]

_RHO_MIN = 1e-6
_RHO_MAX = 1e6
_RHO_EQ_FACTOR = 1e3
_SIGMA = 1e-6
_ALPHA = 1.6
_CHECK_EVERY = 25
_CHUNK = 500
_ADAPT_TRIGGER = 5.0
_POLISH_DELTA = 1e-9
_INF_THRESH = 1e18


def kernel_name() -> str:
    """Name of the dense inner-loop implementation in use."""
    return _kernel.KERNEL_NAME


@dataclass
class QpProblem:
    """Problem data for  min 0.5 x'Px + q'x  s.t.  l <= Ax <= u.

    P must be symmetric positive semidefinite. Dense numpy arrays select
    the dense kernel; scipy sparse matrices select the sparse path.
    """

    P: object
    q: np.ndarray
    A: object
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        self.l = np.asarray(self.l, dtype=float).ravel()
        self.u = np.asarray(self.u, dtype=float).ravel()
        n = self.q.shape[0]
        if sp.issparse(self.P) or sp.issparse(self.A):
            self.P = sp.csc_matrix(self.P)
            self.A = sp.csc_matrix(self.A)
            sym_gap = abs(self.P - self.P.T).max() if self.P.nnz else 0.0
            a_finite = np.all(np.isfinite(self.A.data)) if self.A.nnz else True
            p_finite = np.all(np.isfinite(self.P.data)) if self.P.nnz else True
        else:
            self.P = np.ascontiguousarray(np.atleast_2d(np.asarray(self.P, dtype=float)))
            self.A = np.ascontiguousarray(np.atleast_2d(np.asarray(self.A, dtype=float)))
            sym_gap = np.abs(self.P - self.P.T).max() if self.P.size else 0.0
            a_finite = np.all(np.isfinite(self.A))
            p_finite = np.all(np.isfinite(self.P))
        m = self.l.shape[0]
        if self.P.shape != (n, n):
            raise ValueError(f"P must be {n}x{n}, got {self.P.shape}")
        if self.A.shape != (m, n):
            raise ValueError(f"A must be {m}x{n}, got {self.A.shape}")
        if self.u.shape[0] != m:
            raise ValueError("l and u must have the same length")
        if sp.issparse(self.P):
            pmax = float(abs(self.P).max()) if self.P.nnz else 0.0
        else:
            pmax = float(np.abs(self.P).max()) if self.P.size else 0.0
        scale = max(1.0, pmax)
        if sym_gap > 1e-12 * scale:
            raise ValueError(f"P is not symmetric (gap {sym_gap:g})")
        if not (p_finite and a_finite and np.all(np.isfinite(self.q))):
            raise ValueError("P, q, A must be finite")
        if np.any(np.isnan(self.l)) or np.any(np.isnan(self.u)):
            raise ValueError("l, u must not contain NaN")
        if np.any(self.l > self.u):
            raise ValueError("l <= u must hold componentwise")

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def m(self) -> int:
        return self.l.shape[0]

    def is_sparse(self) -> bool:
        return sp.issparse(self.A)

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x)


@dataclass
class QpSolution:
    x: np.ndarray
    duals: np.ndarray
    objective: float
    primal_residual: float
    dual_residual: float
    iterations: int
    status: str  # solved | max_iterations | infeasible
    polished: bool = False
    residual_trace: list = field(default_factory=list)


def kkt_residuals(problem: QpProblem, x: np.ndarray, duals: np.ndarray):
    """Independent first-order optimality check for a candidate (x, y).

    Returns (primal, dual, complementarity) infinity norms: distance of Ax
    from the [l, u] slab, stationarity of the Lagrangian, and the
    complementary-slackness products.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(duals, dtype=float).ravel()
    if x.shape[0] != problem.n or y.shape[0] != problem.m:
        raise ValueError("dimension mismatch between problem and candidate")
    ax = problem.A @ x
    primal = float(np.max(np.abs(ax - np.clip(ax, problem.l, problem.u)), initial=0.0))
    dual = float(np.max(np.abs(problem.P @ x + problem.q + problem.A.T @ y), initial=0.0))
    y_neg = np.minimum(y, 0.0)
    y_pos = np.maximum(y, 0.0)
    # at an infinite bound the matching dual sign is infeasible outright;
    # score it like a unit-slack product so it cannot hide
    gap_l = np.where(np.isfinite(problem.l), ax - problem.l, 1.0 + np.abs(ax))
    gap_u = np.where(np.isfinite(problem.u), problem.u - ax, 1.0 + np.abs(ax))
    comp = float(max(np.max(np.abs(y_neg * gap_l), initial=0.0),
                     np.max(np.abs(y_pos * gap_u), initial=0.0)))
    return primal, dual, comp


def dump_problem(problem: QpProblem, file=None) -> str:
    """Write the problem as labelled text matrix blocks for cross-checking."""
    out = io.StringIO()
    P = problem.P.toarray() if problem.is_sparse() else problem.P
    A = problem.A.toarray() if problem.is_sparse() else problem.A
    for name, arr in (("P", P), ("q", problem.q), ("A", A),
                      ("l", problem.l), ("u", problem.u)):
        out.write(f"# {name} shape={np.shape(arr)}\n")
        np.savetxt(out, np.atleast_2d(arr), fmt="%.17g")
    text = out.getvalue()
    if file is not None:
        file.write(text)
    return text


# ---------------------------------------------------------------------------
# scaling and setup


def _ruiz(P, q, A, l, u, iters=10):
    """Ruiz equilibration plus cost normalization (dense or sparse)."""
    n, m = q.shape[0], l.shape[0]
    sparse = sp.issparse(A)
    D = np.ones(n)
    E = np.ones(m)
    c = 1.0
    Ps, qs, As = P.copy(), q.copy(), A.copy()
    for _ in range(iters):
        if sparse:
            pa = abs(Ps)
            aa = abs(As)
            cn = np.maximum(np.asarray(pa.max(axis=0).todense()).ravel() if pa.nnz else np.zeros(n),
                            np.asarray(aa.max(axis=0).todense()).ravel() if aa.nnz else np.zeros(n))
            rn = np.asarray(aa.max(axis=1).todense()).ravel() if aa.nnz else np.zeros(m)
        else:
            cn = np.maximum(np.abs(Ps).max(axis=0, initial=0.0),
                            np.abs(As).max(axis=0, initial=0.0) if m else 0.0)
            rn = np.abs(As).max(axis=1, initial=0.0) if m else np.zeros(0)
        d = 1.0 / np.sqrt(np.maximum(cn, 1e-8))
        e = 1.0 / np.sqrt(np.maximum(rn, 1e-8))
        if sparse:
            Dg = sp.diags(d)
            Eg = sp.diags(e)
            Ps = (Dg @ Ps @ Dg).tocsc()
            As = (Eg @ As @ Dg).tocsc()
        else:
            Ps = d[:, None] * Ps * d[None, :]
            As = e[:, None] * As * d[None, :] if m else As
        qs = d * qs
        D *= d
        E *= e
        if sparse:
            pcol = np.asarray(abs(Ps).max(axis=0).todense()).ravel() if Ps.nnz else np.zeros(n)
        else:
            pcol = np.abs(Ps).max(axis=0, initial=0.0)
        denom = max(float(np.mean(pcol)) if n else 0.0, float(np.max(np.abs(qs), initial=0.0)))
        gamma = 1.0 / max(denom, 1e-8)
        Ps = Ps * gamma
        qs = qs * gamma
        c *= gamma
    ls = E * l
    us = E * u
    return Ps, qs, As, ls, us, D, E, c


def _rho_vector(base, ls, us):
    rho = np.full(ls.shape[0], base)
    eq = np.isfinite(ls) & np.isfinite(us) & (us - ls < 1e-12)
    rho[eq] *= _RHO_EQ_FACTOR
    return np.clip(rho, _RHO_MIN, _RHO_MAX)


def _check_infeasibility(prob, dx, dy, tol=1e-10):
    """OSQP-style certificate checks on iterate displacement rays."""
    l, u = prob.l, prob.u
    nd = np.max(np.abs(dy), initial=0.0)
    if nd > tol:
        v = dy / nd
        sup = 0.0
        ok = True
        for i in range(prob.m):
            if v[i] > tol:
                if u[i] >= _INF_THRESH:
                    ok = False
                    break
                sup += u[i] * v[i]
            elif v[i] < -tol:
                if l[i] <= -_INF_THRESH:
                    ok = False
                    break
                sup += l[i] * v[i]
        if ok and sup < -1e-8 and np.max(np.abs(prob.A.T @ v), initial=0.0) < 1e-8:
            return "primal"
    nx = np.max(np.abs(dx), initial=0.0)
    if nx > tol:
        w = dx / nx
        if prob.q @ w < -1e-8 and np.max(np.abs(prob.P @ w), initial=0.0) < 1e-8:
            aw = prob.A @ w
            upper_ok = np.all((aw <= 1e-8) | (prob.u >= _INF_THRESH))
            lower_ok = np.all((aw >= -1e-8) | (prob.l <= -_INF_THRESH))
            if upper_ok and lower_ok:
                return "dual"
    return None


# ---------------------------------------------------------------------------
# polish


def _polish(prob, x, y, tol_primal, tol_dual):
    """Active-set refinement of an ADMM solution on the unscaled problem.

    Solves the equality-constrained KKT system on the constraints the duals
    mark active, with tiny regularization and iterative refinement. Returns
    a replacement (x, y) only when it improves the worst KKT residual.
    """
    m, n = prob.m, prob.n
    eq = np.isfinite(prob.l) & np.isfinite(prob.u) & (prob.u - prob.l < 1e-12)
    # a constraint counts as active when its dual magnitude beats its slack,
    # which filters the sign noise interior rows carry on loosely converged
    # duals
    ax = prob.A @ x
    low = (ax - prob.l < -y) & ~eq
    upp = (prob.u - ax < y) & ~eq
    act = np.flatnonzero(eq | low | upp)
    b = np.where(low, prob.l, prob.u)
    b[eq] = prob.l[eq]
    na = act.shape[0]
    sparse = prob.is_sparse()
    A_act = prob.A[act] if na else None
    try:
        if sparse:
            if na:
                K = sp.bmat(
                    [[prob.P + _POLISH_DELTA * sp.eye(n), A_act.T],
                     [A_act, -_POLISH_DELTA * sp.eye(na)]],
                    format="csc",
                )
            else:
                K = (prob.P + _POLISH_DELTA * sp.eye(n)).tocsc()
            solve = splu(K, permc_spec="MMD_AT_PLUS_A").solve
        else:
            K = np.zeros((n + na, n + na))
            K[:n, :n] = prob.P + _POLISH_DELTA * np.eye(n)
            if na:
                K[:n, n:] = A_act.T
                K[n:, :n] = A_act
                K[n:, n:] = -_POLISH_DELTA * np.eye(na)
            solve = lambda r: np.linalg.solve(K, r)
        rhs = np.concatenate([-prob.q, b[act]])
        sol = solve(rhs)
        # iterative refinement against the unregularized system
        for _ in range(3):
            xs, nu = sol[:n], sol[n:]
            res_x = prob.P @ xs + prob.q
            if na:
                res_x = res_x + A_act.T @ nu
            res = np.concatenate([res_x, (A_act @ xs - b[act]) if na else np.zeros(0)])
            sol = sol - solve(res)
        x_new = sol[:n]
        y_new = np.zeros(m)
        y_new[act] = sol[n:]
    except (np.linalg.LinAlgError, RuntimeError):
        return x, y, False
    p_old, d_old, c_old = kkt_residuals(prob, x, y)
    p_new, d_new, c_new = kkt_residuals(prob, x_new, y_new)
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(y_new))):
        return x, y, False
    # complementarity catches a mis-identified active set (wrong dual signs)
    if max(p_new, d_new, c_new) <= max(max(p_old, d_old, c_old),
                                       max(tol_primal, tol_dual)):
        return x_new, y_new, True
    return x, y, False


# ---------------------------------------------------------------------------
# solve paths


def _dense_factor(Ps, As, rho, sigma):
    M = Ps + sigma * np.eye(Ps.shape[0])
    if As.shape[0]:
        M = M + As.T @ (rho[:, None] * As)
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise ValueError("factorization failed: P is not positive semidefinite") from exc


def _sparse_factor(Ps, As, rho, sigma):
    n = Ps.shape[0]
    K = sp.bmat(
        [[Ps + sigma * sp.eye(n), As.T], [As, -sp.diags(1.0 / rho)]],
        format="csc",
    )
    try:
        # symmetric-pattern ordering; COLAMD fill explodes on these
        # saddle-point systems
        return splu(K, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise ValueError("factorization failed: P is not positive semidefinite") from exc


def solve(problem: QpProblem, tol_primal: float = 1e-6, tol_dual: float = 1e-6,
          max_iter: int = 20000, warm_x=None, warm_y=None, polish: bool = True,
          adapt_rho: bool = True, admm_tol_primal: float | None = None,
          admm_tol_dual: float | None = None) -> QpSolution:
    """Solve the QP to the requested absolute KKT tolerances.

    Deterministic for fixed inputs. ``warm_x``/``warm_y`` seed the iteration
    (unscaled coordinates), which sharply cuts iteration counts on sequences
    of slowly-varying problems such as per-slot or receding-horizon solves.
    ``admm_tol_*`` let the operator-splitting loop stop earlier than the
    final tolerance when the polish step is expected to close the gap; the
    loop resumes at the strict tolerance if polish falls short.
    """
    n, m = problem.n, problem.m
    if m == 0:
        raise ValueError("problem must have at least one constraint row")
    Ps, qs, As, ls, us, D, E, c = _ruiz(problem.P, problem.q, problem.A,
                                        problem.l, problem.u)
    sparse = problem.is_sparse()
    rho_base = 0.1
    rho = _rho_vector(rho_base, ls, us)
    factor = _sparse_factor(Ps, As, rho, _SIGMA) if sparse \
        else _dense_factor(Ps, As, rho, _SIGMA)

    x = np.zeros(n) if warm_x is None else np.asarray(warm_x, dtype=float) / D
    y = np.zeros(m) if warm_y is None else np.asarray(warm_y, dtype=float) * c / E
    z = np.clip(As @ x, ls, us)

    einv = 1.0 / E
    dinv_c = 1.0 / (D * c)
    lsa = np.where(np.isfinite(ls), ls, np.copysign(_INF_THRESH, ls))
    usa = np.where(np.isfinite(us), us, np.copysign(_INF_THRESH, us))

    stages = [(max(admm_tol_primal or tol_primal, tol_primal),
               max(admm_tol_dual or tol_dual, tol_dual))]
    if stages[0] != (tol_primal, tol_dual):
        stages.append((tol_primal, tol_dual))

    it_total = 0
    status = "max_iterations"
    r_prim = r_dual = np.inf
    trace = []
    best = None
    for eps_p, eps_d in stages:
        converged = False
        while it_total < max_iter:
            budget = min(_CHUNK, max_iter - it_total)
            x_prev, y_prev = x.copy(), y.copy()
            if sparse:
                it, r_prim, r_dual, converged = _sparse_chunk(
                    Ps, qs, As, lsa, usa, rho, _SIGMA, _ALPHA, factor,
                    x, z, y, einv, dinv_c, budget, _CHECK_EVERY, eps_p, eps_d)
            else:
                it, r_prim, r_dual, converged = _kernel.admm_chunk(
                    Ps, qs, As, lsa, usa, rho, _SIGMA, _ALPHA, factor,
                    x, z, y, einv, dinv_c, budget, _CHECK_EVERY, eps_p, eps_d)
            it_total += it
            trace.append((it_total, float(r_prim), float(r_dual)))
            if converged:
                break
            cert = _check_infeasibility(problem, (x - x_prev) * D,
                                        (y - y_prev) * E / c)
            if cert is not None:
                status = "infeasible"
                break
            if adapt_rho:
                # unscaled residual normalizers (see the einv/dinv_c identities)
                np_scale = max(np.max(np.abs((As @ x) * einv), initial=0.0),
                               np.max(np.abs(z * einv), initial=0.0), 1e-8)
                nd_scale = max(np.max(np.abs((Ps @ x) * dinv_c), initial=0.0),
                               np.max(np.abs((As.T @ y) * dinv_c), initial=0.0),
                               np.max(np.abs(qs * dinv_c), initial=0.0), 1e-8)
                ratio = (max(r_prim, 1e-14) / np_scale) / (max(r_dual, 1e-14) / nd_scale)
                if ratio > _ADAPT_TRIGGER or ratio < 1.0 / _ADAPT_TRIGGER:
                    rho_base = float(np.clip(rho_base * np.sqrt(ratio),
                                             _RHO_MIN, _RHO_MAX))
                    rho = _rho_vector(rho_base, ls, us)
                    factor = _sparse_factor(Ps, As, rho, _SIGMA) if sparse \
                        else _dense_factor(Ps, As, rho, _SIGMA)
        if status == "infeasible":
            break
        x_out = x * D
        y_out = y * E / c
        polished = False
        if polish:
            # worth attempting even on a non-converged iterate: if the
            # active set is already correct the refinement lands exactly
            x_out, y_out, polished = _polish(problem, x_out, y_out,
                                             tol_primal, tol_dual)
        p_fin, d_fin, c_fin = kkt_residuals(problem, x_out, y_out)
        y_scale = max(1.0, np.max(np.abs(y_out), initial=0.0))
        score = max(p_fin, d_fin, c_fin / y_scale)
        if best is None or score < best[5]:
            best = (x_out, y_out, p_fin, d_fin, polished, score)
        if p_fin <= tol_primal and d_fin <= tol_dual \
                and c_fin <= max(tol_primal, tol_dual) * y_scale:
            status = "solved"
            break
        if not converged:
            break

    if status == "infeasible" or best is None:
        x_out, y_out = x * D, y * E / c
        p_fin, d_fin, polished = np.inf, np.inf, False
        if status != "infeasible":
            p_fin, d_fin, _ = kkt_residuals(problem, x_out, y_out)
    else:
        x_out, y_out, p_fin, d_fin, polished, _ = best
    return QpSolution(
        x=x_out, duals=y_out, objective=problem.objective(x_out),
        primal_residual=float(p_fin), dual_residual=float(d_fin),
        iterations=it_total, status=status, polished=polished,
        residual_trace=trace,
    )


def _sparse_chunk(Ps, qs, As, l, u, rho, sigma, alpha, lu,
                  x, z, y, einv, dinv_c, max_iter, check_every,
                  eps_prim, eps_dual):
    """Sparse-path twin of the dense ADMM chunk (KKT factorization form)."""
    n = qs.shape[0]
    At = As.T
    r_prim = r_dual = np.inf
    it = 0
    while it < max_iter:
        it += 1
        rhs = np.concatenate([sigma * x - qs, z - y / rho])
        sol = lu.solve(rhs)
        xt = sol[:n]
        zt = z + (sol[n:] - y) / rho
        x[:] = alpha * xt + (1.0 - alpha) * x
        w = alpha * zt + (1.0 - alpha) * z
        z[:] = np.clip(w + y / rho, l, u)
        y += rho * (w - z)
        if it % check_every == 0 or it == max_iter:
            ax = As @ x
            r_prim = np.max(np.abs((ax - z) * einv), initial=0.0)
            r_dual = np.max(np.abs((Ps @ x + qs + At @ y) * dinv_c), initial=0.0)
            if r_prim <= eps_prim and r_dual <= eps_dual:
                return it, r_prim, r_dual, True
            if not np.isfinite(r_prim) or not np.isfinite(r_dual):
                return it, r_prim, r_dual, False
    return it, r_prim, r_dual, False


class QpWorkspace:
    """Reusable solver state for sequences of problems sharing (P, q, A).

    Receding-horizon loops re-solve with only the bounds moving (past
    decisions pinned via l = u); keeping the scaling and the KKT
    factorization across solves drops the per-step cost to the iteration
    work alone. Step sizes are frozen at construction.
    """

    def __init__(self, problem: QpProblem, rho_base: float = 0.1):
        if not problem.is_sparse():
            raise ValueError("workspace path supports the sparse formulation")
        self.problem = problem
        self.rho_base = rho_base
        (self.Ps, self.qs, self.As, ls0, us0,
         self.D, self.E, self.c) = _ruiz(problem.P, problem.q, problem.A,
                                         problem.l, problem.u)
        self.rho = _rho_vector(rho_base, ls0, us0)
        self.factor = _sparse_factor(self.Ps, self.As, self.rho, _SIGMA)
        self.einv = 1.0 / self.E
        self.dinv_c = 1.0 / (self.D * self.c)

    def refresh_rho(self, l: np.ndarray, u: np.ndarray):
        """Re-derive per-row step sizes from the current bounds (rows pinned
        to equalities since construction get the stiff equality step) and
        refactor. Worth calling periodically in pinning loops."""
        self.rho = _rho_vector(self.rho_base, self.E * l, self.E * u)
        self.factor = _sparse_factor(self.Ps, self.As, self.rho, _SIGMA)

    def solve(self, l: np.ndarray, u: np.ndarray, warm_x=None, warm_y=None,
              tol_primal: float = 1e-4, tol_dual: float = 1e-3,
              max_iter: int = 8000) -> QpSolution:
        n, m = self.problem.n, self.problem.m
        ls = self.E * l
        us = self.E * u
        lsa = np.where(np.isfinite(ls), ls, np.copysign(_INF_THRESH, ls))
        usa = np.where(np.isfinite(us), us, np.copysign(_INF_THRESH, us))
        x = np.zeros(n) if warm_x is None else np.asarray(warm_x, dtype=float) / self.D
        y = np.zeros(m) if warm_y is None else \
            np.asarray(warm_y, dtype=float) * self.c / self.E
        z = np.clip(self.As @ x, lsa, usa)
        it_total = 0
        r_prim = r_dual = np.inf
        status = "max_iterations"
        while it_total < max_iter:
            budget = min(_CHUNK, max_iter - it_total)
            it, r_prim, r_dual, converged = _sparse_chunk(
                self.Ps, self.qs, self.As, lsa, usa, self.rho, _SIGMA, _ALPHA,
                self.factor, x, z, y, self.einv, self.dinv_c,
                budget, _CHECK_EVERY, tol_primal, tol_dual)
            it_total += it
            if converged:
                status = "solved"
                break
            if not (np.isfinite(r_prim) and np.isfinite(r_dual)):
                break
        x_out = x * self.D
        y_out = y * self.E / self.c
        ax = self.problem.A @ x_out
        p_fin = float(np.max(np.abs(ax - np.clip(ax, l, u)), initial=0.0))
        return QpSolution(
            x=x_out, duals=y_out, objective=self.problem.objective(x_out),
            primal_residual=p_fin, dual_residual=float(r_dual),
            iterations=it_total, status=status, polished=False)


def solve_pure_python(problem: QpProblem, **kwargs) -> QpSolution:
    """Solve a dense problem through the numpy kernel regardless of build."""
    global _kernel
    saved = _kernel
    _kernel = _pykernel
    try:
        return solve(problem, **kwargs)
    finally:
        _kernel = saved
