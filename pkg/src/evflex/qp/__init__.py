from evflex.qp.solver import (
    QpProblem,
    QpSolution,
    dump_problem,
    kernel_name,
    kkt_residuals,
    solve,
    solve_pure_python,
)

__all__ = [
    "QpProblem",
    "QpSolution",
    "solve",
    "solve_pure_python",
    "kkt_residuals",
    "dump_problem",
    "kernel_name",
]
