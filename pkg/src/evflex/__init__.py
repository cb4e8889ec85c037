"""Real-time aggregate EV charging flexibility under a carbon emission cap.

Simulation engine and optimization library: stochastic fleet scenarios,
queue-based online flexibility quantification, two-stage dispatch
disaggregation, offline/greedy/MPC benchmarks, and a sweep harness.
"""

__version__ = "0.1.0"
