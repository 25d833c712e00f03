"""Invariant representation transfer with sparse heads, on numpy.

Modules: ``net_core`` (norm-constrained ReLU nets), ``dependence``
(distance covariance), ``transport`` (W1 estimates), ``synthetic``
(ground-truth scenarios), ``upstream`` and ``downstream`` (training), and
``harness`` (config, IO, experiments, CLI).
"""
__version__ = "0.1.0"
