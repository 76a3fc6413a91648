"""Empirical risk measures on sampled outcome vectors.

All evaluators act on a finite sample with uniform weights and are law
invariant (permutation invariant), monotone and convex; expectation and
conditional value-at-risk are additionally translation equivariant.
"""

from __future__ import annotations

import numpy as np


def expectation(values) -> float:
    """Arithmetic mean."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("empty sample")
    return float(values.mean())


def cvar(values, beta: float) -> float:
    """Conditional value-at-risk at level beta in [0, 1).

    Empirical form: min over t of t + mean((Y - t)+) / (1 - beta); the
    minimum over a finite sample is attained at a sample point, so the
    candidates are enumerated exactly.  beta = 0 gives the mean; beta -> 1
    approaches the maximum.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("empty sample")
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must lie in [0, 1)")
    if beta == 0.0:
        return float(values.mean())
    candidates = np.unique(values)
    excess = np.maximum(values[None, :] - candidates[:, None], 0.0)
    objective = candidates + excess.mean(axis=1) / (1.0 - beta)
    return float(objective.min())


def expected_excess(values, target: float, order: int = 1) -> float:
    """Mean of the order-p power of the excess over the target."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("empty sample")
    if order < 1:
        raise ValueError("order must be >= 1")
    return float((np.maximum(values - target, 0.0) ** order).mean())


def mean_upper_semideviation(values, order: int = 1) -> float:
    """Mean plus the L^p norm of the upward deviation from the mean."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("empty sample")
    if order < 1:
        raise ValueError("order must be >= 1")
    mean = values.mean()
    dev = (np.maximum(values - mean, 0.0) ** order).mean() ** (1.0 / order)
    return float(mean + dev)
