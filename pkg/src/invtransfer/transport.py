"""Wasserstein-1 estimates: exact empirical oracles and the critic dual."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import FeasibilityError, ShapeError, SizeError
from .net_core import (
    NormNet,
    OptimizerState,
    backward,
    flat_grads,
    forward,
    opt_step,
    project_norm,
    rebalance,
    weight_norm,
)

MAX_MATCHING_N = 64


@dataclass
class CriticConfig:
    width: int = 16
    depth: int = 2
    norm_budget: float = 2.0
    ascent_steps: int = 5
    lr: float = 1e-2
    fixed_reference: bool = False  # reuse one reference draw instead of resampling
    rebalance: bool = True

    def __post_init__(self):
        if self.ascent_steps < 1:
            raise ValueError("ascent_steps must be >= 1")
        if not self.norm_budget > 0:
            raise ValueError("critic norm budget must be positive")


@dataclass(frozen=True)
class TransportEstimate:
    value: float
    method: Literal["exact_1d", "exact_matching", "critic_dual"]

    def __float__(self):
        return self.value


def w1_exact_1d(a, b) -> TransportEstimate:
    a = np.ravel(np.asarray(a, dtype=float))
    b = np.ravel(np.asarray(b, dtype=float))
    if a.size != b.size or a.size < 1:
        raise ShapeError(f"need equal nonzero sample counts, got {a.size} and {b.size}")
    # fsum is exactly rounded, so both exact oracles agree bit for bit on the same coupling
    return TransportEstimate(math.fsum(np.abs(np.sort(a) - np.sort(b))) / a.size, "exact_1d")


def _as_cloud(A):
    A = np.asarray(A, dtype=float)
    return A[:, None] if A.ndim == 1 else A


def w1_exact_matching(A, B) -> TransportEstimate:
    """Equal-mass empirical W1 with Euclidean cost, via an exact assignment."""
    A, B = _as_cloud(A), _as_cloud(B)
    if A.shape != B.shape:
        raise ShapeError(f"point clouds differ in shape: {A.shape} vs {B.shape}")
    n = A.shape[0]
    if n > MAX_MATCHING_N:
        raise SizeError(f"exact matching oracle is limited to n <= {MAX_MATCHING_N}, got {n}")
    cost = np.sqrt(((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=-1))
    rows, cols = linear_sum_assignment(cost)
    return TransportEstimate(math.fsum(cost[rows, cols]) / n, "exact_matching")


def _check_feasible(critic: NormNet, norm_budget):
    kappa = weight_norm(critic)
    if kappa > norm_budget + 1e-9:
        raise FeasibilityError(f"critic weight norm {kappa:.6g} exceeds budget {norm_budget:.6g}")


def dual_gap(critic: NormNet, A, B) -> float:
    """``mean critic(A) - mean critic(B)`` without the budget prefactor."""
    return float(critic(A).mean() - critic(B).mean())


def w1_dual_estimate(critic: NormNet, A, B, norm_budget=None) -> TransportEstimate:
    """Critic lower bound on W1: ``(mean g(A) - mean g(B)) / K``.

    ``norm_budget`` defaults to the critic's own budget.
    """
    K = critic.norm_budget if norm_budget is None else norm_budget
    _check_feasible(critic, K)
    return TransportEstimate(dual_gap(critic, _as_cloud(A), _as_cloud(B)) / K, "critic_dual")


def dual_objective_grads(critic: NormNet, A, B):
    """Gradient of ``mean g(A) - mean g(B)`` with respect to critic params."""
    ya, ca = forward(critic, A)
    yb, cb = forward(critic, B)
    ga, _ = backward(critic, ca, np.full_like(ya, 1.0 / ya.shape[0]))
    gb, _ = backward(critic, cb, np.full_like(yb, -1.0 / yb.shape[0]))
    grads = [(wa + wb, ba + bb) for (wa, ba), (wb, bb) in zip(ga, gb)]
    return float(ya.mean() - yb.mean()), grads


def critic_ascent(critic: NormNet, A, B, cfg: CriticConfig, state: OptimizerState | None = None):
    """Run ``cfg.ascent_steps`` projected Adam ascent steps on the dual gap.

    Pass the same ``state`` across calls to warm-start the moments.
    Returns ``(critic, state)``; the critic is edited in place.
    """
    A, B = _as_cloud(A), _as_cloud(B)
    if A.shape[1] != critic.in_dim or B.shape[1] != critic.in_dim:
        raise ShapeError("sample dimension does not match the critic input")
    if state is None:
        state = OptimizerState(lr=cfg.lr)
    params = critic.params()
    for _ in range(cfg.ascent_steps):
        _, grads = dual_objective_grads(critic, A, B)
        # ascent: descend on the negated objective
        neg = {k: -g for k, g in flat_grads(critic, grads).items()}
        opt_step(state, params, neg)
        if cfg.rebalance:
            rebalance(critic)
        project_norm(critic)
    return critic, state


def sample_uniform_ref(n: int, r: int, rng) -> np.ndarray:
    if n < 1 or r < 1:
        raise ValueError("n and r must be >= 1")
    return rng.uniform(0.0, 1.0, size=(n, r))
