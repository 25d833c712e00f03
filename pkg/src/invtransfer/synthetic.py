"""Ground-truth scenarios for upstream/downstream transfer experiments.

Upstream rows follow ``y = F*_s h*(x) + eps`` and downstream rows
``y = F*_T h*(x) + q*(A* x) + eps`` (or a Bernoulli label on that score).
``h*`` selects ``r`` coordinates of ``x`` and ``A*`` reads only coordinates
outside that selection, so ``q*(A* X)`` is independent of ``h*(X)`` whenever
the coordinates of ``X`` are independent.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Literal

import numpy as np

Regime = Literal["complete", "partial", "none"]
Task = Literal["regression", "classification"]


@dataclass
class Dataset:
    """Rows ``(x, y, domain)``; downstream data uses domain 0."""

    X: np.ndarray
    y: np.ndarray
    domain: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2:
            raise ValueError("X must be a matrix")
        self.y = np.asarray(self.y, dtype=float)
        self.domain = np.asarray(self.domain, dtype=np.int64)
        if not (len(self.X) == len(self.y) == len(self.domain)):
            raise ValueError("X, y and domain must have the same number of rows")

    def __len__(self):
        return len(self.y)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.domain[idx])

    def domain_counts(self) -> dict[int, int]:
        ids, counts = np.unique(self.domain, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.X.shape == other.X.shape
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.domain, other.domain)
        )


# Supports {0,1}, {1,2}, {0,2}: every coordinate shared by two domains, none by all.
DEFAULT_F_STAR = ((1.0, -0.8, 0.0), (0.0, 1.2, 0.7), (0.9, 0.0, -1.1))
DEFAULT_F_T_STAR = (1.0, 0.0, -0.8)


@dataclass
class Scenario:
    d: int = 8
    r: int = 3
    p: int = 3
    d_star: int = 2
    select: tuple[int, ...] = (0, 1, 2)
    warps: tuple[float, ...] | None = None  # per-coordinate exponents; x**g is increasing on [0,1]
    F_star: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_F_STAR))
    F_T_star: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_F_T_STAR))
    A_star: np.ndarray | None = None  # defaults to the first d_star unselected coordinates
    q_sin: float = 1.0  # q*(u) = q_sin * sin(2 pi u_1) + q_quad * u_2^2
    q_quad: float = 0.5
    noise_scale: float = 0.1
    regime: Regime = "partial"
    task: Task = "regression"
    domain_probs: tuple[float, ...] | None = None
    domain_shift: float = 1.0  # spreads nuisance-coordinate exponents across upstream domains

    def __post_init__(self):
        self.F_star = np.asarray(self.F_star, dtype=float).reshape(self.p, self.r)
        self.F_T_star = np.asarray(self.F_T_star, dtype=float).reshape(self.r)
        if len(self.select) != self.r or len(set(self.select)) != self.r:
            raise ValueError("select must list r distinct coordinates")
        if any(not 0 <= j < self.d for j in self.select):
            raise ValueError("selected coordinates must lie in [0, d)")
        if self.A_star is None:
            rest = [j for j in range(self.d) if j not in self.select]
            if self.d_star > len(rest):
                raise ValueError("d_star exceeds the number of unselected coordinates")
            A = np.zeros((self.d_star, self.d))
            A[np.arange(self.d_star), rest[: self.d_star]] = 1.0
            self.A_star = A
        self.A_star = np.asarray(self.A_star, dtype=float).reshape(self.d_star, self.d)
        if np.any(self.A_star[:, list(self.select)] != 0):
            raise ValueError("A_star must not read coordinates selected by h_star")
        if self.warps is not None:
            if len(self.warps) != self.r or any(g <= 0 for g in self.warps):
                raise ValueError("warps need r positive exponents")
        if not 0.0 <= self.noise_scale <= 1.0:
            raise ValueError("noise_scale must lie in [0, 1]")
        if self.regime not in ("complete", "partial", "none"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.regime == "none":
            self.F_T_star = np.zeros(self.r)
        elif not np.any(self.F_T_star):
            raise ValueError(f"regime {self.regime!r} needs a nonzero F_T_star")
        if self.domain_probs is None:
            self.domain_probs = tuple([1.0 / self.p] * self.p)
        probs = np.asarray(self.domain_probs, dtype=float)
        if probs.shape != (self.p,) or np.any(probs <= 0) or not np.isclose(probs.sum(), 1.0):
            raise ValueError("domain_probs must be p positive numbers summing to 1")

    @property
    def q_enabled(self) -> bool:
        return self.regime != "complete"

    @property
    def support(self) -> np.ndarray:
        return self.F_star != 0

    @property
    def target_support(self) -> np.ndarray:
        return self.F_T_star != 0

    def with_regime(self, regime: Regime) -> "Scenario":
        F_T = self.F_T_star if np.any(self.F_T_star) else np.array(DEFAULT_F_T_STAR)
        return replace(self, regime=regime, F_T_star=F_T.copy(), F_star=self.F_star.copy(), A_star=self.A_star.copy())

    def h_star(self, X):
        H = np.asarray(X, dtype=float)[:, list(self.select)]
        if self.warps is not None:
            H = H ** np.asarray(self.warps)
        return H

    def q_star(self, U):
        U = np.asarray(U, dtype=float)
        out = self.q_sin * np.sin(2 * np.pi * U[:, 0])
        if U.shape[1] > 1:
            out = out + self.q_quad * U[:, 1] ** 2
        return out

    def Q_star(self, X):
        if not self.q_enabled:
            return np.zeros(len(X))
        return self.q_star(np.asarray(X, dtype=float) @ self.A_star.T)

    def score(self, X):
        """Noise-free downstream regression function / classification logit."""
        return self.h_star(X) @ self.F_T_star + self.Q_star(X)

    def nuisance_exponents(self) -> np.ndarray:
        return np.exp(self.domain_shift * np.linspace(-0.7, 0.7, self.p))


def _noise(sc: Scenario, n, rng):
    return rng.uniform(-sc.noise_scale, sc.noise_scale, size=n)


def gen_upstream(sc: Scenario, n: int, rng) -> Dataset:
    """Multi-domain upstream sample with domain ids ``1..p``.

    Unselected coordinates of domain ``s`` are ``U ** g_s``, giving covariate
    shift across domains that the representation must ignore; the selected
    coordinates stay exactly uniform in every domain.
    """
    if n < sc.p:
        raise ValueError("need at least one row per domain")
    s = rng.choice(sc.p, size=n, p=np.asarray(sc.domain_probs))
    X = rng.uniform(0.0, 1.0, size=(n, sc.d))
    rest = [j for j in range(sc.d) if j not in sc.select]
    if rest:
        g = sc.nuisance_exponents()[s]
        X[:, rest] = X[:, rest] ** g[:, None]
    H = sc.h_star(X)
    y = np.einsum("ij,ij->i", sc.F_star[s], H) + _noise(sc, n, rng)
    return Dataset(X, y, s + 1)


def gen_downstream(sc: Scenario, m: int, rng) -> Dataset:
    if m < 1:
        raise ValueError("m must be >= 1")
    X = rng.uniform(0.0, 1.0, size=(m, sc.d))
    f = sc.score(X)
    if sc.task == "regression":
        y = f + _noise(sc, m, rng)
    else:
        y = (rng.uniform(size=m) < sigmoid(f)).astype(float)
    return Dataset(X, y, np.zeros(m, dtype=np.int64))


def sigmoid(t):
    t = np.asarray(t, dtype=float)
    return np.exp(-np.logaddexp(0.0, -t))


def logistic_loss(score, y):
    """Negative Bernoulli log-likelihood of label ``y`` under logit ``score``."""
    score = np.asarray(score, dtype=float)
    return np.logaddexp(0.0, score) - y * score


def oracle_excess_risk(
    predict: Callable[[np.ndarray], np.ndarray],
    sc: Scenario,
    n_mc: int,
    rng,
    conditional: bool = False,
):
    """Monte Carlo ``E[l(predict(X), Y)] - E[l(truth(X), Y)]`` on fresh draws.

    Returns ``(estimate, standard_error)``.  With ``conditional=True`` the
    label noise is integrated out in closed form, which leaves the same
    expectation with lower variance.
    """
    if n_mc < 1000:
        raise ValueError("n_mc must be >= 1000")
    data = gen_downstream(sc, n_mc, rng)
    f_true = sc.score(data.X)
    f_hat = np.asarray(predict(data.X), dtype=float).reshape(-1)
    if sc.task == "regression":
        if conditional:
            diff = (f_hat - f_true) ** 2
        else:
            diff = (f_hat - data.y) ** 2 - (f_true - data.y) ** 2
    else:
        if conditional:
            p = sigmoid(f_true)
            diff = p * (logistic_loss(f_hat, 1.0) - logistic_loss(f_true, 1.0)) + (1 - p) * (
                logistic_loss(f_hat, 0.0) - logistic_loss(f_true, 0.0)
            )
        else:
            diff = logistic_loss(f_hat, data.y) - logistic_loss(f_true, data.y)
    return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n_mc))
