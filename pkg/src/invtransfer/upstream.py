"""Upstream representation learning with sparse per-domain heads.

The trained objective for a batch is

    mean_i (y_i - F_{s_i} h(x_i))^2 + lam * dcov(h(X), onehot(S))
        + tau * W1_critic(h(X), xi) + mu * ||F||_1

with ``xi`` fresh uniform reference samples.  Training alternates a few
critic ascent steps with one epoch of minibatch descent on ``(F, h)``.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dependence import dcov_fast, dcov_value_and_grad
from .errors import InsufficientSamplesError, NumericError, ShapeError
from .net_core import (
    LayerParams,
    NormNet,
    OptimizerState,
    backward,
    flat_grads,
    forward,
    init_net,
    opt_step,
    project_norm,
    rebalance,
    weight_norm,
)
from .synthetic import Dataset
from .transport import CriticConfig, critic_ascent, sample_uniform_ref

log = logging.getLogger(__name__)


@dataclass
class UpstreamModel:
    h: NormNet
    F: np.ndarray  # (p, r)
    head_radius: float = 10.0
    critic: NormNet | None = None

    @property
    def p(self) -> int:
        return self.F.shape[0]

    @property
    def r(self) -> int:
        return self.F.shape[1]

    def predict(self, X, domain):
        H = self.h(X)
        return np.einsum("ij,ij->i", self.F[np.asarray(domain) - 1], H)


@dataclass
class UpstreamTrainConfig:
    lam: float = 10.0
    tau: float = 1.0
    mu: float = 0.01
    epochs: int = 100
    batch_size: int = 64
    width: int = 32
    depth: int = 3
    h_norm_budget: float = 100.0
    head_radius: float = 10.0
    lr_h: float = 1e-3
    lr_F: float = 0.1
    head_method: str = "sgd"  # proximal SGD solves the L1 step exactly; "adam" is available
    cosine_lr: bool = True
    rebalance_h: bool = True
    critic: CriticConfig = field(default_factory=CriticConfig)
    critic_batch: int = 256
    # "batch": ascend before every minibatch; "epoch": once per epoch; "fixed": never (critic held at init)
    critic_schedule: str = "batch"
    early_stop_tol: float | None = None  # relative total-risk change over 5 epochs
    monitor_rows: int = 512
    train_h: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.critic, dict):
            self.critic = CriticConfig(**self.critic)
        if self.batch_size < 8:
            raise ValueError("batch_size must be >= 8")
        if min(self.lam, self.tau, self.mu) < 0:
            raise ValueError("penalty weights must be nonnegative")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.critic_schedule not in ("batch", "epoch", "fixed"):
            raise ValueError(f"unknown critic_schedule {self.critic_schedule!r}")


@dataclass(frozen=True)
class RiskBreakdown:
    mse: float
    dcov_term: float
    w1_term: float
    l1_term: float
    total: float


def onehot(domain, p):
    domain = np.asarray(domain)
    out = np.zeros((len(domain), p))
    out[np.arange(len(domain)), domain - 1] = 1.0
    return out


def _assemble(mse, dc, w1, l1, cfg):
    return RiskBreakdown(mse, dc, w1, l1, mse + cfg.lam * dc + cfg.tau * w1 + cfg.mu * l1)


def risk_and_grads(model: UpstreamModel, critic: NormNet, X, y, domain, xi, cfg, l1_subgradient=False):
    """Batch risk breakdown plus gradients for ``h`` (per layer) and ``F``.

    The L1 term is normally handled by the proximal step; pass
    ``l1_subgradient=True`` to add ``mu * sign(F)`` to the ``F`` gradient.
    """
    n = len(y)
    if n < 4:
        raise InsufficientSamplesError(f"a batch needs >= 4 rows, got {n}")
    if xi.shape != (n, model.r):
        raise ShapeError(f"reference sample shape {xi.shape} != ({n}, {model.r})")
    idx = np.asarray(domain) - 1
    H, cache = forward(model.h, X)
    Fs = model.F[idx]
    resid = y - np.einsum("ij,ij->i", Fs, H)
    mse = float(np.mean(resid**2))
    dpred = -2.0 * resid / n
    gH = dpred[:, None] * Fs
    gF = np.zeros_like(model.F)
    np.add.at(gF, idx, dpred[:, None] * H)

    S = onehot(domain, model.p)
    if cfg.lam:
        dc, dH_dc, _ = dcov_value_and_grad(H, S)
        gH += cfg.lam * dH_dc
    else:
        dc = dcov_fast(H, S).value

    K = critic.norm_budget
    gh, ccache = forward(critic, H)
    g_ref = critic(xi)
    w1 = float((gh.mean() - g_ref.mean()) / K)
    if cfg.tau:
        _, dH_w1 = backward(critic, ccache, np.full_like(gh, 1.0 / (n * K)))
        gH += cfg.tau * dH_w1

    l1 = float(np.abs(model.F).sum())
    if l1_subgradient and cfg.mu:
        gF += cfg.mu * np.sign(model.F)

    h_grads, _ = backward(model.h, cache, gH)
    return _assemble(mse, dc, w1, l1, cfg), h_grads, gF


def empirical_risk(model: UpstreamModel, critic: NormNet, batch: Dataset, xi, cfg) -> RiskBreakdown:
    return risk_and_grads(model, critic, batch.X, batch.y, batch.domain, np.asarray(xi, float), cfg)[0]


def selector_net(d, select, norm_budget=1.0):
    """Exact ``x -> x[select]`` on the nonnegative orthant as a 1-hidden-layer net."""
    r = len(select)
    W0 = np.zeros((r, d))
    W0[np.arange(r), list(select)] = 1.0
    net = NormNet([LayerParams(W0, np.zeros(r)), LayerParams(np.eye(r), np.zeros(r))], norm_budget)
    return project_norm(net)


def project_ball(v, radius):
    """Scale ``v`` in place onto the Euclidean ball of the given radius."""
    norm = float(np.sqrt((v * v).sum()))
    if norm > radius:
        v *= radius / norm
    return v


def _cosine(lr0, epoch, epochs, enabled):
    if not enabled or epochs <= 1:
        return lr0
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / epochs))


def init_upstream(d, p, r, cfg: UpstreamTrainConfig, rng):
    h = init_net(d, r, cfg.width, cfg.depth, cfg.h_norm_budget, rng)
    crit = init_net(r, 1, cfg.critic.width, cfg.critic.depth, cfg.critic.norm_budget, rng)
    return UpstreamModel(h, np.zeros((p, r)), cfg.head_radius), crit


def train_upstream(data: Dataset, cfg: UpstreamTrainConfig, rng, r=3, p=None, h_init=None, checks=None):
    """Alternate critic ascent and one descent epoch, for ``cfg.epochs`` epochs.

    Returns ``(model, history)`` where ``history`` holds one dict per epoch:
    the monitored ``RiskBreakdown`` plus the critic.  ``checks``, if given,
    is called as ``checks(model, critic)`` after every optimizer step.
    """
    p = p or int(data.domain.max())
    counts = data.domain_counts()
    if any(counts.get(s, 0) < 2 for s in range(1, p + 1)):
        raise ValueError("every domain needs at least 2 rows")
    model, critic = init_upstream(data.d, p, r, cfg, rng)
    if h_init is not None:
        model.h = h_init.copy()
    n = len(data)
    h_state = OptimizerState(lr=cfg.lr_h)
    F_state = OptimizerState(lr=cfg.lr_F, method=cfg.head_method, l1={"F": cfg.mu})
    c_state = None
    h_params = model.h.params()
    F_params = {"F": model.F}

    mon = rng.permutation(n)[: min(n, cfg.monitor_rows)]
    mon_xi = sample_uniform_ref(len(mon), r, rng)
    fixed_xi = sample_uniform_ref(min(n, cfg.critic_batch), r, rng) if cfg.critic.fixed_reference else None
    history = []
    for epoch in range(cfg.epochs):
        h_state.lr = _cosine(cfg.lr_h, epoch, cfg.epochs, cfg.cosine_lr)
        F_state.lr = _cosine(cfg.lr_F, epoch, cfg.epochs, cfg.cosine_lr)

        if cfg.tau and cfg.critic_schedule == "epoch":
            sub = rng.choice(n, size=min(n, cfg.critic_batch), replace=False)
            xi = fixed_xi if fixed_xi is not None else sample_uniform_ref(len(sub), r, rng)
            critic, c_state = critic_ascent(critic, model.h(data.X[sub]), xi, cfg.critic, c_state)
            if checks:
                checks(model, critic)

        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 4:
                continue
            xi = sample_uniform_ref(len(idx), r, rng)
            if cfg.tau and cfg.critic_schedule == "batch":
                sub = rng.choice(n, size=min(n, cfg.critic_batch), replace=False)
                ref = fixed_xi if fixed_xi is not None else sample_uniform_ref(len(sub), r, rng)
                critic, c_state = critic_ascent(critic, model.h(data.X[sub]), ref, cfg.critic, c_state)
                if checks:
                    checks(model, critic)
            try:
                _, h_grads, gF = risk_and_grads(model, critic, data.X[idx], data.y[idx], data.domain[idx], xi, cfg)
                opt_step(F_state, F_params, {"F": gF})
                if cfg.train_h:
                    opt_step(h_state, h_params, flat_grads(model.h, h_grads))
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}", exc.path) from exc
            project_ball(model.F, cfg.head_radius)
            if cfg.train_h and cfg.rebalance_h:
                rebalance(model.h)
            project_norm(model.h)
            if checks:
                checks(model, critic)

        risk = empirical_risk(model, critic, data.subset(mon), mon_xi, cfg)
        history.append({"epoch": epoch, "risk": risk})
        log.debug("epoch %d total %.6g", epoch, risk.total)
        if cfg.early_stop_tol is not None and len(history) > 5:
            prev = history[-6]["risk"].total
            if abs(prev - risk.total) <= cfg.early_stop_tol * max(abs(prev), 1e-12):
                break
    model.critic = critic
    return model, history


@dataclass
class SupportReport:
    precision: list[float]
    recall: list[float]
    exact: bool
    permutation: tuple[int, ...]

    def as_dict(self):
        return {
            "precision": self.precision,
            "recall": self.recall,
            "exact": self.exact,
            "permutation": list(self.permutation),
        }


def _score_support(active, truth):
    precision, recall = [], []
    for a, t in zip(active, truth):
        tp = int(np.sum(a & t))
        precision.append(tp / a.sum() if a.sum() else 1.0)
        recall.append(tp / t.sum() if t.sum() else 1.0)
    return precision, recall, bool(np.array_equal(active, truth))


def support_recovery(F_hat, truth_masks, threshold, align=False) -> SupportReport:
    """Per-row precision/recall of ``|F_hat| > threshold`` against the truth.

    A learned representation is identified only up to a relabelling of its
    coordinates; ``align=True`` picks the column permutation of ``F_hat``
    with the most agreeing entries (ties to the identity) before scoring.
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    F_hat = np.atleast_2d(np.asarray(F_hat, dtype=float))
    truth = np.atleast_2d(np.asarray(truth_masks, dtype=bool))
    if F_hat.shape != truth.shape:
        raise ShapeError(f"estimate shape {F_hat.shape} != truth shape {truth.shape}")
    active = np.abs(F_hat) > threshold
    r = F_hat.shape[1]
    perm = tuple(range(r))
    if align:
        best = -1
        for cand in itertools.permutations(range(r)):
            agree = int(np.sum(active[:, cand] == truth))
            if agree > best:
                best, perm = agree, cand
        active = active[:, perm]
    precision, recall, exact = _score_support(active, truth)
    return SupportReport(precision, recall, exact, perm)


def suggest_capacity(n, d, r, beta=1.0):
    """Width/depth/norm sizes for the representation and critic classes.

    Follows the theoretical scaling with all proportionality constants 1;
    returns ``(W1, L1, K1, W2, L2, K2)``.
    """
    smooth = math.ceil(beta) - 1  # largest integer strictly below beta
    depth = 2 * math.ceil(math.log2(r + smooth)) + 2
    if beta <= 2:
        W1 = n ** ((2 * d + beta) / (4 * (d + 1 + beta)))
        W2 = n ** ((2 * r + beta) / (4 * (d + 1 + beta)))
        K1 = n ** ((d + 1) / (2 * (d + beta + 1)))
        K2 = n ** ((r + 1) / (2 * (d + 1 + beta)))
    else:
        W1 = n ** ((2 * d + beta) / (2 * (2 * d + 3 * beta)))
        W2 = n ** ((2 * r + beta) / (2 * (2 * d + 3 * beta)))
        K1 = n ** ((d + 1) / (2 * d + 3 * beta))
        K2 = n ** ((r + 1) / (2 * d + 3 * beta))
    return math.ceil(W1), depth, K1, math.ceil(W2), depth, K2
