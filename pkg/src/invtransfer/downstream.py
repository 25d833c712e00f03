"""Downstream fine-tuning on top of a frozen transferred representation.

The target score is ``F_T . h(x) + q(A x)``.  ``h`` comes from upstream and
is never modified; ``F_T`` is a sparse linear head, and ``q(A .)`` is an
auxiliary network on a ``d*``-dimensional projection that picks up signal
``h`` does not carry.  The trained objective on a batch is

    fit + kappa * dcov(h(X), Q(X)) + chi * ||F_T||_1 + zeta * ||A||_F^2

where the distance-covariance term keeps ``Q`` from re-learning ``h``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .dependence import dcov_value_and_grad
from .errors import FeasibilityError, InsufficientSamplesError, NumericError, ShapeError
from .net_core import (
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
from .synthetic import Dataset, logistic_loss, sigmoid
from .upstream import _cosine, project_ball

log = logging.getLogger(__name__)


@dataclass
class DownstreamModel:
    h_ref: NormNet
    F_T: np.ndarray  # (r,)
    A: np.ndarray  # (d_star, d)
    q: NormNet | None
    q_enabled: bool = True
    radius: float = 10.0

    @property
    def d_star(self) -> int:
        return self.A.shape[0]


@dataclass
class FineTuneConfig:
    kappa: float = 10.0
    chi: float | None = None  # None means 1/sqrt(m) for m training rows
    zeta: float = 0.01
    loss_kind: str = "squared"  # "squared" | "logistic"
    d_star: int = 2
    d_star_candidates: tuple[int, ...] = (2,)
    use_q: bool = True
    epochs: int = 200
    batch_size: int = 32
    lr_F: float | None = None  # None means 1 / L for the smooth fit term on the frozen features
    lr_A: float = 1e-2
    lr_q: float = 1e-2
    head_method: str = "sgd"
    q_width: int = 32
    q_depth: int = 2
    q_norm_budget: float = 100.0
    radius: float = 10.0
    cosine_lr: bool = True
    train_head: bool = True
    train_A: bool = True
    A_init: str = "orthonormal"  # "orthonormal" | "identity"
    seed: int = 0

    def __post_init__(self):
        self.d_star_candidates = tuple(int(k) for k in self.d_star_candidates)
        if self.loss_kind not in ("squared", "logistic"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if min(self.kappa, self.zeta) < 0 or (self.chi is not None and self.chi < 0):
            raise ValueError("penalty weights must be nonnegative")
        if self.kappa > 0 and self.batch_size < 8:
            raise ValueError("batch_size must be >= 8 when kappa > 0")
        if self.A_init not in ("orthonormal", "identity"):
            raise ValueError(f"unknown A_init {self.A_init!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")

    def chi_for(self, m: int) -> float:
        return self.chi if self.chi is not None else 1.0 / math.sqrt(max(m, 1))


@dataclass(frozen=True)
class FineTuneBreakdown:
    fit: float
    dcov: float
    l1: float
    fro: float
    total: float


def _check_rows(model: DownstreamModel, X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.h_ref.in_dim:
        raise ShapeError(f"expected rows of width {model.h_ref.in_dim}, got shape {X.shape}")
    return X


def aux_output(model: DownstreamModel, X):
    """``Q(X) = q(X A^T)`` as a vector, zeros when the auxiliary branch is off."""
    X = _check_rows(model, X)
    if not model.q_enabled:
        return np.zeros(len(X))
    return model.q(X @ model.A.T)[:, 0]


def predict(model: DownstreamModel, X, H=None):
    """Scores ``F_T . h(x) + q(A x)``; pass ``H = h(X)`` to skip the frozen forward."""
    X = _check_rows(model, X)
    if H is None:
        H = model.h_ref(X)
    return H @ model.F_T + aux_output(model, X)


def _fit_and_grad(score, y, loss_kind):
    m = len(y)
    if loss_kind == "squared":
        resid = score - y
        return float(np.mean(resid**2)), 2.0 * resid / m
    return float(np.mean(logistic_loss(score, y))), (sigmoid(score) - y) / m


def loss_and_grads(model: DownstreamModel, H, X, y, cfg: FineTuneConfig, chi: float, l1_subgradient=False):
    """Batch breakdown plus gradients for ``F_T``, ``A`` and ``q`` (per layer).

    ``H`` holds the frozen features of ``X``.  As upstream, the L1 term is
    left to the proximal step unless ``l1_subgradient=True``.
    """
    m = len(y)
    if cfg.kappa > 0 and model.q_enabled and m < 4:
        raise InsufficientSamplesError(f"the dcov penalty needs >= 4 rows, got {m}")
    score = H @ model.F_T
    if model.q_enabled:
        U = X @ model.A.T
        Qout, qcache = forward(model.q, U)
        Q = Qout[:, 0]
        score = score + Q
    fit, ds = _fit_and_grad(score, y, cfg.loss_kind)
    gF = H.T @ ds
    if l1_subgradient and chi:
        gF = gF + chi * np.sign(model.F_T)

    dc = 0.0
    gA = 2.0 * cfg.zeta * model.A
    q_grads = None
    if model.q_enabled:
        gQ = ds.copy()
        if m >= 4:
            dc, _, dQ = dcov_value_and_grad(H, Q[:, None])
            if cfg.kappa:
                gQ += cfg.kappa * dQ[:, 0]
        q_grads, gU = backward(model.q, qcache, gQ[:, None])
        gA = gA + gU.T @ X

    l1 = float(np.abs(model.F_T).sum())
    fro = float((model.A**2).sum())
    total = fit + cfg.kappa * dc + chi * l1 + cfg.zeta * fro
    return FineTuneBreakdown(fit, float(dc), l1, fro, total), gF, gA, q_grads


def finetune_loss(model: DownstreamModel, batch: Dataset, cfg: FineTuneConfig, chi: float | None = None):
    """Objective breakdown on ``batch``; ``chi`` defaults to ``cfg.chi_for(len(batch))``."""
    X = _check_rows(model, batch.X)
    chi = cfg.chi_for(len(batch)) if chi is None else chi
    return loss_and_grads(model, model.h_ref(X), X, batch.y, cfg, chi)[0]


def init_A(d_star, d, kind, rng):
    if kind == "identity":
        if d_star != d:
            raise ShapeError("identity A needs d_star == d")
        return np.eye(d)
    G = rng.normal(size=(d, d_star))
    Qm, _ = np.linalg.qr(G)
    return Qm.T / math.sqrt(d_star)  # orthonormal rows, Frobenius norm 1


def init_downstream(h_hat: NormNet, cfg: FineTuneConfig, rng, d_star=None) -> DownstreamModel:
    d = h_hat.in_dim
    d_star = cfg.d_star if d_star is None else int(d_star)
    if not 1 <= d_star <= d:
        raise ValueError(f"d_star must lie in [1, {d}], got {d_star}")
    A = init_A(d_star, d, cfg.A_init, rng)
    q = init_net(d_star, 1, cfg.q_width, cfg.q_depth, cfg.q_norm_budget, rng) if cfg.use_q else None
    return DownstreamModel(h_hat.copy(), np.zeros(h_hat.out_dim), A, q, cfg.use_q, cfg.radius)


def head_step(H, loss_kind):
    """Step ``1 / L`` where ``L`` bounds the curvature of the fit in ``F_T``.

    The squared loss has Hessian ``2 H^T H / m``; the logistic loss at most a
    quarter of ``H^T H / m``.
    """
    top = float(np.linalg.eigvalsh(H.T @ H / len(H))[-1])
    L = (2.0 if loss_kind == "squared" else 0.25) * top
    return 1.0 / L if L > 0 else 1.0


MONITOR_ROWS = 256  # the dcov term is O(rows^2), so epoch monitoring is capped


def _batches(order, batch_size):
    """Split into ``floor(m / batch_size)`` near-equal batches, none smaller than ``batch_size``."""
    return np.array_split(order, max(1, len(order) // batch_size))


def finetune(h_hat: NormNet, data: Dataset, cfg: FineTuneConfig, rng, d_star=None, checks=None):
    """Train ``(F_T, A, q)`` with ``h_hat`` frozen.

    Returns ``(model, history)``; ``history`` holds one breakdown per epoch,
    measured on the first ``MONITOR_ROWS`` training rows (all rows when
    fewer).  ``checks(model)`` runs after every optimizer step.
    """
    if len(data) == 0:
        raise ValueError("no training rows")
    if weight_norm(h_hat) > h_hat.norm_budget * (1 + 1e-9):
        raise FeasibilityError("representation violates its norm budget")
    model = init_downstream(h_hat, cfg, rng, d_star)
    X, y = _check_rows(model, data.X), data.y
    H = model.h_ref(X)  # frozen, so computed once
    m = len(y)
    chi = cfg.chi_for(m)

    lr_F = cfg.lr_F if cfg.lr_F is not None else head_step(H, cfg.loss_kind)
    F_state = OptimizerState(lr=lr_F, method=cfg.head_method, l1={"F_T": chi})
    A_state = OptimizerState(lr=cfg.lr_A)
    q_state = OptimizerState(lr=cfg.lr_q)
    F_params, A_params = {"F_T": model.F_T}, {"A": model.A}
    q_params = model.q.params() if model.q_enabled else {}

    history = []
    for epoch in range(cfg.epochs):
        F_state.lr = _cosine(lr_F, epoch, cfg.epochs, cfg.cosine_lr)
        A_state.lr = _cosine(cfg.lr_A, epoch, cfg.epochs, cfg.cosine_lr)
        q_state.lr = _cosine(cfg.lr_q, epoch, cfg.epochs, cfg.cosine_lr)
        for b, idx in enumerate(_batches(rng.permutation(m), cfg.batch_size)):
            try:
                _, gF, gA, q_grads = loss_and_grads(model, H[idx], X[idx], y[idx], cfg, chi)
                if cfg.train_head:
                    opt_step(F_state, F_params, {"F_T": gF})
                if model.q_enabled:
                    if cfg.train_A:
                        opt_step(A_state, A_params, {"A": gA})
                    opt_step(q_state, q_params, flat_grads(model.q, q_grads))
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}", exc.path) from exc
            project_ball(model.F_T, model.radius)
            project_ball(model.A, model.radius)
            if model.q_enabled:
                rebalance(model.q)
                project_norm(model.q)
            if checks:
                checks(model)
        mon = slice(0, MONITOR_ROWS)
        bd = loss_and_grads(model, H[mon], X[mon], y[mon], cfg, chi)[0]
        history.append({"epoch": epoch, "risk": bd})
        log.debug("epoch %d total %.6g", epoch, bd.total)
    return model, history


def evaluate(model: DownstreamModel, data: Dataset, loss_kind: str) -> dict:
    """Mean loss over all rows; classification adds accuracy and log-loss."""
    if len(data) == 0:
        raise ValueError("no rows to evaluate")
    score = predict(model, data.X)
    if loss_kind == "squared":
        return {"loss": float(np.mean((score - data.y) ** 2))}
    if loss_kind != "logistic":
        raise ValueError(f"unknown loss_kind {loss_kind!r}")
    ll = float(np.mean(logistic_loss(score, data.y)))
    acc = float(np.mean((score > 0) == (data.y > 0.5)))
    return {"loss": ll, "log_loss": ll, "accuracy": acc}


def select_dstar(h_hat: NormNet, train: Dataset, val: Dataset, candidates, cfg: FineTuneConfig):
    """Fine-tune once per candidate ``d*`` and keep the best on ``val``.

    Regression keeps the lowest validation loss, classification the highest
    accuracy.  Candidates are tried in increasing order and only a strict
    improvement replaces the incumbent, so ties go to the smaller ``d*``.
    Returns ``(best_d_star, metrics)`` with one dict per candidate.
    """
    candidates = sorted(int(k) for k in candidates)
    if not candidates:
        raise ValueError("no d_star candidates")
    metrics, best, best_val = [], None, None
    for k in candidates:
        rng = np.random.default_rng([cfg.seed, k])
        model, _ = finetune(h_hat, train, cfg, rng, d_star=k)
        ev = evaluate(model, val, cfg.loss_kind)
        metrics.append({"d_star": k, **ev})
        val_score = -ev["loss"] if cfg.loss_kind == "squared" else ev["accuracy"]
        if best is None or val_score > best_val:
            best, best_val = k, val_score
    return best, metrics
