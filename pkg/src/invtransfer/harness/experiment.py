"""End-to-end runs: upstream training, per-regime fine-tuning, baselines, sweeps.

Every random draw comes from ``np.random.default_rng([seed, stream])`` with a
fixed stream id per stage, so a (config, seed) pair determines every number
and all methods of one regime share their data splits and initial weights.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..dependence import dcov_fast
from ..downstream import evaluate, finetune, predict, aux_output, select_dstar
from ..errors import TransferError
from ..net_core import init_net
from ..synthetic import Dataset, gen_downstream, gen_upstream, oracle_excess_risk
from ..transport import sample_uniform_ref, w1_exact_matching
from ..upstream import onehot, selector_net, support_recovery, train_upstream
from .config import ExperimentConfig, dump_config, to_finetune, to_scenario, to_upstream
from .io import save_model

log = logging.getLogger(__name__)

REGIMES = ("complete", "partial", "none")
METHODS = ("ours", "erm_d", "tir", "wi", "erm_ud")

# stream ids for np.random.default_rng([seed, stream])
S_UP_DATA, S_UP_INIT, S_UP_TRAIN, S_UD_TRAIN, S_HELDOUT = 0, 1, 2, 3, 4
S_DOWN_DATA, S_SPLIT, S_TEST, S_FT, S_MC = 10, 20, 30, 40, 50


def stream(seed: int, sid: int, *extra: int):
    return np.random.default_rng([seed, sid, *extra])


class StageError(TransferError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


@dataclass
class DownstreamRow:
    method: str
    regime: str
    m: int
    seed: int
    d_star: int
    test_loss: float
    test_accuracy: float | None
    val_loss: float
    excess_risk: float
    excess_se: float
    dcov_hq: float
    head_l1: float
    support_exact: bool | None
    history: list[dict] = field(default_factory=list, repr=False)


@dataclass
class MetricsRecord:
    """Everything one (config, seed) run produced."""

    run_id: str
    seed: int
    n: int
    m: int
    upstream: dict
    rows: list[DownstreamRow]
    wall_clock: float
    partial: bool = False
    failed_stage: str | None = None

    def metric_values(self) -> dict:
        """All numbers except timing, for determinism checks."""
        doc = asdict(self)
        doc.pop("wall_clock")
        doc["upstream"].pop("seconds", None)
        return doc


CSV_FIELDS = [
    "run_id", "seed", "n", "method", "regime", "m", "d_star", "test_loss", "test_accuracy",
    "val_loss", "excess_risk", "excess_se", "dcov_hq", "head_l1", "support_exact",
]


def _split(data: Dataset, val_fraction: float, rng):
    order = rng.permutation(len(data))
    n_val = max(1, int(round(val_fraction * len(data))))
    return data.subset(order[n_val:]), data.subset(order[:n_val])


def _history_dicts(history):
    return [{"epoch": h["epoch"], **asdict(h["risk"])} for h in history]


def _w1_to_uniform(H, rng, chunks=4, size=64):
    vals = []
    for k in range(chunks):
        rows = H[k * size : (k + 1) * size]
        vals.append(w1_exact_matching(rows, sample_uniform_ref(len(rows), H.shape[1], rng)).value)
    return float(np.mean(vals))


def upstream_diagnostics(h_init, h_hat, heldout: Dataset, p: int, seed: int) -> dict:
    """Held-out dcov with the domain label and exact W1 to uniform, before and after."""
    S = onehot(heldout.domain, p)
    out = {}
    for tag, h in (("init", h_init), ("trained", h_hat)):
        H = h(heldout.X)
        out[f"dcov_domain_{tag}"] = dcov_fast(H, S).value
        out[f"w1_uniform_{tag}"] = _w1_to_uniform(H, stream(seed, S_HELDOUT, 1))
    return out


def train_representation(cfg: ExperimentConfig, seed: int, **changes):
    """Train (or, for the oracle representation, construct) ``h``; returns ``(h, info, model)``."""
    sc = to_scenario(cfg)
    t0 = time.perf_counter()
    if cfg.representation == "oracle":
        if sc.warps is not None:
            raise ValueError("the oracle representation needs identity warps")
        h = selector_net(sc.d, sc.select)
        info = {"representation": "oracle", "support_exact": True, "permutation": list(range(sc.r))}
        return h, info, None
    data = gen_upstream(sc, cfg.n, stream(seed, S_UP_DATA))
    ucfg = to_upstream(cfg, seed, **changes)
    h_init = init_net(sc.d, sc.r, ucfg.width, ucfg.depth, ucfg.h_norm_budget, stream(seed, S_UP_INIT))
    sid = S_UD_TRAIN if changes else S_UP_TRAIN
    model, history = train_upstream(data, ucfg, stream(seed, sid), r=sc.r, p=sc.p, h_init=h_init)
    rep = support_recovery(model.F, sc.support, cfg.support_threshold, align=True)
    heldout = gen_upstream(sc, 512, stream(seed, S_HELDOUT))
    info = {
        "representation": "trained",
        "support_exact": rep.exact,
        "support": rep.as_dict(),
        "permutation": list(rep.permutation),
        "F": model.F.tolist(),
        **upstream_diagnostics(h_init, model.h, heldout, sc.p, seed),
        "history": _history_dicts(history),
        "seconds": time.perf_counter() - t0,
    }
    return model.h, info, model


def _method_config(cfg: ExperimentConfig, method: str, seed: int, regime: str):
    if method in ("ours", "erm_ud"):
        return to_finetune(cfg, seed, regime)
    if method == "wi":
        return to_finetune(cfg, seed, regime, kappa=0.0)
    if method == "tir":
        return to_finetune(cfg, seed, regime, use_q=False)
    if method == "erm_d":
        # no transfer: q reads all of x, the transferred head stays at zero
        return to_finetune(cfg, seed, regime, use_q=True, train_head=False, kappa=0.0,
                           A_init="identity", train_A=False, d_star=cfg.scenario.d)
    raise ValueError(f"unknown method {method!r}")


def fit_and_score(method, h, train, val, test, sc, cfg: ExperimentConfig, seed, regime, ri, perm=None):
    """Fine-tune one method and score it on the shared splits."""
    fcfg = _method_config(cfg, method, seed, regime)
    d_star = fcfg.d_star
    if cfg.select_dstar and fcfg.use_q and method != "erm_d" and len(fcfg.d_star_candidates) > 1:
        d_star, _ = select_dstar(h, train, val, fcfg.d_star_candidates, fcfg)
    model, history = finetune(h, train, fcfg, stream(seed, S_FT, ri), d_star=d_star)
    test_ev = evaluate(model, test, fcfg.loss_kind)
    val_ev = evaluate(model, val, fcfg.loss_kind)
    ex, se = oracle_excess_risk(lambda X: predict(model, X), sc, cfg.n_mc, stream(seed, S_MC, ri), conditional=True)
    dcov_hq = dcov_fast(h(test.X[:1000]), aux_output(model, test.X[:1000])).value if model.q_enabled else 0.0
    support = None
    if regime == "complete" and perm is not None:
        support = support_recovery(model.F_T[list(perm)][None, :], sc.target_support[None, :], cfg.support_threshold).exact
    return DownstreamRow(
        method, regime, len(train) + len(val), seed, int(model.d_star), test_ev["loss"],
        test_ev.get("accuracy"), val_ev["loss"], ex, se, float(dcov_hq),
        float(np.abs(model.F_T).sum()), support, _history_dicts(history),
    ), model


def run_baselines(h_hat, splits, sc, cfg: ExperimentConfig, seed, regime, ri, methods=None, h_ud=None, perm=None):
    """Score each method on identical ``(train, val, test)`` splits and seeds."""
    train, val, test = splits
    methods = list(methods) if methods is not None else ["ours", *cfg.baselines.enabled()]
    rows = []
    for method in methods:
        h = h_ud if method == "erm_ud" else h_hat
        if h is None:
            continue
        row, _ = fit_and_score(method, h, train, val, test, sc, cfg, seed, regime, ri, perm)
        rows.append(row)
    return rows


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: Path | None = None) -> MetricsRecord:
    t0 = time.perf_counter()
    record = MetricsRecord(f"{cfg.name}-s{seed}", seed, cfg.n, cfg.m, {}, [], 0.0)
    stage = "upstream"
    try:
        h_hat, info, model = train_representation(cfg, seed)
        record.upstream = info
        if out_dir is not None and model is not None:
            (out_dir / "models").mkdir(exist_ok=True)
            save_model(out_dir / "models" / f"upstream_s{seed}.json", model)
        h_ud = None
        if cfg.baselines.erm_ud and cfg.representation == "trained":
            stage = "upstream-erm_ud"
            h_ud, _, _ = train_representation(cfg, seed, lam=0.0, tau=0.0)
        for ri, regime in enumerate(cfg.regimes):
            stage = f"downstream-{regime}"
            sc = to_scenario(cfg, regime)
            data = gen_downstream(sc, cfg.m, stream(seed, S_DOWN_DATA, ri))
            train, val = _split(data, cfg.val_fraction, stream(seed, S_SPLIT, ri))
            test = gen_downstream(sc, cfg.test_rows, stream(seed, S_TEST, ri))
            record.rows.extend(
                run_baselines(h_hat, (train, val, test), sc, cfg, seed, regime, ri, h_ud=h_ud, perm=info["permutation"])
            )
    except Exception as exc:
        record.partial, record.failed_stage = True, stage
        err = StageError(stage, exc)
        err.record = record
        raise err from exc
    finally:
        record.wall_clock = time.perf_counter() - t0
    return record


def write_outputs(out_dir: Path, cfg: ExperimentConfig, records: list[MetricsRecord]):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(dump_config(cfg))
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for rec in records:
            for row in rec.rows:
                d = asdict(row)
                d.pop("history")
                w.writerow({"run_id": rec.run_id, "seed": rec.seed, "n": rec.n, **d})
    summary = {
        "name": cfg.name,
        "partial": any(r.partial for r in records),
        "records": [asdict(r) for r in records],
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True, default=float) + "\n")


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> list[MetricsRecord]:
    """Run every seed; write ``config.json``, ``metrics.csv``, ``summary.json`` and models.

    If a stage fails, the records finished so far plus the failed one are
    written with ``partial`` set before the stage-tagged error propagates.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for seed in cfg.seeds:
        try:
            records.append(run_seed(cfg, seed, out))
        except StageError as exc:
            records.append(exc.record)
            write_outputs(out, cfg, records)
            raise
    write_outputs(out, cfg, records)
    return records


# ---------------------------------------------------------------- m-sweeps


def fit_loglog_slope(ms, risks):
    """OLS slope of ``log(risk)`` on ``log(m)`` and its standard error."""
    x = np.log(np.asarray(ms, dtype=float))
    y = np.log(np.asarray(risks, dtype=float))
    if len(x) < 3:
        raise ValueError("need at least 3 points for a slope and its standard error")
    xc = x - x.mean()
    slope = float((xc * (y - y.mean())).sum() / (xc * xc).sum())
    resid = y - y.mean() - slope * xc
    se = float(math.sqrt((resid * resid).sum() / (len(x) - 2) / (xc * xc).sum()))
    return slope, se


def check_sweep_design(m_list, seeds):
    ms = sorted(set(int(m) for m in m_list))
    if len(ms) < 4:
        raise ValueError("a sweep needs at least 4 distinct m values")
    if math.log10(ms[-1] / ms[0]) < 1.5:
        raise ValueError("m values must span at least 1.5 decades")
    if len(set(seeds)) < 5:
        raise ValueError("a sweep needs at least 5 seeds")
    return ms


def sweep_m(cfg: ExperimentConfig, m_list, seeds, regimes=None, excess_fn=None, method="ours", representations=None):
    """Mean excess risk per ``(regime, m)`` and a fitted log-log slope per regime.

    ``excess_fn(regime, m, seed)`` replaces training when given.
    ``representations`` maps seed to an already trained ``h``.  Returns
    ``(table, slopes)``: table rows are dicts, slopes map regime to
    ``{"slope", "se"}``.
    """
    ms = check_sweep_design(m_list, seeds)
    regimes = list(regimes or cfg.regimes)
    cells = {(rg, m): [] for rg in regimes for m in ms}
    for seed in seeds:
        h = (representations or {}).get(seed)
        if excess_fn is None and h is None:
            h, _, _ = train_representation(cfg, seed)
        for ri, regime in enumerate(regimes):
            sc = to_scenario(cfg, regime)
            for m in ms:
                if excess_fn is not None:
                    cells[(regime, m)].append(float(excess_fn(regime, m, seed)))
                    continue
                data = gen_downstream(sc, m, stream(seed, S_DOWN_DATA, ri, m))
                fcfg = _method_config(cfg, method, seed, regime)
                model, _ = finetune(h, data, fcfg, stream(seed, S_FT, ri, m))
                ex, _ = oracle_excess_risk(lambda X: predict(model, X), sc, cfg.n_mc, stream(seed, S_MC, ri), conditional=True)
                cells[(regime, m)].append(ex)
                log.info("sweep seed %d %s m=%d excess %.4g", seed, regime, m, ex)
    table, slopes = [], {}
    for regime in regimes:
        means = []
        for m in ms:
            vals = np.asarray(cells[(regime, m)])
            se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else float("nan")
            table.append({"regime": regime, "m": m, "mean_excess": float(vals.mean()), "se": se, "n_seeds": len(vals)})
            means.append(float(vals.mean()))
        slope, se = fit_loglog_slope(ms, means)
        slopes[regime] = {"slope": slope, "se": se}
    return table, slopes


def write_sweep(out_dir, table, slopes):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["regime", "m", "mean_excess", "se", "n_seeds"], lineterminator="\n")
        w.writeheader()
        w.writerows(table)
    (out / "slopes.json").write_text(json.dumps(slopes, indent=1, sort_keys=True) + "\n")
