"""Estimator reliability metrics, imputation quality metrics, ranks and bootstrap intervals.

All functions take plain arrays. Outcome arrays are ``[N, T]`` (patients by time) and an
optional boolean ``valid`` array of the same shape restricts averages to rows at risk.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import (
    ConfigMismatch,
    FewerThanFourPatients,
    NoMaskedCells,
    TooFewPatients,
    ZeroTruthVariance,
)


def _valid(shape, valid) -> np.ndarray:
    return np.ones(shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)


def _masked_mean(values: np.ndarray, weights: np.ndarray, axis=0) -> np.ndarray:
    count = weights.sum(axis=axis)
    total = np.where(weights, values, 0.0).sum(axis=axis)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


# -- hazard ratio -------------------------------------------------------------


def hazard_ratio(y_treated, y_control, valid=None, method: str = "incidence_ratio", kind: str = "cumulative") -> float:
    """Hazard ratio of treated to control from per-row event probabilities.

    ``incidence_ratio`` divides the mean treated incidence by the mean control incidence over
    all valid rows. ``cumulative_hazard`` builds per-arm incidence curves, converts them to
    average hazards ``-log(1 - F(t)) / t`` and takes their ratio.
    """
    y1 = np.asarray(y_treated, dtype=float)
    y0 = np.asarray(y_control, dtype=float)
    w = _valid(y1.shape, valid)
    if method == "incidence_ratio":
        num = y1[w].sum()
        den = y0[w].sum()
        return float(num / den) if den != 0 else float("nan")
    if method != "cumulative_hazard":
        raise ValueError(f"unknown hazard ratio method {method!r}")
    f = []
    for arr in (y1, y0):
        curve = _masked_mean(arr, w, axis=0)
        if kind == "hazard":
            curve = 1.0 - np.cumprod(1.0 - np.clip(curve, 0.0, 1.0))
            times = np.arange(1, len(curve) + 1, dtype=float)
        else:
            times = np.arange(len(curve), dtype=float)
        keep = (times > 0) & np.isfinite(curve)
        curve = np.clip(curve[keep], 0.0, 1.0 - 1e-12)
        f.append(np.mean(-np.log1p(-curve) / times[keep]))
    return float(f[0] / f[1]) if f[1] != 0 else float("nan")


# -- estimator reliability ------------------------------------------------------


def quartile_assignment(true_y0, true_y1, valid=None) -> np.ndarray:
    """Quartile label 0..3 per patient, ascending in mean true ITE; ties by patient index."""
    ite = np.asarray(true_y1, dtype=float) - np.asarray(true_y0, dtype=float)
    w = _valid(ite.shape, valid)
    n = ite.shape[0]
    if n < 4:
        raise FewerThanFourPatients(f"need at least 4 patients, got {n}")
    tau_bar = _masked_mean(ite.T, w.T, axis=0)
    tau_bar = np.where(np.isfinite(tau_bar), tau_bar, np.inf)
    order = np.lexsort((np.arange(n), tau_bar))
    labels = np.empty(n, dtype=int)
    for q, chunk in enumerate(np.array_split(order, 4)):
        labels[chunk] = q
    return labels


def _group_ate(y0, y1, w, members) -> np.ndarray:
    m1 = _masked_mean(y1[members], w[members], axis=0)
    m0 = _masked_mean(y0[members], w[members], axis=0)
    return m1 - m0


def quartile_calibration(pred_y0, pred_y1, true_y0, true_y1, valid=None, quartiles=None) -> dict:
    """Per-quartile MAE and Bias of the subgroup ATE trajectories."""
    p0, p1, t0, t1 = (np.asarray(a, dtype=float) for a in (pred_y0, pred_y1, true_y0, true_y1))
    w = _valid(t0.shape, valid)
    labels = quartile_assignment(t0, t1, w) if quartiles is None else np.asarray(quartiles)
    mae, bias = [], []
    for q in range(4):
        members = labels == q
        diff = _group_ate(p0, p1, w, members) - _group_ate(t0, t1, w, members)
        diff = diff[np.isfinite(diff)]
        mae.append(float(np.mean(np.abs(diff))) if diff.size else float("nan"))
        bias.append(float(np.mean(diff)) if diff.size else float("nan"))
    return {"mae": mae, "bias": bias, "quartiles": labels}


def arm_error(pred_arm, true_arm, valid=None) -> float:
    """Mean over time of the absolute gap between predicted and true arm means."""
    p = np.asarray(pred_arm, dtype=float)
    t = np.asarray(true_arm, dtype=float)
    w = _valid(t.shape, valid)
    gap = np.abs(_masked_mean(p, w, axis=0) - _masked_mean(t, w, axis=0))
    gap = gap[np.isfinite(gap)]
    return float(gap.mean()) if gap.size else float("nan")


def variance_ratio_q4(pred_y0, pred_y1, true_y0, true_y1, valid=None, quartiles=None) -> float:
    """Predicted over true outcome variance inside the top true-ITE quartile.

    Averaged over both arms and all time steps; steps where the true variance is zero are skipped.
    """
    p0, p1, t0, t1 = (np.asarray(a, dtype=float) for a in (pred_y0, pred_y1, true_y0, true_y1))
    w = _valid(t0.shape, valid)
    labels = quartile_assignment(t0, t1, w) if quartiles is None else np.asarray(quartiles)
    q4 = labels == 3
    ratios = []
    for pred, true in ((p0, t0), (p1, t1)):
        for t in range(true.shape[1]):
            rows = q4 & w[:, t]
            if rows.sum() < 2:
                continue
            vt = np.var(true[rows, t])
            if vt == 0:
                continue
            ratios.append(np.var(pred[rows, t]) / vt)
    if not ratios:
        raise ZeroTruthVariance("true outcome variance is zero in every Q4 (arm, time) cell")
    return float(np.mean(ratios))


@dataclass
class ReliabilityReport:
    model: str
    benchmark: str
    seed: int
    mae_q: list[float]
    bias_q: list[float]
    err_a0: float
    err_a1: float
    vr_q4: float
    ate_true: float
    ate_pred: float
    hr_true: float | None = None
    hr_pred: float | None = None

    @property
    def bias_ratio(self) -> float:
        return abs(self.bias_q[0]) / self.mae_q[0] if self.mae_q[0] > 0 else 0.0

    @property
    def mean_arm_error(self) -> float:
        return 0.5 * (self.err_a0 + self.err_a1)

    @property
    def hr_deviation(self) -> float | None:
        if self.hr_true is None or self.hr_pred is None:
            return None
        return abs(self.hr_true - self.hr_pred)

    def numbers(self) -> list[float]:
        vals = [*self.mae_q, *self.bias_q, self.err_a0, self.err_a1, self.vr_q4, self.ate_pred]
        if self.hr_pred is not None:
            vals.append(self.hr_pred)
        return vals

    def to_dict(self) -> dict:
        out = asdict(self)
        out["bias_ratio"] = self.bias_ratio
        out["mean_arm_error"] = self.mean_arm_error
        out["hr_deviation"] = self.hr_deviation
        return out


def reliability_report(model, benchmark, seed, pred_y0, pred_y1, true_y0, true_y1, valid=None, hr_kind=None) -> ReliabilityReport:
    cal = quartile_calibration(pred_y0, pred_y1, true_y0, true_y1, valid)
    w = _valid(np.shape(true_y0), valid)
    p0, p1, t0, t1 = (np.asarray(a, dtype=float) for a in (pred_y0, pred_y1, true_y0, true_y1))
    hr_true = hr_pred = None
    if hr_kind is not None:
        hr_true = hazard_ratio(t1, t0, w, kind=hr_kind)
        hr_pred = hazard_ratio(p1, p0, w, kind=hr_kind)
    return ReliabilityReport(
        model=model,
        benchmark=benchmark,
        seed=int(seed),
        mae_q=cal["mae"],
        bias_q=cal["bias"],
        err_a0=arm_error(p0, t0, w),
        err_a1=arm_error(p1, t1, w),
        vr_q4=variance_ratio_q4(p0, p1, t0, t1, w, cal["quartiles"]),
        ate_true=float((t1 - t0)[w].mean()),
        ate_pred=float((p1 - p0)[w].mean()),
        hr_true=hr_true,
        hr_pred=hr_pred,
    )


def _sign(x: float) -> int:
    return int(np.sign(x))


def reliability_criteria(reports: Sequence[ReliabilityReport], bias_benchmarks: Iterable[str] | None = None) -> dict:
    """Five binary criteria per model. ``None`` marks a criterion that cannot be evaluated.

    Bias is judged on ``bias_benchmarks`` (default: ``ldl`` when present, else every benchmark).
    """
    by_model: dict[str, list[ReliabilityReport]] = {}
    for r in reports:
        by_model.setdefault(r.model, []).append(r)
    benchmarks = sorted({r.benchmark for r in reports})
    if bias_benchmarks is None:
        bias_benchmarks = ["ldl"] if "ldl" in benchmarks else benchmarks
    bias_benchmarks = list(bias_benchmarks)

    def seed_mean(model, bench, getter):
        vals = [getter(r) for r in by_model[model] if r.benchmark == bench]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    arm_wins = {m: 0 for m in by_model}
    arm_evaluable = len(by_model) >= 2 and len(benchmarks) >= 2
    if arm_evaluable:
        for bench in benchmarks:
            errs = {m: seed_mean(m, bench, lambda r: r.mean_arm_error) for m in by_model}
            errs = {m: e for m, e in errs.items() if e is not None and math.isfinite(e)}
            if errs:
                best = min(errs.values())
                for m, e in errs.items():
                    if e == best:
                        arm_wins[m] += 1

    out = {}
    for model, rs in by_model.items():
        model_benches = sorted({r.benchmark for r in rs})
        ratios = [seed_mean(model, b, lambda r: r.bias_ratio) for b in bias_benchmarks if b in model_benches]
        bias_ok = None if not ratios else all(x is not None and x < 0.5 for x in ratios)
        vrs = [seed_mean(model, b, lambda r: r.vr_q4) for b in model_benches]
        tail_ok = all(v is not None and abs(v - 1.0) < 0.5 for v in vrs)
        hr_checks = []
        stable = all(all(math.isfinite(v) for v in r.numbers()) for r in rs)
        for b in model_benches:
            with_hr = [r for r in rs if r.benchmark == b and r.hr_pred is not None and r.hr_true is not None]
            if not with_hr:
                continue
            mean_pred = float(np.mean([r.hr_pred for r in with_hr]))
            hr_checks.append(_sign(1.0 - mean_pred) == _sign(1.0 - with_hr[0].hr_true))
            if len({_sign(1.0 - r.hr_pred) for r in with_hr}) > 1:
                stable = False
        out[model] = {
            "Bias": bias_ok,
            "Tail": tail_ok,
            "HR": all(hr_checks) if hr_checks else None,
            "Arm": (arm_wins[model] >= 2) if arm_evaluable else None,
            "Stable": stable,
        }
    return out


# -- imputation quality ---------------------------------------------------------


def _lag1_autocorrelation(z: np.ndarray) -> float:
    """Mean lag-1 Pearson correlation over (patient, column) series, skipping undefined ones."""
    n, t, d = z.shape
    if t < 3:
        return float("nan")
    a = z[:, :-1, :]
    b = z[:, 1:, :]
    defined = (np.ptp(a, axis=1) > 0) & (np.ptp(b, axis=1) > 0)
    da = a - a.mean(axis=1, keepdims=True)
    db = b - b.mean(axis=1, keepdims=True)
    num = (da * db).sum(axis=1)
    den = np.sqrt((da**2).sum(axis=1) * (db**2).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = num / den
    r = r[defined]
    return float(r.mean()) if r.size else float("nan")


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    dx = x - x.mean()
    dy = y - y.mean()
    return float((dx * dy).sum() / np.sqrt((dx**2).sum() * (dy**2).sum()))


def outcome_correlations(z: np.ndarray, outcome: np.ndarray, valid=None) -> np.ndarray:
    """Pooled Pearson correlation of every covariate column with the outcome."""
    w = _valid(outcome.shape, valid)
    y = outcome[w]
    return np.array([_pearson(z[:, :, j][w], y) for j in range(z.shape[2])])


@dataclass
class BiomarkerMetrics:
    mae: float
    rmse: float
    delta_ac: float
    cse: float
    inf_y: float
    ac: float
    ac_truth: float


def imputation_biomarker_metrics(imputed, truth, mask, outcome, valid=None) -> BiomarkerMetrics:
    imputed = np.asarray(imputed, dtype=float)
    truth = np.asarray(truth, dtype=float)
    m = np.asarray(mask).astype(bool)
    if not m.any():
        raise NoMaskedCells("no masked cells to evaluate")
    err = imputed[m] - truth[m]
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err**2)))
    ac = _lag1_autocorrelation(imputed)
    ac_truth = _lag1_autocorrelation(truth)
    transitions = ~m[:, :-1, :] & m[:, 1:, :]
    if transitions.any():
        cse = float(np.mean(np.abs(imputed[:, 1:, :][transitions] - truth[:, 1:, :][transitions])))
    else:
        cse = float("nan")
    kappa_hat = outcome_correlations(imputed, np.asarray(outcome, dtype=float), valid)
    kappa = outcome_correlations(truth, np.asarray(outcome, dtype=float), valid)
    return BiomarkerMetrics(
        mae=mae,
        rmse=rmse,
        delta_ac=abs(ac - ac_truth),
        cse=cse,
        inf_y=float(np.mean(kappa_hat - kappa)),
        ac=ac,
        ac_truth=ac_truth,
    )


@dataclass
class EstimatorRun:
    """Counterfactual predictions of one trained estimator next to the stored truth."""

    config_hash: str
    y0_hat: np.ndarray
    y1_hat: np.ndarray
    y0_true: np.ndarray
    y1_true: np.ndarray
    valid: np.ndarray | None = None


@dataclass
class CausalLayer:
    q1_mae: float
    q4_mae: float
    mean_err_a: float
    vr_q4: float
    abs_delta_ate: float
    ate_hat: float
    ate_true: float


def causal_layer(run: EstimatorRun) -> CausalLayer:
    w = _valid(np.shape(run.y0_true), run.valid)
    cal = quartile_calibration(run.y0_hat, run.y1_hat, run.y0_true, run.y1_true, w)
    e0 = arm_error(run.y0_hat, run.y0_true, w)
    e1 = arm_error(run.y1_hat, run.y1_true, w)
    ate_hat = float((run.y1_hat - run.y0_hat)[w].mean())
    ate_true = float((run.y1_true - run.y0_true)[w].mean())
    return CausalLayer(
        q1_mae=cal["mae"][0],
        q4_mae=cal["mae"][3],
        mean_err_a=0.5 * (e0 + e1),
        vr_q4=variance_ratio_q4(run.y0_hat, run.y1_hat, run.y0_true, run.y1_true, w, cal["quartiles"]),
        abs_delta_ate=abs(ate_hat - ate_true),
        ate_hat=ate_hat,
        ate_true=ate_true,
    )


def downstream_causal_metrics(runs: Mapping[str, EstimatorRun]) -> dict[str, CausalLayer]:
    hashes = {run.config_hash for run in runs.values()}
    if len(hashes) > 1:
        raise ConfigMismatch(f"estimator configurations differ across imputers: {sorted(hashes)}")
    return {name: causal_layer(run) for name, run in runs.items()}


@dataclass
class ImputationReport:
    imputer: str
    rate: float
    biomarker: BiomarkerMetrics
    causal: CausalLayer | None = None
    extra: dict = field(default_factory=dict)

    def flat(self) -> dict:
        row = {"imputer": self.imputer, "rate": self.rate}
        row.update({k: v for k, v in asdict(self.biomarker).items()})
        if self.causal is not None:
            row.update(asdict(self.causal))
        row.update(self.extra)
        return row


# per-metric orientation for rank tables: "min" ranks small values first, "abs" ranks |v| small first,
# "dev1" ranks |v - 1| small first
RANK_METRICS = {
    "mae": "min",
    "rmse": "min",
    "delta_ac": "min",
    "cse": "min",
    "inf_y": "abs",
    "q1_mae": "min",
    "mean_err_a": "min",
    "abs_delta_ate": "min",
}


def rank_table(rows: Sequence[dict], metrics: Mapping[str, str] | None = None, group_key: str = "rate", item_key: str = "imputer") -> list[dict]:
    """Per-metric ranks (1 = best, ties averaged) within each group, plus the mean rank."""
    metrics = dict(RANK_METRICS if metrics is None else metrics)
    groups: dict = {}
    for row in rows:
        groups.setdefault(row[group_key], []).append(row)
    out = []
    for g in sorted(groups):
        members = groups[g]
        ranked = [{item_key: r[item_key], group_key: g} for r in members]
        used = []
        for name, orient in metrics.items():
            if not all(name in r for r in members):
                continue
            vals = np.array([float(r[name]) for r in members])
            if orient == "abs":
                vals = np.abs(vals)
            elif orient == "dev1":
                vals = np.abs(vals - 1.0)
            vals = np.where(np.isfinite(vals), vals, np.inf)
            ranks = rankdata(vals, method="average")
            for rr, rank in zip(ranked, ranks):
                rr[f"rank_{name}"] = float(rank)
            used.append(name)
        for rr in ranked:
            rr["mean_rank"] = float(np.mean([rr[f"rank_{n}"] for n in used])) if used else float("nan")
        out.extend(sorted(ranked, key=lambda r: (r["mean_rank"], str(r[item_key]))))
    return out


# -- bootstrap ----------------------------------------------------------------


def bootstrap_ci(values, replicates: int = 500, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile interval of patient-resampled means. 2-D input is averaged per patient first."""
    vals = np.asarray(values, dtype=float)
    if vals.ndim > 1:
        vals = np.nanmean(vals.reshape(vals.shape[0], -1), axis=1)
    n = vals.shape[0]
    if n < 2:
        raise TooFewPatients(f"bootstrap needs at least 2 patients, got {n}")
    rng = np.random.default_rng(seed)
    means = np.empty(replicates)
    chunk = max(1, 4_000_000 // n)
    for start in range(0, replicates, chunk):
        stop = min(replicates, start + chunk)
        idx = rng.integers(0, n, size=(stop - start, n))
        means[start:stop] = vals[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo), float(hi)
