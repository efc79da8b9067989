"""Counterfactual outcomes by abduction, intervention and re-decoding of treatment descendants."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyTestSet, NonSurvivalDataset, UntrainedModel
from .metrics import bootstrap_ci, hazard_ratio
from .synthgen import PanelDataset
from .training import CausalFlowModel


def _require_trained(model: CausalFlowModel) -> None:
    if not model.trained or model.normalizer is None:
        raise UntrainedModel("model has not been trained or loaded from a checkpoint")


def intervene(model: CausalFlowModel, z: np.ndarray, h: np.ndarray, v: np.ndarray, arm: int) -> np.ndarray:
    """Set the treatment to ``arm`` and re-decode only its descendants from the fixed noise ``z``."""
    flow = model.flow
    work = np.array(v, dtype=float, copy=True)
    work[:, model.t_node] = model.normalizer.a(float(arm))
    desc = model.flow_graph.descendants(model.t_node)
    order = [j for j in flow.order if j in desc]
    return flow.decode(z, h, work, order)


def aap(model: CausalFlowModel, v, h, arm: int) -> np.ndarray:
    """Counterfactual version of normalized row(s) ``v`` with context ``h`` under ``do(A = arm)``."""
    _require_trained(model)
    v = np.asarray(v, dtype=float)
    h = np.asarray(h, dtype=float)
    single = v.ndim == 1
    vb, hb = (v[None], h[None]) if single else (v, h)
    z, _ = model.flow.forward(vb, hb)
    out = intervene(model, z, hb, vb, arm)
    return out[0] if single else out


@dataclass
class CounterfactualResult:
    patient_ids: np.ndarray
    y0_hat: np.ndarray  # [N, T], original outcome units
    y1_hat: np.ndarray
    valid: np.ndarray  # rows that count towards summaries
    noise: np.ndarray  # abducted z, [N, T, D], shared by both arms
    v0: np.ndarray  # normalized counterfactual rows under each arm, [N, T, D]
    v1: np.ndarray

    @property
    def ite(self) -> np.ndarray:
        return self.y1_hat - self.y0_hat

    def arm_trajectories(self) -> tuple[np.ndarray, np.ndarray]:
        w = self.valid
        count = np.maximum(w.sum(axis=0), 1)
        return (np.where(w, self.y0_hat, 0).sum(axis=0) / count, np.where(w, self.y1_hat, 0).sum(axis=0) / count)


def counterfactuals(model: CausalFlowModel, dataset: PanelDataset, seed: int = 0) -> CounterfactualResult:
    """Both potential outcomes for every row of ``dataset`` with factual histories held fixed.

    Binary outcomes are dequantized with a seeded draw before abduction; decoded binary
    outcomes are read as event probabilities and clipped to [0, 1].
    """
    _require_trained(model)
    if dataset.n_patients == 0:
        raise EmptyTestSet("dataset has no patients")
    rng = np.random.default_rng([seed, 3])
    v, x_norm = model.assemble(dataset, rng, training=False)
    n, t, dim = v.shape
    ctx = model.context(x_norm).reshape(n * t, -1)
    flat = v.reshape(n * t, dim)
    z, _ = model.flow.forward(flat, ctx)
    arms = []
    for arm in (0, 1):
        arms.append(intervene(model, z, ctx, flat, arm).reshape(n, t, dim))
    ys = [model.normalizer.y_inv(a[:, :, model.y_node]) for a in arms]
    if model.binary_outcome:
        ys = [np.clip(y, 0.0, 1.0) for y in ys]
    return CounterfactualResult(
        patient_ids=np.asarray(dataset.patient_ids),
        y0_hat=ys[0],
        y1_hat=ys[1],
        valid=dataset.alive > 0,
        noise=z.reshape(n, t, dim),
        v0=arms[0],
        v1=arms[1],
    )


@dataclass
class AteEstimate:
    ate: float
    ci_low: float | None = None
    ci_high: float | None = None


def ate_from_result(result: CounterfactualResult, replicates: int = 0, level: float = 0.95, seed: int = 0) -> AteEstimate:
    w = result.valid
    if not w.any():
        raise EmptyTestSet("no valid rows to average over")
    ite = result.ite
    ate = float(ite[w].mean())
    if replicates <= 0:
        return AteEstimate(ate)
    per_patient = np.where(w, ite, np.nan)
    keep = w.any(axis=1)
    lo, hi = bootstrap_ci(per_patient[keep], replicates=replicates, level=level, seed=seed)
    return AteEstimate(ate, lo, hi)


def estimate_ate(model: CausalFlowModel, dataset: PanelDataset, replicates: int = 0, level: float = 0.95, seed: int = 0) -> AteEstimate:
    """Mean predicted ITE over valid rows, with an optional patient-bootstrap interval."""
    return ate_from_result(counterfactuals(model, dataset, seed=seed), replicates, level, seed)


def estimate_hr(model: CausalFlowModel, dataset: PanelDataset, method: str = "incidence_ratio", seed: int = 0) -> float:
    if dataset.outcome_kind == "continuous":
        raise NonSurvivalDataset(f"benchmark {dataset.benchmark!r} has a continuous outcome")
    result = counterfactuals(model, dataset, seed=seed)
    return hazard_ratio(result.y1_hat, result.y0_hat, result.valid, method=method, kind=dataset.outcome_kind)


def write_results_csv(result: CounterfactualResult, path: str | Path) -> None:
    n, t = result.y0_hat.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "t", "y0_hat", "y1_hat", "ite"])
        for i in range(n):
            for s in range(t):
                if result.valid[i, s]:
                    y0, y1 = result.y0_hat[i, s], result.y1_hat[i, s]
                    writer.writerow([int(result.patient_ids[i]), s, repr(float(y0)), repr(float(y1)), repr(float(y1 - y0))])


def write_summary_json(path: str | Path, ate: AteEstimate, hr: float | None = None) -> None:
    summary = {"ate": ate.ate, "hr": hr, "ci_low": ate.ci_low, "ci_high": ate.ci_high}
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
