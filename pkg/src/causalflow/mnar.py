"""Value-dependent (missing-not-at-random) masking of covariate cells at a calibrated rate."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import AlreadyMasked, InvalidConfig, NoConvergence
from .synthgen import PanelDataset, rng_stream

RATES = (0.30, 0.50, 0.80)


@dataclass(frozen=True)
class MnarConfig:
    target_rate: float = 0.30
    self_coeff: float = 1.0
    other_coeff: float = 0.3
    outcome_coeff: float = 0.5
    treatment_coeff: float = 0.2
    intercept: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.target_rate < 1.0:
            raise InvalidConfig(f"target_rate must lie in (0, 1), got {self.target_rate}")


def _standardize(x: np.ndarray, axis) -> np.ndarray:
    mean = x.mean(axis=axis, keepdims=True)
    sd = np.maximum(x.std(axis=axis, keepdims=True), 1e-8)
    return (x - mean) / sd


def missingness_logits(dataset: PanelDataset, config: MnarConfig) -> np.ndarray:
    """Linear predictor without the intercept, one entry per covariate cell ``[N, T, d]``."""
    if dataset.is_masked:
        raise AlreadyMasked("dataset already carries a missingness mask")
    x = _standardize(dataset.covariates, axis=(0, 1))
    y = _standardize(dataset.outcome, axis=None)
    d = x.shape[2]
    if d > 1:
        others = (x.sum(axis=2, keepdims=True) - x) / (d - 1)
    else:
        others = np.zeros_like(x)
    return (
        config.self_coeff * x
        + config.other_coeff * others
        + config.treatment_coeff * dataset.treatment[:, :, None]
        + config.outcome_coeff * y[:, :, None]
    )


def _mean_sigmoid(logits: np.ndarray, b: float) -> float:
    return float(np.mean(0.5 * (1.0 + np.tanh(0.5 * (logits + b)))))


def calibrate_intercept(dataset: PanelDataset, config: MnarConfig, tol: float = 1e-6, max_iter: int = 100) -> float:
    """Bisection on the intercept so the mean masking probability hits the target rate."""
    logits = missingness_logits(dataset, config)
    lo, hi = -20.0, 20.0
    target = config.target_rate
    if not _mean_sigmoid(logits, lo) <= target <= _mean_sigmoid(logits, hi):
        raise NoConvergence(f"target rate {target} unreachable with intercept in [-20, 20]")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        rate = _mean_sigmoid(logits, mid)
        if abs(rate - target) < tol:
            return mid
        if rate < target:
            lo = mid
        else:
            hi = mid
    raise NoConvergence(f"intercept bisection did not reach tolerance {tol} in {max_iter} iterations")


def apply_mnar(dataset: PanelDataset, config: MnarConfig) -> PanelDataset:
    """Mask covariate cells; the complete values move to the eval-only ``truth`` array."""
    logits = missingness_logits(dataset, config)
    b = calibrate_intercept(dataset, config) if config.intercept is None else config.intercept
    p = 0.5 * (1.0 + np.tanh(0.5 * (logits + b)))
    u = rng_stream(config.seed, f"mnar/{dataset.benchmark}").random(p.shape)
    mask = (u < p).astype(np.uint8)
    truth = dataset.covariates.copy()
    masked = np.where(mask.astype(bool), np.nan, truth)
    out = replace(dataset, covariates=masked, mask=mask, truth=truth, extra=dict(dataset.extra))
    out.extra["mnar"] = {**config.__dict__, "intercept": b}
    return out
