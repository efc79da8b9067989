"""Synthetic longitudinal benchmarks with stored potential outcomes under both arms.

Every generator draws each source of randomness from its own counter-based stream,
always in patient-major ``(N, T)`` layout, so growing ``n_patients`` leaves the
earlier patients untouched.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .dag import CausalGraph
from .errors import InvalidConfig, MissingPotentialOutcomes
from .metrics import hazard_ratio

BENCHMARKS = ("simple3", "ldl", "cox", "cvd")

# outcome kinds: continuous values, cumulative event indicator, per-step event indicator
OUTCOME_KINDS = ("continuous", "cumulative", "hazard")


@dataclass
class PanelDataset:
    benchmark: str
    seed: int
    covariate_names: list[str]
    covariates: np.ndarray  # [N, T, d], NaN where masked
    treatment: np.ndarray  # [N, T]
    outcome: np.ndarray  # [N, T]
    mask: np.ndarray  # [N, T, d], 1 = missing
    po_control: np.ndarray | None
    po_treated: np.ndarray | None
    alive: np.ndarray  # [N, T]
    outcome_kind: str = "continuous"
    truth: np.ndarray | None = None  # eval-only copy of covariates before masking
    patient_ids: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.patient_ids is None:
            self.patient_ids = np.arange(self.covariates.shape[0])

    @property
    def n_patients(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_steps(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[2]

    @property
    def is_masked(self) -> bool:
        return bool(self.mask.any())

    @property
    def binary_outcome(self) -> bool:
        return self.outcome_kind != "continuous"

    @property
    def ite(self) -> np.ndarray:
        if self.po_control is None or self.po_treated is None:
            raise MissingPotentialOutcomes(self.benchmark)
        return self.po_treated - self.po_control

    def subset(self, idx) -> "PanelDataset":
        idx = np.asarray(idx)
        take = lambda a: None if a is None else a[idx]
        return replace(
            self,
            covariates=self.covariates[idx],
            treatment=self.treatment[idx],
            outcome=self.outcome[idx],
            mask=self.mask[idx],
            po_control=take(self.po_control),
            po_treated=take(self.po_treated),
            alive=self.alive[idx],
            truth=take(self.truth),
            patient_ids=self.patient_ids[idx],
            extra=dict(self.extra),
        )

    def with_covariates(self, covariates: np.ndarray, **changes) -> "PanelDataset":
        return replace(self, covariates=covariates, extra=dict(self.extra), **changes)


@dataclass
class GeneratorConfig:
    seed: int = 0
    n_patients: int | None = None
    n_steps: int | None = None
    # LDL
    saturation_rate: float = 0.4
    ar_coef: float = 0.75
    ldl_baseline_mean: float = 127.0
    # Cox
    baseline_hazard: float = 0.5
    cox_beta: tuple = (0.2, -0.4, -0.3, 0.3, -0.5)
    cox_treatment_multiplier: float = 0.70
    # CVD
    sbp_lag_coefs: tuple = (0.20, -0.05, -0.02)

    def sizes(self, default_n: int, default_t: int) -> tuple[int, int]:
        n = default_n if self.n_patients is None else int(self.n_patients)
        t = default_t if self.n_steps is None else int(self.n_steps)
        if n <= 0 or t <= 0:
            raise InvalidConfig(f"n_patients and n_steps must be positive, got {n}, {t}")
        return n, t


def rng_stream(seed: int, name: str) -> np.random.Generator:
    key = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return np.random.Generator(np.random.Philox(key))


def _ar1(rng: np.random.Generator, n: int, t: int, rho: float, sd: float) -> np.ndarray:
    """Stationary AR(1) paths with marginal standard deviation ``sd``."""
    eta = rng.normal(size=(n, t))
    out = np.empty((n, t))
    out[:, 0] = sd * eta[:, 0]
    innov = sd * np.sqrt(1.0 - rho**2)
    for s in range(1, t):
        out[:, s] = rho * out[:, s - 1] + innov * eta[:, s]
    return out


def _panel(benchmark, config, names, x, a, y, po0, po1, alive=None, kind="continuous") -> PanelDataset:
    n, t, d = x.shape
    return PanelDataset(
        benchmark=benchmark,
        seed=config.seed,
        covariate_names=list(names),
        covariates=x.astype(np.float64),
        treatment=a.astype(np.float64),
        outcome=y.astype(np.float64),
        mask=np.zeros((n, t, d), dtype=np.uint8),
        po_control=po0.astype(np.float64),
        po_treated=po1.astype(np.float64),
        alive=np.ones((n, t)) if alive is None else alive.astype(np.float64),
        outcome_kind=kind,
    )


# -- graphs -----------------------------------------------------------------


def simple3_graph() -> CausalGraph:
    return CausalGraph.from_names(
        [("X1", "covariate"), ("T", "treatment"), ("Y", "outcome")],
        [("X1", "T"), ("T", "Y"), ("X1", "Y")],
    )


LDL_COVARIATES = ["bmi", "ldl_baseline", "response_marker"]


def ldl_graph() -> CausalGraph:
    nodes = [(c, "covariate") for c in LDL_COVARIATES] + [("treatment", "treatment"), ("ldl", "outcome")]
    edges = [
        ("bmi", "ldl_baseline"),
        ("response_marker", "treatment"),
        ("bmi", "ldl"),
        ("ldl_baseline", "ldl"),
        ("response_marker", "ldl"),
        ("treatment", "ldl"),
    ]
    return CausalGraph.from_names(nodes, edges)


COX_COVARIATES = [f"x{j}" for j in range(1, 6)]


def cox_graph() -> CausalGraph:
    nodes = [(c, "covariate") for c in COX_COVARIATES] + [("treatment", "treatment"), ("event", "outcome")]
    edges = [(c, "treatment") for c in COX_COVARIATES] + [(c, "event") for c in COX_COVARIATES]
    return CausalGraph.from_names(nodes, edges + [("treatment", "event")])


CVD_COVARIATES = [
    "age", "sex", "bmi", "tc", "hdl", "smoker", "diabetes", "htn", "fam_hx",
    "race_black", "race_asian", "race_hispanic", "race_other", "sbp", "sbp_final",
]


def cvd_graph() -> CausalGraph:
    nodes = [(c, "covariate") for c in CVD_COVARIATES] + [("treatment", "treatment"), ("cvd_event", "outcome")]
    edges = [
        ("age", "bmi"), ("age", "tc"), ("bmi", "tc"), ("age", "hdl"), ("bmi", "hdl"),
        ("bmi", "diabetes"),
        ("age", "htn"), ("tc", "htn"), ("smoker", "htn"),
        ("age", "sbp"), ("tc", "sbp"), ("smoker", "sbp"),
        ("htn", "treatment"),
        ("sbp", "sbp_final"), ("treatment", "sbp_final"),
    ]
    edges += [(c, "cvd_event") for c in CVD_COVARIATES]
    return CausalGraph.from_names(nodes, edges)


# -- generators ---------------------------------------------------------------


def gen_simple3(config: GeneratorConfig | None = None) -> tuple[PanelDataset, CausalGraph]:
    config = config or GeneratorConfig()
    n, T = config.sizes(10_000, 5)
    rng = lambda name: rng_stream(config.seed, f"simple3/{name}")
    t = np.arange(T, dtype=float)
    x1 = t / 4.0 + rng("x1").normal(size=(n, T))
    # the propensity is driven by the patient mean of X1^2 - sin(X1) + eps, eps ~ N(0, 0.25)
    mediator = x1**2 - np.sin(x1) + 0.5 * rng("mediator").normal(size=(n, T))
    p_treat = np.where(mediator.mean(axis=1) > 2.5, 0.2, 0.8)
    a = (rng("treatment").random(n) < p_treat).astype(float)
    a = np.repeat(a[:, None], T, axis=1)
    eps = rng("outcome").normal(size=(n, T))
    y0 = 3.0 * x1 + 0.25 * (t / T) + eps
    y1 = 3.0 * x1 - 0.50 * (t / T) + eps
    y = np.where(a == 1, y1, y0)
    ds = _panel("simple3", config, ["X1"], x1[:, :, None], a, y, y0, y1)
    return ds, simple3_graph()


def saturation(t, t_max: float, rate: float = 0.4):
    """Log-saturating dose response, 0 at t=0 and exactly 1 at t=t_max."""
    return np.log1p(rate * np.asarray(t, dtype=float)) / np.log1p(rate * t_max)


def gen_ldl(config: GeneratorConfig | None = None) -> tuple[PanelDataset, CausalGraph]:
    config = config or GeneratorConfig()
    n, T = config.sizes(10_000, 5)
    if T < 2:
        raise InvalidConfig("the LDL benchmark needs n_steps >= 2")
    rng = lambda name: rng_stream(config.seed, f"ldl/{name}")
    rho = config.ar_coef
    bmi_i = 27.0 + 4.0 * rng("bmi").normal(size=n)
    level = config.ldl_baseline_mean + 1.5 * (bmi_i - 27.0) + 20.0 * rng("level").normal(size=n)
    delta = rng("delta").uniform(0.20, 0.60, size=n)

    x = np.empty((n, T, 3))
    x[:, :, 0] = bmi_i[:, None] + _ar1(rng("bmi_noise"), n, T, rho, 0.5)
    x[:, :, 1] = level[:, None] + _ar1(rng("ldl_noise"), n, T, rho, 8.0)
    x[:, :, 2] = 10.0 * delta[:, None] + _ar1(rng("marker_noise"), n, T, rho, 0.5)

    # selection on gain: above-median responders (median of U(0.2, 0.6) is 0.4) favoured
    p_treat = np.where(delta > 0.4, 0.7, 0.3)
    a = np.repeat((rng("treatment").random(n) < p_treat).astype(float)[:, None], T, axis=1)

    sat = saturation(np.arange(T), T - 1, config.saturation_rate)
    y0 = level[:, None] + _ar1(rng("outcome_noise"), n, T, rho, 10.0)
    y1 = y0 * (1.0 - delta[:, None] * sat[None, :])
    y = np.where(a == 1, y1, y0)
    ds = _panel("ldl", config, LDL_COVARIATES, x, a, y, y0, y1)
    ds.extra["saturation"] = sat.tolist()
    return ds, ldl_graph()


def cox_hazard_ratios(x: np.ndarray, beta=(0.2, -0.4, -0.3, 0.3, -0.5)) -> np.ndarray:
    return np.exp(x @ np.asarray(beta, dtype=float))


def cumulative_incidence(t, baseline_hazard: float, hr) -> np.ndarray:
    return 1.0 - np.exp(-baseline_hazard * np.asarray(hr) * np.asarray(t, dtype=float))


def gen_cox(config: GeneratorConfig | None = None) -> tuple[PanelDataset, CausalGraph]:
    config = config or GeneratorConfig()
    n, T = config.sizes(30_000, 11)
    rng = lambda name: rng_stream(config.seed, f"cox/{name}")
    mu1 = np.array([3.0, 1.0, 2.0, 5.0, 0.0])
    mu2 = np.array([0.0, 2.0, 4.0, 5.0, 5.0])
    comp = rng("component").random(size=(n, 5)) < 0.5
    noise = rng("covariates").normal(size=(n, 5))
    # variances 0.01 and 0.04
    xb = np.where(comp, mu1 + 0.1 * noise, mu2 + 0.2 * noise)
    hr = cox_hazard_ratios(xb, config.cox_beta)
    p_treat = np.where(hr >= 0.5, 0.70, 0.30)
    a_i = (rng("treatment").random(n) < p_treat).astype(float)
    h0 = config.baseline_hazard
    mult = config.cox_treatment_multiplier
    unit_exp = rng("event").exponential(size=n)
    event_time = unit_exp / (h0 * hr * np.where(a_i == 1, mult, 1.0))

    t = np.arange(T, dtype=float)
    x = np.repeat(xb[:, None, :], T, axis=1)
    a = np.repeat(a_i[:, None], T, axis=1)
    y = (event_time[:, None] <= t[None, :]).astype(float)
    f0 = cumulative_incidence(t[None, :], h0, hr[:, None])
    f1 = cumulative_incidence(t[None, :], h0, mult * hr[:, None])
    ds = _panel("cox", config, COX_COVARIATES, x, a, y, f0, f1, kind="cumulative")
    return ds, cox_graph()


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


# expected baseline SBP from the recursion's own terms (age 55, TC ~5.2 mmol/L, 60% smokers);
# a fixed constant keeps patients independent of each other
SBP_REFERENCE = 70.0 + 0.5 * 55.0 + 0.15 * 5.2 + 10.0 * 0.6


def sbp_multiplier(lag1, lag2, lag3, coefs=(0.20, -0.05, -0.02)):
    c1, c2, c3 = coefs
    return 1.0 - (c1 * lag1 + c2 * lag2 + c3 * lag3)


def gen_cvd(config: GeneratorConfig | None = None) -> tuple[PanelDataset, CausalGraph]:
    config = config or GeneratorConfig()
    n, T = config.sizes(50_000, 10)
    rng = lambda name: rng_stream(config.seed, f"cvd/{name}")

    age0 = 55.0 + 10.0 * rng("age").normal(size=n)
    sex = (rng("sex").random(n) < 0.5).astype(float)
    race = rng("race").choice(5, size=n, p=[0.60, 0.15, 0.10, 0.10, 0.05])
    fam_hx = (rng("fam_hx").random(n) < 0.3).astype(float)
    smoker = (rng("smoker").random(n) < 0.6).astype(float)

    bmi_noise = rng("bmi").normal(size=(n, T))
    tc_noise = rng("tc").normal(size=(n, T))
    hdl_noise = rng("hdl").normal(size=(n, T))
    sbp_noise = rng("sbp").normal(size=(n, T))
    u_diab = rng("diabetes").random(size=(n, T))
    u_htn = rng("htn").random(size=(n, T))
    u_treat = rng("treatment").random(size=(n, T))
    u_event = rng("event").random(size=(n, T))

    cols = {c: np.zeros((n, T)) for c in CVD_COVARIATES}
    a = np.zeros((n, T))
    p0 = np.zeros((n, T))
    p1 = np.zeros((n, T))
    p_fact = np.zeros((n, T))
    y = np.zeros((n, T))
    alive = np.zeros((n, T))

    dead = np.zeros(n, dtype=bool)
    for t in range(T):
        age = age0 + t
        if t == 0:
            bmi = 27.0 + 0.05 * (age - 55.0) + 4.0 * bmi_noise[:, 0]
            tc = np.exp(np.log(5.2) + 0.002 * (age - 55.0) + 0.005 * (bmi - 27.0) + 0.15 * tc_noise[:, 0])
            hdl = np.clip(1.4 - 0.005 * (age - 55.0) - 0.015 * (bmi - 27.0) + 0.3 * hdl_noise[:, 0], 0.5, 3.5)
            diabetes = (u_diab[:, 0] < np.clip(0.003 * bmi, 0.0, 1.0)).astype(float)
            htn_logit = -0.5 + 0.06 * (age - 55.0) + 0.3 * (tc - 5.2) + 0.4 * smoker
            htn = (u_htn[:, 0] < _sigmoid(htn_logit)).astype(float)
            sbp = 70.0 + 0.5 * age + 0.15 * tc + 10.0 * smoker + 20.0 * sbp_noise[:, 0]
            treat = (u_treat[:, 0] < np.where(htn == 1, 0.70, 0.30)).astype(float)
        else:
            bmi = bmi + 0.5 * bmi_noise[:, t]
            tc = np.clip(tc + 0.25 * tc_noise[:, t], 2.5, 10.0)
            hdl = np.clip(hdl + 0.05 * hdl_noise[:, t], 0.5, 3.5)
            diabetes = np.maximum(diabetes, (u_diab[:, t] < 0.0005 * bmi).astype(float))
            htn_logit = -3.5 + 0.06 * (age - 55.0) + 0.3 * (tc - 5.2) + 0.4 * smoker
            htn = np.maximum(htn, (u_htn[:, t] < _sigmoid(htn_logit)).astype(float))
            sbp = 70.0 * sbp / SBP_REFERENCE + 0.5 * age + 0.15 * tc + 10.0 * smoker + 20.0 * sbp_noise[:, t]
            initiate = (htn == 1) & (treat == 0) & (u_treat[:, t] < 0.01)
            treat = np.maximum(treat, initiate.astype(float))
        sbp = np.clip(sbp, 80.0, 200.0)
        a[:, t] = treat

        lag = [a[:, t - k] if t - k >= 0 else np.zeros(n) for k in (1, 2, 3)]
        always = [np.full(n, 1.0 if t - k >= 0 else 0.0) for k in (1, 2, 3)]
        sbp_final = sbp * sbp_multiplier(*lag, config.sbp_lag_coefs)
        sbp_final_treated = sbp * sbp_multiplier(*always, config.sbp_lag_coefs)

        base = (
            -10.0 + 0.005 * age + 0.15 * sex + 0.03 * bmi - 0.01 * hdl + 0.01 * tc + 0.25 * smoker
            + 0.30 * diabetes + 0.20 * fam_hx + 0.10 * (race == 1) - 0.05 * (race == 2)
        )
        p0[:, t] = _sigmoid(base + 0.015 * sbp)
        p1[:, t] = _sigmoid(base + 0.015 * sbp_final_treated)
        p_fact[:, t] = _sigmoid(base + 0.015 * sbp_final)

        alive[:, t] = ~dead
        event = (u_event[:, t] < p_fact[:, t]) & ~dead
        y[:, t] = event
        dead |= event

        for name, val in (
            ("age", age), ("sex", sex), ("bmi", bmi), ("tc", tc), ("hdl", hdl), ("smoker", smoker),
            ("diabetes", diabetes), ("htn", htn), ("fam_hx", fam_hx), ("race_black", race == 1),
            ("race_asian", race == 2), ("race_hispanic", race == 3), ("race_other", race == 4),
            ("sbp", sbp), ("sbp_final", sbp_final),
        ):
            cols[name][:, t] = val

    x = np.stack([cols[c] for c in CVD_COVARIATES], axis=-1)
    ds = _panel("cvd", config, CVD_COVARIATES, x, a, y, p0, p1, alive=alive, kind="hazard")
    return ds, cvd_graph()


GENERATORS: dict[str, Callable[[GeneratorConfig | None], tuple[PanelDataset, CausalGraph]]] = {
    "simple3": gen_simple3,
    "ldl": gen_ldl,
    "cox": gen_cox,
    "cvd": gen_cvd,
}

GRAPHS = {"simple3": simple3_graph, "ldl": ldl_graph, "cox": cox_graph, "cvd": cvd_graph}


def generate(benchmark: str, config: GeneratorConfig | None = None) -> tuple[PanelDataset, CausalGraph]:
    if benchmark not in GENERATORS:
        raise InvalidConfig(f"unknown benchmark {benchmark!r}; expected one of {BENCHMARKS}")
    return GENERATORS[benchmark](config)


# -- oracles ------------------------------------------------------------------


def _require_po(dataset: PanelDataset):
    if dataset.po_control is None or dataset.po_treated is None:
        raise MissingPotentialOutcomes(f"dataset {dataset.benchmark!r} has no stored potential outcomes")


def oracle_ate(dataset: PanelDataset) -> float:
    """Mean of stored y(1) - y(0) over all (patient, time) rows still at risk."""
    _require_po(dataset)
    w = dataset.alive > 0
    return float((dataset.po_treated - dataset.po_control)[w].mean())


def oracle_hr(dataset: PanelDataset) -> float:
    _require_po(dataset)
    return hazard_ratio(dataset.po_treated, dataset.po_control, valid=dataset.alive > 0)
