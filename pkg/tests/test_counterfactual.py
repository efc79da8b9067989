import csv
import json

import numpy as np
import pytest
from helpers import random_model

from causalflow.counterfactual import (
    CounterfactualResult,
    aap,
    ate_from_result,
    counterfactuals,
    estimate_ate,
    estimate_hr,
    write_results_csv,
    write_summary_json,
)
from causalflow.errors import EmptyTestSet, NonSurvivalDataset, UntrainedModel
from causalflow.synthgen import BENCHMARKS
from causalflow.training import CausalFlowModel, TrainConfig


def rows(model, ds):
    v, x = model.assemble(ds, np.random.default_rng(0), training=False)
    n, t, d = v.shape
    return v.reshape(n * t, d), model.context(x).reshape(n * t, -1)


@pytest.mark.parametrize("benchmark", BENCHMARKS)
def test_factual_arm_reproduces_row(benchmark):
    model, ds, _ = random_model(benchmark)
    v, h = rows(model, ds)
    a = ds.treatment.reshape(-1)
    for arm in (0, 1):
        sel = a == arm
        out = aap(model, v[sel], h[sel], arm)
        assert np.abs(out - v[sel]).max() < 1e-8


@pytest.mark.parametrize("benchmark", BENCHMARKS)
def test_only_descendants_change(benchmark):
    model, ds, g = random_model(benchmark)
    v, h = rows(model, ds)
    v0, v1 = aap(model, v, h, 0), aap(model, v, h, 1)
    keep = [j for j in range(len(g)) if j not in g.descendants(g.treatment_index) and j != g.treatment_index]
    assert np.array_equal(v0[:, keep], v1[:, keep])
    assert np.array_equal(v0[:, keep], v[:, keep])


def test_simple3_covariate_identical_across_arms():
    model, ds, g = random_model("simple3")
    res = counterfactuals(model, ds)
    j = g.index("X1")
    assert np.array_equal(res.v0[:, :, j], res.v1[:, :, j])


def test_cvd_only_sbp_final_and_event_move():
    model, ds, g = random_model("cvd")
    res = counterfactuals(model, ds)
    moved = {g.names[j] for j in range(len(g)) if not np.array_equal(res.v0[:, :, j], res.v1[:, :, j])}
    assert moved == {"treatment", "sbp_final", "cvd_event"}


def test_noise_is_shared_between_arms():
    model, ds, g = random_model("ldl")
    res = counterfactuals(model, ds)
    n, t, d = res.noise.shape
    h = model.context(model.assemble(ds)[1]).reshape(n * t, -1)
    t_node = g.treatment_index
    for arm_rows in (res.v0, res.v1):
        z, _ = model.flow.forward(arm_rows.reshape(n * t, d), h)
        others = [j for j in range(d) if j != t_node]
        assert np.allclose(z[:, others], res.noise.reshape(n * t, d)[:, others], atol=1e-9)


def test_unconstrained_ordering_leaks_into_non_descendants():
    model, ds, g = random_model("ldl", variant="no-dag")
    v, h = rows(model, ds)
    v0, v1 = aap(model, v, h, 0), aap(model, v, h, 1)
    non_desc = [j for j in range(len(g)) if j not in g.descendants(g.treatment_index) and j != g.treatment_index]
    assert np.any(v0[:, non_desc] != v1[:, non_desc])


def test_untrained_model_is_refused():
    _, ds, g = random_model("simple3")
    fresh = CausalFlowModel.for_dataset(ds, g, TrainConfig(hidden_dim=4, flow_hidden=4))
    with pytest.raises(UntrainedModel):
        counterfactuals(fresh, ds)


def constant_result(n=30, t=4, gap=0.0):
    r = np.random.default_rng(1)
    y0 = r.normal(size=(n, t))
    return CounterfactualResult(np.arange(n), y0, y0 + gap, np.ones((n, t), bool), np.zeros((n, t, 3)), None, None)


def test_identical_arms_give_zero_ate():
    assert ate_from_result(constant_result()).ate == 0.0


def test_bootstrap_interval_contains_estimate():
    model, ds, _ = random_model("ldl", n=150)
    est = estimate_ate(model, ds, replicates=500)
    assert est.ci_low <= est.ate <= est.ci_high


def test_hazard_ratio_needs_event_outcome():
    model, ds, _ = random_model("ldl")
    with pytest.raises(NonSurvivalDataset):
        estimate_hr(model, ds)
    model, ds, _ = random_model("cox")
    assert np.isfinite(estimate_hr(model, ds))


def test_empty_set():
    model, ds, _ = random_model("simple3")
    with pytest.raises(EmptyTestSet):
        counterfactuals(model, ds.subset(np.array([], dtype=int)))


def test_exports(tmp_path):
    res = constant_result(n=3, t=2, gap=1.5)
    write_results_csv(res, tmp_path / "cf.csv")
    with open(tmp_path / "cf.csv") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 6 and float(table[0]["ite"]) == pytest.approx(1.5)
    write_summary_json(tmp_path / "s.json", ate_from_result(res), hr=0.9)
    assert json.loads((tmp_path / "s.json").read_text())["hr"] == 0.9
