"""End-to-end acceptance checks, one test per criterion, each within its runtime budget.

Run ``pytest tests/test_acceptance.py -v``; a summary section lists one PASS/FAIL line per criterion.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
from helpers import random_model

from causalflow import imputers
from causalflow.cli import cmd_generate, cmd_mask, cmd_pipeline
from causalflow.config import load_config
from causalflow.counterfactual import aap, counterfactuals
from causalflow.dag import CausalGraph
from causalflow.flow import CausalFlow
from causalflow.imputers import ImputerProgram, blank, sample_holdout, seed_imputer
from causalflow.io import content_hash
from causalflow.metrics import bootstrap_ci, hazard_ratio
from causalflow.mnar import MnarConfig, apply_mnar
from causalflow.search import FixedProposer, MutationProposer, SearchConfig, fence, guarded_evaluate, run_search
from causalflow.synthgen import BENCHMARKS, GRAPHS, GeneratorConfig, generate, oracle_ate, oracle_hr
from causalflow.training import TrainConfig, train

pytestmark = pytest.mark.acceptance


def dense_graph(n):
    nodes = [(f"x{i}", "covariate") for i in range(n - 2)] + [("a", "treatment"), ("y", "outcome")]
    names = [x for x, _ in nodes]
    return CausalGraph.from_names(nodes, [(names[i], names[j]) for i in range(n) for j in range(i + 1, n)])


def numerical_jacobian(flow, v, h, eps=1e-6):
    d = v.size
    jac = np.zeros((d, d))
    for k in range(d):
        vp, vm = v.copy(), v.copy()
        vp[k] += eps
        vm[k] -= eps
        jac[:, k] = (flow.forward(vp, h)[0] - flow.forward(vm, h)[0]) / (2 * eps)
    return jac


@pytest.mark.criterion(1, "flow exactness")
def test_flow_exactness(detail):
    start = time.perf_counter()
    worst_trip, worst_jac = 0.0, 0.0
    graphs = {name: GRAPHS[name]() for name in sorted(GRAPHS)}
    graphs.update({f"dense{n}": dense_graph(n) for n in (2, 4, 6, 12, 20)})
    for name, g in graphs.items():
        d = len(g)
        r = np.random.default_rng(d)
        for i in range(100):
            flow = CausalFlow(g, 3, hidden=6, rng=np.random.default_rng([d, i]), identity=False)
            for node in flow.nodes:
                node.W2 *= 3.0  # push log-scales well away from zero
            v, h = 2.0 * r.normal(size=d), r.normal(size=3)
            z, logdet = flow.forward(v, h)
            worst_trip = max(worst_trip, float(np.abs(flow.inverse(z, h) - v).max()))
            if d <= 6:
                _, expected = np.linalg.slogdet(numerical_jacobian(flow, v, h))
                worst_jac = max(worst_jac, abs(float(logdet) - expected) / max(abs(expected), 1e-12))
    elapsed = time.perf_counter() - start
    detail(f"max round-trip error {worst_trip:.2e}, max logdet rel. error {worst_jac:.2e}, {elapsed:.1f} s")
    assert worst_trip < 1e-8
    assert worst_jac < 1e-4
    assert elapsed < 10


def _group_errors(model, v, x, w, eps=1e-6):
    _, grads = model.nll_and_grads(v, x, w)
    errors = {}
    for name, p in model.named_params().items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            a = model.nll(v, x, w)
            p[idx] = old - eps
            b = model.nll(v, x, w)
            p[idx] = old
            num[idx] = (a - b) / (2 * eps)
        scale = max(np.linalg.norm(num), np.linalg.norm(grads[name]), 1e-6)
        errors[name] = float(np.linalg.norm(num - grads[name]) / scale)
    return errors


@pytest.mark.criterion(2, "gradient correctness")
def test_gradient_correctness(detail):
    start = time.perf_counter()
    worst, groups = 0.0, 0
    for seed in range(5):
        bench = ("simple3", "ldl", "cox", "ldl", "simple3")[seed]
        model, ds, _ = random_model(bench, n=12, seed=seed, hidden=8)
        small = ds.subset(np.arange(3))
        v, x = model.assemble(small)
        w = small.alive
        errors = _group_errors(model, v, x, w)
        assert any(k.startswith("encoder.") for k in errors) and any(k.startswith("flow.") for k in errors)
        worst = max(worst, max(errors.values()))
        groups += len(errors)
    elapsed = time.perf_counter() - start
    detail(f"max rel. error {worst:.2e} over {groups} parameter groups, {elapsed:.1f} s")
    assert worst < 1e-3
    assert elapsed < 60


def _rows(model, ds, limit=1000):
    v, x = model.assemble(ds)
    n, t, d = v.shape
    return v.reshape(n * t, d)[:limit], model.context(x).reshape(n * t, -1)[:limit]


@pytest.mark.criterion(3, "structural propagation")
def test_structural_propagation(detail):
    start = time.perf_counter()
    worst, notes = 0.0, []
    for bench in BENCHMARKS:
        model, ds, g = random_model(bench, n=250, seed=1)
        v, h = _rows(model, ds)
        assert len(v) == 1000
        factual = ds.treatment.reshape(-1)[:1000]
        rebuilt = np.empty_like(v)
        for arm in (0, 1):
            sel = factual == arm
            rebuilt[sel] = aap(model, v[sel], h[sel], arm)
        worst = max(worst, float(np.abs(rebuilt - v).max()))
        v0, v1 = aap(model, v, h, 0), aap(model, v, h, 1)
        keep = [j for j in range(len(g)) if j != g.treatment_index and j not in g.descendants(g.treatment_index)]
        assert np.array_equal(v0[:, keep], v1[:, keep]), bench
        notes.append(bench)
    model, ds, g = random_model("ldl", n=250, seed=1, variant="no-dag")
    v, h = _rows(model, ds)
    v0, v1 = aap(model, v, h, 0), aap(model, v, h, 1)
    keep = [j for j in range(len(g)) if j != g.treatment_index and j not in g.descendants(g.treatment_index)]
    leaking = int(np.any(v0[:, keep] != v1[:, keep], axis=1).sum())
    elapsed = time.perf_counter() - start
    detail(f"max factual reconstruction error {worst:.2e} on {', '.join(notes)}; unconstrained ordering moves non-descendants on {leaking}/1000 LDL rows; {elapsed:.1f} s")
    assert worst < 1e-8
    assert leaking >= 1
    assert elapsed < 30


@pytest.mark.criterion(4, "MNAR calibration")
def test_mnar_calibration(detail):
    start = time.perf_counter()
    ds, _ = generate("ldl", GeneratorConfig(seed=0, n_patients=10_000))
    achieved = {}
    for rate in (0.3, 0.5, 0.8):
        achieved[rate] = float(apply_mnar(ds, MnarConfig(target_rate=rate)).mask.mean())
    masked = apply_mnar(ds, MnarConfig(target_rate=0.3, self_coeff=1.0))
    m = masked.mask.astype(bool)
    gaps = []
    for j in range(ds.n_covariates):
        col = ds.covariates[:, :, j]
        gaps.append((col[m[:, :, j]].mean() - col[~m[:, :, j]].mean()) / col.std())
    elapsed = time.perf_counter() - start
    detail("achieved " + ", ".join(f"{r:.2f}->{a:.4f}" for r, a in achieved.items()) + "; standardized masked-minus-observed gaps " + ", ".join(f"{g:.3f}" for g in gaps) + f"; {elapsed:.1f} s")
    for rate, a in achieved.items():
        assert abs(a - rate) <= 0.01
    assert min(gaps) > 0.05
    assert elapsed < 30


@pytest.mark.criterion(5, "simple 3-node ATE recovery")
def test_simple3_recovery(detail):
    estimates, truths, times = [], [], []
    for seed in range(3):
        start = time.perf_counter()
        ds, g = generate("simple3", GeneratorConfig(seed=seed, n_patients=5000, n_steps=5))
        result = train(ds, g, TrainConfig(seed=seed, hidden_dim=32, flow_hidden=32))
        test = ds.subset(result.split.test)
        res = counterfactuals(result.model, test, seed=seed)
        estimates.append(float(res.ite[res.valid].mean()))
        truths.append(oracle_ate(ds))
        times.append(time.perf_counter() - start)
    ate, truth = float(np.mean(estimates)), float(np.mean(truths))
    detail(f"ATE {ate:.4f} (seeds {', '.join(f'{e:.3f}' for e in estimates)}) vs oracle {truth:.4f}, |diff| {abs(ate - truth):.4f}; max {max(times):.0f} s per seed")
    assert abs(ate - truth) <= 0.1
    assert max(times) <= 300


@pytest.mark.criterion(6, "Cox hazard-ratio direction")
def test_cox_direction(detail):
    start = time.perf_counter()
    ds, g = generate("cox", GeneratorConfig(seed=0, n_patients=10_000))
    oracle = oracle_hr(ds)
    result = train(ds, g, TrainConfig(seed=0, hidden_dim=32, flow_hidden=32))
    test = ds.subset(result.split.test)
    res = counterfactuals(result.model, test, seed=0)
    hr_pred = hazard_ratio(res.y1_hat, res.y0_hat, res.valid)
    elapsed = time.perf_counter() - start
    detail(f"HR_pred {hr_pred:.4f}, oracle HR {oracle:.4f} (target 0.887 +/- 0.01), {elapsed:.0f} s")
    assert hr_pred < 1.0
    assert abs(oracle - 0.887) <= 0.01
    assert elapsed <= 600


@pytest.mark.criterion(7, "metric oracle equivalence")
def test_metric_oracle_equivalence(detail):
    from test_metrics import (
        test_biomarker_metrics_match_naive_recomputation,
        test_metrics_match_naive_recomputation,
    )

    start = time.perf_counter()
    test_metrics_match_naive_recomputation()
    test_biomarker_metrics_match_naive_recomputation()
    elapsed = time.perf_counter() - start
    detail(f"calibration, arm error, VR_Q4 and five biomarker metrics agree with loop implementations to 1e-10 over 50 panels each, {elapsed:.1f} s")
    assert elapsed < 10


@pytest.fixture(scope="module")
def ldl_30():
    ds, _ = generate("ldl", GeneratorConfig(seed=0, n_patients=10_000))
    return apply_mnar(ds, MnarConfig(target_rate=0.3))


@pytest.mark.criterion(8, "search contract")
def test_search_contract(ldl_30, detail, monkeypatch):
    start = time.perf_counter()
    cfg = SearchConfig()
    cols = ldl_30.covariate_names
    visible = replace(ldl_30, truth=None, po_control=None, po_treated=None)
    first = run_search(visible, cfg, MutationProposer(seed=0, columns=cols))
    second = run_search(visible, cfg, MutationProposer(seed=0, columns=cols))
    h = sample_holdout(visible, cfg.rho, cfg.holdout_seed)
    seed_s = guarded_evaluate(seed_imputer(), blank(visible, h), h, cfg).score.s
    traj = first.state.trajectory
    assert len(traj) == cfg.budget
    assert all(b <= a for a, b in zip([seed_s, *traj], traj))
    assert traj[-1] <= seed_s
    assert traj == second.state.trajectory

    monkeypatch.setattr(imputers, "TEST_HOOKS", True)
    imputers.register_oracle("ldl30", ldl_30.truth)
    mutation = MutationProposer(seed=0, columns=cols)
    perfect = fence(ImputerProgram.from_stages([{"op": "_test_oracle", "key": "ldl30"}]))
    replies = [lambda s: mutation.propose("", s)] * 9 + [perfect] + [lambda s: mutation.propose("", s)] * 10
    planted = run_search(visible, cfg, FixedProposer(replies))
    entry = planted.state.history[9]
    elapsed = time.perf_counter() - start
    accepted = sum(e.outcome == "accepted" for e in first.state.history)
    detail(f"seed score {seed_s:.4f} -> final {traj[-1]:.4f} with {accepted} acceptances, repeat run identical; planted candidate {entry.outcome} with s={entry.score.s}; {elapsed:.0f} s")
    assert entry.outcome == "accepted" and entry.score.s == 0.0
    assert planted.state.trajectory[9:] == [0.0] * 11
    assert elapsed <= 300


@pytest.mark.criterion(9, "guard behavior")
def test_guard_behavior(ldl_30, detail, monkeypatch):
    monkeypatch.setattr(imputers, "TEST_HOOKS", True)
    start = time.perf_counter()
    small = ldl_30.subset(np.arange(1000))
    replies = [
        fence(ImputerProgram.from_stages([{"op": "_test_sleep", "seconds": 60}])),
        fence(ImputerProgram.from_stages([{"op": "_test_nan"}])),
        fence(ImputerProgram.from_stages([{"op": "_test_mutate"}])),
        fence(seed_imputer()),
    ]
    result = run_search(small, SearchConfig(budget=5, time_budget=2.0), FixedProposer(replies))
    reasons = [e.reason for e in result.state.history]
    elapsed = time.perf_counter() - start
    detail(f"reasons {reasons}; {result.state.k} of 5 iterations completed; {elapsed:.1f} s")
    assert reasons[:3] == ["timeout", "non-finite", "observed-cell mutation"]
    assert result.state.k == 5 and len(result.log) == 5
    assert elapsed < 30


@pytest.mark.criterion(10, "bootstrap intervals")
def test_bootstrap(detail):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    hits = 0
    for trial in range(100):
        values = rng.exponential(size=200)
        lo, hi = bootstrap_ci(values, replicates=500, seed=trial)
        hits += lo <= values.mean() <= hi
    ratios = []
    for trial in range(30):
        w_small = np.diff(bootstrap_ci(rng.normal(size=500), replicates=500, seed=trial))[0]
        w_large = np.diff(bootstrap_ci(rng.normal(size=2000), replicates=500, seed=trial))[0]
        ratios.append(w_small / w_large)
    ratio = float(np.mean(ratios))
    elapsed = time.perf_counter() - start
    detail(f"point estimate covered in {hits}/100 datasets; width ratio N vs 4N {ratio:.3f}; {elapsed:.1f} s")
    assert hits >= 99
    assert 1.5 <= ratio <= 2.5
    assert elapsed < 60


PIPELINE_CONFIG = """
seeds = [0]
imputers = ["locf", "seed", "evolved"]
bootstrap_replicates = 100

[train]
hidden_dim = 16
flow_hidden = 16
max_epochs = 20

[search]
budget = 5
"""

DETERMINISTIC_OUTPUTS = ("report.json", "report.csv", "histories.json", "trajectories.json", "best_program.json")


@pytest.mark.criterion(11, "pipeline determinism")
def test_pipeline_determinism(tmp_path, detail):
    start = time.perf_counter()
    cfg_path = tmp_path / "run.toml"
    cfg_path.write_text(PIPELINE_CONFIG)
    config = load_config(cfg_path)
    cmd_generate("ldl", 0, tmp_path / "ldl", n_patients=600)
    cmd_mask(tmp_path / "ldl", 0.3, 0, tmp_path / "ldl_30")
    hashes = []
    for run in ("first", "second"):
        out = cmd_pipeline(tmp_path / "ldl_30", tmp_path / run, config)[0].parent
        hashes.append({name: content_hash(out / name) for name in DETERMINISTIC_OUTPUTS})
    elapsed = time.perf_counter() - start
    same = [n for n in DETERMINISTIC_OUTPUTS if hashes[0][n] == hashes[1][n]]
    detail(f"{len(same)}/{len(DETERMINISTIC_OUTPUTS)} outputs hash-identical across two runs (report.json {hashes[0]['report.json'][:12]}); {elapsed:.0f} s")
    assert hashes[0] == hashes[1]
    assert elapsed <= 900
