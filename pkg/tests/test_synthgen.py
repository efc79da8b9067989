import numpy as np
import pytest

from causalflow.errors import InvalidConfig, MissingPotentialOutcomes
from causalflow.synthgen import (
    BENCHMARKS,
    GeneratorConfig,
    cumulative_incidence,
    gen_cox,
    gen_cvd,
    gen_ldl,
    gen_simple3,
    generate,
    oracle_ate,
    oracle_hr,
    saturation,
)


def small(benchmark, seed=0, n=300):
    return generate(benchmark, GeneratorConfig(seed=seed, n_patients=n))


@pytest.mark.parametrize("benchmark", BENCHMARKS)
def test_shapes_and_graph_agree(benchmark):
    ds, g = small(benchmark)
    assert ds.covariates.shape[:2] == ds.outcome.shape == ds.treatment.shape == ds.po_control.shape
    assert ds.n_covariates == len(g.covariate_indices)
    assert sorted(ds.covariate_names) == sorted(g.names[i] for i in g.covariate_indices)
    assert not ds.is_masked


@pytest.mark.parametrize("benchmark", BENCHMARKS)
def test_same_seed_is_bit_identical(benchmark):
    a, _ = small(benchmark, seed=3)
    b, _ = small(benchmark, seed=3)
    c, _ = small(benchmark, seed=4)
    assert np.array_equal(a.covariates, b.covariates) and np.array_equal(a.outcome, b.outcome)
    assert not np.array_equal(a.outcome, c.outcome)


@pytest.mark.parametrize("benchmark", BENCHMARKS)
def test_growing_n_keeps_earlier_patients(benchmark):
    a, _ = small(benchmark, n=50)
    b, _ = small(benchmark, n=80)
    assert np.array_equal(a.covariates, b.covariates[:50])
    assert np.array_equal(a.po_treated, b.po_treated[:50])


@pytest.mark.parametrize("benchmark", ["simple3", "ldl"])
def test_continuous_outcomes_are_factually_consistent(benchmark):
    ds, _ = small(benchmark)
    expected = np.where(ds.treatment == 1, ds.po_treated, ds.po_control)
    assert np.array_equal(ds.outcome, expected)


def test_cox_outcomes_consistent_in_expectation():
    ds, _ = gen_cox(GeneratorConfig(n_patients=20000))
    p = np.where(ds.treatment == 1, ds.po_treated, ds.po_control)
    assert abs(ds.outcome.mean() - p.mean()) < 0.01


def test_simple3_oracle_ate():
    ds, _ = gen_simple3(GeneratorConfig(n_patients=200))
    # effect is -0.75 t / T with t = 0..T-1
    assert oracle_ate(ds) == pytest.approx(-0.75 * np.mean(np.arange(5) / 5))


def test_ldl_oracle_ate_near_reference():
    ds, _ = gen_ldl()
    assert oracle_ate(ds) == pytest.approx(-28.35, abs=1.0)


def test_saturation_profile():
    assert saturation(0, 4) == 0.0
    assert saturation(4, 4, 0.4) == pytest.approx(1.0)
    assert saturation(2, 4, 0.4) == pytest.approx(np.log(1.8) / np.log(2.6))
    assert np.all(np.diff(saturation(np.arange(5), 4)) > 0)


def test_cox_oracle_hazard_ratio():
    ds, _ = gen_cox()
    assert oracle_hr(ds) == pytest.approx(0.887, abs=0.01)


def test_cumulative_incidence_monotone():
    f = cumulative_incidence(np.arange(11), 0.5, np.array([1.0]))
    assert f[0] == 0 and np.all(np.diff(f) > 0) and f[-1] < 1


def test_cvd_events_absorbing_and_protective():
    ds, g = gen_cvd(GeneratorConfig(n_patients=5000))
    alive = ds.alive
    assert np.all(np.diff(alive, axis=1) <= 0)
    assert np.all(ds.outcome[alive == 0] == 0)
    assert 0.6 < oracle_hr(ds) < 1.0
    assert ds.n_covariates == 15 and len(g) == 17


def test_cvd_treatment_absorbing():
    ds, _ = gen_cvd(GeneratorConfig(n_patients=2000))
    assert np.all(np.diff(ds.treatment, axis=1) >= 0)


def test_missing_potential_outcomes():
    ds, _ = small("ldl")
    ds.po_control = None
    with pytest.raises(MissingPotentialOutcomes):
        oracle_ate(ds)


def test_invalid_sizes():
    with pytest.raises(InvalidConfig):
        generate("ldl", GeneratorConfig(n_patients=0))
    with pytest.raises(InvalidConfig):
        generate("nope")
