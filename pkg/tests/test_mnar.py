import math

import numpy as np
import pytest

from causalflow.errors import AlreadyMasked, InvalidConfig, NoConvergence
from causalflow.mnar import MnarConfig, apply_mnar, calibrate_intercept
from causalflow.synthgen import GeneratorConfig, gen_ldl


@pytest.fixture(scope="module")
def ldl():
    return gen_ldl(GeneratorConfig(n_patients=4000))[0]


def zero(rate):
    return MnarConfig(target_rate=rate, self_coeff=0, other_coeff=0, outcome_coeff=0, treatment_coeff=0)


def test_zero_coefficients_give_closed_form_intercepts(ldl):
    assert calibrate_intercept(ldl, zero(0.5)) == pytest.approx(0.0, abs=1e-5)
    assert calibrate_intercept(ldl, zero(0.8)) == pytest.approx(math.log(4), abs=1e-4)


@pytest.mark.parametrize("rate", [0.3, 0.5, 0.8])
def test_achieved_rate(ldl, rate):
    masked = apply_mnar(ldl, MnarConfig(target_rate=rate))
    assert abs(masked.mask.mean() - rate) < 0.01


def test_masking_depends_on_hidden_value(ldl):
    masked = apply_mnar(ldl, MnarConfig(target_rate=0.3, other_coeff=0, outcome_coeff=0, treatment_coeff=0))
    m = masked.mask.astype(bool)
    for j in range(ldl.n_covariates):
        col = ldl.covariates[:, :, j]
        assert np.corrcoef(m[:, :, j].ravel(), col.ravel())[0, 1] > 0


def test_truth_is_kept_aside_and_cells_blanked(ldl):
    masked = apply_mnar(ldl, MnarConfig(seed=2))
    m = masked.mask.astype(bool)
    assert np.array_equal(masked.truth, ldl.covariates)
    assert np.isnan(masked.covariates[m]).all()
    assert np.array_equal(masked.covariates[~m], ldl.covariates[~m])
    assert np.array_equal(masked.treatment, ldl.treatment) and np.array_equal(masked.outcome, ldl.outcome)


def test_deterministic_given_seed(ldl):
    a = apply_mnar(ldl, MnarConfig(seed=5)).mask
    b = apply_mnar(ldl, MnarConfig(seed=5)).mask
    c = apply_mnar(ldl, MnarConfig(seed=6)).mask
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_refuses_masked_input(ldl):
    masked = apply_mnar(ldl, MnarConfig())
    with pytest.raises(AlreadyMasked):
        apply_mnar(masked, MnarConfig())


def test_rate_bounds():
    with pytest.raises(InvalidConfig):
        MnarConfig(target_rate=1.0)


def test_unreachable_target(ldl):
    with pytest.raises(NoConvergence):
        calibrate_intercept(ldl, MnarConfig(target_rate=0.999999999, self_coeff=200.0))
