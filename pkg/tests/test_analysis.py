"""Exact-moment oracles, decompositions, comparisons, and bound formulas.

Frozen constants in this file were produced by the path-enumeration oracle
(every index path of the tiny cases below, evaluated with the pinned solver
arithmetic) and by exact rational arithmetic for the bound formulas.  They
protect the closed forms against silent regressions.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from stochreg.analysis import (ErrorCurves, closed_form_mean, condition_report,
                               enumerate_exact_moments,
                               enumerate_weighted_second_moment,
                               error_curves, exact_final_moments,
                               exact_weighted_second_moment, mc_moments,
                               operator_word_matrix, operator_word_weights,
                               orthogonality_check, path_count, rate_fit,
                               recursion_check, residual_bound, shift_vector,
                               sgd_variance_terms, stopping_stats,
                               svrg_variance_terms, theorem_bound,
                               variance_compare)
from stochreg.problems import (add_noise, gen_shaw, make_instance,
                               noise_functional, precondition)
from stochreg.solvers import SolverConfig, step_stability_bound
from stochreg.spectral import GramOperator, Propagator, step_constant


def tiny_instance():
    a = np.array([[1.0, 0.0], [0.5, 0.5]])
    inst = make_instance("tiny", a, np.array([1.0, -0.5]))
    return inst, inst.y_dag + np.array([0.125, -0.0625])


def ortho_instance():
    a = np.array([[2.0, 0.0], [0.0, 1.0]])
    inst = make_instance("ortho", a, np.array([1.0, 1.0]))
    return inst, inst.y_dag + np.array([0.25, -0.125])


def random_preconditioned(n, m, seed, eps=5e-2):
    rng = np.random.default_rng(seed)
    inst = make_instance(f"rand{n}x{m}", rng.normal(size=(n, m)),
                         rng.normal(size=m))
    data = add_noise(inst, eps, seed)
    return precondition(inst, data.y)


# --- enumeration against frozen values ----------------------------------------

TINY_MEAN = np.array([0.280517578125, 0.018310546875])  # dyadic, both methods
TINY_SECOND = {"sgd": 0.10460615158081055, "svrg": 0.07924532890319824}
TINY_VARIANCE = {"sgd": 0.025580763816833496, "svrg": 0.0002199411392211914}


@pytest.mark.parametrize("method", ["sgd", "svrg"])
def test_enumeration_frozen_values(method):
    inst, y = tiny_instance()
    mom = enumerate_exact_moments(inst, y, 0.25, M=2, K=1, method=method)
    assert mom.path_count == 4
    assert_allclose(mom.mean, TINY_MEAN, rtol=1e-14)
    assert_allclose(mom.second_moment_trace, TINY_SECOND[method], rtol=1e-14)
    assert_allclose(mom.variance_trace, TINY_VARIANCE[method], rtol=1e-13)


def test_mean_is_method_independent():
    inst, y = tiny_instance()
    sgd = enumerate_exact_moments(inst, y, 0.25, 2, 1, "sgd").mean
    svrg = enumerate_exact_moments(inst, y, 0.25, 2, 1, "svrg").mean
    assert_allclose(sgd, svrg, rtol=0, atol=1e-15)


@pytest.mark.parametrize("method", ["sgd", "svrg"])
@pytest.mark.parametrize("n,m,M,K", [(2, 2, 1, 1), (3, 2, 2, 2), (2, 3, 3, 2)])
def test_closed_form_mean_matches_enumeration(method, n, m, M, K):
    rng = np.random.default_rng(100 * n + 10 * m + M + K)
    inst = make_instance("case", rng.normal(size=(n, m)), rng.normal(size=m))
    y = inst.y_dag + 0.1 * rng.normal(size=n)
    c0 = 0.8 * step_stability_bound(inst, method)
    enum = enumerate_exact_moments(inst, y, c0, M, K, method)
    mean = closed_form_mean(inst.gram, inst.x0 - inst.x_dag,
                            noise_functional(inst, y), c0, M, K,
                            x_dag=inst.x_dag)
    err = np.linalg.norm(enum.mean - mean)
    assert err <= 1e-11 * (1 + np.linalg.norm(inst.x_dag))


def test_path_budget_enforced():
    with pytest.raises(ValueError, match="budget"):
        path_count(10, 4, 2, budget=10**7)


# --- second-moment decompositions ---------------------------------------------

FROZEN_HEAD = 0.2680194238200784
FROZEN_TERMS = {
    "svrg": [0.005053416825830936, 0.009997310116887093],
    "sgd": [0.025678890757262707, 0.07062078639864922],
}


@pytest.mark.parametrize("method,fn", [("svrg", svrg_variance_terms),
                                       ("sgd", sgd_variance_terms)])
def test_decomposition_frozen_values(method, fn):
    inst, y = ortho_instance()
    dec = fn(inst, y, 0.25, M=2, K=2)
    assert_allclose(dec.head, FROZEN_HEAD, rtol=1e-13)
    assert_allclose(dec.epoch_terms, FROZEN_TERMS[method], rtol=1e-12)
    enum = enumerate_weighted_second_moment(inst, y, 0.25, 2, 2, method)
    assert abs(dec.total - enum) <= 1e-13 * (1 + enum)


@pytest.mark.parametrize("method,fn", [("svrg", svrg_variance_terms),
                                       ("sgd", sgd_variance_terms)])
@pytest.mark.parametrize("r1", ["I", "B", "M0^2"])
@pytest.mark.parametrize("r2", ["0", "Binv_zeta"])
def test_decomposition_matches_enumeration_weighted(method, fn, r1, r2):
    inst, y = random_preconditioned(3, 2, seed=77)
    c0 = step_constant(inst.a)
    dec = fn(inst, y, c0, M=2, K=2, r1=r1, r2=r2)
    enum = enumerate_weighted_second_moment(inst, y, c0, 2, 2, method, r1, r2)
    assert abs(dec.total - enum) <= 1e-11 * (1 + abs(enum))


def test_svrg_split_has_no_noise_family():
    inst, y = ortho_instance()
    dec = svrg_variance_terms(inst, y, 0.25, 2, 2)
    assert_array_equal(dec.split_noise, np.zeros(2))
    assert_allclose(dec.split_covariance, np.zeros(2), atol=1e-18)


def test_sgd_split_families_are_correlated():
    # separating the per-step terms from their delayed echoes drops a
    # covariance that is genuinely nonzero; the grouped terms still match
    # the enumerated moment exactly
    a = np.array([[3.0, 0.0], [0.0, 2.0], [0.0, 0.0]])
    inst = make_instance("p3", a, np.array([0.8, -0.3]))
    y = inst.y_dag + np.array([0.3, -0.2, 0.1])
    c0 = 0.3 / 9.0
    dec = sgd_variance_terms(inst, y, c0, M=3, K=2)
    enum = enumerate_weighted_second_moment(inst, y, c0, 3, 2, "sgd")
    assert abs(dec.total - enum) <= 1e-12 * (1 + enum)
    assert np.abs(dec.split_covariance).max() > 1e-6 * dec.total


def test_decomposition_requires_orthogonal_rows():
    inst = gen_shaw(6)
    with pytest.raises(ValueError, match="precondition"):
        svrg_variance_terms(inst, inst.y_dag, 1e-3, 2, 1)


# --- epoch propagation --------------------------------------------------------

@pytest.mark.parametrize("method", ["sgd", "svrg"])
def test_propagated_moments_match_enumeration(method):
    inst, y = random_preconditioned(3, 2, seed=5)
    c0 = step_constant(inst.a)
    enum = enumerate_exact_moments(inst, y, c0, 2, 2, method)
    mu, s = exact_final_moments(inst, y, c0, 2, 2, method)
    # propagation works in coordinates centered at x_dag + B^+ zeta
    ref = inst.x_dag + inst.gram.pinv_apply(noise_functional(inst, y))
    assert_allclose(ref + mu, enum.mean, rtol=0, atol=1e-13)
    second = np.trace(s) + 2 * ref @ mu + ref @ ref
    assert_allclose(second, enum.second_moment_trace, rtol=1e-12)
    assert_allclose(np.trace(s) - mu @ mu, enum.variance_trace, rtol=1e-11)
    weighted = exact_weighted_second_moment(inst, y, c0, 2, 2, method,
                                            "B", "Binv_zeta")
    brute = enumerate_weighted_second_moment(inst, y, c0, 2, 2, method,
                                             "B", "Binv_zeta")
    assert_allclose(weighted, brute, rtol=1e-12)


# --- variance comparison ------------------------------------------------------

def test_variance_compare_enumeration_mode():
    inst, y = random_preconditioned(3, 2, seed=11)
    c0 = step_constant(inst.a)
    cmp = variance_compare(inst, y, c0, M=2, K=2)
    assert cmp.mode == "enumeration" and cmp.stderr == 0.0
    assert cmp.svrg_value == pytest.approx(
        enumerate_weighted_second_moment(inst, y, c0, 2, 2, "svrg"), rel=1e-13)
    assert cmp.margin == pytest.approx(cmp.sgd_value - cmp.svrg_value,
                                       rel=1e-12)


def test_variance_compare_propagation_mode():
    inst, y = random_preconditioned(25, 3, seed=13)
    c0 = step_constant(inst.a)
    cmp = variance_compare(inst, y, c0, M=2, K=3)
    assert cmp.mode == "propagation"
    assert cmp.condition_ok
    assert cmp.ordered and cmp.margin >= -1e-12


def test_variance_compare_monte_carlo_mode():
    inst, y = random_preconditioned(64, 3, seed=17)
    c0 = step_constant(inst.a)
    with pytest.raises(ValueError, match="runs"):
        variance_compare(inst, y, c0, M=4, K=1)
    cmp = variance_compare(inst, y, c0, M=4, K=1, runs=800, seed=4)
    assert cmp.mode == "monte-carlo" and cmp.stderr > 0
    assert cmp.condition_ok
    assert cmp.ordered


# --- identity reports ---------------------------------------------------------

def test_recursion_identities_hold_on_any_instance():
    rng = np.random.default_rng(29)
    inst = make_instance("rand", rng.normal(size=(5, 3)), rng.normal(size=3))
    y = inst.y_dag + 0.1 * rng.normal(size=5)
    rep = recursion_check(inst, y, 0.5 * step_stability_bound(inst, "svrg"),
                          M=4, K=3, seed=8)
    assert rep.max_epoch_deviation <= 1e-12
    assert rep.max_telescope_deviation <= 1e-12
    assert rep.max_anchor_deviation <= 1e-12


@pytest.mark.parametrize("method", ["svrg", "sgd"])
def test_fluctuation_terms_are_orthogonal(method):
    inst, y = random_preconditioned(3, 3, seed=41)
    rep = orthogonality_check(inst, y, step_constant(inst.a), M=2, K=2,
                              method=method)
    assert rep.pair_count == 6  # 4 labels -> C(4,2) pairs... for M=2, K=2
    assert rep.max_cross <= 1e-12 * (1 + rep.scale)


# --- sampled moments ----------------------------------------------------------

def test_mc_moments_decomposition_is_exact():
    inst, y = random_preconditioned(6, 3, seed=53)
    cfg = SolverConfig(method="sgd", c0=0.5 * step_constant(inst.a),
                       max_epochs=3.0, seed=9)
    rep = mc_moments(inst, y, cfg, runs=40)
    assert_allclose(rep.mse, rep.bias_sq + rep.variance, rtol=1e-12)
    assert rep.run_count == 40 and rep.excluded_runs == ()


def test_mc_moments_agree_with_enumeration():
    inst, y = random_preconditioned(3, 2, seed=59)
    c0 = step_constant(inst.a)
    exact = enumerate_weighted_second_moment(inst, y, c0, 2, 2, "svrg",
                                             "I", "Binv_zeta")
    cfg = SolverConfig(method="svrg", c0=c0, max_epochs=4 / 1.2, M=2, seed=0,
                       checkpoint_every=100.0)
    acct_iters = 4  # K*M inner steps
    rep = mc_moments(inst, y, cfg, runs=4000)
    j = int(np.nonzero(rep.iterations == acct_iters)[0][0])
    se = rep.mse_stderr[j]
    assert abs(rep.mse[j] - exact) <= 4 * se


def test_stopping_stats_first_on_ties():
    curves = ErrorCurves(
        method="sgd", epochs=np.array([0.0, 1.0, 2.0]),
        iterations=np.array([0, 4, 8]),
        error_sq=np.array([[4.0, 1.0, 1.0], [9.0, 4.0, 1.0]]),
        residual_sq=None, excluded_runs=())
    kstar, e_mean, se = stopping_stats(curves)
    assert kstar == pytest.approx((1.0 + 2.0) / 2)
    assert e_mean == pytest.approx((1.0 + 1.0) / 2)
    assert se >= 0.0


def test_error_curves_shape(tmp_path):
    inst, y = random_preconditioned(5, 2, seed=61)
    cfg = SolverConfig(method="sgd", c0=0.3 * step_constant(inst.a),
                       max_epochs=2.0, seed=3)
    curves = error_curves(inst, y, cfg, runs=7)
    assert curves.error_sq.shape == (7, curves.epochs.size)
    assert curves.excluded_runs == ()


# --- condition constants and bounds (frozen rational arithmetic) --------------

def test_condition_report_reference_values():
    inst = make_instance("id3", np.eye(3), np.ones(3))  # ||B|| = 1/3
    rep = condition_report(inst, c0=1.0, M=3)
    assert rep.contraction_factor == pytest.approx(27 / 8, rel=1e-12)
    assert rep.inner_drift_sum == pytest.approx(34 / 81, rel=1e-12)
    assert rep.contraction_factor_sq == pytest.approx(81 / 16, rel=1e-12)
    assert rep.rate_lhs == pytest.approx(17 / 6, rel=1e-12)
    assert rep.rate_rhs == 0.5 and not rep.rate_ok
    assert rep.compare_lhs_step == pytest.approx(4 / 9, rel=1e-12)
    assert rep.compare_rhs_step == pytest.approx(8 / 81, rel=1e-12)
    assert rep.compare_lhs_size == 16.0
    assert rep.compare_rhs_size == pytest.approx(16 / 81, rel=1e-12)
    assert not rep.compare_ok


def test_condition_report_validation():
    inst = make_instance("id2", np.eye(2), np.ones(2))
    with pytest.raises(ValueError):
        condition_report(inst, c0=1.0, M=2, c_star=1.0)
    with pytest.raises(ValueError):
        condition_report(inst, c0=4.0, M=2)  # c0 ||B|| = 2


def test_theorem_bound_reference_values():
    # norm_b = 1/4, n = 4, c0 = 1, M = 2, nu = 0, ||w|| = 3/2, delta_bar = 1/4
    assert theorem_bound(0.25, 4, 1.0, 2, 1, 0.0, 1.5, 0.25) == pytest.approx(
        731 / 36, rel=1e-12)
    assert theorem_bound(0.25, 4, 1.0, 2, 3, 0.0, 1.5, 0.25) == pytest.approx(
        287 / 12, rel=1e-12)
    with pytest.raises(ValueError):
        theorem_bound(0.25, 4, 1.0, 2, 0, 0.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        theorem_bound(2.0, 4, 1.0, 2, 1, 0.0, 1.0, 0.1)


def test_residual_bound_reference_values():
    assert residual_bound(4, 1.0, 2, 1, 0.0, 1.5, 0.25) == pytest.approx(
        19.0, rel=1e-12)
    assert residual_bound(4, 1.0, 2, 4, 0.0, 1.5, 0.25) == pytest.approx(
        5.5, rel=1e-12)


def test_bounds_decay_then_grow_with_noise():
    # the approximation part shrinks in K, the noise part grows linearly
    lo = theorem_bound(0.1, 50, 1.0, 5, 1, 1.0, 1.0, 0.0)
    hi = theorem_bound(0.1, 50, 1.0, 5, 4, 1.0, 1.0, 0.0)
    assert hi < lo
    assert theorem_bound(0.1, 50, 1.0, 5, 4, 1.0, 1.0, 0.5) > hi


def test_rate_fit_recovers_exponent():
    deltas = np.array([1e-1, 1e-2, 1e-3, 1e-4])
    slope, intercept = rate_fit(deltas, 3.0 * deltas**0.75)
    assert slope == pytest.approx(0.75, rel=1e-12)
    assert intercept == pytest.approx(math.log(3.0), rel=1e-10)
    with pytest.raises(ValueError):
        rate_fit([1.0], [2.0])
    with pytest.raises(ValueError):
        rate_fit([1.0, -1.0], [1.0, 1.0])


# --- weight-word language -----------------------------------------------------

def test_operator_word_weights_on_diagonal_gram():
    gram = GramOperator(np.diag([0.5, 0.125]))
    lam = gram.eigenvalues  # ascending: [0.125, 0.5]
    c0 = 1.0
    assert_array_equal(operator_word_weights(gram, c0, "I"), np.ones(2))
    assert_array_equal(operator_word_weights(gram, c0, "B"), lam)
    assert_allclose(operator_word_weights(gram, c0, "M0^2"), (1 - lam) ** 2,
                    rtol=1e-15)
    assert_allclose(operator_word_weights(gram, c0, "2*B^1/2 M0^3"),
                    2 * np.sqrt(lam) * (1 - lam) ** 3, rtol=1e-14)
    with pytest.raises(ValueError, match="token"):
        operator_word_weights(gram, c0, "Q^2")


def test_operator_word_matrix_identity():
    gram = GramOperator(np.diag([0.5, 0.25]))
    assert_allclose(operator_word_matrix(gram, 0.5, "I"), np.eye(2), atol=1e-15)
    explicit = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert operator_word_matrix(gram, 0.5, explicit) is explicit


def test_shift_vector_variants():
    inst, y = tiny_instance()
    assert_array_equal(shift_vector(inst, y, "0"), np.zeros(2))
    zeta = noise_functional(inst, y)
    assert_allclose(shift_vector(inst, y, "Binv_zeta"),
                    inst.gram.pinv_apply(zeta), rtol=1e-14)
    with pytest.raises(ValueError):
        shift_vector(inst, y, "whatever")


@given(lam=arrays(np.float64, 3, elements=st.floats(0.01, 1.0)),
       power=st.integers(1, 30))
@settings(max_examples=40, deadline=None)
def test_closed_form_mean_noise_free_is_propagator_power(lam, power):
    gram = GramOperator(np.diag(lam))
    e0 = np.array([1.0, -2.0, 0.5])
    c0 = 0.9 / lam.max()
    mean = closed_form_mean(gram, e0, np.zeros(3), c0, M=power, K=1)
    prop = Propagator(gram, c0)
    assert_allclose(mean, prop.apply_power(power, e0), rtol=1e-11, atol=1e-13)
