import numpy as np
import pytest

from odesieve import (
    Dataset,
    FitSpec,
    OdeSystem,
    OptimizerConfig,
    ParameterVector,
    SplineConfig,
    basis_eval,
    bias_vs_step_study,
    decay_system,
    evaluate_fit,
    fit,
    hiv_system,
    nls_objective,
    scenario,
    simulate_dataset,
)
from odesieve.estimator import (
    PENALTY_BASE,
    default_space,
    eta_values_from_free,
    free_parameter_names,
)
from odesieve.rng import substream


def decay_dataset(rate=1.2, sd=0.02, seed=17, n=25):
    times = np.linspace(0.1, 2.0, n)
    truth = np.exp(-rate * times)
    obs = truth + sd * substream(seed).standard_normal(n)
    return Dataset(
        times=times,
        observations=obs[:, None],
        log_scale=(False,),
        noise_sd=np.full((n, 1), sd),
    )


@pytest.fixture(scope="module")
def hiv_zero_noise():
    sysh = hiv_system()
    return sysh, simulate_dataset(sysh, scenario("i"), seed=1, noise_fraction=0.0)


# ---------------------------------------------------------------------------
# spec plumbing


def test_free_parameter_names_by_mode():
    sysh = hiv_system()
    assert free_parameter_names(sysh, "constant", None) == ("lambda", "N", "c", "eta")
    spl = SplineConfig(0.0, 20.0, interior_knots=1, order=3)
    assert free_parameter_names(sysh, "spline", spl) == (
        "lambda", "N", "c", "alpha1", "alpha2", "alpha3", "alpha4",
    )
    assert free_parameter_names(decay_system(), "none", None) == ("rate",)


def test_default_space_boxes():
    sysh = hiv_system()
    sp = default_space(sysh, "constant")
    assert sp.names == ("lambda", "N", "c", "eta")
    np.testing.assert_allclose(sp.lower, [1.0, 100.0, 0.1, 1e-7])
    np.testing.assert_allclose(sp.upper, [200.0, 1e4, 20.0, 1e-3])
    assert sp.scale == ("log", "log", "log", "log")
    with pytest.raises(ValueError):
        default_space(
            OdeSystem(
                name="other", dimension=1, obs_dim=1, rhs=lambda t, x, b, e: x,
                observe=lambda x: x, initial_state=np.ones(1), t0=0.0, t_end=1.0,
                param_names=("a",), uses_eta=False, obs_log=(False,),
            ),
            "none",
        )


def test_spec_validation(hiv_zero_noise):
    sysh, ds = hiv_zero_noise
    with pytest.raises(ValueError):
        FitSpec(system=sysh, dataset=ds, eta_mode="none")  # system needs eta
    with pytest.raises(ValueError):
        FitSpec(system=sysh, dataset=ds, eta_mode="wiggly")
    with pytest.raises(ValueError):
        FitSpec(system=sysh, dataset=ds, eta_mode="spline")  # no spline config
    with pytest.raises(ValueError):
        FitSpec(system=sysh, dataset=ds, eta_mode="constant", step=20.0)  # step too big
    short = SplineConfig(2.0, 20.0, interior_knots=1, order=3)
    with pytest.raises(ValueError):
        FitSpec(system=sysh, dataset=ds, eta_mode="spline", spline=short)  # interval gap


def test_spec_counts(hiv_zero_noise):
    sysh, ds = hiv_zero_noise
    spec = FitSpec(system=sysh, dataset=ds, eta_mode="constant")
    assert (spec.n_system_params, spec.n_beta, spec.n_alpha, spec.n_free) == (3, 4, 0, 4)
    spl = SplineConfig(0.0, 20.0, interior_knots=2, order=4)
    spec2 = FitSpec(system=sysh, dataset=ds, eta_mode="spline", spline=spl)
    assert (spec2.n_beta, spec2.n_alpha, spec2.n_free) == (3, 6, 9)


def test_parameter_vector_free_concatenation():
    pv = ParameterVector(beta=[1.0, 2.0], alpha=[0.5], fixed={"rho": 0.1})
    np.testing.assert_array_equal(pv.free, [1.0, 2.0, 0.5])
    with pytest.raises(ValueError):
        ParameterVector(beta=[np.inf])


# ---------------------------------------------------------------------------
# objective


def test_objective_at_truth_is_near_zero__zero_noise(hiv_zero_noise):
    sysh, ds = hiv_zero_noise
    spec = FitSpec(system=sysh, dataset=ds, eta_mode="constant", step=0.05)
    val = nls_objective(spec, np.array([36.0, 1000.0, 3.0, 9.5e-6]))
    assert val < 1e-6


def test_objective_penalizes_divergence_by_survival(hiv_zero_noise):
    sysh, ds = hiv_zero_noise
    spec = FitSpec(system=sysh, dataset=ds, eta_mode="constant", step=0.05)
    early = nls_objective(spec, np.array([36.0, 1000.0, 3.0, 8e-4]))
    late = nls_objective(spec, np.array([36.0, 1000.0, 3.0, 6e-4]))
    assert early >= PENALTY_BASE and late >= PENALTY_BASE
    # the candidate that survives longer scores strictly better
    assert late < early


def test_objective_flat_penalty_for_nonpositive_predictions():
    # a state that crosses zero cannot be scored on the log scale
    def rhs(t, x, beta, eta_value):
        return np.full_like(x, -beta[..., 0:1] if x.ndim > 1 else -beta[0])

    sys_neg = OdeSystem(
        name="ramp", dimension=1, obs_dim=1, rhs=lambda t, x, b, e: -np.broadcast_to(b[..., 0:1], x.shape),
        observe=lambda x: x, initial_state=np.array([1.0]), t0=0.0, t_end=4.0,
        param_names=("slope",), uses_eta=False, obs_log=(True,),
    )
    ds = Dataset(
        times=np.array([0.5, 1.0, 1.5]),
        observations=np.zeros((3, 1)),
        log_scale=(True,),
    )
    from odesieve.optimize import SearchSpace

    spec = FitSpec(
        system=sys_neg, dataset=ds, eta_mode="none", step=0.5,
        space=SearchSpace(lower=np.array([0.01]), upper=np.array([2.0]), scale=("linear",)),
    )
    crossing = nls_objective(spec, np.array([1.0]))  # x(4) = -3: negative tail
    assert crossing == PENALTY_BASE
    fine = nls_objective(spec, np.array([0.1]))  # stays positive
    assert fine < PENALTY_BASE


def test_candidate_length_checked(hiv_zero_noise):
    sysh, ds = hiv_zero_noise
    spec = FitSpec(system=sysh, dataset=ds, eta_mode="constant")
    with pytest.raises(ValueError):
        nls_objective(spec, np.ones(3))


def test_eta_values_from_free_modes(hiv_zero_noise):
    sysh, ds = hiv_zero_noise
    spec = FitSpec(system=sysh, dataset=ds, eta_mode="constant")
    ts = np.array([0.0, 10.0, 20.0])
    np.testing.assert_allclose(
        eta_values_from_free(spec, np.array([36.0, 1e3, 3.0, 2e-5]), ts), 2e-5
    )
    spl = SplineConfig(0.0, 20.0, interior_knots=1, order=3)
    spec2 = FitSpec(system=sysh, dataset=ds, eta_mode="spline", spline=spl)
    alpha = np.array([1e-5, 2e-5, 3e-5, 1e-5])
    free = np.concatenate([[36.0, 1e3, 3.0], alpha])
    np.testing.assert_allclose(
        eta_values_from_free(spec2, free, ts), basis_eval(spl, ts) @ alpha
    )
    spec_d = FitSpec(system=decay_system(), dataset=decay_dataset(), eta_mode="none", step=0.05)
    with pytest.raises(ValueError):
        eta_values_from_free(spec_d, np.array([1.0]), ts)


# ---------------------------------------------------------------------------
# fitting


def test_fit_recovers_decay_rate():
    ds = decay_dataset(rate=1.2, sd=0.0)
    spec = FitSpec(
        system=decay_system(), dataset=ds, eta_mode="none", step=0.05,
        optimizer=OptimizerConfig(seed=2),
    )
    rep = fit(spec)
    assert rep.theta_hat.beta[0] == pytest.approx(1.2, rel=1e-3)
    assert rep.diagnostics["converged"]
    assert rep.k == 1 and rep.n == 25 and rep.n_scalars == 25
    assert rep.rss < 1e-8
    assert rep.sigma2_hat == pytest.approx(rep.rss / (25 - 1))


def test_fit_is_deterministic():
    ds = decay_dataset(sd=0.05)
    spec = FitSpec(
        system=decay_system(), dataset=ds, eta_mode="none", step=0.1,
        optimizer=OptimizerConfig(seed=11, max_generations=40),
    )
    a, b = fit(spec), fit(spec)
    np.testing.assert_array_equal(a.theta_hat.free, b.theta_hat.free)
    np.testing.assert_array_equal(a.objective_trace, b.objective_trace)


def test_fit_report_text_mentions_the_essentials():
    ds = decay_dataset()
    spec = FitSpec(
        system=decay_system(), dataset=ds, eta_mode="none", step=0.1,
        optimizer=OptimizerConfig(seed=1, max_generations=30),
    )
    text = fit(spec).report_text()
    for token in ("system = decay", "rate", "rss", "sigma2_hat", "converged"):
        assert token in text


def test_weighted_objective_respects_dataset_weights():
    base = decay_dataset(sd=0.05, seed=3)
    w = np.linspace(0.5, 2.0, base.n_times)
    weighted = Dataset(
        times=base.times, observations=base.observations,
        log_scale=base.log_scale, noise_sd=base.noise_sd, weights=w,
    )
    spec_u = FitSpec(system=decay_system(), dataset=base, eta_mode="none", step=0.1)
    spec_w = FitSpec(system=decay_system(), dataset=weighted, eta_mode="none", step=0.1)
    theta = np.array([1.0])
    # nls_objective is always unweighted; the weighted objective only enters fit()
    assert nls_objective(spec_u, theta) == nls_objective(spec_w, theta)
    rep_u = fit(
        FitSpec(system=decay_system(), dataset=base, eta_mode="none", step=0.1,
                optimizer=OptimizerConfig(seed=5, max_generations=40))
    )
    rep_w = fit(
        FitSpec(system=decay_system(), dataset=weighted, eta_mode="none", step=0.1,
                optimizer=OptimizerConfig(seed=5, max_generations=40))
    )
    assert rep_u.theta_hat.beta[0] != rep_w.theta_hat.beta[0]


def test_evaluate_fit_scores_a_fixed_vector(hiv_zero_noise):
    sysh, ds = hiv_zero_noise
    spec = FitSpec(system=sysh, dataset=ds, eta_mode="constant", step=0.1)
    free = np.array([36.0, 1000.0, 3.0, 9.5e-6])
    rep = evaluate_fit(spec, free)
    np.testing.assert_array_equal(rep.theta_hat.free, free)
    assert rep.rss == pytest.approx(nls_objective(spec, free))
    assert rep.diagnostics["converged"]
    with pytest.raises(ValueError):
        evaluate_fit(spec, np.ones(2))


def test_fit_spline_mode_produces_eta_curve(hiv_zero_noise):
    sysh, _ = hiv_zero_noise
    ds = simulate_dataset(sysh, scenario("iv"), seed=4, noise_fraction=0.0)
    spl = SplineConfig(0.0, 20.0, interior_knots=1, order=3, coef_bound=3e-4)
    spec = FitSpec(
        system=sysh, dataset=ds, eta_mode="spline", spline=spl, step=0.25,
        optimizer=OptimizerConfig(seed=6, max_generations=60),
    )
    rep = fit(spec)
    assert rep.spline_model is not None
    times, values = rep.eta_curve
    assert times[0] == 0.0 and times[-1] == 20.0
    assert values.shape == times.shape
    # fitted curve must stay within an order of magnitude of the truth's range
    truth = scenario("iv").eta(times)
    assert np.max(values) < 10 * truth.max()


def test_bias_vs_step_study_demands_zero_noise():
    spec = FitSpec(system=decay_system(), dataset=decay_dataset(sd=0.05), eta_mode="none", step=0.1)
    with pytest.raises(ValueError):
        bias_vs_step_study(spec, [0.5, 0.25, 0.125], np.array([1.2]))


def test_bias_vs_step_study_error_decreases_on_decay():
    ds = decay_dataset(rate=1.2, sd=0.0)
    spec = FitSpec(
        system=decay_system(), dataset=ds, eta_mode="none", step=0.5,
        optimizer=OptimizerConfig(seed=3),
    )
    rows = bias_vs_step_study(spec, [0.5, 0.25, 0.125], np.array([1.2]))
    assert rows.shape == (3, 2)
    np.testing.assert_allclose(rows[:, 0], [0.5, 0.25, 0.125])
    errs = rows[:, 1]
    assert errs[2] <= errs[0]
