import numpy as np
import pytest

from odesieve import (
    Dataset,
    FitSpec,
    OdeSystem,
    OptimizerConfig,
    SearchSpace,
    SplineConfig,
    aicc,
    are,
    decay_system,
    fit,
    hiv_system,
    pseudo_information,
    scenario,
    select_spline,
    simulate_dataset,
    weighted_bootstrap,
)
from odesieve.inference import draw_weights, finite_diff_hessian
from odesieve.rng import substream

from oracles import aicc_reference


def decay_dataset(rate=1.2, sd=0.03, seed=17, n=25):
    times = np.linspace(0.1, 2.0, n)
    truth = np.exp(-rate * times)
    obs = truth + sd * substream(seed).standard_normal(n)
    return Dataset(
        times=times,
        observations=obs[:, None],
        log_scale=(False,),
        noise_sd=np.full((n, 1), sd),
    )


def decay_spec(ds, seed=2, generations=60):
    return FitSpec(
        system=decay_system(),
        dataset=ds,
        eta_mode="none",
        step=0.1,
        optimizer=OptimizerConfig(seed=seed, max_generations=generations),
    )


# ---------------------------------------------------------------------------
# finite differences


def test_finite_diff_hessian_on_quadratic():
    A = np.array([[2.0, 0.3], [0.3, 1.5]])
    f = lambda x: float(x @ A @ x)
    H = finite_diff_hessian(f, np.array([0.4, -0.2]))
    np.testing.assert_allclose(H, 2 * A, atol=1e-5)


def test_finite_diff_hessian_scales_steps_with_magnitude():
    # curvature in a coordinate of size 1e5 is resolved only with relative steps
    f = lambda x: (x[0] / 1e5 - 1.0) ** 2 + x[1] ** 2
    H = finite_diff_hessian(f, np.array([1e5, 0.0]))
    np.testing.assert_allclose(H[0, 0], 2e-10, rtol=1e-4)
    np.testing.assert_allclose(H[1, 1], 2.0, rtol=1e-4)


# ---------------------------------------------------------------------------
# pseudo-information


def test_pseudo_information_matches_gauss_newton_on_decay():
    ds = decay_dataset()
    spec = decay_spec(ds)
    rep = fit(spec)
    info = pseudo_information(spec, rep.free_values)
    rhat = rep.free_values[0]
    J = -ds.times * np.exp(-rhat * ds.times)  # d/dr of the mean response
    oracle = info.sigma2_hat / np.sum(J**2)
    assert info.covariance[0, 0] == pytest.approx(oracle, rel=0.05)
    assert not info.floored and not info.indefinite
    assert info.gradient_norm < 1e-4
    assert info.standard_errors[0] == pytest.approx(np.sqrt(info.covariance[0, 0]))


def test_pseudo_information_sigma2_is_rss_over_dof():
    ds = decay_dataset()
    spec = decay_spec(ds)
    rep = fit(spec)
    info = pseudo_information(spec, rep.free_values)
    assert info.sigma2_hat == pytest.approx(rep.rss / (ds.n_times - 1))


def test_pseudo_information_flags_an_inert_direction():
    # second parameter never enters the dynamics: zero curvature, flagged
    def rhs(t, x, beta, eta_value):
        return -np.broadcast_to(beta[..., 0:1], x.shape) * x

    sys2 = OdeSystem(
        name="decay2", dimension=1, obs_dim=1, rhs=rhs, observe=lambda x: x,
        initial_state=np.array([1.0]), t0=0.0, t_end=2.0,
        param_names=("rate", "ghost"), uses_eta=False, obs_log=(False,),
    )
    ds = decay_dataset()
    spec = FitSpec(
        system=sys2, dataset=ds, eta_mode="none", step=0.1,
        space=SearchSpace(
            lower=np.array([0.05, 0.1]), upper=np.array([10.0, 10.0]),
            scale=("log", "linear"),
        ),
    )
    info = pseudo_information(spec, np.array([1.2, 1.0]))
    assert info.floored
    assert info.condition_estimate == np.inf
    # the inert coordinate reports enormous uncertainty, not a small one
    assert info.covariance[1, 1] > 1e6 * info.covariance[0, 0]


def test_spec_rejects_saturated_parameter_count():
    # k >= n_scalars leaves no residual degrees of freedom anywhere downstream
    times = np.array([0.5, 1.0])
    ds = Dataset(times=times, observations=np.ones((2, 1)) * 0.5, log_scale=(False,))

    def rhs(t, x, beta, eta_value):
        return -np.broadcast_to(beta[..., 0:1], x.shape) * x

    sys2 = OdeSystem(
        name="decay2", dimension=1, obs_dim=1, rhs=rhs, observe=lambda x: x,
        initial_state=np.array([1.0]), t0=0.0, t_end=2.0,
        param_names=("rate", "ghost"), uses_eta=False, obs_log=(False,),
    )
    with pytest.raises(ValueError, match="scalar observations"):
        FitSpec(
            system=sys2, dataset=ds, eta_mode="none", step=0.25,
            space=SearchSpace(
                lower=np.array([0.05, 0.1]), upper=np.array([10.0, 10.0]),
                scale=("log", "linear"),
            ),
        )


# ---------------------------------------------------------------------------
# bootstrap weights


def test_draw_weights_deterministic_exponential():
    a = draw_weights(7, 3, 1000)
    b = draw_weights(7, 3, 1000)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, draw_weights(7, 4, 1000))
    assert np.all(a > 0)
    assert a.mean() == pytest.approx(1.0, abs=0.1)
    assert a.std() == pytest.approx(1.0, abs=0.15)


def test_bootstrap_intervals_cover_the_base_estimate():
    ds = decay_dataset(sd=0.05, seed=23)
    spec = decay_spec(ds, seed=3, generations=40)
    base = fit(spec)
    res = weighted_bootstrap(spec, B=60, seed=101, base_report=base)
    assert res.replicates.shape[1] == 1
    assert res.n_failed == 0
    lo, hi = res.intervals[0]
    assert lo < base.free_values[0] < hi
    assert lo < 1.2 < hi  # truth, with this much data and noise
    assert res.free_names == ("rate",)
    # repeat runs are identical
    res2 = weighted_bootstrap(spec, B=60, seed=101, base_report=base)
    np.testing.assert_array_equal(res.replicates, res2.replicates)


def test_bootstrap_unit_weights_collapse_the_interval():
    ds = decay_dataset(sd=0.05, seed=23)
    spec = decay_spec(ds, seed=3, generations=40)
    base = fit(spec)
    forced = weighted_bootstrap(spec, B=60, seed=101, base_report=base, force_unit_weights=True)
    lo, hi = forced.intervals[0]
    real = weighted_bootstrap(spec, B=60, seed=101, base_report=base)
    rlo, rhi = real.intervals[0]
    assert (hi - lo) < 1e-3 * (rhi - rlo)


def test_bootstrap_interval_levels():
    ds = decay_dataset(sd=0.05, seed=23)
    spec = decay_spec(ds, seed=3, generations=40)
    base = fit(spec)
    res = weighted_bootstrap(spec, B=60, seed=101, base_report=base)
    narrow = res.intervals_at(0.5)
    wide = res.intervals_at(0.99)
    assert narrow[0, 1] - narrow[0, 0] < wide[0, 1] - wide[0, 0]
    with pytest.raises(ValueError):
        res.intervals_at(1.5)


def test_bootstrap_input_validation():
    ds = decay_dataset()
    spec = decay_spec(ds)
    with pytest.raises(ValueError):
        weighted_bootstrap(spec, B=10, seed=1)
    weighted = Dataset(
        times=ds.times, observations=ds.observations, log_scale=ds.log_scale,
        weights=np.ones(ds.n_times),
    )
    with pytest.raises(ValueError):
        weighted_bootstrap(decay_spec(weighted), B=60, seed=1)
    with pytest.raises(ValueError):
        weighted_bootstrap(spec, B=60, seed=1, levels=(0.9, 0.1))


def test_bootstrap_eta_band_on_constant_fit():
    sysh = hiv_system()
    ds = simulate_dataset(sysh, scenario("i"), seed=9)
    spec = FitSpec(
        system=sysh, dataset=ds, eta_mode="constant", step=0.25,
        optimizer=OptimizerConfig(seed=4, max_generations=60),
    )
    base = fit(spec)
    res = weighted_bootstrap(spec, B=50, seed=77, base_report=base)
    times, lo, hi = res.eta_band
    assert times.shape == lo.shape == hi.shape == (201,)
    assert np.all(lo <= hi)


# ---------------------------------------------------------------------------
# AICc and model ranking


def test_aicc_pinned_value():
    assert aicc(65.0, 65, 6) == pytest.approx(13.4483, abs=1e-4)


@pytest.mark.parametrize("rss,n,k", [(3.7, 80, 4), (120.0, 40, 7), (0.5, 33, 2)])
def test_aicc_matches_reference_formula(rss, n, k):
    assert aicc(rss, n, k) == pytest.approx(aicc_reference(rss, n, k), rel=1e-12)


def test_aicc_penalty_grows_with_k_at_fixed_rss():
    vals = [aicc(10.0, 60, k) for k in range(1, 12)]
    assert np.all(np.diff(vals) > 0)


def test_aicc_guards():
    with pytest.raises(ValueError):
        aicc(0.0, 60, 3)
    with pytest.raises(ValueError):
        aicc(10.0, 8, 7)  # n <= k + 1


def test_select_spline_ranks_and_marks_infeasible():
    sysh = hiv_system()
    ds = simulate_dataset(sysh, scenario("iv"), seed=12)
    spl = SplineConfig(0.0, 20.0, interior_knots=1, order=3, coef_bound=3e-4)
    spec = FitSpec(
        system=sysh, dataset=ds, eta_mode="spline", spline=spl, step=0.25,
        optimizer=OptimizerConfig(seed=8, max_generations=40),
    )
    rows = select_spline(spec, orders=(3,), basis_counts=(2, 3, 4))
    assert len(rows) == 3
    notes = {r.n_basis: r.note for r in rows}
    assert notes[2] == "infeasible"
    scored = [r for r in rows if r.aicc is not None]
    assert len(scored) == 2
    assert scored == sorted(scored, key=lambda r: r.aicc)
    assert rows[-1].aicc is None  # blanks rank last
    for r in scored:
        assert r.k == 3 + r.n_basis
        assert r.aicc == pytest.approx(aicc(r.rss, ds.n_scalars, r.k))


def test_select_spline_requires_spline_template():
    sysh = hiv_system()
    ds = simulate_dataset(sysh, scenario("i"), seed=2)
    spec = FitSpec(system=sysh, dataset=ds, eta_mode="constant")
    with pytest.raises(ValueError):
        select_spline(spec)


# ---------------------------------------------------------------------------
# error metric


def test_are_formula():
    est = np.array([[1.1, 90.0], [0.9, 110.0]])
    np.testing.assert_allclose(are(est, [1.0, 100.0]), [10.0, 10.0])


def test_are_validation():
    with pytest.raises(ValueError):
        are(np.ones((2, 2)), [1.0])
    with pytest.raises(ValueError):
        are(np.ones((2, 2)), [1.0, 0.0])
