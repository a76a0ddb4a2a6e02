import numpy as np
import pytest

from odesieve import (
    Dataset,
    decay_system,
    hiv_system,
    integrate,
    interpolate,
    make_uniform_grid,
    read_dataset,
    scenario,
    scenario_eta,
    simulate_dataset,
    write_dataset,
)
from odesieve.rng import substream

from oracles import hiv_rhs_scalar


# ---------------------------------------------------------------------------
# systems


def test_hiv_rhs_hand_values():
    sysh = hiv_system()
    x = np.array([600.0, 30.0, 1e5])
    beta = np.array([36.0, 1000.0, 3.0])
    got = sysh.rhs(0.0, x, beta, 9.5e-6)
    # lambda - rho*TU - eta*TU*V = 36 - 64.8 - 570
    np.testing.assert_allclose(got, [-598.8, 555.0, -285000.0], rtol=1e-12)
    want = hiv_rhs_scalar(x, 36.0, 0.108, 1000.0, 0.5, 3.0, 9.5e-6)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_hiv_rhs_vectorized_population():
    sysh = hiv_system()
    x = np.tile([600.0, 30.0, 1e5], (4, 1))
    beta = np.tile([36.0, 1000.0, 3.0], (4, 1))
    eta = np.full(4, 9.5e-6)
    got = sysh.rhs(0.0, x, beta, eta)
    assert got.shape == (4, 3)
    np.testing.assert_allclose(got, np.tile([-598.8, 555.0, -285000.0], (4, 1)))


def test_hiv_requires_eta():
    sysh = hiv_system()
    with pytest.raises(ValueError):
        sysh.rhs(0.0, np.ones(3), np.ones(3), None)


def test_hiv_observation_map():
    sysh = hiv_system()
    y = sysh.observe(np.array([600.0, 30.0, 1e5]))
    np.testing.assert_allclose(y, [630.0, 1e5])
    assert sysh.obs_log == (True, True)
    assert sysh.fixed == {"rho": 0.108, "delta": 0.5}


def test_decay_system_basics():
    sys_d = decay_system(x0=2.0, t_span=(0.0, 3.0))
    assert not sys_d.uses_eta
    assert sys_d.obs_log == (False,)
    got = sys_d.rhs(0.0, np.array([2.0]), np.array([0.7]), None)
    np.testing.assert_allclose(got, [-1.4])


# ---------------------------------------------------------------------------
# scenarios


def test_scenario_table():
    for sid, grid_size, kind in [
        ("i", "small", "constant"),
        ("ii", "small", "time_varying"),
        ("iii", "large", "constant"),
        ("iv", "large", "time_varying"),
        ("complex", "large", "time_varying"),
    ]:
        sc = scenario(sid)
        assert (sc.grid_size, sc.eta_kind) == (grid_size, kind)
        np.testing.assert_allclose(sc.beta_truth, [36.0, 1000.0, 3.0])
        assert sc.noise_fraction == 0.2
        np.testing.assert_allclose(sc.design_times, 0.5 * np.arange(1, 41))
    with pytest.raises(ValueError):
        scenario("v")


def test_scenario_eta_formulas():
    t = np.array([0.0, 5.0, 20.0])
    np.testing.assert_allclose(scenario_eta("i", t), 9.5e-6)
    np.testing.assert_allclose(
        scenario_eta("ii", t), 9e-5 * (1 - 0.9 * np.cos(np.pi * t / 400))
    )
    np.testing.assert_allclose(scenario_eta("iii", t), 3.84e-5)
    np.testing.assert_allclose(
        scenario_eta("iv", t), 9e-5 * (1 - 0.9 * np.cos(np.pi * t / 40))
    )
    np.testing.assert_allclose(
        scenario_eta("complex", t), 9e-6 + 9e-7 * t * (1 - 0.5 * np.sin(np.pi * t / 5.8))
    )


def test_constant_scenarios_report_their_level():
    assert scenario("i").eta_constant == pytest.approx(9.5e-6)
    assert scenario("iv").eta_constant is None


def test_scenario_iii_matches_time_average_of_iv():
    t = np.linspace(0.0, 20.0, 20001)
    avg = np.trapezoid(scenario_eta("iv", t), t) / 20.0
    assert avg == pytest.approx(3.84e-5, rel=5e-3)


# ---------------------------------------------------------------------------
# dataset container


def test_dataset_validation():
    t = np.array([0.5, 1.0])
    with pytest.raises(ValueError):
        Dataset(times=np.array([1.0, 0.5]), observations=np.ones((2, 1)), log_scale=(False,))
    with pytest.raises(ValueError):
        Dataset(times=t, observations=np.ones((3, 1)), log_scale=(False,))
    with pytest.raises(ValueError):
        Dataset(times=t, observations=np.array([[1.0], [np.nan]]), log_scale=(False,))


def test_dataset_counts():
    ds = Dataset(
        times=np.array([0.5, 1.0, 1.5]),
        observations=np.ones((3, 2)),
        log_scale=(True, True),
    )
    assert ds.n_times == 3
    assert ds.n_scalars == 6


# ---------------------------------------------------------------------------
# simulation


def test_simulate_zero_noise_matches_truth_trajectory():
    sysh = hiv_system()
    sc = scenario("i")
    ds = simulate_dataset(sysh, sc, seed=1, noise_fraction=0.0)
    sol = integrate(sysh, sc.beta_truth, make_uniform_grid(0.0, 20.0, 0.005), eta=sc.eta)
    raw = sysh.observe(interpolate(sol, sc.design_times))
    np.testing.assert_allclose(ds.observations, np.log(raw), rtol=1e-12)


def test_simulate_is_deterministic_in_the_seed():
    sysh = hiv_system()
    sc = scenario("i")
    a = simulate_dataset(sysh, sc, seed=7)
    b = simulate_dataset(sysh, sc, seed=7)
    np.testing.assert_array_equal(a.observations, b.observations)
    c = simulate_dataset(sysh, sc, seed=8)
    assert not np.array_equal(a.observations, c.observations)


def test_simulate_accepts_generator_seed():
    sysh = hiv_system()
    sc = scenario("i")
    a = simulate_dataset(sysh, sc, seed=substream(3))
    b = simulate_dataset(sysh, sc, seed=3)
    np.testing.assert_array_equal(a.observations, b.observations)


def test_simulate_noise_is_proportional_on_raw_scale():
    sysh = hiv_system()
    sc = scenario("i")
    noisy = simulate_dataset(sysh, sc, seed=5)
    clean = simulate_dataset(sysh, sc, seed=5, noise_fraction=0.0)
    z = (np.exp(noisy.observations) - np.exp(clean.observations)) / (
        0.2 * np.exp(clean.observations)
    )
    # the implied standard-normal draws must look standard normal
    assert abs(z.mean()) < 0.25
    assert 0.75 < z.std() < 1.3
    np.testing.assert_allclose(noisy.noise_sd, 0.2 * np.exp(clean.observations))


def test_simulate_rejects_nonpositive_draw_under_log():
    sysh = hiv_system()
    sc = scenario("i")
    with pytest.raises(ValueError, match="non-positive"):
        simulate_dataset(sysh, sc, seed=0, noise_fraction=2.0)


def test_simulate_rejects_design_times_outside_interval():
    sysh = hiv_system()
    sc = scenario("i")
    with pytest.raises(ValueError):
        simulate_dataset(sysh, sc, seed=1, times=np.array([0.5, 25.0]))


# ---------------------------------------------------------------------------
# CSV round trip


def test_write_read_round_trip_is_bit_exact(tmp_path):
    sysh = hiv_system()
    ds = simulate_dataset(sysh, scenario("ii"), seed=11)
    path = str(tmp_path / "data.csv")
    write_dataset(ds, path)
    back = read_dataset(path)
    np.testing.assert_array_equal(back.times, ds.times)
    np.testing.assert_array_equal(back.observations, ds.observations)
    np.testing.assert_array_equal(back.noise_sd, ds.noise_sd)
    assert back.log_scale == ds.log_scale
    assert back.meta["scenario"] == "ii"


def test_read_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(str(tmp_path / "absent.csv"))
    # CSV present but sidecar missing
    p = tmp_path / "orphan.csv"
    p.write_text("time,y1\n0.5,1.0\n")
    with pytest.raises(FileNotFoundError):
        read_dataset(str(p))


def test_read_malformed_cell_reports_line(tmp_path):
    sysh = hiv_system()
    ds = simulate_dataset(sysh, scenario("i"), seed=2)
    path = str(tmp_path / "data.csv")
    write_dataset(ds, path)
    lines = open(path).read().splitlines()
    lines[3] = lines[3].replace(lines[3].split(",")[1], "not_a_number", 1)
    open(path, "w").write("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="line 4"):
        read_dataset(path)
