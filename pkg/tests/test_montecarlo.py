import math

import numpy as np
import pytest

from sdelab.calculus import DensityField, build_coefficient_set
from sdelab.montecarlo import (
    MonteCarloError,
    SimulationConfig,
    ergodic_average,
    exit_statistics,
    krylov_functional,
    ks_marginal_distance,
    moment_curve,
    simulate_ensemble,
    transition_histogram,
)


def cs_identity(H=None, d=2):
    A = [["1" if j == i else "0" for j in range(i, d)] for i in range(d)]
    return build_coefficient_set(A, None, H, d=d)


def cs_ou(d=2):
    return cs_identity(H=[f"-x{i+1}" for i in range(d)], d=d)


BM = cs_identity()
OU = cs_ou()


def test_config_validation():
    with pytest.raises(MonteCarloError):
        SimulationConfig(dt=0.0, horizon=1.0, paths=10, seed=1)
    with pytest.raises(MonteCarloError):
        SimulationConfig(dt=1e-3, horizon=1.0, paths=10, seed=1, radii=(4.0, 2.0))
    with pytest.raises(MonteCarloError):
        SimulationConfig(dt=1e-3, horizon=1.0, paths=10, seed=1, scheme="milstein")


def test_bm_second_moment():
    cfg = SimulationConfig(dt=1e-3, horizon=1.0, paths=4000, seed=11, radii=(16.0,))
    ens = simulate_ensemble(BM, [0.0, 0.0], cfg, save_times=[1.0])
    X = ens.state_at(1.0)
    r2 = np.einsum("ij,ij->i", X, X)
    est = r2.mean()
    se = r2.std(ddof=1) / math.sqrt(len(r2))
    assert abs(est - 2.0) <= 3 * se


def test_ou_mean_decay():
    cfg = SimulationConfig(dt=1e-3, horizon=1.0, paths=4000, seed=12, radii=(16.0,))
    ens = simulate_ensemble(OU, [2.0, 0.0], cfg, save_times=[1.0])
    X = ens.state_at(1.0)
    se = X[:, 0].std(ddof=1) / math.sqrt(len(X))
    assert abs(X[:, 0].mean() - 2.0 * math.exp(-1.0)) <= 3 * se


def test_seed_determinism_across_threads():
    cfg = SimulationConfig(dt=1e-2, horizon=0.5, paths=600, seed=77, radii=(8.0, 16.0))
    a = simulate_ensemble(OU, [1.0, -1.0], cfg, save_times=[0.25, 0.5], threads=1)
    b = simulate_ensemble(OU, [1.0, -1.0], cfg, save_times=[0.25, 0.5], threads=4)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.clip_counts, b.clip_counts)
    for r in cfg.radii:
        assert np.array_equal(
            a.exit_times[r], b.exit_times[r], equal_nan=True
        )


def test_clip_accounting_zero_for_lipschitz():
    cfg = SimulationConfig(dt=1e-3, horizon=1.0, paths=500, seed=3, radii=(16.0,), clip=10.0)
    for cs in (BM, OU):
        ens = simulate_ensemble(cs, [0.5, 0.5], cfg)
        assert int(ens.clip_counts.sum()) == 0


def test_stopped_paths_respect_ladder_with_overshoot():
    # strong outward drift pushes every path through the ladder quickly
    cs = cs_identity(H=["4*x1", "4*x2"])
    cfg = SimulationConfig(dt=1e-3, horizon=2.0, paths=300, seed=9, radii=(2.0, 3.0))
    ens = simulate_ensemble(cs, [1.0, 0.0], cfg, save_times=[2.0])
    assert np.all(ens.status == 1)
    # frozen states sit beyond the top radius only by the recorded overshoot
    X = ens.state_at(2.0)
    rn = np.linalg.norm(X, axis=1)
    assert np.all(rn <= 3.0 + ens.overshoot_max + 1e-12)
    # sigma_n nondecreasing in n per path
    t2 = ens.exit_times[2.0]
    t3 = ens.exit_times[3.0]
    assert np.all(t2[np.isfinite(t3)] <= t3[np.isfinite(t3)] + 1e-12)


def test_bm_exit_time_from_ball():
    # E[exit time of B_2 from 0] = (4 - 0)/d = 2 for planar BM
    cfg = SimulationConfig(dt=1e-3, horizon=12.0, paths=2000, seed=21, radii=(2.0, 6.0))
    ens = simulate_ensemble(BM, [0.0, 0.0], cfg)
    stats = exit_statistics(ens, [2.0])
    row = stats["per_radius"][0]
    assert row["exited"] >= 1990
    assert row["mean_exit_time"] == pytest.approx(2.0, rel=0.10)


def test_superlinear_blowup_proxy():
    # from (1.5, 0) the cubic drift escapes before noise can trap a path near
    # the origin (from (1, 0) about 1.2% of paths linger past T=2)
    cs = cs_identity(H=["norm2(x)*x1", "norm2(x)*x2"])
    cfg = SimulationConfig(dt=1e-3, horizon=2.0, paths=1000, seed=31, radii=(4.0, 8.0))
    ens = simulate_ensemble(cs, [1.5, 0.0], cfg)
    stats = exit_statistics(ens, [4.0, 8.0])
    p8 = stats["per_radius"][1]["p_exit_by_horizon"]
    assert p8 >= 0.99
    med4 = stats["per_radius"][0]["median_exit_time"]
    med8 = stats["per_radius"][1]["median_exit_time"]
    assert med8 - med4 < 0.1  # blow-up signature: ladder crossed in a flash

    ens1 = simulate_ensemble(cs, [1.0, 0.0], cfg)
    p8_1 = np.mean(np.isfinite(ens1.exit_times[8.0]))
    assert p8_1 >= 0.98


def test_bm_stays_inside_radius_8_by_t2():
    cfg = SimulationConfig(dt=1e-3, horizon=2.0, paths=1000, seed=32, radii=(8.0, 16.0))
    ens = simulate_ensemble(BM, [0.0, 0.0], cfg)
    stats = exit_statistics(ens, [8.0])
    assert stats["per_radius"][0]["p_exit_by_horizon"] <= 0.01


def test_moment_curve_bound_ratio():
    cfg = SimulationConfig(dt=1e-3, horizon=1.0, paths=2000, seed=41, radii=(16.0,))
    times = [0.25, 0.5, 1.0]
    ens = simulate_ensemble(OU, [2.0, 0.0], cfg, save_times=times)
    from sdelab.expr import parse_expr

    rows = moment_curve(ens, parse_expr("norm2(x) + 1", 2), times, bound={"M": 2.0})
    for row in rows:
        assert row["bound_ratio"] <= 1.0


def test_moment_curve_reaches_stationary_level():
    # E[|X_t|^2 + 1] -> d/2 + 1 = 2 for the unit-rate confining drift
    from sdelab.expr import parse_expr

    cfg = SimulationConfig(dt=1e-3, horizon=6.0, paths=2000, seed=43, radii=(16.0,))
    ens = simulate_ensemble(OU, [2.0, 0.0], cfg, save_times=[6.0])
    row = moment_curve(ens, parse_expr("norm2(x) + 1", 2), [6.0])[0]
    assert abs(row["estimate"] - 2.0) <= 3 * row["std_error"]


def test_weak_order_sanity():
    times = [1.0]
    from sdelab.expr import parse_expr

    phi = parse_expr("norm2(x) + 1", 2)
    results = []
    for dt in (2e-3, 1e-3):
        cfg = SimulationConfig(dt=dt, horizon=1.0, paths=4000, seed=55, radii=(16.0,))
        ens = simulate_ensemble(BM, [0.0, 0.0], cfg, save_times=times)
        results.append(moment_curve(ens, phi, times)[0])
    diff = abs(results[0]["estimate"] - results[1]["estimate"])
    combined = math.hypot(results[0]["std_error"], results[1]["std_error"])
    assert diff <= 2 * combined


def test_krylov_constant_f_is_exact():
    cfg = SimulationConfig(dt=1e-2, horizon=1.0, paths=50, seed=5, radii=(16.0,))
    out = krylov_functional(BM, lambda pts: np.ones(len(pts)), 1.0, [[0.0, 0.0]], cfg)
    assert out["per_start"][0]["estimate"] == pytest.approx(1.0, abs=1e-12)
    assert out["per_start"][0]["std_error"] == pytest.approx(0.0, abs=1e-15)


def test_krylov_ball_occupation_matches_heat_kernel():
    # E_0[int_0^1 1_{B_1}(X_s) ds] = int_0^1 (1 - e^{-1/(2s)}) ds for planar BM
    from scipy.integrate import quad

    truth, _ = quad(lambda s: 1 - math.exp(-1 / (2 * s)), 0, 1)
    cfg = SimulationConfig(dt=1e-3, horizon=1.0, paths=4000, seed=61, radii=(16.0,))
    ind = lambda pts: (np.einsum("ij,ij->i", pts, pts) <= 1.0).astype(float)
    out = krylov_functional(BM, ind, 1.0, [[0.0, 0.0]], cfg)
    row = out["per_start"][0]
    assert abs(row["estimate"] - truth) <= 3 * row["std_error"] + 2e-3


def test_estimator_result_invariant():
    from sdelab.montecarlo import estimate_mean

    vals = np.arange(16.0)
    r = estimate_mean(vals)
    assert r.std_error == pytest.approx(np.std(vals, ddof=1) / 4.0)
    assert r.paths == 16
    assert r.within(r.estimate, 0.0)


def test_krylov_singular_f_stable_under_refinement():
    # |x|^{-1/2} on the unit ball is integrable along paths: the estimate
    # settles under dt -> dt/4 instead of growing without bound
    def f(pts):
        r2 = np.einsum("ij,ij->i", pts, pts)
        return np.where(r2 <= 1.0, np.minimum(r2, 1.0) ** -0.25, 0.0)

    cfg = SimulationConfig(dt=2e-3, horizon=0.5, paths=2000, seed=99, radii=(16.0,))
    out = krylov_functional(BM, f, 0.5, [[0.0, 0.0]], cfg, refine_check=True)
    assert out["singular_hits"] > 0  # every path starts exactly on the singularity
    assert np.isfinite(out["per_start"][0]["estimate"])
    assert out["refinement_shift"] < 0.1
    assert not out["refinement_flag"]


def test_krylov_reports_lq_norm():
    rho = DensityField.from_expression("1", 2)
    cfg = SimulationConfig(dt=1e-2, horizon=0.5, paths=100, seed=7, radii=(16.0,))
    ind = lambda pts: (np.einsum("ij,ij->i", pts, pts) <= 1.0).astype(float)
    out = krylov_functional(BM, ind, 0.5, [[0.0, 0.0]], cfg, rho=rho, q=2.0)
    # ||1_{B_1}||_{L^2(dx)} = sqrt(pi)
    assert out["f_lq_mu_norm"] == pytest.approx(math.sqrt(math.pi), rel=0.02)
    assert "fitted_constant" in out


def test_ergodic_average_constant_function():
    cfg = SimulationConfig(dt=1e-2, horizon=20.0, paths=1, seed=71, radii=(16.0,))
    out = ergodic_average(OU, [0.0, 0.0], cfg, lambda pts: np.ones(len(pts)), burn_in=1.0)
    assert out["terminal_average"] == pytest.approx(1.0, abs=1e-12)


def test_ergodic_average_ou_radial_second_moment():
    from sdelab.expr import parse_expr

    cfg = SimulationConfig(dt=1e-3, horizon=200.0, paths=1, seed=73, radii=(16.0,))
    out = ergodic_average(OU, [0.0, 0.0], cfg, parse_expr("norm2(x)", 2), burn_in=5.0)
    assert abs(out["terminal_average"] - 1.0) <= 0.05
    assert out["non_converged_note"] is None


def test_ergodic_average_burn_in_guard():
    cfg = SimulationConfig(dt=1e-2, horizon=5.0, paths=1, seed=74, radii=(2.0,))
    cs = cs_identity(H=["4*x1", "4*x2"])
    with pytest.raises(MonteCarloError):
        ergodic_average(cs, [1.0, 0.0], cfg, lambda pts: np.ones(len(pts)), burn_in=4.0)


def test_transition_histogram_short_time_concentrates():
    cfg = SimulationConfig(dt=1e-3, horizon=0.01, paths=2000, seed=81, radii=(16.0,))
    out = transition_histogram(BM, [0.7, -0.3], 0.01, cfg)
    for mean, se, want in zip(out["mean"], out["mean_std_error"], [0.7, -0.3]):
        assert abs(mean - want) <= 3 * se


def test_transition_histogram_ou_vs_gaussian_reference():
    cfg = SimulationConfig(dt=1e-3, horizon=6.0, paths=4000, seed=83, radii=(16.0,))
    rho = DensityField.from_expression("exp(-norm2(x))", 2)
    out = transition_histogram(OU, [1.0, 1.0], 6.0, cfg, rho_ref=rho)
    for ks in out["ks_distance"]:
        assert ks <= 1.63 / math.sqrt(cfg.paths)


def test_transition_histogram_flat_reference_rejected():
    cfg = SimulationConfig(dt=1e-2, horizon=0.1, paths=50, seed=85, radii=(16.0,))
    rho = DensityField.from_expression("1", 2)
    with pytest.raises(MonteCarloError, match="not normalizable"):
        transition_histogram(cs_identity(H=["1", "0"]), [0.0, 0.0], 0.1, cfg, rho_ref=rho)


def test_ks_distance_helper():
    rng = np.random.default_rng(4)
    samples = rng.uniform(0, 1, 4000)
    grid = np.linspace(0, 1, 1001)
    ks = ks_marginal_distance(samples, grid, grid)
    assert ks < 1.63 / math.sqrt(4000)
    shifted = samples * 0.5
    assert ks_marginal_distance(shifted, grid, grid) > 0.4


def test_x0_must_start_inside_ladder():
    cfg = SimulationConfig(dt=1e-2, horizon=0.1, paths=10, seed=1, radii=(1.0,))
    with pytest.raises(MonteCarloError):
        simulate_ensemble(BM, [2.0, 0.0], cfg)
