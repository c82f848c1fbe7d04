"""Euler-Maruyama ensembles with localization ladders and estimators.

Paths follow ``X_{k+1} = X_k + G_clip(X_k) dt + sigma(X_k) sqrt(dt) xi_k``
with ``sigma`` the symmetric square root of ``A`` and ``xi_k`` standard
Gaussians drawn by inverse CDF from counter-based Philox streams keyed by
``(master seed, path index)``.  A path stops permanently at its first exit
from the largest ladder radius (absorption is the simulator's proxy for the
cemetery state); exit times are recorded for every ladder radius at the
first sample index with ``|X| >= n``.  Everything is bit-reproducible for a
fixed config, independent of the thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import ndtri

from . import calculus as calc
from .calculus import CoefficientSet, DensityField, QuadratureRule
from .expr import CallableField, Expr, as_point_function

__all__ = [
    "MonteCarloError",
    "SimulationConfig",
    "PathEnsemble",
    "EstimatorResult",
    "simulate_ensemble",
    "moment_curve",
    "krylov_functional",
    "ergodic_average",
    "transition_histogram",
    "exit_statistics",
    "ks_marginal_distance",
]

_MASK64 = (1 << 64) - 1


class MonteCarloError(Exception):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    """Euler-Maruyama run description; all fields enter the seed record."""

    dt: float
    horizon: float
    paths: int
    seed: int
    radii: Tuple[float, ...] = (16.0,)
    clip: float = 10.0  # clip drift when |G| dt > clip
    scheme: str = "euler-maruyama"

    def __post_init__(self):
        if self.dt <= 0 or self.horizon < self.dt:
            raise MonteCarloError("need dt > 0 and horizon >= dt")
        if list(self.radii) != sorted(set(self.radii)) or min(self.radii) <= 0:
            raise MonteCarloError("ladder radii must be strictly increasing and positive")
        if self.clip <= 0:
            raise MonteCarloError("clip threshold must be positive")
        if self.scheme != "euler-maruyama":
            raise MonteCarloError(f"unknown scheme {self.scheme!r}")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass
class EstimatorResult:
    estimate: float
    std_error: float
    paths: int
    aggregation: str = "path mean"

    def within(self, truth: float, n_se: float = 3.0) -> bool:
        return abs(self.estimate - truth) <= n_se * self.std_error


@dataclass
class PathEnsemble:
    config: SimulationConfig
    x0: np.ndarray
    saved_times: np.ndarray  # (n_saved,)
    states: np.ndarray  # (paths, n_saved, d); frozen at exit
    exit_times: Dict[float, np.ndarray]  # radius -> (paths,), nan if no exit
    clip_counts: np.ndarray  # (paths,)
    status: np.ndarray  # (paths,) 0 = alive, 1 = exited-largest-radius
    overshoot_max: np.ndarray  # (paths,) max (|X_exit| - n) over ladder exits
    accumulators: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.config.paths

    def state_at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.saved_times - t)))
        if abs(self.saved_times[k] - t) > 0.5 * self.config.dt + 1e-12:
            raise MonteCarloError(
                f"time {t} was not saved (closest {self.saved_times[k]})"
            )
        return self.states[:, k, :]


def _gaussian_block(seed: int, path_index: int, shape: Tuple[int, int]) -> np.ndarray:
    """Standard normals for one path: inverse CDF of Philox uniforms."""
    gen = np.random.Generator(np.random.Philox(key=[seed & _MASK64, path_index & _MASK64]))
    u = gen.random(shape)
    u[u == 0.0] = 2.0**-54
    return ndtri(u)


def _batch_bounds(paths: int, n_steps: int, d: int) -> List[Tuple[int, int]]:
    per_path = n_steps * d
    batch = max(1, min(paths, int(4e7 // max(per_path, 1))))
    return [(s, min(s + batch, paths)) for s in range(0, paths, batch)]


def simulate_ensemble(
    cs: CoefficientSet,
    x0: Sequence[float],
    cfg: SimulationConfig,
    *,
    save_times: Optional[Sequence[float]] = None,
    accumulate: Optional[Dict[str, Callable[[np.ndarray], np.ndarray]]] = None,
    threads: int = 1,
) -> PathEnsemble:
    """Simulate the ensemble; deterministic for fixed config and inputs.

    ``save_times`` lists process times whose states are stored (the terminal
    time is always stored); ``accumulate`` maps names to point functions whose
    left-endpoint time integrals are accumulated along each living path.
    """
    if cs.d < 2:
        raise MonteCarloError("the simulator needs d >= 2")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (cs.d,):
        raise MonteCarloError(f"x0 must have shape ({cs.d},)")
    if float(np.linalg.norm(x0)) >= cfg.radii[0]:
        raise MonteCarloError("x0 must start inside the smallest ladder radius")

    n_steps = cfg.n_steps
    dt = cfg.dt
    save_idx = {n_steps}
    if save_times is not None:
        for t in save_times:
            k = int(round(t / dt))
            if not (0 <= k <= n_steps):
                raise MonteCarloError(f"save time {t} outside horizon")
            save_idx.add(k)
    save_idx = sorted(save_idx)
    save_pos = {k: i for i, k in enumerate(save_idx)}

    d = cs.d
    a_const = cs.a_is_constant()
    sigma_const = (
        calc.diffusion_root_batch(cs.eval_A(np.zeros((1, d))))[0] if a_const else None
    )
    g_field = cs.drift_field()
    acc_fns = {name: as_point_function(f) for name, f in (accumulate or {}).items()}

    states = np.empty((cfg.paths, len(save_idx), d))
    exit_times = {float(r): np.full(cfg.paths, np.nan) for r in cfg.radii}
    clip_counts = np.zeros(cfg.paths, dtype=np.int64)
    status = np.zeros(cfg.paths, dtype=np.int8)
    overshoot = np.zeros(cfg.paths)
    accs = {name: np.zeros(cfg.paths) for name in acc_fns}

    radii = np.array(cfg.radii, dtype=float)
    sqrt_dt = math.sqrt(dt)

    def run_batch(bounds: Tuple[int, int]) -> None:
        lo, hi = bounds
        B = hi - lo
        xi = np.empty((B, n_steps, d))
        for p in range(B):
            xi[p] = _gaussian_block(cfg.seed, lo + p, (n_steps, d))
        X = np.tile(x0, (B, 1))
        alive = np.ones(B, dtype=bool)
        crossed = np.zeros((B, len(radii)), dtype=bool)
        if 0 in save_pos:
            states[lo:hi, save_pos[0], :] = X
        for k in range(n_steps):
            if np.any(alive):
                idx = np.nonzero(alive)[0]
                Xa = X[idx]
                for name, fn in acc_fns.items():
                    accs[name][lo + idx] += np.asarray(fn(Xa), dtype=float) * dt
                G = g_field(Xa)
                gn = np.linalg.norm(G, axis=1)
                too_big = gn * dt > cfg.clip
                if np.any(too_big):
                    scale = np.ones(len(idx))
                    scale[too_big] = cfg.clip / (gn[too_big] * dt)
                    G = G * scale[:, None]
                    clip_counts[lo + idx[too_big]] += 1
                if a_const:
                    noise = xi[idx, k, :] @ sigma_const.T
                else:
                    sig = calc.diffusion_root_batch(cs.eval_A(Xa))
                    noise = np.einsum("nij,nj->ni", sig, xi[idx, k, :])
                Xa = Xa + G * dt + sqrt_dt * noise
                X[idx] = Xa
                rn = np.linalg.norm(Xa, axis=1)
                for j, r in enumerate(radii):
                    newly = (~crossed[idx, j]) & (rn >= r)
                    if np.any(newly):
                        gidx = idx[newly]
                        crossed[gidx, j] = True
                        exit_times[float(r)][lo + gidx] = (k + 1) * dt
                        overshoot[lo + gidx] = np.maximum(
                            overshoot[lo + gidx], rn[newly] - r
                        )
                top = crossed[idx, -1]
                if np.any(top):
                    status[lo + idx[top]] = 1
                    alive[idx[top]] = False
            if (k + 1) in save_pos:
                states[lo:hi, save_pos[k + 1], :] = X

    bounds = _batch_bounds(cfg.paths, n_steps, d)
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_batch, bounds))
    else:
        for b in bounds:
            run_batch(b)

    return PathEnsemble(
        config=cfg,
        x0=x0,
        saved_times=np.array([k * dt for k in save_idx]),
        states=states,
        exit_times=exit_times,
        clip_counts=clip_counts,
        status=status,
        overshoot_max=overshoot,
        accumulators=accs,
    )


# ---------------------------------------------------------------------------
# estimators


def estimate_mean(values: np.ndarray, aggregation: str = "path mean") -> EstimatorResult:
    est = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    return EstimatorResult(est, se, len(values), aggregation)


def _mean_se(values: np.ndarray) -> Tuple[float, float]:
    r = estimate_mean(values)
    return r.estimate, r.std_error


def ensemble_summary_rows(ens: PathEnsemble) -> Tuple[List[str], List[list]]:
    """One row per path: seed index, terminal state, exit times, clip count."""
    radii = list(ens.config.radii)
    header = (
        ["path", "status"]
        + [f"exit_time_r{r:g}" for r in radii]
        + ["clip_events", "overshoot_max"]
    )
    rows = []
    for p in range(ens.n_paths):
        row = [p, "exited-largest-radius" if ens.status[p] else "alive"]
        for r in radii:
            t = ens.exit_times[float(r)][p]
            row.append(float(t) if np.isfinite(t) else "")
        row.append(int(ens.clip_counts[p]))
        row.append(float(ens.overshoot_max[p]))
        rows.append(row)
    return header, rows


def moment_curve(
    ens: PathEnsemble,
    phi: Union[Expr, CallableField, Callable],
    times: Sequence[float],
    bound: Optional[Dict[str, float]] = None,
) -> List[Dict[str, object]]:
    """``E[phi(X_{t ^ sigma_N})]`` per time, with optional ``e^{M t}`` bound ratio.

    The ensemble's frozen-at-exit states realize stopping at the largest
    ladder radius, matching the supermartingale bound being compared against.
    """
    fn = as_point_function(phi)
    out = []
    phi0 = float(np.asarray(fn(ens.x0[None, :]))[0])
    for t in times:
        vals = np.asarray(fn(ens.state_at(t)), dtype=float)
        est, se = _mean_se(vals)
        row: Dict[str, object] = {
            "time": float(t),
            "estimate": est,
            "std_error": se,
            "paths": ens.n_paths,
        }
        if bound is not None:
            M = float(bound["M"])
            cap = math.exp(M * t) * phi0
            row["bound"] = cap
            row["bound_ratio"] = est / cap if cap != 0 else math.inf
        out.append(row)
    return out


def krylov_functional(
    cs: CoefficientSet,
    f: Union[Expr, CallableField, Callable],
    t: float,
    x_grid: Sequence[Sequence[float]],
    cfg: SimulationConfig,
    *,
    rho: Optional[DensityField] = None,
    q: Optional[float] = None,
    norm_box: float = 8.0,
    refine_check: bool = False,
    threads: int = 1,
) -> Dict[str, object]:
    """Estimates of ``E_x[int_0^t |f|(X_s) ds]`` over starting points.

    Returns the per-start estimates, their sup, and (given a density) the
    ``L^q(mu)`` norm of ``f`` so the occupation bound's constant can be
    fitted.  With ``refine_check`` the run is repeated at ``dt/4`` and the
    relative shift reported (flagging possible non-integrable accumulation).

    Exact hits of the singular set evaluate to inf/nan; they contribute
    nothing to the left-endpoint sum (a measure-zero set of times) and the
    hit count is reported as ``singular_hits``.
    """
    fn = as_point_function(f)
    hits = [0]

    def absf(pts):
        with np.errstate(all="ignore"):
            vals = np.abs(np.asarray(fn(pts), dtype=float))
        bad = ~np.isfinite(vals)
        if np.any(bad):
            hits[0] += int(np.sum(bad))
            vals = np.where(bad, 0.0, vals)
        return vals
    cfg_t = SimulationConfig(
        dt=cfg.dt,
        horizon=t,
        paths=cfg.paths,
        seed=cfg.seed,
        radii=cfg.radii,
        clip=cfg.clip,
    )
    rows = []
    for x in x_grid:
        ens = simulate_ensemble(
            cs, x, cfg_t, accumulate={"occupation": absf}, threads=threads
        )
        est, se = _mean_se(ens.accumulators["occupation"])
        rows.append({"x": list(map(float, x)), "estimate": est, "std_error": se})
    sup_row = max(rows, key=lambda r: r["estimate"])
    out: Dict[str, object] = {
        "time": float(t),
        "per_start": rows,
        "sup_estimate": sup_row["estimate"],
        "sup_at": sup_row["x"],
        "singular_hits": hits[0],
    }
    if rho is not None:
        if q is None:
            p = cs.integrability_p or float(cs.d + 1)
            q = p * cs.d / (p + cs.d)
        rule = QuadratureRule.box(norm_box, cs.d, 241 if cs.d == 2 else 61)
        norm_q = calc.integrate(
            lambda pts: np.abs(np.asarray(fn(pts), dtype=float)) ** q * rho.rho(pts), rule
        ) ** (1.0 / q)
        out["f_lq_mu_norm"] = norm_q
        out["q"] = q
        if norm_q > 0:
            out["fitted_constant"] = out["sup_estimate"] / (math.exp(t) * norm_q)
    if refine_check:
        cfg_fine = SimulationConfig(
            dt=cfg.dt / 4,
            horizon=t,
            paths=cfg.paths,
            seed=cfg.seed,
            radii=cfg.radii,
            clip=cfg.clip,
        )
        fine_rows = []
        for x in x_grid:
            ens = simulate_ensemble(
                cs, x, cfg_fine, accumulate={"occupation": absf}, threads=threads
            )
            est, _ = _mean_se(ens.accumulators["occupation"])
            fine_rows.append(est)
        shifts = [
            abs(fr - r["estimate"]) / max(abs(fr), 1e-300)
            for fr, r in zip(fine_rows, rows)
        ]
        out["refinement_shift"] = max(shifts)
        out["refinement_flag"] = max(shifts) > 0.25
    return out


def ergodic_average(
    cs: CoefficientSet,
    x0: Sequence[float],
    cfg: SimulationConfig,
    f: Union[Expr, CallableField, Callable],
    burn_in: float,
    *,
    curve_points: int = 200,
) -> Dict[str, object]:
    """Running time-average ``(t - b)^{-1} int_b^t f(X_s) ds`` on one path."""
    if burn_in >= cfg.horizon:
        raise MonteCarloError("burn-in must be shorter than the horizon")
    fn = as_point_function(f)
    cfg1 = SimulationConfig(
        dt=cfg.dt,
        horizon=cfg.horizon,
        paths=1,
        seed=cfg.seed,
        radii=cfg.radii,
        clip=cfg.clip,
    )
    d = cs.d
    n_steps = cfg1.n_steps
    xi = _gaussian_block(cfg1.seed, 0, (n_steps, d))
    a_const = cs.a_is_constant()
    sigma_const = (
        calc.diffusion_root_batch(cs.eval_A(np.zeros((1, d))))[0] if a_const else None
    )
    g_field = cs.drift_field()
    x = np.asarray(x0, dtype=float).copy()
    r_top = cfg1.radii[-1]
    dt = cfg1.dt
    sqrt_dt = math.sqrt(dt)
    burn_steps = int(round(burn_in / dt))
    total = 0.0
    stride = max(1, n_steps // curve_points)
    curve_t: List[float] = []
    curve_v: List[float] = []
    for k in range(n_steps):
        if k >= burn_steps:
            total += float(np.asarray(fn(x[None, :]))[0]) * dt
        G = g_field(x[None, :])[0]
        gn = float(np.linalg.norm(G))
        if gn * dt > cfg1.clip:
            G = G * (cfg1.clip / (gn * dt))
        if a_const:
            noise = sigma_const @ xi[k]
        else:
            noise = calc.diffusion_root_batch(cs.eval_A(x[None, :]))[0] @ xi[k]
        x = x + G * dt + sqrt_dt * noise
        if float(np.linalg.norm(x)) >= r_top:
            t_exit = (k + 1) * dt
            if t_exit <= burn_in:
                raise MonteCarloError(
                    f"path exited the ladder at t={t_exit:.3f} before burn-in"
                )
            break
        if (k + 1) % stride == 0 and (k + 1) * dt > burn_in + dt:
            t_now = (k + 1) * dt
            curve_t.append(t_now)
            curve_v.append(total / (t_now - burn_in))
    t_final = min((k + 1) * dt, cfg1.horizon)
    terminal = total / (t_final - burn_in)
    # non-convergence diagnostic: compare the last two thirds of the curve
    drift_note = None
    if len(curve_v) >= 9:
        third = len(curve_v) // 3
        a = float(np.mean(curve_v[third : 2 * third]))
        b = float(np.mean(curve_v[2 * third :]))
        rel = abs(b - a) / max(abs(b), 1e-300)
        if rel > 0.2:
            drift_note = f"running average still drifting ({rel:.1%} over final third)"
    return {
        "terminal_average": terminal,
        "times": curve_t,
        "running_average": curve_v,
        "burn_in": burn_in,
        "horizon": t_final,
        "non_converged_note": drift_note,
    }


def _marginal_cdf(rho: DensityField, axis: int, d: int, box: float, nodes: int = 481):
    """Normalized marginal CDF of a density on [-box, box]^d along one axis."""
    rule = QuadratureRule.box(box, d, nodes if d == 2 else 61)
    pts, w = rule.points_and_weights()
    vals = rho.rho(pts) * w
    order = np.argsort(pts[:, axis], kind="stable")
    xs = pts[order, axis]
    cums = np.cumsum(vals[order])
    total = cums[-1]
    # collapse duplicate coordinates for interpolation
    uniq, idx = np.unique(xs, return_index=True)
    cdf_right = np.append(cums[idx[1:] - 1], cums[-1])
    return uniq, cdf_right / total, total


def check_normalizable(rho: DensityField, d: int, box: float) -> float:
    """Total mass on the box; error when the mass keeps growing with the box."""
    rule1 = QuadratureRule.box(box / 2, d, 241 if d == 2 else 61)
    rule2 = QuadratureRule.box(box, d, 241 if d == 2 else 61)
    m1 = calc.integrate(lambda pts: rho.rho(pts), rule1)
    m2 = calc.integrate(lambda pts: rho.rho(pts), rule2)
    if m1 <= 0 or m2 / m1 > 1.05:
        raise MonteCarloError(
            "reference not normalizable: mass still growing "
            f"({m1:.4g} on half-box vs {m2:.4g} on box)"
        )
    return m2


def ks_marginal_distance(samples: np.ndarray, grid: np.ndarray, cdf: np.ndarray) -> float:
    """Kolmogorov-Smirnov sup distance of samples against a tabulated CDF."""
    xs = np.sort(np.asarray(samples, dtype=float))
    n = len(xs)
    ref = np.interp(xs, grid, cdf, left=0.0, right=1.0)
    upper = np.max(np.arange(1, n + 1) / n - ref)
    lower = np.max(ref - np.arange(0, n) / n)
    return float(max(upper, lower))


def transition_histogram(
    cs: CoefficientSet,
    x0: Sequence[float],
    t: float,
    cfg: SimulationConfig,
    rho_ref: Optional[DensityField] = None,
    *,
    ref_box: float = 6.0,
    threads: int = 1,
) -> Dict[str, object]:
    """Empirical per-coordinate CDFs of ``X_t`` and KS distance to a reference.

    The reference density is normalized on ``[-ref_box, ref_box]^d``; a
    reference whose mass keeps growing with the box is rejected as
    non-normalizable.
    """
    cfg_t = SimulationConfig(
        dt=cfg.dt, horizon=t, paths=cfg.paths, seed=cfg.seed, radii=cfg.radii, clip=cfg.clip
    )
    ens = simulate_ensemble(cs, x0, cfg_t, threads=threads)
    X = ens.state_at(t)
    qs = np.linspace(0.0, 1.0, 129)
    out: Dict[str, object] = {
        "time": float(t),
        "paths": ens.n_paths,
        "mean": [float(v) for v in X.mean(axis=0)],
        "mean_std_error": [float(v) for v in X.std(axis=0, ddof=1) / math.sqrt(len(X))],
        # empirical per-coordinate CDF, tabulated as quantiles
        "cdf_levels": qs.tolist(),
        "cdf_quantiles": [np.quantile(X[:, k], qs).tolist() for k in range(cs.d)],
    }
    if rho_ref is not None:
        check_normalizable(rho_ref, cs.d, ref_box)
        ks = []
        for axis in range(cs.d):
            grid, cdf, _ = _marginal_cdf(rho_ref, axis, cs.d, ref_box)
            ks.append(ks_marginal_distance(X[:, axis], grid, cdf))
        out["ks_distance"] = ks
        out["ks_critical_5pct"] = 1.358 / math.sqrt(ens.n_paths)
    return out


def _wilson(successes: int, n: int, z: float = 1.96) -> Tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    p = successes / n
    denom = 1 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return (center - half, center + half)


def exit_statistics(ens: PathEnsemble, radii: Optional[Sequence[float]] = None) -> Dict[str, object]:
    """Exit probabilities and exit-time summaries per ladder radius."""
    cfg = ens.config
    radii = list(radii) if radii is not None else list(cfg.radii)
    rows = []
    prev_p = None
    for r in radii:
        if float(r) not in ens.exit_times:
            raise MonteCarloError(f"radius {r} not in the simulated ladder")
        times = ens.exit_times[float(r)]
        exited = np.isfinite(times)
        k = int(np.sum(exited))
        p = k / ens.n_paths
        lo, hi = _wilson(k, ens.n_paths)
        row = {
            "radius": float(r),
            "p_exit_by_horizon": p,
            "wilson_95": [lo, hi],
            "exited": k,
        }
        if k:
            row["mean_exit_time"] = float(np.mean(times[exited]))
            row["median_exit_time"] = float(np.median(times[exited]))
        if prev_p is not None and lo > prev_p[1]:
            row["monotonicity_note"] = "exit probability increased with radius beyond CI overlap"
        prev_p = (lo, hi)
        rows.append(row)
    return {"horizon": cfg.horizon, "paths": ens.n_paths, "per_radius": rows}
