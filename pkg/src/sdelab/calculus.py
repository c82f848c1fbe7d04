"""Coefficient sets, drift decomposition, generators and quadrature.

The drift of a divergence-form operator
``L f = 1/2 div((A + C) grad f) + <H, grad f>`` is assembled symbolically as
``g_i = 1/2 sum_j d_j(a_ij + c_ji) + h_i``.  Given a strictly positive density
``rho``, the drift splits as ``G = beta + B`` where
``beta_i = 1/2 sum_j (d_j a_ij + a_ij d_j rho / rho)`` and ``B`` has zero
divergence against ``rho dx``; the splitting is checked here by quadrature
against a library of compactly supported bump test functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import expr as ex
from .expr import (
    CallableField,
    Const,
    Expr,
    coord,
    differentiate,
    evaluate,
    mul,
    parse_expr,
    powc,
    sub,
)

__all__ = [
    "CalculusError",
    "ShapeError",
    "EllipticityError",
    "PositivityError",
    "DegenerateDiffusionError",
    "EllipticityReport",
    "CoefficientSet",
    "DensityField",
    "QuadratureRule",
    "VectorField",
    "ScalarField",
    "build_coefficient_set",
    "coefficient_set_from_drift",
    "log_derivative_beta",
    "decompose_drift",
    "apply_generator",
    "invariance_residual",
    "diffusion_root",
    "diffusion_root_batch",
    "integrate",
    "default_bump_library",
    "bump_expression",
]


class CalculusError(Exception):
    pass


class ShapeError(CalculusError):
    """Matrix/vector shapes inconsistent with the declared dimension."""


class EllipticityError(CalculusError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class PositivityError(CalculusError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class DegenerateDiffusionError(CalculusError):
    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


# ---------------------------------------------------------------------------
# fields


class ScalarField:
    """Point function ``(n, d) -> (n,)``; wraps an AST or a raw callable."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], expr: Optional[Expr] = None):
        self._fn = fn
        self.expr = expr

    def __call__(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        single = pts.ndim == 1
        if single:
            pts = pts[None, :]
        out = np.asarray(self._fn(pts), dtype=float)
        out = np.broadcast_to(out, (pts.shape[0],)).copy()
        return out[0] if single else out


class VectorField:
    """Point function ``(n, d) -> (n, m)``; componentwise ASTs or a callable."""

    def __init__(
        self,
        fn: Callable[[np.ndarray], np.ndarray],
        dim: int,
        exprs: Optional[List[Expr]] = None,
    ):
        self._fn = fn
        self.dim = dim
        self.exprs = exprs

    def __call__(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        single = pts.ndim == 1
        if single:
            pts = pts[None, :]
        out = np.asarray(self._fn(pts), dtype=float)
        out = np.broadcast_to(out, (pts.shape[0], self.dim)).copy()
        return out[0] if single else out

    @classmethod
    def from_exprs(cls, exprs: Sequence[Expr]) -> "VectorField":
        exprs = list(exprs)

        def fn(pts):
            return np.stack([evaluate(e, pts) for e in exprs], axis=-1)

        return cls(fn, len(exprs), exprs)


def eval_matrix(entries: Sequence[Sequence[Expr]], pts: np.ndarray) -> np.ndarray:
    """Evaluate a matrix of expressions at ``pts`` -> ``(n, d, d)``."""
    pts = np.asarray(pts, dtype=float)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    d = len(entries)
    n = pts.shape[0]
    out = np.empty((n, d, d))
    for i in range(d):
        for j in range(d):
            out[:, i, j] = evaluate(entries[i][j], pts)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# coefficient sets


@dataclass(frozen=True)
class EllipticityReport:
    min_eigenvalue: float
    max_eigenvalue: float
    argmin: Tuple[float, ...]
    probes: int


@dataclass(frozen=True)
class CoefficientSet:
    """Problem data: diffusion matrix A, antisymmetric part C, perturbation H.

    Only upper triangles of A and C are stored; the full matrices are
    reconstructed so symmetry/antisymmetry hold exactly.  ``G`` is derived
    symbolically.  ``integrability_p`` is declared metadata (the local
    integrability order of H) and is never certified here.
    """

    d: int
    a_upper: Tuple[Tuple[Expr, ...], ...]  # row i holds entries j = i .. d-1
    c_upper: Tuple[Tuple[Expr, ...], ...]  # row i holds entries j = i+1 .. d-1
    H: Tuple[Expr, ...]
    G: Tuple[Expr, ...]
    ellipticity: EllipticityReport
    integrability_p: Optional[float] = None

    def a_entry(self, i: int, j: int) -> Expr:
        if i <= j:
            return self.a_upper[i][j - i]
        return self.a_upper[j][i - j]

    def c_entry(self, i: int, j: int) -> Expr:
        if i == j:
            return Const(0.0)
        if i < j:
            return self.c_upper[i][j - i - 1]
        return mul(Const(-1.0), self.c_upper[j][i - j - 1])

    @property
    def A(self) -> List[List[Expr]]:
        return [[self.a_entry(i, j) for j in range(self.d)] for i in range(self.d)]

    @property
    def C(self) -> List[List[Expr]]:
        return [[self.c_entry(i, j) for j in range(self.d)] for i in range(self.d)]

    def eval_A(self, pts) -> np.ndarray:
        return eval_matrix(self.A, pts)

    def eval_G(self, pts) -> np.ndarray:
        return VectorField.from_exprs(list(self.G))(pts)

    def eval_H(self, pts) -> np.ndarray:
        return VectorField.from_exprs(list(self.H))(pts)

    def drift_field(self) -> VectorField:
        return VectorField.from_exprs(list(self.G))

    def a_is_constant(self) -> bool:
        return all(ex.fold_const(e) is not None for row in self.a_upper for e in row)


def _upper_from_input(M, d: int, kind: str) -> Tuple[Tuple[Expr, ...], ...]:
    """Accept ragged upper-triangle rows or a full (anti)symmetric matrix."""
    rows = [list(r) for r in M]
    strict = kind == "antisymmetric"
    want_ragged = [d - i - (1 if strict else 0) for i in range(d)]
    if len(rows) < d and all(n == 0 for n in want_ragged[len(rows) :]):
        rows = rows + [[] for _ in range(d - len(rows))]
    if [len(r) for r in rows] == want_ragged:
        return tuple(tuple(_coerce(e, d) for e in r) for r in rows)
    if len(rows) == d and all(len(r) == d for r in rows):
        full = [[_coerce(e, d) for e in r] for r in rows]
        for i in range(d):
            for j in range(d):
                if i == j and strict and full[i][i] != Const(0.0) and full[i][i] != Const(-0.0):
                    raise ShapeError(f"{kind} matrix must have zero diagonal, entry ({i},{i})")
                if i < j:
                    mirror = full[j][i]
                    want = mul(Const(-1.0), full[i][j]) if strict else full[i][j]
                    if mirror != want and not _mirror_ok(full[i][j], mirror, strict):
                        raise ShapeError(
                            f"{kind} structure violated at entries ({i},{j})/({j},{i})"
                        )
        if strict:
            return tuple(tuple(full[i][j] for j in range(i + 1, d)) for i in range(d))
        return tuple(tuple(full[i][j] for j in range(i, d)) for i in range(d))
    raise ShapeError(
        f"{kind} matrix for d={d}: give ragged upper-triangle rows "
        f"(lengths {want_ragged}) or a full structurally consistent matrix"
    )


def _mirror_ok(upper: Expr, lower: Expr, strict: bool) -> bool:
    # constants may be written out numerically on both sides
    cu, cl = ex.fold_const(upper), ex.fold_const(lower)
    if cu is None or cl is None:
        return False
    return cl == (-cu if strict else cu)


def _coerce(e, d: int) -> Expr:
    if isinstance(e, Expr):
        return e
    if isinstance(e, (int, float)):
        return Const(float(e))
    if isinstance(e, str):
        return parse_expr(e, d)
    raise TypeError(f"cannot coerce {e!r} to an expression")


def probe_ellipticity(A_entries, pts: np.ndarray) -> EllipticityReport:
    vals = eval_matrix(A_entries, pts)
    eigs = np.linalg.eigvalsh(vals)
    mins = eigs[:, 0]
    k = int(np.argmin(mins))
    report = EllipticityReport(
        min_eigenvalue=float(mins[k]),
        max_eigenvalue=float(eigs[:, -1].max()),
        argmin=tuple(float(v) for v in pts[k]),
        probes=len(pts),
    )
    if report.min_eigenvalue <= 0:
        raise EllipticityError(
            f"A is not positive definite at probe {report.argmin}: "
            f"min eigenvalue {report.min_eigenvalue:.3e}",
            witness=report.argmin,
        )
    return report


def default_probes(d: int, radius: float = 5.0, n: int = 1000, seed: int = 20240) -> np.ndarray:
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-radius, radius, size=(n, d))
    pts[0] = 0.0
    return pts


def build_coefficient_set(
    A,
    C=None,
    H=None,
    *,
    d: int,
    probes: Optional[np.ndarray] = None,
    integrability_p: Optional[float] = None,
) -> CoefficientSet:
    """Validate shapes, derive the drift symbolically, probe ellipticity.

    ``g_i = 1/2 sum_j d_j(a_ij + c_ji) + h_i``; the upper triangles of A and C
    are the stored representation, so symmetry is exact by construction.
    """
    a_upper = _upper_from_input(A, d, "symmetric")
    if C is None:
        C = [[Const(0.0)] * (d - i - 1) for i in range(d)]
    c_upper = _upper_from_input(C, d, "antisymmetric")
    if H is None:
        H = [Const(0.0)] * d
    Hv = tuple(_coerce(h, d) for h in H)
    if len(Hv) != d:
        raise ShapeError(f"H must have {d} components, got {len(Hv)}")

    cs_tmp = CoefficientSet(
        d=d,
        a_upper=a_upper,
        c_upper=c_upper,
        H=Hv,
        G=Hv,
        ellipticity=EllipticityReport(1.0, 1.0, (0.0,) * d, 0),
        integrability_p=integrability_p,
    )
    G = []
    for i in range(d):
        g = Hv[i]
        for j in range(d):
            # d_j (a_ij + c_ji); note the transpose on C
            entry = ex.add(cs_tmp.a_entry(i, j), cs_tmp.c_entry(j, i))
            g = ex.add(g, mul(Const(0.5), differentiate(entry, j)))
        G.append(g)

    if probes is None:
        probes = default_probes(d)
    probes = np.asarray(probes, dtype=float)
    if probes.ndim != 2 or probes.shape[1] != d or len(probes) == 0:
        raise ShapeError("probes must be a non-empty (n, d) array")
    report = probe_ellipticity([[cs_tmp.a_entry(i, j) for j in range(d)] for i in range(d)], probes)

    return CoefficientSet(
        d=d,
        a_upper=a_upper,
        c_upper=c_upper,
        H=Hv,
        G=tuple(G),
        ellipticity=report,
        integrability_p=integrability_p,
    )


def coefficient_set_from_drift(
    A,
    G,
    *,
    d: int,
    C=None,
    probes: Optional[np.ndarray] = None,
    integrability_p: Optional[float] = None,
) -> CoefficientSet:
    """Declare the drift directly; H is recovered as ``G - 1/2 grad(A + C^T)``."""
    base = build_coefficient_set(A, C, None, d=d, probes=probes, integrability_p=integrability_p)
    Gv = [_coerce(g, d) for g in G]
    if len(Gv) != d:
        raise ShapeError(f"G must have {d} components, got {len(Gv)}")
    H = [sub(Gv[i], base.G[i]) for i in range(d)]  # base.G equals 1/2 grad(A + C^T)
    return build_coefficient_set(
        A, C, H, d=d, probes=probes, integrability_p=integrability_p
    )


# ---------------------------------------------------------------------------
# densities


class DensityField:
    """Strictly positive density, either analytic or values on a tensor grid."""

    def __init__(
        self,
        *,
        expr: Optional[Expr] = None,
        axes: Optional[Tuple[np.ndarray, ...]] = None,
        values: Optional[np.ndarray] = None,
        probes: Optional[np.ndarray] = None,
    ):
        if (expr is None) == (values is None):
            raise ValueError("give exactly one of expr= or (axes=, values=)")
        self.expr = expr
        self.axes = tuple(np.asarray(a, dtype=float) for a in axes) if axes is not None else None
        self.values = np.asarray(values, dtype=float) if values is not None else None
        self._grad_values = None
        if self.values is not None:
            if self.axes is None or self.values.shape != tuple(len(a) for a in self.axes):
                raise ShapeError("grid values must match the axes shape")
            self.positivity_min = float(self.values.min())
            if self.positivity_min <= 0:
                k = np.unravel_index(int(np.argmin(self.values)), self.values.shape)
                witness = tuple(float(self.axes[i][k[i]]) for i in range(len(self.axes)))
                raise PositivityError(
                    f"density not strictly positive on grid (min {self.positivity_min:.3e})",
                    witness=witness,
                )
        else:
            if probes is not None:
                vals = evaluate(self.expr, probes)
                self.positivity_min = float(np.nanmin(vals))
                if not np.isfinite(self.positivity_min) or self.positivity_min <= 0:
                    k = int(np.nanargmin(vals))
                    raise PositivityError(
                        f"density not strictly positive at probe {probes[k].tolist()}",
                        witness=tuple(float(v) for v in probes[k]),
                    )
            else:
                self.positivity_min = None

    # -- construction helpers

    @classmethod
    def from_expression(cls, e: Union[str, Expr], d: int, probes=None) -> "DensityField":
        if isinstance(e, str):
            e = parse_expr(e, d)
        return cls(expr=e, probes=probes)

    @classmethod
    def from_grid(cls, axes, values) -> "DensityField":
        return cls(axes=axes, values=values)

    @property
    def mode(self) -> str:
        return "analytic" if self.expr is not None else "grid"

    @property
    def dim(self) -> int:
        return len(self.axes) if self.axes is not None else None

    # -- evaluation

    def rho(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        single = pts.ndim == 1
        if single:
            pts = pts[None, :]
        if self.expr is not None:
            out = evaluate(self.expr, pts)
        else:
            out = self._interp(self.values, pts)
        return out[0] if single else out

    def grad_rho(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        single = pts.ndim == 1
        if single:
            pts = pts[None, :]
        if self.expr is not None:
            d = pts.shape[1]
            out = np.stack(
                [evaluate(differentiate(self.expr, k, piecewise=True), pts) for k in range(d)],
                axis=-1,
            )
        else:
            if self._grad_values is None:
                self._grad_values = [
                    _grid_derivative(self.values, self.axes, axis) for axis in range(len(self.axes))
                ]
            out = np.stack([self._interp(g, pts) for g in self._grad_values], axis=-1)
        return out[0] if single else out

    def log_grad(self, pts) -> np.ndarray:
        """grad(rho)/rho; raises if rho <= 0 at an evaluation point."""
        r = self.rho(pts)
        if np.any(~np.isfinite(r)) or np.any(np.atleast_1d(r) <= 0):
            bad = np.atleast_2d(pts)[np.argmin(np.atleast_1d(r))]
            raise PositivityError(
                f"density non-positive at evaluation point {np.asarray(bad).tolist()}",
                witness=tuple(float(v) for v in np.atleast_1d(bad)),
            )
        g = self.grad_rho(pts)
        return g / np.expand_dims(r, -1)

    def _interp(self, grid: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """Multilinear interpolation; exact at grid nodes."""
        idx_frac = []
        for axis, ax in enumerate(self.axes):
            h = ax[1] - ax[0]
            t = (pts[:, axis] - ax[0]) / h
            i0 = np.clip(np.floor(t).astype(int), 0, len(ax) - 2)
            idx_frac.append((i0, t - i0))
        out = np.zeros(pts.shape[0])
        d = len(self.axes)
        for corner in range(1 << d):
            w = np.ones(pts.shape[0])
            ix = []
            for axis in range(d):
                i0, frac = idx_frac[axis]
                if corner >> axis & 1:
                    ix.append(i0 + 1)
                    w = w * frac
                else:
                    ix.append(i0)
                    w = w * (1.0 - frac)
            out += w * grid[tuple(ix)]
        return out


def _grid_derivative(values: np.ndarray, axes, axis: int) -> np.ndarray:
    """4th-order central differences inside, 2nd-order one-sided at edges."""
    h = axes[axis][1] - axes[axis][0]
    v = np.moveaxis(values, axis, 0)
    out = np.empty_like(v)
    n = v.shape[0]
    if n < 5:
        raise ShapeError("grid too small for 4th-order differentiation (need >= 5 nodes)")
    out[2:-2] = (-v[4:] + 8 * v[3:-1] - 8 * v[1:-3] + v[:-4]) / (12 * h)
    out[0] = (-3 * v[0] + 4 * v[1] - v[2]) / (2 * h)
    out[1] = (v[2] - v[0]) / (2 * h)
    out[-2] = (v[-1] - v[-3]) / (2 * h)
    out[-1] = (3 * v[-1] - 4 * v[-2] + v[-3]) / (2 * h)
    return np.moveaxis(out, 0, axis)


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor-product rule on an axis-aligned box."""

    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    nodes: Tuple[int, ...]
    scheme: str = "simpson"  # "midpoint" | "simpson"

    def __post_init__(self):
        if self.scheme not in ("midpoint", "simpson"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if len(self.lo) != len(self.hi) or len(self.lo) != len(self.nodes):
            raise ShapeError("lo/hi/nodes must have equal lengths")
        if self.scheme == "simpson":
            for n in self.nodes:
                if n < 3 or n % 2 == 0:
                    raise ValueError("Simpson needs an odd node count >= 3 per axis")

    @classmethod
    def box(cls, halfwidth: float, d: int, nodes: int, scheme: str = "simpson"):
        return cls(
            lo=(-float(halfwidth),) * d,
            hi=(float(halfwidth),) * d,
            nodes=(int(nodes),) * d,
            scheme=scheme,
        )

    @property
    def dim(self) -> int:
        return len(self.lo)

    def axis_nodes(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        lo, hi, n = self.lo[k], self.hi[k], self.nodes[k]
        if self.scheme == "midpoint":
            h = (hi - lo) / n
            x = lo + h * (np.arange(n) + 0.5)
            w = np.full(n, h)
        else:
            h = (hi - lo) / (n - 1)
            x = lo + h * np.arange(n)
            w = np.ones(n)
            w[1:-1:2] = 4.0
            w[2:-2:2] = 2.0
            w *= h / 3.0
        return x, w

    def points_and_weights(self) -> Tuple[np.ndarray, np.ndarray]:
        axes = [self.axis_nodes(k) for k in range(self.dim)]
        grids = np.meshgrid(*[a[0] for a in axes], indexing="ij")
        pts = np.stack([g.reshape(-1) for g in grids], axis=-1)
        w = axes[0][1]
        for k in range(1, self.dim):
            w = np.multiply.outer(w, axes[k][1])
        return pts, w.reshape(-1)


def integrate(f, rule: QuadratureRule) -> float:
    """Tensor-product quadrature of a point function; deterministic summation."""
    fn = ex.as_point_function(f) if not isinstance(f, (ScalarField,)) else f
    pts, w = rule.points_and_weights()
    vals = np.asarray(fn(pts), dtype=float)
    vals = np.broadcast_to(vals, w.shape)
    return math.fsum((w * vals).tolist())


def integrate_masked(f, rule: QuadratureRule) -> Tuple[float, int]:
    """Like :func:`integrate` but skipping (and counting) non-finite nodes.

    Isolated singular points of otherwise integrable fields land on nodes for
    centered rules; skipping them is reported, never silent.
    """
    fn = ex.as_point_function(f) if not isinstance(f, (ScalarField,)) else f
    pts, w = rule.points_and_weights()
    with np.errstate(all="ignore"):
        vals = np.asarray(fn(pts), dtype=float)
    vals = np.broadcast_to(vals, w.shape)
    ok = np.isfinite(vals)
    skipped = int(np.sum(~ok))
    total = math.fsum((w[ok] * vals[ok]).tolist())
    return total, skipped


# ---------------------------------------------------------------------------
# drift decomposition and generators


def log_derivative_beta(cs: CoefficientSet, rho: DensityField) -> VectorField:
    """``beta_i = 1/2 sum_j (d_j a_ij + a_ij d_j rho / rho)``.

    Symbolic throughout in analytic mode; in grid mode the density's log
    gradient is sampled from the stored values.
    """
    d = cs.d
    div_a = []  # 1/2 sum_j d_j a_ij, symbolic
    for i in range(d):
        s: Expr = Const(0.0)
        for j in range(d):
            s = ex.add(s, differentiate(cs.a_entry(i, j), j))
        div_a.append(mul(Const(0.5), s))

    if rho.mode == "analytic":
        comps = []
        for i in range(d):
            s = div_a[i]
            for j in range(d):
                s = ex.add(
                    s,
                    mul(
                        Const(0.5),
                        mul(
                            cs.a_entry(i, j),
                            ex.div(differentiate(rho.expr, j, piecewise=True), rho.expr),
                        ),
                    ),
                )
            comps.append(s)
        return VectorField.from_exprs(comps)

    div_a_field = VectorField.from_exprs(div_a)

    def fn(pts):
        A = cs.eval_A(pts)
        lg = rho.log_grad(pts)
        return div_a_field(pts) + 0.5 * np.einsum("nij,nj->ni", A, lg)

    return VectorField(fn, d)


@dataclass(frozen=True)
class DivergenceReport:
    """Max over the bump library of |integral <B, grad f> rho dx|."""

    max_residual: float
    residuals: Tuple[float, ...]
    scale: float
    rule: QuadratureRule
    skipped_points: int = 0


def decompose_drift(
    cs: CoefficientSet,
    rho: DensityField,
    rule: Optional[QuadratureRule] = None,
    bumps: Optional[Sequence[Expr]] = None,
) -> Tuple[VectorField, DivergenceReport]:
    """Split ``G = beta + B`` and report how far B is from mu-divergence zero."""
    beta = log_derivative_beta(cs, rho)
    if beta.exprs is not None:
        B = VectorField.from_exprs([sub(cs.G[i], beta.exprs[i]) for i in range(cs.d)])
    else:
        B = VectorField(lambda pts: cs.eval_G(pts) - beta(pts), cs.d)

    if rule is None:
        rule = QuadratureRule.box(3.0, cs.d, 241 if cs.d <= 2 else 81)
    if bumps is None:
        bumps = default_bump_library(rule.lo, rule.hi, cs.d)

    residuals = []
    skipped = 0
    for f in bumps:
        grads = [differentiate(f, k, piecewise=True) for k in range(cs.d)]

        def integrand(pts, _grads=grads):
            g = np.stack([evaluate(gk, pts) for gk in _grads], axis=-1)
            return np.einsum("ni,ni->n", B(pts), g) * rho.rho(pts)

        val, skip = integrate_masked(integrand, rule)
        residuals.append(val)
        skipped = max(skipped, skip)
    vol = integrate(lambda pts: rho.rho(pts), rule)
    report = DivergenceReport(
        max_residual=max(abs(r) for r in residuals),
        residuals=tuple(residuals),
        scale=abs(vol),
        rule=rule,
        skipped_points=skipped,
    )
    return B, report


def bump_expression(center: Sequence[float], radius: Sequence[float], d: int) -> Expr:
    """C^2 product bump ``prod_i max(1 - ((x_i - c_i)/r_i)^2, 0)^3``."""
    out: Expr = Const(1.0)
    for i in range(d):
        t = ex.div(sub(coord(i), Const(float(center[i]))), Const(float(radius[i])))
        out = mul(out, powc(ex.Max(sub(Const(1.0), powc(t, 2.0)), Const(0.0)), 3.0))
    return out


def default_bump_library(lo, hi, d: int) -> List[Expr]:
    """Eight deterministic bump placements spanning the box interior."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    c = (lo + hi) / 2
    half = (hi - lo) / 2
    bumps = [
        bump_expression(c, 0.9 * half, d),
        bump_expression(c, 0.45 * half, d),
    ]
    shift = 0.35 * half
    for axis in range(min(d, 2)):
        for sgn in (+1.0, -1.0):
            cc = c.copy()
            cc[axis] += sgn * shift[axis]
            bumps.append(bump_expression(cc, 0.5 * half, d))
    bumps.append(bump_expression(c + 0.3 * half, 0.4 * half, d))
    bumps.append(bump_expression(c - 0.3 * half, 0.4 * half, d))
    return bumps[:8]


def _f_derivatives(f, d: int, piecewise: bool):
    """grad and hessian evaluators for an AST or CallableField."""
    if isinstance(f, Expr):
        grads = [differentiate(f, k, piecewise) for k in range(d)]
        hess = [[differentiate(grads[i], j, piecewise) for j in range(d)] for i in range(d)]

        def grad_fn(pts):
            return np.stack([evaluate(g, pts) for g in grads], axis=-1)

        def hess_fn(pts):
            n = pts.shape[0]
            out = np.empty((n, d, d))
            for i in range(d):
                for j in range(d):
                    out[:, i, j] = evaluate(hess[i][j], pts)
            return out

        return grad_fn, hess_fn
    if isinstance(f, CallableField):
        if f.grad is None or f.hess is None:
            raise CalculusError("CallableField needs grad= and hess= for generator application")
        return f.grad, f.hess
    raise TypeError(f"generator argument must be an AST or CallableField, got {f!r}")


def apply_generator(
    cs: CoefficientSet,
    rho: Optional[DensityField],
    f,
    mode: str = "L",
    piecewise: bool = False,
) -> ScalarField:
    """Pointwise ``1/2 sum a_ij d_ij f + <drift, grad f>``.

    ``mode`` selects the drift: ``L`` uses G, ``L_adjoint`` uses
    ``2 beta - G`` and ``L_zero`` uses ``beta`` (both need ``rho``).
    """
    if mode not in ("L", "L_adjoint", "L_zero"):
        raise ValueError(f"unknown generator mode {mode!r}")
    if mode != "L" and rho is None:
        raise CalculusError(f"mode {mode} requires a density")
    d = cs.d
    grad_fn, hess_fn = _f_derivatives(f, d, piecewise)
    beta = log_derivative_beta(cs, rho) if mode != "L" else None
    gfield = cs.drift_field()

    def fn(pts):
        A = cs.eval_A(pts)
        Hs = hess_fn(pts)
        out = 0.5 * np.einsum("nij,nij->n", A, Hs)
        if mode == "L":
            drift = gfield(pts)
        elif mode == "L_zero":
            drift = beta(pts)
        else:
            drift = 2.0 * beta(pts) - gfield(pts)
        return out + np.einsum("ni,ni->n", drift, grad_fn(pts))

    return ScalarField(fn)


@dataclass(frozen=True)
class ResidualReport:
    residual: float
    scale: float
    support_leak: bool
    skipped_points: int = 0

    def __float__(self):
        return self.residual


def invariance_residual(
    cs: CoefficientSet,
    rho: DensityField,
    f,
    rule: QuadratureRule,
) -> ResidualReport:
    """Quadrature of ``integral Lf rho dx``; near zero for invariant pairs.

    ``f`` must be compactly supported inside the rule's box; if its boundary
    trace is non-negligible it is multiplied by a built-in cutoff bump and the
    leak is reported (the residual is still returned).
    """
    d = cs.d
    leak = False
    if isinstance(f, Expr):
        boundary_pts = _box_boundary_samples(rule)
        inner = np.abs(evaluate(f, rule.points_and_weights()[0]))
        fmax = float(np.nanmax(inner)) if len(inner) else 1.0
        btrace = float(np.nanmax(np.abs(evaluate(f, boundary_pts))))
        if btrace > 1e-12 * max(fmax, 1e-300):
            leak = True
            c = [(rule.lo[k] + rule.hi[k]) / 2 for k in range(d)]
            r = [(rule.hi[k] - rule.lo[k]) / 2 * 0.95 for k in range(d)]
            f = mul(f, bump_expression(c, r, d))
    lf = apply_generator(cs, None, f, mode="L", piecewise=True)

    def integrand(pts):
        return lf(pts) * rho.rho(pts)

    residual, skipped = integrate_masked(integrand, rule)
    fmax = float(np.nanmax(np.abs(evaluate(f, rule.points_and_weights()[0])))) if isinstance(f, Expr) else 1.0
    mu_box = integrate(lambda pts: rho.rho(pts), rule)
    return ResidualReport(
        residual=residual, scale=fmax * abs(mu_box), support_leak=leak, skipped_points=skipped
    )


def _box_boundary_samples(rule: QuadratureRule, per_face: int = 33) -> np.ndarray:
    d = rule.dim
    faces = []
    for k in range(d):
        for val in (rule.lo[k], rule.hi[k]):
            axes = []
            for j in range(d):
                if j == k:
                    axes.append(np.array([val]))
                else:
                    axes.append(np.linspace(rule.lo[j], rule.hi[j], per_face))
            grid = np.meshgrid(*axes, indexing="ij")
            faces.append(np.stack([g.reshape(-1) for g in grid], axis=-1))
    return np.concatenate(faces, axis=0)


# ---------------------------------------------------------------------------
# diffusion square root


def diffusion_root_batch(A_vals: np.ndarray, trace_tol: float = 1e-12) -> np.ndarray:
    """Symmetric positive-definite square roots of a batch of SPD matrices.

    Eigendecomposition with descending eigenvalues and sign-fixed
    eigenvectors (first non-negligible component positive); the root is
    ``V sqrt(diag) V^T``.
    """
    A_vals = np.asarray(A_vals, dtype=float)
    single = A_vals.ndim == 2
    if single:
        A_vals = A_vals[None]
    w, v = np.linalg.eigh(A_vals)
    w = w[:, ::-1]
    v = v[:, :, ::-1]
    traces = np.einsum("nii->n", A_vals)
    bad = w[:, -1] <= trace_tol * np.abs(traces)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise DegenerateDiffusionError(
            f"diffusion matrix degenerate: eigenvalue {w[k, -1]:.3e} "
            f"<= {trace_tol:.0e} * trace",
            point=None,
        )
    # deterministic eigenvector signs
    d = A_vals.shape[1]
    absv = np.abs(v)
    lead = np.argmax(absv > 1e-12 * absv.max(axis=1, keepdims=True), axis=1)  # (n, d)
    idx_n = np.arange(v.shape[0])[:, None]
    idx_d = np.arange(d)[None, :]
    signs = np.sign(v[idx_n, lead, idx_d])
    signs[signs == 0] = 1.0
    v = v * signs[:, None, :]
    root = np.einsum("nik,nk,njk->nij", v, np.sqrt(w), v)
    return root[0] if single else root


def diffusion_root(cs: CoefficientSet, x) -> np.ndarray:
    """SPD square root of ``A(x)`` with ``sigma sigma = A``."""
    x = np.asarray(x, dtype=float)
    A = cs.eval_A(x)
    try:
        return diffusion_root_batch(A)
    except DegenerateDiffusionError as err:
        raise DegenerateDiffusionError(str(err), point=tuple(float(v) for v in x)) from None
