#!/usr/bin/env python3
"""Mesh-refinement study for the density solver.

Solves the manufactured confining-drift problem (exact solution
exp(-|x|^2)) on a ladder of meshes, prints the max-norm error and the
observed order between consecutive meshes, and repeats for an
advection-dominated variant to show where the central scheme starts to
degrade (cell Peclet warning).
"""

import math

import numpy as np

from sdelab.calculus import build_coefficient_set
from sdelab.density import solve_density
from sdelab.expr import evaluate, parse_expr


def study(rate: float, R: float, meshes=(32, 64, 128, 256)) -> None:
    cs = build_coefficient_set(
        [["1", "0"], ["1"]], None, [f"-{rate}*x1", f"-{rate}*x2"], d=2
    )
    oracle = parse_expr(f"exp(-{rate}*norm2(x))", 2)
    boundary = f"exp(-{rate}*norm2(x))"
    print(f"\ndrift -{rate}*x on [-{R}, {R}]^2, oracle exp(-{rate}|x|^2)")
    print(f"{'n':>6} {'h':>10} {'max error':>12} {'order':>7} {'Pe':>6}")
    prev = None
    for n in meshes:
        approx = solve_density(cs, R, n, boundary)
        ax = approx.mesh.axis()
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        pts = np.stack([X.reshape(-1), Y.reshape(-1)], axis=-1)
        exact = evaluate(oracle, pts).reshape(approx.values.shape)
        err = float(np.max(np.abs(approx.values - exact)))
        order = f"{math.log2(prev / err):7.2f}" if prev else "      -"
        pe = approx.diagnostics["peclet_max"]
        flag = " (>2!)" if approx.diagnostics["peclet_warning"] else ""
        print(f"{n:>6} {approx.mesh.h:>10.4f} {err:>12.3e} {order} {pe:>6.2f}{flag}")
        prev = err


if __name__ == "__main__":
    study(rate=1.0, R=4.0)
    study(rate=10.0, R=2.0, meshes=(32, 64, 128))
