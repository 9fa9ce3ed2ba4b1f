"""Numerical screens for drivers and constraints.

``check_structure`` probes a generator-signature expression on a finite grid
and reports Lipschitz slope estimates, whether the function vanishes at
z = 0 (the feasibility-at-rest screen required of constraints), a midpoint
convexity count, and a linear-growth constant for the driver along z = 0.
These are screens, not proofs: they certify behaviour on the probe grid
only, which is the working contract throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EvalError
from .expr import FunctionSpec, Signature, ensure_signature

A3_TOL = 1e-12
_CONVEXITY_TOL = 1e-12


@dataclass(frozen=True)
class StructureReport:
    source: str
    lipschitz: float          # max of the axis estimates
    lipschitz_y: float
    lipschitz_z: float
    vanishes_at_zero_z: bool  # max |f(t, y, 0)| <= A3_TOL over the grid
    max_abs_at_zero_z: float
    convex_ok: bool
    convexity_violations: int
    growth_ok: bool           # f(t, y, 0) <= growth_l0 + lipschitz * |y| on the grid
    growth_l0: float
    box: tuple
    points_per_axis: int
    t_probes: tuple


def check_structure(f: FunctionSpec, *, box: tuple = (-5.0, 5.0),
                    points: int = 33, horizon: float = 1.0) -> StructureReport:
    """Probe ``f`` on the box and report the screens described above.

    Evaluation errors are re-raised with the offending grid point attached.
    """
    ensure_signature(f, Signature.GENERATOR, "check_structure input")
    lo, hi = float(box[0]), float(box[1])
    grid = np.linspace(lo, hi, points)
    ts = (0.0, 0.5 * horizon, horizon)

    # Axis Lipschitz estimates from adjacent finite differences.
    ly = 0.0
    lz = 0.0
    others = grid[:: max(1, (points - 1) // 4)]
    for t in ts:
        tv = np.full_like(grid, t)
        for other in others:
            try:
                vy = f.eval_array(t=tv, y=grid, z=np.full_like(grid, other))
                vz = f.eval_array(t=tv, y=np.full_like(grid, other), z=grid)
            except EvalError as exc:
                raise EvalError(f"{exc} while probing t={t}, axis value {other}") from exc
            ly = max(ly, float(np.max(np.abs(np.diff(vy)) / np.diff(grid))))
            lz = max(lz, float(np.max(np.abs(np.diff(vz)) / np.diff(grid))))
    lip = max(ly, lz)

    # Feasibility at rest: values along z = 0.
    max_abs0 = 0.0
    growth_l0 = 0.0
    for t in ts:
        tv = np.full_like(grid, t)
        v0 = f.eval_array(t=tv, y=grid, z=np.zeros_like(grid))
        max_abs0 = max(max_abs0, float(np.max(np.abs(v0))))
        growth_l0 = max(growth_l0, float(np.max(v0 - lip * np.abs(grid))))
    growth_l0 = max(0.0, growth_l0)

    # Midpoint convexity over all pairs of (y, z) grid points, coarsened to
    # keep the pair count bounded.
    coarse = grid[:: max(1, (points - 1) // 8)]
    yy, zz = np.meshgrid(coarse, coarse, indexing="ij")
    pts = np.column_stack([yy.ravel(), zz.ravel()])
    idx_a, idx_b = np.triu_indices(len(pts), k=1)
    violations = 0
    for t in ts:
        a = pts[idx_a]
        b = pts[idx_b]
        mid = 0.5 * (a + b)
        tv = np.full(len(a), t)
        fa = f.eval_array(t=tv, y=a[:, 0], z=a[:, 1])
        fb = f.eval_array(t=tv, y=b[:, 0], z=b[:, 1])
        fm = f.eval_array(t=tv, y=mid[:, 0], z=mid[:, 1])
        violations += int(np.sum(fm > 0.5 * (fa + fb) + _CONVEXITY_TOL))

    return StructureReport(
        source=f.source,
        lipschitz=lip,
        lipschitz_y=ly,
        lipschitz_z=lz,
        vanishes_at_zero_z=max_abs0 <= A3_TOL,
        max_abs_at_zero_z=max_abs0,
        convex_ok=violations == 0,
        convexity_violations=violations,
        growth_ok=bool(np.isfinite(growth_l0)),
        growth_l0=growth_l0,
        box=(lo, hi),
        points_per_axis=points,
        t_probes=ts,
    )
