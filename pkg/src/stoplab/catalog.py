"""Built-in drivers and constraints used throughout tests and the CLI.

Each entry records the analytically known Lipschitz constant, per-axis
slopes, convexity, and whether the function is positively homogeneous in
(y, z).  Homogeneity matters for the optimality guarantees of the threshold
stopping rules, so it is both declared here and re-checkable numerically
with ``probe_positive_homogeneity``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .expr import FunctionSpec, Signature, parse


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    text: str
    lipschitz: float
    lipschitz_y: float
    lipschitz_z: float
    convex: bool
    positively_homogeneous: bool


GENERATORS = {
    "zero": CatalogEntry("zero", "0", 0.0, 0.0, 0.0, True, True),
    "abs-z": CatalogEntry("abs-z", "0.5*abs(z)", 0.5, 0.0, 0.5, True, True),
    "linear-y": CatalogEntry("linear-y", "0.5*y", 0.5, 0.5, 0.0, True, True),
    "linear-yz": CatalogEntry("linear-yz", "0.25*y + 0.5*z", 0.5, 0.25, 0.5, True, True),
}

CONSTRAINTS = {
    "none": CatalogEntry("none", "0", 0.0, 0.0, 0.0, True, True),
    "z-zero": CatalogEntry("z-zero", "abs(z)", 1.0, 0.0, 1.0, True, True),
    "z-nonneg": CatalogEntry("z-nonneg", "neg(z)", 1.0, 0.0, 1.0, True, True),
    "z-cap": CatalogEntry("z-cap", "pos(z - 0.5)", 1.0, 0.0, 1.0, True, False),
}


def generator(name: str) -> FunctionSpec:
    """Parse a named catalog driver."""
    try:
        entry = GENERATORS[name]
    except KeyError:
        raise ConfigError(f"unknown catalog driver {name!r}") from None
    return parse(entry.text, Signature.GENERATOR,
                 lipschitz=entry.lipschitz, convex=entry.convex)


def constraint(name: str) -> FunctionSpec:
    """Parse a named catalog constraint."""
    try:
        entry = CONSTRAINTS[name]
    except KeyError:
        raise ConfigError(f"unknown catalog constraint {name!r}") from None
    return parse(entry.text, Signature.GENERATOR,
                 lipschitz=entry.lipschitz, convex=entry.convex)


def pairs() -> list:
    """All (driver name, constraint name) combinations, in a fixed order."""
    return [(g, c) for g in GENERATORS for c in CONSTRAINTS]


def homogeneous_pairs() -> list:
    """Pairs where both members are positively homogeneous."""
    return [
        (g, c)
        for g in GENERATORS
        for c in CONSTRAINTS
        if GENERATORS[g].positively_homogeneous and CONSTRAINTS[c].positively_homogeneous
    ]


def probe_positive_homogeneity(f: FunctionSpec, *, tol: float = 1e-9) -> bool:
    """Numerically test f(t, c*y, c*z) == c * f(t, y, z) on a small grid."""
    grid = np.linspace(-3.0, 3.0, 13)
    yy, zz = np.meshgrid(grid, grid, indexing="ij")
    y = yy.ravel()
    z = zz.ravel()
    for t in (0.0, 0.5, 1.0):
        tv = np.full_like(y, t)
        base = f.eval_array(t=tv, y=y, z=z)
        for c in (0.5, 2.0, 3.7):
            scaled = f.eval_array(t=tv, y=c * y, z=c * z)
            if float(np.max(np.abs(scaled - c * base))) > tol * (1.0 + float(np.max(np.abs(base)))):
                return False
    return True
