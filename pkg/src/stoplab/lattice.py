"""Discrete Brownian lattices and processes adapted to them.

Two tree kinds share one array layout.  Nodes are indexed level by level,
upper child before lower child:

* ``path``: the full binary path tree.  Node k has children 2k+1 (up) and
  2k+2 (down); every node is one atom of the step filtration, so arbitrary
  adapted objects (stopping rules, indicator events) live here.  Capped at
  24 steps.
* ``recombining``: level i holds i+1 nodes ordered by decreasing walk value;
  node (i, j) has children (i+1, j) and (i+1, j+1).  Supports far more steps
  but only walk-functions of the current value; operations that need the
  exact filtration refuse it.

The walk moves by +-sqrt(dt) with one-step weights 1/2, so conditional
expectation of a process p at an interior node is the plain child average.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ConfigError, DomainError
from .expr import FunctionSpec, Signature, ensure_signature

PATH_STEP_CAP = 24

KIND_PATH = "path"
KIND_RECOMBINING = "recombining"


@dataclass(frozen=True)
class TreeConfig:
    steps: int
    horizon: float = 1.0
    kind: str = KIND_PATH

    def validate(self) -> None:
        if not isinstance(self.steps, int) or isinstance(self.steps, bool):
            raise ConfigError(f"steps must be an integer, got {self.steps!r}")
        if self.steps < 1:
            raise ConfigError(f"steps must be at least 1, got {self.steps}")
        if self.kind not in (KIND_PATH, KIND_RECOMBINING):
            raise ConfigError(f"unknown tree kind {self.kind!r}")
        if self.kind == KIND_PATH and self.steps > PATH_STEP_CAP:
            raise CapacityError(
                f"path trees support at most {PATH_STEP_CAP} steps, got {self.steps}"
            )
        if not (self.horizon > 0.0 and np.isfinite(self.horizon)):
            raise ConfigError(f"horizon must be positive and finite, got {self.horizon}")


@dataclass(frozen=True)
class Tree:
    """Immutable lattice skeleton; all arrays are read-only views."""

    config: TreeConfig
    steps: int
    dt: float
    sqrt_dt: float
    kind: str
    stride: int
    node_count: int
    leaf_start: int
    level_starts: np.ndarray = field(repr=False)
    times: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)
    t_node: np.ndarray = field(repr=False)

    @property
    def is_path(self) -> bool:
        return self.kind == KIND_PATH

    @property
    def n_leaves(self) -> int:
        return self.node_count - self.leaf_start

    def level_slice(self, i: int) -> slice:
        if not 0 <= i <= self.steps:
            raise DomainError(f"level {i} outside 0..{self.steps}")
        return slice(int(self.level_starts[i]), int(self.level_starts[i + 1]))

    def level_of(self, node: int) -> int:
        if not 0 <= node < self.node_count:
            raise DomainError(f"node {node} outside the tree")
        return int(np.searchsorted(self.level_starts, node, side="right") - 1)

    def children(self, node: int) -> tuple:
        i = self.level_of(node)
        if i >= self.steps:
            raise DomainError(f"node {node} is a leaf")
        s = int(self.level_starts[i])
        e = int(self.level_starts[i + 1])
        cu = e + self.stride * (node - s)
        return cu, cu + 1

    def parent(self, node: int) -> int:
        if node == 0:
            raise DomainError("the root has no parent")
        if not self.is_path:
            raise DomainError("recombining nodes have two parents")
        return (node - 1) // 2

    def child_arrays(self) -> tuple:
        """(up, down) child index arrays over all interior nodes."""
        interior = np.arange(self.leaf_start, dtype=np.int64)
        if self.is_path:
            cu = 2 * interior + 1
        else:
            levels = np.searchsorted(self.level_starts, interior, side="right") - 1
            cu = interior + levels + 1
        return cu, cu + 1

    def process(self, values: np.ndarray) -> "AdaptedProcess":
        return AdaptedProcess(self, values)


def build_tree(config: TreeConfig) -> Tree:
    """Materialize the lattice described by ``config``."""
    config.validate()
    n = config.steps
    dt = config.horizon / n
    sqrt_dt = float(np.sqrt(dt))
    if config.kind == KIND_PATH:
        starts = (1 << np.arange(n + 2, dtype=np.int64)) - 1
        stride = 2
    else:
        lv = np.arange(n + 2, dtype=np.int64)
        starts = lv * (lv + 1) // 2
        stride = 1
    node_count = int(starts[n + 1])
    leaf_start = int(starts[n])

    times = np.arange(n + 1, dtype=np.float64) * dt
    w = np.empty(node_count, dtype=np.float64)
    t_node = np.empty(node_count, dtype=np.float64)
    w[0] = 0.0
    for i in range(n + 1):
        s, e = int(starts[i]), int(starts[i + 1])
        t_node[s:e] = times[i]
        if i < n:
            ns = e
            if config.kind == KIND_PATH:
                w[ns : ns + 2 * (e - s) : 2] = w[s:e] + sqrt_dt
                w[ns + 1 : ns + 2 * (e - s) : 2] = w[s:e] - sqrt_dt
            else:
                j = np.arange(i + 2, dtype=np.float64)
                w[ns : ns + i + 2] = (i + 1 - 2.0 * j) * sqrt_dt

    for arr in (starts, times, w, t_node):
        arr.flags.writeable = False
    return Tree(
        config=config,
        steps=n,
        dt=dt,
        sqrt_dt=sqrt_dt,
        kind=config.kind,
        stride=stride,
        node_count=node_count,
        leaf_start=leaf_start,
        level_starts=starts,
        times=times,
        w=w,
        t_node=t_node,
    )


class AdaptedProcess:
    """One float per node; immutable after construction."""

    __slots__ = ("tree", "values")

    def __init__(self, tree: Tree, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (tree.node_count,):
            raise ConfigError(
                f"process needs {tree.node_count} values, got shape {values.shape}"
            )
        values = values.copy()
        values.flags.writeable = False
        self.tree = tree
        self.values = values

    def at(self, node: int) -> float:
        if not 0 <= node < self.tree.node_count:
            raise DomainError(f"node {node} outside the tree")
        return float(self.values[node])

    def level_values(self, i: int) -> np.ndarray:
        return self.values[self.tree.level_slice(i)]

    @property
    def root(self) -> float:
        return float(self.values[0])

    def leaf_values(self) -> np.ndarray:
        return self.values[self.tree.leaf_start :]


def conditional_expectation(p: AdaptedProcess, node: int) -> float:
    """One-step conditional expectation of ``p`` at an interior node."""
    cu, cd = p.tree.children(node)  # raises DomainError at a leaf
    return 0.5 * (float(p.values[cu]) + float(p.values[cd]))


@dataclass(frozen=True)
class RewardFlags:
    min_value: float
    max_value: float
    has_negative: bool
    exceeds_bound: bool
    bound: float | None


def realize_reward(f: FunctionSpec, tree: Tree, *, bound: float | None = None):
    """Evaluate a reward expression over (t, w) on every node.

    Returns (process, flags); flags record negativity and bound overruns
    rather than raising, so callers can decide what is acceptable.
    """
    ensure_signature(f, Signature.REWARD, "reward")
    vals = f.eval_array(t=tree.t_node, w=tree.w)
    lo = float(np.min(vals))
    hi = float(np.max(vals))
    flags = RewardFlags(
        min_value=lo,
        max_value=hi,
        has_negative=lo < 0.0,
        exceeds_bound=bound is not None and max(abs(lo), abs(hi)) > bound,
        bound=bound,
    )
    return AdaptedProcess(tree, vals), flags
