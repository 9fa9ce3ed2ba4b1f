"""Command line front end.

Five commands drive the library over a single JSON config document:

* ``expectation``  constrained expectation of a terminal payoff
* ``stop``         value process of a reward plus the threshold-rule study
* ``oracle``       exhaustive stopping-rule comparison on small exact trees
* ``verify``       the full property suite (exit 3 on any failure)
* ``ladder``       coupled tree/penalty refinement study

Every run writes ``report.json`` (deterministic for a fixed config and seed),
CSV plot tables next to it, and a ``timing.json`` sidecar that carries the
wall-clock numbers excluded from the determinism contract.  Output lands in
``--out``, else ``$STOPLAB_OUTDIR``, else the working directory.  Exit codes:
0 success, 1 usage or config error, 2 solver or stability error, 3 property
failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time

import numpy as np

from . import reporting
from .backend import backend_name
from .bsde import z_kappa
from .errors import (
    CapacityError,
    ConfigError,
    DomainError,
    EvalError,
    InfeasibleError,
    ParseError,
    SignatureError,
    SolverError,
    StabilityError,
)
from .expr import Signature, parse
from .lattice import AdaptedProcess, TreeConfig, build_tree, realize_reward
from .penalty import (
    PenaltySchedule,
    constrained_expectation,
    constrained_expectation_direct,
    expected_violation_integral,
    refinement_ladder,
    _require_z_only_convex,
)
from .properties import property_suite
from .stopping import brute_force_optimum, snell_envelope

DEFAULTS = {
    "command": None,
    "generator": "0",
    "constraint": "0",
    "generator_lipschitz": None,
    "constraint_lipschitz": None,
    "generator_convex": None,
    "constraint_convex": None,
    "terminal": "w*w",
    "reward": "abs(w)",
    "tree": {"steps": 4, "horizon": 1.0, "kind": "path"},
    "penalty": {"levels": None, "tolerance": 1e-8},
    "thresholds": None,
    "method": "auto",
    "penalty_level": None,
    "trials": 200,
    "ladder_trials": 10,
    "ladder_steps": [4, 8, 16],
    "brute": False,
    "seed": 0,
}

COMMANDS = ("expectation", "stop", "oracle", "verify", "ladder")

_USAGE_ERRORS = (ConfigError, ParseError, SignatureError, DomainError, CapacityError)
_SOLVER_ERRORS = (StabilityError, SolverError, EvalError, InfeasibleError)


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config field {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config field {where!r} must be an object")
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _apply_set(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"--set needs key=value, got {item!r}")
    key, _, raw = item.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config field {key!r}")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node:
        raise ConfigError(f"unknown config field {key!r}")
    if isinstance(node[leaf], dict):
        raise ConfigError(f"config field {key!r} is an object; set its subfields")
    node[leaf] = value


def load_config(path: str | None, sets, command: str | None) -> dict:
    user = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    cfg = _merge(DEFAULTS, user)
    for item in sets or ():
        _apply_set(cfg, item)
    if command is not None:
        cfg["command"] = command
    if cfg["command"] not in COMMANDS:
        raise ConfigError(f"unknown command {cfg['command']!r}; choose from {COMMANDS}")
    return cfg


def _parse_pair(cfg: dict) -> tuple:
    g = parse(cfg["generator"], Signature.GENERATOR,
              lipschitz=cfg["generator_lipschitz"], convex=cfg["generator_convex"])
    phi = parse(cfg["constraint"], Signature.GENERATOR,
                lipschitz=cfg["constraint_lipschitz"], convex=cfg["constraint_convex"])
    return g, phi


def _build_tree(cfg: dict):
    t = cfg["tree"]
    return build_tree(TreeConfig(steps=int(t["steps"]), horizon=float(t["horizon"]),
                                 kind=str(t["kind"])))


def _terminal_values(cfg: dict, tree) -> np.ndarray:
    spec = cfg["terminal"]
    if isinstance(spec, str):
        f = parse(spec, Signature.REWARD)
        leaves = tree.level_slice(tree.steps)
        return np.asarray(
            f.eval_array(t=tree.t_node[leaves], w=tree.w[leaves]), dtype=np.float64
        )
    vals = np.asarray(spec, dtype=np.float64)
    if vals.shape != (tree.n_leaves,):
        raise ConfigError(
            f"terminal vector needs {tree.n_leaves} leaf values, got shape {vals.shape}"
        )
    return vals


def _reward_process(cfg: dict, tree) -> AdaptedProcess:
    f = parse(cfg["reward"], Signature.REWARD)
    x, flags = realize_reward(f, tree)
    if flags.has_negative:
        raise DomainError(
            f"reward must be nonnegative; its minimum is {flags.min_value:.6g}"
        )
    return x


def _schedule(cfg: dict, g, phi, tree) -> PenaltySchedule:
    pen = cfg["penalty"]
    return PenaltySchedule.from_caps(g, phi, tree, levels=pen["levels"],
                                     tolerance=float(pen["tolerance"]))


def _resolved(cfg: dict, g, phi, tree, schedule: PenaltySchedule | None) -> dict:
    out = {
        "backend": backend_name(),
        "generator": g.canonical(),
        "constraint": phi.canonical(),
        "steps": tree.steps,
        "dt": tree.dt,
        "kappa_g": z_kappa(g, tree),
    }
    if schedule is not None:
        out["n_max"] = schedule.n_max
        out["cap_contraction"] = schedule.cap_contraction
        out["cap_monotone"] = schedule.cap_monotone
        out["levels"] = list(schedule.levels)
    return out


def _cmd_expectation(cfg: dict) -> tuple:
    g, phi = _parse_pair(cfg)
    tree = _build_tree(cfg)
    terminal = _terminal_values(cfg, tree)
    schedule = _schedule(cfg, g, phi, tree)
    sol = constrained_expectation(g, phi, terminal, tree, schedule)
    roots = [s.root for s in sol.snapshots] or [sol.root]
    integral = expected_violation_integral(phi, tree, sol.y.values, sol.z)
    direct_root = None
    try:
        _require_z_only_convex(phi)
    except DomainError:
        pass
    else:
        direct_root = constrained_expectation_direct(g, phi, terminal, tree).root
    headline = {
        "penalized_root": sol.root,
        "direct_root": direct_root,
        "gap": None if direct_root is None else abs(sol.root - direct_root),
        "converged": bool(sol.converged),
        "monotone_defect": sol.monotone_defect,
        "levels_used": list(sol.levels),
        "final_violation": sol.violations[-1],
        "violation_integral": integral,
        "residual": sol.residual().max_abs_residual,
    }
    conv = reporting.convergence_table(sol.levels, roots, sol.violations, sol.gaps)
    tables = {
        "convergence.csv": conv,
        "values.csv": reporting.node_table(tree, {"value": sol.y.values}),
    }
    report = {
        "headline": headline,
        "resolved": _resolved(cfg, g, phi, tree, schedule),
        "tables": {"convergence": conv[1]},
    }
    return 0, report, tables


def _snell_report(rep) -> dict:
    stab = rep.stabilized
    out = {
        "method": rep.method,
        "penalty_level": rep.penalty_level,
        "value_root": rep.root,
        "dominance_defect": rep.dominance_defect,
    }
    if stab is not None:
        probe = rep.stopped_value_probe
        out.update({
            "stabilized_value": rep.stabilized_value,
            "stabilized_gap": abs(rep.stabilized_value - rep.root),
            "stabilization_index": stab.index,
            "stabilized": bool(stab.stabilized),
            "thresholds_monotone": bool(stab.monotone_ok),
            "stops_no_later_than_exact_hit": bool(stab.stops_no_later_than_exact_hit),
            "stabilized_equals_exact_hit": bool(rep.stabilized_equals_exact_hit),
            "probe_super_defect": None if probe is None else probe.super_defect,
            "probe_sub_defect": None if probe is None else probe.sub_defect,
        })
    if rep.brute_value is not None:
        out["brute_value"] = rep.brute_value
        out["brute_gap"] = abs(rep.brute_value - rep.root)
        out["brute_index"] = rep.brute_index
    return out


def _cmd_stop(cfg: dict) -> tuple:
    g, phi = _parse_pair(cfg)
    tree = _build_tree(cfg)
    x = _reward_process(cfg, tree)
    rep = snell_envelope(g, phi, x, tree, method=cfg["method"],
                         penalty_level=cfg["penalty_level"],
                         thresholds=cfg["thresholds"], brute=bool(cfg["brute"]))
    thr = reporting.threshold_table(rep.threshold_table, rep.root)
    tables = {
        "thresholds.csv": thr,
        "values.csv": reporting.node_table(
            tree, {"reward": x.values, "value": rep.value.values}
        ),
    }
    report = {
        "headline": _snell_report(rep),
        "resolved": _resolved(cfg, g, phi, tree, None),
        "tables": {"thresholds": thr[1]},
    }
    return 0, report, tables


def _cmd_oracle(cfg: dict) -> tuple:
    g, phi = _parse_pair(cfg)
    tree = _build_tree(cfg)
    x = _reward_process(cfg, tree)
    rep = snell_envelope(g, phi, x, tree, method=cfg["method"],
                         penalty_level=cfg["penalty_level"], analyze_rules=False)
    bf = brute_force_optimum(g, phi, x, tree, method=cfg["method"],
                             penalty_level=cfg["penalty_level"])
    headline = {
        "method": rep.method,
        "value_root": rep.root,
        "brute_value": bf.value,
        "gap": abs(rep.root - bf.value),
        "brute_index": bf.index,
        "rule_count": bf.count,
    }
    tables = {
        "values.csv": reporting.node_table(
            tree, {"reward": x.values, "value": rep.value.values}
        ),
    }
    report = {
        "headline": headline,
        "resolved": _resolved(cfg, g, phi, tree, None),
        "tables": {},
    }
    return 0, report, tables


def _cmd_verify(cfg: dict) -> tuple:
    g, phi = _parse_pair(cfg)
    tree = _build_tree(cfg)
    suite = property_suite(g, phi, tree, trials=int(cfg["trials"]),
                           seed=int(cfg["seed"]), ladder_trials=int(cfg["ladder_trials"]))
    rows = reporting.identity_rows(suite)
    ladder_rows = [
        [name, float(level), float(gap)]
        for name, pairs in sorted(suite.ladder.items())
        for level, gap in pairs
    ]
    headline = {
        "passed": bool(suite.passed),
        "worst_gap": suite.worst(),
        "n_fixed": suite.n_fixed,
        "identities": rows,
    }
    tables = {
        "properties.csv": (list(reporting.PROPERTY_HEADER),
                           reporting.property_table(suite)[1]),
        "suite_ladder.csv": (["identity", "level", "worst_gap"], ladder_rows),
    }
    report = {
        "headline": headline,
        "resolved": _resolved(cfg, g, phi, tree, None),
        "tables": {"identities": rows},
    }
    return (0 if suite.passed else 3), report, tables


def _cmd_ladder(cfg: dict) -> tuple:
    g, phi = _parse_pair(cfg)
    reward = parse(cfg["reward"], Signature.REWARD)
    rep = refinement_ladder(g, phi, reward, [int(s) for s in cfg["ladder_steps"]],
                            kind=str(cfg["tree"]["kind"]),
                            horizon=float(cfg["tree"]["horizon"]),
                            tolerance=float(cfg["penalty"]["tolerance"]))
    table = reporting.ladder_table(rep)
    gaps = rep.gaps
    headline = {
        "rows": len(rep.rows),
        "sup_terminal": rep.sup_terminal,
        "final_gap": gaps[-1] if gaps else None,
        "final_violation_integral": rep.rows[-1].violation_integral,
    }
    report = {
        "headline": headline,
        "resolved": {"backend": backend_name(), "generator": g.canonical(),
                     "constraint": phi.canonical()},
        "tables": {"ladder": table[1]},
    }
    return 0, report, {"ladder.csv": table}


_DISPATCH = {
    "expectation": _cmd_expectation,
    "stop": _cmd_stop,
    "oracle": _cmd_oracle,
    "verify": _cmd_verify,
    "ladder": _cmd_ladder,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stoplab",
        description="Lattice laboratory for constrained expectations and optimal stopping.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field (dotted path, JSON value)")
    parser.add_argument("--out", default=None,
                        help="output directory (default: $STOPLAB_OUTDIR or .)")
    return parser


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    started = time.perf_counter()
    try:
        cfg = load_config(args.config, args.set, args.command)
        code, report, tables = _DISPATCH[cfg["command"]](cfg)
        report = {
            "schema": reporting.SCHEMA,
            "command": cfg["command"],
            "config": cfg,
            **report,
        }
        outdir = args.out or os.environ.get("STOPLAB_OUTDIR") or "."
        os.makedirs(outdir, exist_ok=True)
        reporting.dump_json(report, os.path.join(outdir, "report.json"))
        for name, (header, rows) in tables.items():
            reporting.write_csv(os.path.join(outdir, name), header, rows)
        timing = {"command": cfg["command"],
                  "elapsed_s": time.perf_counter() - started}
        with open(os.path.join(outdir, "timing.json"), "w", encoding="utf-8") as fh:
            json.dump(timing, fh, indent=2)
            fh.write("\n")
        return code
    except _USAGE_ERRORS as exc:
        print(f"stoplab: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"stoplab: error: {exc}", file=sys.stderr)
        return 1
    except _SOLVER_ERRORS as exc:
        print(f"stoplab: solver error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
