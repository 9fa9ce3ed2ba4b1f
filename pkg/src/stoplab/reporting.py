"""Deterministic JSON reports and CSV plot tables.

Reports are schema-versioned dictionaries of plain python scalars and lists;
serialization sorts keys and prints floats through ``repr`` so two runs with
the same config and seed produce byte-identical files.  Timing never goes
into the primary report (it gets a sidecar file instead).
"""

from __future__ import annotations

import csv
import io
import json

import numpy as np

from .lattice import Tree

SCHEMA = "stoplab-report/1"


def plain(obj):
    """Recursively convert numpy scalars/arrays and tuples to JSON-safe types."""
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)) and not isinstance(obj, bool):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def json_bytes(report: dict) -> bytes:
    """Canonical serialized form; the byte-identity contract lives here."""
    text = json.dumps(plain(report), sort_keys=True, indent=2, ensure_ascii=True)
    return (text + "\n").encode("utf-8")


def dump_json(report: dict, path) -> None:
    with open(path, "wb") as fh:
        fh.write(json_bytes(report))


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text(header, rows))


def node_levels(tree: Tree) -> np.ndarray:
    nodes = np.arange(tree.node_count, dtype=np.int64)
    return np.searchsorted(tree.level_starts, nodes, side="right") - 1


def node_table(tree: Tree, columns: dict) -> tuple:
    """Per-node table: node, level, time, w, then one column per process."""
    header = ["node", "level", "time", "w"] + list(columns)
    levels = node_levels(tree)
    rows = []
    for k in range(tree.node_count):
        row = [k, int(levels[k]), float(tree.t_node[k]), float(tree.w[k])]
        row.extend(float(col[k]) for col in columns.values())
        rows.append(row)
    return header, rows


THRESHOLD_HEADER = ["threshold", "stopped_value", "value_root"]


def threshold_table(table, value_root: float) -> tuple:
    rows = [[float(r.threshold), float(r.value), float(value_root)] for r in table]
    return list(THRESHOLD_HEADER), rows


CONVERGENCE_HEADER = ["level", "root", "violation", "gap"]


def convergence_table(levels, roots, violations, gaps) -> tuple:
    rows = []
    for i, n in enumerate(levels):
        gap = None if i == 0 else (gaps[i - 1] if i - 1 < len(gaps) else None)
        rows.append([float(n), float(roots[i]), float(violations[i]), gap])
    return list(CONVERGENCE_HEADER), rows


LADDER_HEADER = ["steps", "n_max", "penalized_root", "direct_root", "gap",
                 "violation", "violation_integral"]


def ladder_table(report) -> tuple:
    rows = [
        [r.steps, float(r.n_max), float(r.penalized_root),
         None if r.direct_root is None else float(r.direct_root),
         None if r.gap is None else float(r.gap),
         float(r.violation), float(r.violation_integral)]
        for r in report.rows
    ]
    return list(LADDER_HEADER), rows


PROPERTY_HEADER = ["identity", "method", "trials", "failures", "worst_gap",
                   "tolerance", "skipped", "reason"]


def property_table(report) -> tuple:
    rows = [
        [r.name, r.method, r.trials, r.failures, float(r.worst_gap),
         float(r.tolerance), bool(r.skipped), r.reason]
        for r in report.results
    ]
    return list(PROPERTY_HEADER), rows


def identity_rows(report) -> list:
    """Property-suite results as JSON-ready dictionaries."""
    return [
        {
            "identity": r.name,
            "method": r.method,
            "trials": r.trials,
            "failures": r.failures,
            "worst_gap": float(r.worst_gap),
            "tolerance": float(r.tolerance),
            "skipped": bool(r.skipped),
            "reason": r.reason,
            "passed": bool(r.passed),
        }
        for r in report.results
    ]
