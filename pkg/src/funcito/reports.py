"""CSV and JSON writers; every float is written with 17 significant digits."""

from __future__ import annotations

import json
import math

import numpy as np

from .paths import Path, format_float


def ensemble_csv(X: Path) -> str:
    """``trajectory_id, t, x_1..x_N`` with one row per trajectory and node."""
    values = X.values.reshape((-1,) + X.values.shape[-2:])
    head = ["trajectory_id", "t"] + [f"x_{i + 1}" for i in range(X.dim)]
    lines = [",".join(head)]
    nodes = X.grid.nodes
    for p, path in enumerate(values):
        for t, row in zip(nodes, path):
            lines.append(",".join([str(p), format_float(t)] + [format_float(v) for v in row]))
    return "\n".join(lines) + "\n"


def summary_csv(X: Path) -> str:
    """``t, mean_i, var_i, stderr_i`` over the trajectories of a batched path."""
    values = X.values.reshape((-1,) + X.values.shape[-2:])
    n = values.shape[0]
    mean = values.mean(axis=0)
    var = values.var(axis=0, ddof=1) if n > 1 else np.zeros_like(mean)
    err = np.sqrt(var / n)
    dims = range(1, X.dim + 1)
    head = ["t"] + [f"mean_{i}" for i in dims] + [f"var_{i}" for i in dims] + [f"stderr_{i}" for i in dims]
    lines = [",".join(head)]
    for k, t in enumerate(X.grid.nodes):
        cells = [t, *mean[k], *var[k], *err[k]]
        lines.append(",".join(format_float(c) for c in cells))
    return "\n".join(lines) + "\n"


def plain(value):
    """Recursively convert numpy scalars and arrays into JSON-ready Python values."""
    if isinstance(value, dict):
        return {str(k): plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [plain(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else str(value)
    return value


def verdicts_json(verdicts) -> str:
    return json.dumps(plain(list(verdicts)), indent=2, sort_keys=True) + "\n"


def verdict_summary_csv(verdicts) -> str:
    lines = ["check,value,budget,pass"]
    for v in verdicts:
        lines.append(f"{v['check']},{format_float(v['value'])},{format_float(v['budget'])},{str(bool(v['pass'])).lower()}")
    return "\n".join(lines) + "\n"
