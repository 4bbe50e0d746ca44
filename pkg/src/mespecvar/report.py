"""Deterministic writers/readers for fit bundles, graphs and reports.

Floats are written in shortest round-trip form and JSON keys are sorted, so
identical inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import format_float
from .inference import ConnectivityGraph, EdgeTest, GroupDifferenceGraph, Heatmaps
from .mixed import MixedVarFit


def _default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format_float(v)
    return str(v)


def write_rows(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    path.write_text(buf.getvalue())
    return path


def write_matrix_csv(path, matrix, row_names, col_names) -> Path:
    m = np.asarray(matrix, float)
    return write_rows(path, [""] + list(col_names),
                      ([name] + list(row) for name, row in zip(row_names, m)))


def read_matrix_csv(path) -> tuple[np.ndarray, list[str], list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    cols = rows[0][1:]
    names = [r[0] for r in rows[1:]]
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]]), names, cols


# ------------------------------------------------------------- fit bundles

def fit_path(root, band: str, channel: str) -> Path:
    return Path(root) / "fits" / band / f"{channel}.json"


def write_fit(root, fit: MixedVarFit) -> Path:
    return write_json(fit_path(root, fit.band, fit.target), fit.to_dict())


def read_bundle(root) -> tuple[dict, dict[str, dict[str, MixedVarFit]]]:
    """Summary document and fits keyed by band then target channel."""
    root = Path(root)
    summary_path = root / "fits" / "summary.json"
    if not summary_path.is_file():
        raise FileNotFoundError(f"no fit bundle summary at {summary_path}")
    summary = read_json(summary_path)
    fits = {}
    for band in summary["bands"]:
        fits[band] = {}
        for ch in summary["channels"]:
            p = fit_path(root, band, ch)
            if not p.is_file():
                raise FileNotFoundError(f"incomplete bundle: missing {p}")
            fits[band][ch] = MixedVarFit.from_dict(read_json(p))
    return summary, fits


# ------------------------------------------------------------------ graphs

def _q(s) -> str:
    return '"' + str(s).replace('"', r'\"') + '"'


def dot_source(graph: ConnectivityGraph, name: str | None = None) -> str:
    name = name or f"{graph.band}_group{graph.group}"
    lines = [f"digraph {_q(name)} {{"]
    for node in graph.nodes:
        lines.append(f"  {_q(node)};")
    for e in sorted(graph.edges, key=lambda e: (e.source, e.target, e.lag)):
        lines.append(f"  {_q(e.source)} -> {_q(e.target)} [coef={_q(format_float(e.estimate))}, "
                     f"p={_q(format_float(e.p_raw))}, lag={e.lag}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def difference_dot_source(diff: GroupDifferenceGraph, colors=("green", "red")) -> str:
    lines = [f"digraph {_q(str(diff.band) + '_difference')} {{"]
    for node in diff.nodes:
        lines.append(f"  {_q(node)};")
    for keys, group, color in ((diff.unique_to_1, 1, colors[0]), (diff.unique_to_2, 2, colors[1])):
        for source, target, lag in keys:
            lines.append(f"  {_q(source)} -> {_q(target)} [group={group}, lag={lag}, color={color}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def parse_dot_edges(text: str) -> set[tuple[str, str]]:
    """(source, target) pairs of a DOT file written by this module."""
    edges = set()
    for line in text.splitlines():
        line = line.strip()
        if "->" in line:
            left, right = line.split("->", 1)
            src = left.strip().strip('"')
            tgt = right.split("[", 1)[0].strip().rstrip(";").strip().strip('"')
            edges.add((src, tgt))
    return edges


def write_edges_json(path, edges: Sequence[EdgeTest], alpha: float, quantile: float) -> Path:
    return write_json(path, {"alpha": alpha, "magnitude_quantile": quantile,
                             "edges": [e.to_dict() for e in edges]})


def write_heatmaps(directory, maps: Heatmaps) -> list[Path]:
    directory = Path(directory)
    names = maps.channel_names
    out = []
    for g, m in maps.tau.items():
        out.append(write_matrix_csv(directory / f"tau_group{g}.csv", m, names, names))
    out.append(write_matrix_csv(directory / "tau_difference.csv", maps.difference, names, names))
    return out
