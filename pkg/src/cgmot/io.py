"""Text serialization: histogram CSV, matrix CSV, tree JSON.

Floats are written as 17-significant-digit decimals so that a save/load
round trip reproduces the value bit for bit.  All files are UTF-8 with LF
line endings.
"""

from __future__ import annotations

import json
import os

import numpy as np
import scipy.sparse as sp

from .core import CGMOTError, Histogram, TreeCGM, ValidationError, as_histogram

__all__ = [
    "ParseError",
    "ResolutionError",
    "format_float",
    "save_histogram",
    "load_histogram",
    "save_matrix",
    "load_matrix",
    "save_tree",
    "load_tree",
]


class ParseError(CGMOTError, ValueError):
    """Malformed file content; carries the 1-based line number."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class ResolutionError(CGMOTError, ValueError):
    """A referenced file path could not be resolved."""


def format_float(x: float) -> str:
    return f"{float(x):.17g}"


def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")


def save_histogram(path, histogram) -> None:
    """Write ``index,value`` lines with 0-based contiguous indices."""
    h = as_histogram(histogram)
    _write_lines(path, (f"{i},{format_float(v)}" for i, v in enumerate(h.values)))


def load_histogram(path) -> Histogram:
    values = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ParseError(path, line_no, f"expected 'index,value', got {line!r}")
            try:
                idx = int(parts[0])
                val = float(parts[1])
            except ValueError as exc:
                raise ParseError(path, line_no, str(exc)) from None
            if idx != len(values):
                raise ParseError(
                    path, line_no, f"indices must be 0-based contiguous; expected "
                    f"{len(values)}, got {idx}"
                )
            values.append(val)
    if not values:
        raise ParseError(path, 1, "empty histogram file")
    return Histogram(np.array(values))


def save_matrix(path, matrix) -> None:
    """Write a matrix as CSV.

    Dense arrays become rectangular CSV (one row per line); sparse matrices
    become ``row,col,value`` triplets in row-major order.  Note that a dense
    matrix with exactly 3 columns cannot be distinguished from triplets on
    load, so 3-column matrices should be stored sparse.
    """
    if sp.issparse(matrix):
        coo = sp.coo_array(matrix)
        order = np.lexsort((coo.col, coo.row))
        _write_lines(
            path,
            (
                f"{coo.row[i]},{coo.col[i]},{format_float(coo.data[i])}"
                for i in order
            ),
        )
        return
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2:
        raise ValidationError(f"matrix must be 2-D, got shape {m.shape}")
    _write_lines(path, (",".join(format_float(v) for v in row) for row in m))


def load_matrix(path):
    """Load a matrix CSV, auto-detecting the layout by column count.

    Files whose every line has exactly 3 fields parse as sparse
    ``row,col,value`` triplets (duplicate positions are rejected) and return
    ``scipy.sparse.csr_array``; anything else parses as dense rectangular CSV
    and returns ``numpy.ndarray``.
    """
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            rows.append((line_no, line.split(",")))
    if not rows:
        raise ParseError(path, 1, "empty matrix file")
    widths = {len(parts) for _, parts in rows}
    if widths == {3}:
        ii, jj, data = [], [], []
        seen = set()
        for line_no, parts in rows:
            try:
                i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError as exc:
                raise ParseError(path, line_no, str(exc)) from None
            if i < 0 or j < 0:
                raise ParseError(path, line_no, f"negative index ({i}, {j})")
            if (i, j) in seen:
                raise ParseError(path, line_no, f"duplicate entry for ({i}, {j})")
            seen.add((i, j))
            ii.append(i)
            jj.append(j)
            data.append(v)
        n = max(max(ii), max(jj)) + 1
        return sp.coo_array((data, (ii, jj)), shape=(n, n)).tocsr()
    if len(widths) != 1:
        line_no = next(ln for ln, parts in rows if len(parts) != len(rows[0][1]))
        raise ParseError(path, line_no, "ragged rows in dense matrix")
    out = []
    for line_no, parts in rows:
        try:
            out.append([float(p) for p in parts])
        except ValueError as exc:
            raise ParseError(path, line_no, str(exc)) from None
    return np.array(out)


def _resolve_matrix(spec, base_dir, what):
    if isinstance(spec, str):
        path = spec if os.path.isabs(spec) else os.path.join(base_dir, spec)
        if not os.path.exists(path):
            raise ResolutionError(f"{what} references missing file {path!r}")
        return load_matrix(path)
    return np.asarray(spec, dtype=float)


def _resolve_histogram(spec, base_dir, what):
    if isinstance(spec, str):
        path = spec if os.path.isabs(spec) else os.path.join(base_dir, spec)
        if not os.path.exists(path):
            raise ResolutionError(f"{what} references missing file {path!r}")
        return load_histogram(path)
    return as_histogram(spec)


def load_tree(path) -> TreeCGM:
    """Load a tree model from its JSON document.

    Schema::

        {"nodes": [...],
         "edges": [{"u": ..., "v": ..., "kernel": <path or nested lists>}],
         "observations": {<node>: <path or list>},
         "mass": <number, optional>}

    Relative kernel/observation paths resolve against the JSON file's
    directory.  Observation keys are matched to nodes by their string form
    (JSON object keys are always strings).
    """
    base_dir = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(path, exc.lineno, exc.msg) from None
    for key in ("nodes", "edges", "observations"):
        if key not in doc:
            raise ValidationError(f"tree document is missing {key!r}")
    nodes = list(doc["nodes"])
    edges = []
    kernels = {}
    for edge in doc["edges"]:
        u, v = edge["u"], edge["v"]
        edges.append((u, v))
        kernels[(u, v)] = _resolve_matrix(
            edge.get("kernel"), base_dir, f"edge ({u!r}, {v!r}) kernel"
        )
    by_string = {str(u): u for u in nodes}
    observations = {}
    for key, spec in doc["observations"].items():
        if key not in by_string:
            raise ValidationError(f"observation on unknown node {key!r}")
        node = by_string[key]
        observations[node] = _resolve_histogram(spec, base_dir, f"observation at {key!r}")
    return TreeCGM(
        nodes=nodes,
        edges=edges,
        kernels=kernels,
        observations=observations,
        mass=doc.get("mass"),
    )


def save_tree(path, tree: TreeCGM) -> None:
    """Write a tree model as a self-contained JSON document (inline kernels)."""
    doc = {
        "nodes": list(tree.nodes),
        "edges": [
            {"u": u, "v": v, "kernel": tree.kernels[(u, v)].toarray().tolist()}
            for (u, v) in tree.edges
        ],
        "observations": {
            str(u): h.values.tolist() for u, h in tree.observations.items()
        },
        "mass": tree.mass,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
