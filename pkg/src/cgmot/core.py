"""Domain types, validation, and shared numeric utilities.

Histograms carry an unnormalized total mass ``F``; probability vectors are
simply the ``F = 1`` case.  All container types are immutable after
construction (arrays are marked read-only), so shared instances are safe to
use from any number of concurrent solver calls.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "CGMOTError",
    "ValidationError",
    "ConfigurationError",
    "NumericError",
    "ConvergenceError",
    "InfeasibleSupportError",
    "CapabilityError",
    "Histogram",
    "CostMatrix",
    "Kernel",
    "TransportPlan",
    "CTMCModel",
    "TreeCGM",
    "SolverOptions",
    "SolveReport",
    "as_histogram",
    "guarded_divide",
    "cost_from_kernel",
    "build_grid_rate_matrix",
    "max_threads",
]

MASS_RTOL = 1e-9  # relative tolerance for "these two masses are equal"


class CGMOTError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(CGMOTError, ValueError):
    """An input violates a documented precondition or type invariant."""


class ConfigurationError(CGMOTError, ValueError):
    """An unsupported or inconsistent configuration was requested."""


class NumericError(CGMOTError, ArithmeticError):
    """A numeric procedure failed (underflow, root-finder divergence, ...)."""


class ConvergenceError(NumericError):
    """A solver failed to converge where convergence is required."""


class InfeasibleSupportError(NumericError):
    """Sparse kernel support makes the marginal constraints infeasible."""


class CapabilityError(CGMOTError):
    """The request exceeds a documented size cap (oracles only)."""


def _readonly(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


def max_threads() -> int:
    """Parallelism cap from the ``CGMOT_THREADS`` environment variable (>= 1)."""
    raw = os.environ.get("CGMOT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigurationError(f"CGMOT_THREADS must be an integer, got {raw!r}")


# ---------------------------------------------------------------------------
# histograms


@dataclass(frozen=True, eq=False)
class Histogram:
    """Non-negative vector with total mass ``F``.

    Parameters
    ----------
    values : array-like, shape (n,)
        Non-negative entries.
    mass : float, optional
        Expected total.  When given it is validated against the entry sum
        (1e-12 relative); when omitted it is computed.
    """

    values: np.ndarray
    mass: float = None

    def __post_init__(self):
        values = _readonly(self.values)
        if values.ndim != 1:
            raise ValidationError(f"histogram must be 1-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("histogram entries must be finite")
        if np.any(values < 0):
            i = int(np.flatnonzero(values < 0)[0])
            raise ValidationError(f"histogram entry {i} is negative ({values[i]})")
        total = float(values.sum())
        object.__setattr__(self, "values", values)
        if self.mass is None:
            object.__setattr__(self, "mass", total)
        elif abs(total - self.mass) > 1e-12 * max(1.0, abs(self.mass)):
            raise ValidationError(
                f"declared mass {self.mass} != entry sum {total} (1e-12 relative)"
            )

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.n

    def __repr__(self):
        return f"Histogram(n={self.n}, mass={self.mass:g})"


def as_histogram(x) -> Histogram:
    """Coerce an array-like or Histogram to a Histogram."""
    if isinstance(x, Histogram):
        return x
    return Histogram(np.asarray(x, dtype=float))


def masses_match(a: Histogram, b: Histogram, rtol: float = MASS_RTOL) -> bool:
    return abs(a.mass - b.mass) <= rtol * max(1.0, abs(a.mass), abs(b.mass))


# ---------------------------------------------------------------------------
# matrices


@dataclass(frozen=True, eq=False)
class CostMatrix:
    """Square matrix of finite transport costs."""

    entries: np.ndarray

    def __post_init__(self):
        entries = _readonly(self.entries)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ValidationError(f"cost matrix must be square, got {entries.shape}")
        if not np.all(np.isfinite(entries)):
            raise ValidationError("cost matrix entries must be finite")
        object.__setattr__(self, "entries", entries)

    @property
    def n(self) -> int:
        return self.entries.shape[0]


def as_cost_matrix(C) -> CostMatrix:
    if isinstance(C, CostMatrix):
        return C
    return CostMatrix(np.asarray(C, dtype=float))


@dataclass(frozen=True, eq=False)
class Kernel:
    """Element-wise positive matrix of potentials.

    Dense kernels must be strictly positive everywhere.  Sparse kernels
    (any scipy.sparse type) may omit entries; stored entries must still be
    strictly positive, and the implicit zeros define the kernel's support.
    """

    entries: object  # ndarray or scipy.sparse matrix

    def __post_init__(self):
        entries = self.entries
        if sp.issparse(entries):
            entries = sp.csr_array(entries)
            entries.eliminate_zeros()
            if entries.shape[0] != entries.shape[1]:
                raise ValidationError(f"kernel must be square, got {entries.shape}")
            if entries.nnz and not np.all(entries.data > 0):
                raise ValidationError("sparse kernel stored entries must be > 0")
            if entries.nnz and not np.all(np.isfinite(entries.data)):
                raise ValidationError("kernel entries must be finite")
        else:
            entries = _readonly(entries)
            if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
                raise ValidationError(f"kernel must be square, got {entries.shape}")
            if not np.all(np.isfinite(entries)):
                raise ValidationError("kernel entries must be finite")
            if np.any(entries <= 0):
                idx = np.argwhere(entries <= 0)[0]
                raise ValidationError(
                    f"kernel entry ({idx[0]}, {idx[1]}) is not positive "
                    f"({entries[idx[0], idx[1]]})"
                )
        object.__setattr__(self, "entries", entries)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.entries)

    def apply(self, x):
        """Matrix-vector (or matrix-matrix) product ``K @ x``."""
        return self.entries @ x

    def apply_transpose(self, x):
        """Product ``K.T @ x``."""
        return self.entries.T @ x

    def toarray(self) -> np.ndarray:
        if self.is_sparse:
            return self.entries.toarray()
        return np.asarray(self.entries)

    @property
    def total(self) -> float:
        """Entry sum; the two-node partition function."""
        return float(self.entries.sum())


def as_kernel(k) -> Kernel:
    if isinstance(k, Kernel):
        return k
    return Kernel(k if sp.issparse(k) else np.asarray(k, dtype=float))


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Non-negative matrix whose row/column sums match the stored marginals.

    ``marginal_tolerance`` records the (relative, per unit mass) tolerance at
    which the marginal match was certified at construction.
    """

    entries: np.ndarray
    row_marginal: Histogram
    col_marginal: Histogram
    marginal_tolerance: float = 1e-6

    def __post_init__(self):
        entries = _readonly(self.entries)
        if entries.ndim != 2:
            raise ValidationError(f"plan must be 2-D, got shape {entries.shape}")
        if np.any(entries < 0):
            raise ValidationError("plan entries must be non-negative")
        row = as_histogram(self.row_marginal)
        col = as_histogram(self.col_marginal)
        if entries.shape != (row.n, col.n):
            raise ValidationError(
                f"plan shape {entries.shape} does not match marginals ({row.n}, {col.n})"
            )
        if not masses_match(row, col):
            raise ValidationError(
                f"marginal masses disagree: {row.mass} vs {col.mass}"
            )
        scale = max(1.0, row.mass)
        tol = self.marginal_tolerance * scale
        row_err = np.max(np.abs(entries.sum(axis=1) - row.values))
        col_err = np.max(np.abs(entries.sum(axis=0) - col.values))
        if max(row_err, col_err) > tol:
            raise ValidationError(
                f"marginal violation {max(row_err, col_err):.3e} exceeds "
                f"tolerance {tol:.3e}"
            )
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "row_marginal", row)
        object.__setattr__(self, "col_marginal", col)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def mass(self) -> float:
        return self.row_marginal.mass

    def residual(self) -> float:
        """Max-norm marginal violation of the stored entries."""
        row_err = np.max(np.abs(self.entries.sum(axis=1) - self.row_marginal.values))
        col_err = np.max(np.abs(self.entries.sum(axis=0) - self.col_marginal.values))
        return float(max(row_err, col_err))


# ---------------------------------------------------------------------------
# continuous-time Markov chains


@dataclass(frozen=True, eq=False)
class CTMCModel:
    """Transition rate matrix of a continuous-time Markov chain.

    Off-diagonal entries must be non-negative.  The diagonal is recomputed on
    construction as the negated off-diagonal row sum, so row sums are exactly
    zero.  All-zero rows (absorbing states) are permitted.
    """

    rate_matrix: object  # ndarray or scipy.sparse matrix

    def __post_init__(self):
        Q = self.rate_matrix
        if sp.issparse(Q):
            Q = sp.csr_array(Q, dtype=float)
            if Q.shape[0] != Q.shape[1]:
                raise ValidationError(f"rate matrix must be square, got {Q.shape}")
            off = Q.copy()
            off.setdiag(0.0)
            off.eliminate_zeros()
            if off.nnz and not np.all(off.data >= 0):
                raise ValidationError("off-diagonal rates must be >= 0")
            if off.nnz and not np.all(np.isfinite(off.data)):
                raise ValidationError("rates must be finite")
            off.setdiag(-np.asarray(off.sum(axis=1)).ravel())
            Q = sp.csr_array(off)
        else:
            Q = np.array(Q, dtype=float)
            if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
                raise ValidationError(f"rate matrix must be square, got {Q.shape}")
            if not np.all(np.isfinite(Q)):
                raise ValidationError("rates must be finite")
            off = Q - np.diag(np.diag(Q))
            if np.any(off < 0):
                idx = np.argwhere(off < 0)[0]
                raise ValidationError(
                    f"off-diagonal rate ({idx[0]}, {idx[1]}) is negative"
                )
            np.fill_diagonal(off, -off.sum(axis=1))
            Q = _readonly(off)
        object.__setattr__(self, "rate_matrix", Q)

    @property
    def n(self) -> int:
        return self.rate_matrix.shape[0]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.rate_matrix)

    @property
    def uniformization_rate(self) -> float:
        """Largest exit rate ``max_i |Q_ii|``."""
        if self.is_sparse:
            return float(np.max(-self.rate_matrix.diagonal(), initial=0.0))
        return float(np.max(-np.diag(self.rate_matrix), initial=0.0))

    def toarray(self) -> np.ndarray:
        if self.is_sparse:
            return self.rate_matrix.toarray()
        return np.asarray(self.rate_matrix)


def as_ctmc(Q) -> CTMCModel:
    if isinstance(Q, CTMCModel):
        return Q
    return CTMCModel(Q)


# ---------------------------------------------------------------------------
# trees


@dataclass(frozen=True, eq=False)
class TreeCGM:
    """Tree-structured model: per-edge kernels plus observations on a node subset.

    Parameters
    ----------
    nodes : sequence of hashable, mutually sortable ids
    edges : sequence of (u, v) pairs
        Edge kernels are oriented as stored: ``kernels[(u, v)][i, j]`` couples
        state ``i`` at ``u`` with state ``j`` at ``v``.
    kernels : mapping (u, v) -> Kernel or array
    observations : mapping node -> Histogram or array
        Present exactly on the observed node set; all observed histograms
        must share the same total mass.
    """

    nodes: tuple
    edges: tuple
    kernels: dict
    observations: dict
    mass: float = None

    def __post_init__(self):
        nodes = tuple(self.nodes)
        if len(nodes) != len(set(nodes)):
            raise ValidationError("duplicate node ids")
        if not nodes:
            raise ValidationError("tree must have at least one node")
        edges = tuple((u, v) for (u, v) in self.edges)
        node_set = set(nodes)
        for (u, v) in edges:
            if u not in node_set or v not in node_set:
                raise ValidationError(f"edge ({u!r}, {v!r}) references unknown node")
            if u == v:
                raise ValidationError(f"self-loop at node {u!r}")
        if len(edges) != len(nodes) - 1:
            raise ValidationError(
                f"a tree on {len(nodes)} nodes needs {len(nodes) - 1} edges, "
                f"got {len(edges)}"
            )
        # connectivity check (acyclicity follows from the edge count)
        adjacency = {u: [] for u in nodes}
        for (u, v) in edges:
            adjacency[u].append(v)
            adjacency[v].append(u)
        seen = {nodes[0]}
        stack = [nodes[0]]
        while stack:
            u = stack.pop()
            for v in adjacency[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        if len(seen) != len(nodes):
            raise ValidationError("graph is not connected")

        kernels = {}
        n_states = None
        for (u, v) in edges:
            if (u, v) in self.kernels:
                k = as_kernel(self.kernels[(u, v)])
            elif (v, u) in self.kernels:
                raise ValidationError(
                    f"kernel for edge ({u!r}, {v!r}) given with reversed orientation"
                )
            else:
                raise ValidationError(f"missing kernel for edge ({u!r}, {v!r})")
            if n_states is None:
                n_states = k.n
            elif k.n != n_states:
                raise ValidationError("all edge kernels must share one state size")
            kernels[(u, v)] = k

        observations = {}
        mass = self.mass
        for u, h in self.observations.items():
            if u not in node_set:
                raise ValidationError(f"observation on unknown node {u!r}")
            h = as_histogram(h)
            if n_states is not None and h.n != n_states:
                raise ValidationError(
                    f"observation at node {u!r} has length {h.n}, expected {n_states}"
                )
            if mass is None:
                mass = h.mass
            elif abs(h.mass - mass) > MASS_RTOL * max(1.0, abs(mass)):
                raise ValidationError(
                    f"observation masses disagree: node {u!r} has {h.mass}, "
                    f"expected {mass}"
                )
            observations[u] = h

        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "observations", observations)
        object.__setattr__(self, "mass", mass)

    @property
    def n_states(self) -> int:
        if self.kernels:
            return next(iter(self.kernels.values())).n
        return next(iter(self.observations.values())).n

    def degree(self, u) -> int:
        return sum(1 for (a, b) in self.edges if a == u or b == u)

    @property
    def degrees(self) -> dict:
        return {u: self.degree(u) for u in self.nodes}

    def neighbors(self, u):
        out = []
        for (a, b) in self.edges:
            if a == u:
                out.append(b)
            elif b == u:
                out.append(a)
        return out

    @property
    def observed_nodes(self) -> tuple:
        return tuple(u for u in self.nodes if u in self.observations)

    @property
    def unobserved_nodes(self) -> tuple:
        return tuple(u for u in self.nodes if u not in self.observations)


# ---------------------------------------------------------------------------
# solver plumbing


@dataclass(frozen=True)
class SolverOptions:
    """Shared knobs for all iterative solvers."""

    tolerance: float = 1e-9
    max_iterations: int = 10000
    epsilon_floor: float = 1e-300
    log_domain: bool = False

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValidationError(f"tolerance must be > 0, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")


DEFAULT_OPTIONS = SolverOptions()


@dataclass(frozen=True, eq=False)
class SolveReport:
    """Outcome of one solver call.

    ``residual`` is the solver's convergence measure per unit mass (marginal
    violation for Sinkhorn-type solves, scaling-vector change for fixed-point
    solves); ``converged`` certifies ``residual <= tolerance``.  Scaling
    vectors and per-iteration histories are kept for auditing.
    """

    iterations: int
    residual: float
    objective: float
    converged: bool
    tolerance: float
    scaling_u: np.ndarray = None
    scaling_v: np.ndarray = None
    dual_history: tuple = None
    objective_history: tuple = None

    def __post_init__(self):
        if self.converged and not (self.residual <= self.tolerance):
            raise ValidationError(
                f"converged report with residual {self.residual} > "
                f"tolerance {self.tolerance}"
            )


# ---------------------------------------------------------------------------
# shared numerics


def guarded_divide(num, den, floor: float = 1e-300):
    """Element-wise ``num / den`` with ``0 / x := 0``.

    Raises
    ------
    InfeasibleSupportError
        If some ``num[i] > 0`` sits over ``den[i] <= floor``; positive mass
        over a vanishing denominator signals infeasible support.
    """
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    bad = (num > 0) & (den <= floor)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise InfeasibleSupportError(
            f"positive mass over vanishing denominator at index {i} "
            f"(num={num.flat[i]:g}, den={den.flat[i]:g})"
        )
    out = np.zeros(np.broadcast_shapes(num.shape, den.shape))
    nz = np.broadcast_to(num != 0, out.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        np.divide(*np.broadcast_arrays(num, den), out=out, where=nz)
    return out


def cost_from_kernel(k) -> CostMatrix:
    """Cost matrix ``C_ij = -log k_ij`` of a strictly positive kernel.

    Sparse kernels with implicit zeros cannot be converted (their cost would
    be infinite); pass a dense kernel.
    """
    k = as_kernel(k)
    if k.is_sparse:
        dense = k.toarray()
        if np.any(dense <= 0):
            idx = np.argwhere(dense <= 0)[0]
            raise ValidationError(
                f"kernel entry ({idx[0]}, {idx[1]}) is not positive; "
                "sparse kernels with implicit zeros have no finite cost matrix"
            )
        return CostMatrix(-np.log(dense))
    return CostMatrix(-np.log(k.entries))


def build_grid_rate_matrix(rows: int, cols: int, q: float, sparse: bool = False) -> CTMCModel:
    """Rate matrix of a random walk on a rows x cols grid.

    Rate ``q`` between 4-neighborhood cell pairs, zero elsewhere; diagonals
    are the negated off-diagonal row sums (interior cells get ``-4q``).
    """
    rows = int(rows)
    cols = int(cols)
    if rows < 1 or cols < 1:
        raise ValidationError(f"grid must be at least 1x1, got {rows}x{cols}")
    if not q > 0:
        raise ValidationError(f"rate q must be positive, got {q}")
    n = rows * cols
    idx = lambda r, c: r * cols + c
    data, ii, jj = [], [], []
    for r in range(rows):
        for c in range(cols):
            i = idx(r, c)
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                r2, c2 = r + dr, c + dc
                if 0 <= r2 < rows and 0 <= c2 < cols:
                    ii.append(i)
                    jj.append(idx(r2, c2))
                    data.append(q)
    Q = sp.coo_array((data, (ii, jj)), shape=(n, n)).tocsr()
    if sparse:
        return CTMCModel(Q)
    return CTMCModel(Q.toarray())
