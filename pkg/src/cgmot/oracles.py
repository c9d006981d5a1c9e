"""Independent reference implementations for testing and validation.

Everything here favors transparency over speed: closed forms, exhaustive
enumeration, extended-precision iteration.  Instance sizes are capped and the
caps are enforced.  None of these routines shares code with the production
solvers they validate.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import lgamma

import mpmath as mp
import numpy as np

from .core import (
    CapabilityError,
    Histogram,
    NumericError,
    TransportPlan,
    ValidationError,
    as_cost_matrix,
    as_histogram,
    as_kernel,
)

__all__ = [
    "NonUniqueBarycenter",
    "analytic_wb_line",
    "ExactCGMInstance",
    "exact_cgm_log_joint",
    "enumerate_integer_tables",
    "brute_force_plan",
    "lp_optimal_vertices",
    "prox_oracle_1d",
    "mape",
    "gaussian_coordinate_descent",
]


# ---------------------------------------------------------------------------
# closed-form barycenter on a line


@dataclass(frozen=True)
class NonUniqueBarycenter:
    """Marker returned when every mass-F histogram is optimal (eps=0, t=1/2)."""

    n: int
    mass: float
    t: float

    def __repr__(self):
        return f"NonUniqueBarycenter(n={self.n}, mass={self.mass:g}, t={self.t})"


def analytic_wb_line(n: int, F: float, t: float, epsilon: float):
    """Closed-form barycenter of endpoint spikes on an n-cell line.

    Endpoints are ``a = (F, 0, ..., 0)`` and ``b = (0, ..., 0, F)`` under cost
    ``|i - j|``.  The weighted two-point barycenter objective reduces to a
    linear-plus-entropy problem over a single histogram whose solution is
    explicit:

    * ``epsilon > 0``: softmax histogram ``c_i`` proportional to
      ``exp(-k_i / epsilon)`` with ``k_i = (1 - 2t) i + t n + t - 1``
      (1-based ``i``).  The closed form assumes the interior optimum, where
      the non-negativity constraints are inactive.
    * ``epsilon = 0``: ``a`` for ``t < 1/2``, ``b`` for ``t > 1/2``, and a
      :class:`NonUniqueBarycenter` marker at ``t = 1/2`` where every feasible
      histogram is optimal.
    """
    n = int(n)
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    if not F > 0:
        raise ValidationError(f"F must be positive, got {F}")
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"t must lie in [0, 1], got {t}")
    if epsilon < 0:
        raise ValidationError(f"epsilon must be >= 0, got {epsilon}")
    if epsilon == 0:
        if t < 0.5:
            values = np.zeros(n)
            values[0] = F
            return Histogram(values)
        if t > 0.5:
            values = np.zeros(n)
            values[-1] = F
            return Histogram(values)
        return NonUniqueBarycenter(n=n, mass=float(F), t=0.5)
    i = np.arange(1, n + 1, dtype=float)
    k = (1.0 - 2.0 * t) * i + t * n + t - 1.0
    logits = -k / epsilon
    logits -= logits.max()
    weights = np.exp(logits)
    return Histogram(F * weights / weights.sum())


# ---------------------------------------------------------------------------
# exact two-node aggregate probabilities


@dataclass(frozen=True, eq=False)
class ExactCGMInstance:
    """Integer contingency table ``T`` under potential ``psi`` with ``sum T = F``."""

    psi: object
    F: int
    table: np.ndarray

    def __post_init__(self):
        psi = as_kernel(self.psi)
        if psi.is_sparse:
            raise ValidationError("exact probabilities require a dense potential")
        table = np.asarray(self.table, dtype=float)
        if table.shape != psi.entries.shape:
            raise ValidationError(
                f"table shape {table.shape} != potential shape {psi.entries.shape}"
            )
        if np.any(table < 0):
            raise ValidationError("table entries must be non-negative")
        if np.any(table != np.round(table)):
            raise ValidationError("table entries must be integers")
        if not (isinstance(self.F, (int, np.integer)) and self.F > 0):
            raise ValidationError(f"F must be a positive integer, got {self.F}")
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "table", table)


def exact_cgm_log_joint(instance: ExactCGMInstance) -> float:
    """Exact log-probability of an integer table under the two-node model.

    Uses log-gamma for the factorials.  Tables whose total differs from ``F``
    lie outside the feasible count set and get the sentinel ``-inf``.
    """
    psi = instance.psi.entries
    T = instance.table
    F = instance.F
    if int(T.sum()) != F:
        return float("-inf")
    log_z = np.log(psi.sum())
    out = lgamma(F + 1) - F * log_z
    nz = T > 0
    out += float(np.sum(T[nz] * np.log(psi[nz])))
    out -= float(sum(lgamma(x + 1) for x in T.ravel()))
    return out


def enumerate_integer_tables(n: int, F: int):
    """Yield every n x n non-negative integer table with total F."""
    cells = n * n
    for dividers in itertools.combinations(range(F + cells - 1), cells - 1):
        prev = -1
        counts = []
        for d in dividers:
            counts.append(d - prev - 1)
            prev = d
        counts.append(F + cells - 1 - prev - 1)
        yield np.array(counts, dtype=float).reshape(n, n)


# ---------------------------------------------------------------------------
# brute-force transport solvers (n <= 5)


def _mp_logsumexp(terms):
    m = max(terms)
    if mp.isinf(m) and m < 0:
        return mp.mpf("-inf")
    return m + mp.log(mp.fsum(mp.e ** (t - m) for t in terms))


def _entropic_dual_ascent(a, b, C, epsilon, tol=1e-12, max_sweeps=200_000):
    """Extended-precision coordinate dual ascent for the entropic problem.

    Maximizes the entropic dual by exact per-coordinate updates of the row
    and column potentials (each update is a closed-form log-sum-exp step),
    entirely in mpmath arithmetic.
    """
    with mp.workdps(30):
        n = len(a)
        mass = float(np.sum(a))
        sa = [i for i in range(n) if a[i] > 0]
        sb = [j for j in range(n) if b[j] > 0]
        am = [mp.mpf(float(x)) for x in a]
        bm = [mp.mpf(float(x)) for x in b]
        Cm = [[mp.mpf(float(C[i, j])) for j in range(n)] for i in range(n)]
        em = mp.mpf(float(epsilon))
        f = [mp.mpf(0)] * n
        g = [mp.mpf(0)] * n
        for _ in range(max_sweeps):
            for i in sa:
                f[i] = em * (mp.log(am[i]) - _mp_logsumexp(
                    [(g[j] - Cm[i][j]) / em for j in sb]))
            for j in sb:
                g[j] = em * (mp.log(bm[j]) - _mp_logsumexp(
                    [(f[i] - Cm[i][j]) / em for i in sa]))
            # rows are the only violated marginal after the column pass
            err = mp.mpf(0)
            for i in sa:
                row = mp.fsum(
                    mp.e ** ((f[i] + g[j] - Cm[i][j]) / em) for j in sb
                )
                err = max(err, abs(row - am[i]))
            if err <= tol * mass:
                break
        else:
            raise NumericError("extended-precision dual ascent did not converge")
        T = np.zeros((n, n))
        for i in sa:
            for j in sb:
                T[i, j] = float(mp.e ** ((f[i] + g[j] - Cm[i][j]) / em))
    return T


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, x, y):
        rx, ry = self.find(x), self.find(y)
        if rx == ry:
            return False
        self.parent[rx] = ry
        return True


def _tree_basic_solution(n, tree_edges, a, b):
    """Flows of the unique basic solution supported on a bipartite spanning tree."""
    supply = list(a) + [-x for x in b]  # rows positive, cols negative
    incident = [[] for _ in range(2 * n)]
    for e, (i, j) in enumerate(tree_edges):
        incident[i].append(e)
        incident[n + j].append(e)
    deg = [len(lst) for lst in incident]
    removed = [False] * len(tree_edges)
    flows = [0.0] * len(tree_edges)
    leaves = [v for v in range(2 * n) if deg[v] == 1]
    while leaves:
        v = leaves.pop()
        edge = next((e for e in incident[v] if not removed[e]), None)
        if edge is None:
            continue
        i, j = tree_edges[edge]
        flow = supply[v] if v < n else -supply[v]
        flows[edge] = flow
        removed[edge] = True
        other = (n + j) if v < n else i
        supply[other] += supply[v] if v < n else supply[v]
        supply[v] = 0
        deg[other] -= 1
        deg[v] -= 1
        if deg[other] == 1:
            leaves.append(other)
    return flows


def _transport_vertices(a, b):
    """All vertices of the transportation polytope (n <= 4), deduplicated."""
    n = len(a)
    cells = [(i, j) for i in range(n) for j in range(n)]
    seen = {}
    for combo in itertools.combinations(range(len(cells)), 2 * n - 1):
        uf = _UnionFind(2 * n)
        ok = True
        for e in combo:
            i, j = cells[e]
            if not uf.union(i, n + j):
                ok = False
                break
        if not ok:
            continue
        tree_edges = [cells[e] for e in combo]
        flows = _tree_basic_solution(n, tree_edges, a, b)
        if any(f < -1e-11 for f in flows):
            continue
        T = np.zeros((n, n))
        for (i, j), f in zip(tree_edges, flows):
            T[i, j] = max(f, 0.0)
        key = np.round(T, 9).tobytes()
        if key not in seen:
            seen[key] = T
    return list(seen.values())


def lp_optimal_vertices(a, b, C, rtol: float = 1e-9):
    """All cost-minimizing vertices of the transportation polytope (n <= 4)."""
    a = as_histogram(a)
    b = as_histogram(b)
    C = as_cost_matrix(C)
    if a.n > 4:
        raise CapabilityError(f"vertex enumeration is capped at n <= 4, got {a.n}")
    vertices = _transport_vertices(a.values, b.values)
    costs = [float(np.sum(C.entries * T)) for T in vertices]
    best = min(costs)
    plans = []
    for T, c in sorted(zip(vertices, costs), key=lambda tc: tuple(tc[0].ravel())):
        if c <= best + rtol * max(1.0, abs(best)):
            plans.append(
                TransportPlan(T, a, b, marginal_tolerance=1e-9)
            )
    return plans


def brute_force_plan(a, b, C, epsilon: float) -> TransportPlan:
    """Reference transport plan by methods independent of the scaling solvers.

    ``epsilon > 0`` (n <= 5): extended-precision coordinate dual ascent to a
    1e-12 marginal residual.  ``epsilon = 0`` (n <= 4): exact LP by vertex
    enumeration of the transportation polytope; on cost ties the
    lexicographically smallest vertex is returned (see
    :func:`lp_optimal_vertices` for the full optimal set).
    """
    a = as_histogram(a)
    b = as_histogram(b)
    C = as_cost_matrix(C)
    if a.n > 5:
        raise CapabilityError(f"brute force is capped at n <= 5, got {a.n}")
    if epsilon < 0:
        raise ValidationError(f"epsilon must be >= 0, got {epsilon}")
    if epsilon == 0:
        return lp_optimal_vertices(a, b, C)[0]
    T = _entropic_dual_ascent(a.values, b.values, C.entries, epsilon)
    return TransportPlan(T, a, b, marginal_tolerance=1e-10)


# ---------------------------------------------------------------------------
# 1-D proximal oracle


def _prox_objective_mp(kind, sigma, alpha, u):
    u = mp.mpf(float(u))

    def h(x):
        val = x * mp.log(x / u) - x + u
        if kind == "gaussian":
            val += (x - alpha) ** 2 / (2 * sigma**2)
        elif kind == "poisson":
            if alpha > 0:
                val += alpha * mp.log(alpha / x) - alpha + x
            else:
                val += x
        return val

    return h


def prox_oracle_1d(model, u: float, F: float) -> float:
    """Scalar KL-prox by bracketing plus golden-section search.

    Minimizes ``x log(x/u) - x + u + A(x)`` over ``x > 0`` in extended
    precision, where ``A`` is the scalar observation penalty of ``model``
    (``None`` means no penalty).  Search runs to an interval width of 1e-13.
    """
    if not u > 0:
        raise ValidationError(f"u must be positive, got {u}")
    if model is None:
        return float(u)
    kind = model.kind
    if kind == "exact_marginal":
        return float(np.asarray(model.observation).reshape(()))
    if kind not in ("gaussian", "poisson"):
        raise ValidationError(f"unsupported noise kind {kind!r}")
    alpha = float(np.asarray(model.observation).reshape(()))
    with mp.workdps(30):
        sigma = mp.mpf(model.sigma) if kind == "gaussian" else None
        h = _prox_objective_mp(kind, sigma, mp.mpf(alpha), u)
        lo = mp.mpf("1e-30")
        hi = mp.mpf(max(u, alpha, 1.0))
        while h(2 * hi) < h(hi):
            hi *= 2
            if hi > mp.mpf("1e30"):
                raise NumericError("failed to bracket the prox minimum")
        hi *= 2
        invphi = (mp.sqrt(5) - 1) / 2
        x1 = hi - invphi * (hi - lo)
        x2 = lo + invphi * (hi - lo)
        h1, h2 = h(x1), h(x2)
        while hi - lo > mp.mpf("1e-13") * max(1, abs(hi)):
            if h1 < h2:
                hi, x2, h2 = x2, x1, h1
                x1 = hi - invphi * (hi - lo)
                h1 = h(x1)
            else:
                lo, x1, h1 = x1, x2, h2
                x2 = lo + invphi * (hi - lo)
                h2 = h(x2)
        return float((lo + hi) / 2)


# ---------------------------------------------------------------------------
# error metric


def mape(estimate, truth, return_excluded: bool = False):
    """Mean absolute percentage error, averaging ``|truth - est| / truth``.

    Zero-truth cells are undefined under the formula; they are excluded from
    the mean and counted.  Pass ``return_excluded=True`` to also get that
    count.
    """
    estimate = as_histogram(estimate)
    truth = as_histogram(truth)
    if estimate.n != truth.n:
        raise ValidationError(
            f"length mismatch: estimate {estimate.n} vs truth {truth.n}"
        )
    keep = truth.values > 0
    excluded = int(np.sum(~keep))
    if not np.any(keep):
        raise ValidationError("truth histogram is identically zero")
    value = float(
        np.mean(np.abs(truth.values[keep] - estimate.values[keep]) / truth.values[keep])
    )
    if return_excluded:
        return value, excluded
    return value


# ---------------------------------------------------------------------------
# independent convex solver for quadratically penalized transport


def gaussian_coordinate_descent(
    alpha, beta, C, sigma_a: float, sigma_b: float,
    tol: float = 1e-12, max_sweeps: int = 50_000,
):
    """Exact cyclic coordinate descent for entropic transport with quadratic
    marginal penalties.

    Minimizes ``sum_ij [C_ij t_ij + t_ij log t_ij]
    + ||alpha - tau 1||^2 / (2 sigma_a^2) + ||beta - tau^T 1||^2 / (2 sigma_b^2)``
    over non-negative matrices by cycling through cells, each step solving its
    strictly convex 1-D problem with a safeguarded Newton iteration in log
    space.  Small instances only; used to validate the scaling solver.
    """
    alpha = as_histogram(alpha).values
    beta = as_histogram(beta).values
    C = as_cost_matrix(C).entries
    n = len(alpha)
    if n > 4:
        raise CapabilityError(f"coordinate descent oracle capped at n <= 4, got {n}")
    inv_a = 1.0 / sigma_a**2
    inv_b = 1.0 / sigma_b**2
    tau = np.full((n, n), max(alpha.sum(), beta.sum(), 1.0) / (n * n))
    rows = tau.sum(axis=1)
    cols = tau.sum(axis=0)
    for _ in range(max_sweeps):
        delta = 0.0
        for i in range(n):
            for j in range(n):
                r_rest = rows[i] - tau[i, j]
                c_rest = cols[j] - tau[i, j]

                def grad(theta):
                    x = np.exp(theta)
                    return (C[i, j] + theta + 1.0
                            + (r_rest + x - alpha[i]) * inv_a
                            + (c_rest + x - beta[j]) * inv_b)

                theta = np.log(max(tau[i, j], 1e-12))
                lo, hi = theta, theta
                while grad(lo) > 0:
                    lo -= 2.0
                while grad(hi) < 0:
                    hi += 2.0
                for _ in range(200):
                    g = grad(theta)
                    if abs(g) < 1e-14:
                        break
                    gp = 1.0 + np.exp(theta) * (inv_a + inv_b)
                    step = theta - g / gp
                    if g > 0:
                        hi = theta
                    else:
                        lo = theta
                    theta = step if lo < step < hi else 0.5 * (lo + hi)
                new = np.exp(theta)
                delta = max(delta, abs(new - tau[i, j]))
                rows[i] += new - tau[i, j]
                cols[j] += new - tau[i, j]
                tau[i, j] = new
        if delta <= tol:
            return tau
    raise NumericError("coordinate descent oracle did not converge")
