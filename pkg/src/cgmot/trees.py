"""Histogram propagation on trees by scaling-style belief propagation.

Estimates per-node histograms ``z_u`` and per-edge plans ``z_uv`` minimizing::

    sum_(u,v) sum_ij z_uv (log z_uv - log phi_uv)
        - sum_u (deg(u) - 1) sum_i z_u log z_u

subject to mass F at every node, edge-node consistency
``z_u(i) = sum_j z_uv(i, j)``, and equality with the observations at observed
nodes.  At the optimum every edge plan factorizes through the edge kernel as
``diag(m) phi_uv diag(m')``; the factors are computed by passing messages
leaf-to-root and back until they stop changing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .core import (
    DEFAULT_OPTIONS,
    Histogram,
    SolveReport,
    TransportPlan,
    TreeCGM,
    ValidationError,
    as_histogram,
    guarded_divide,
)

__all__ = ["TreeSolution", "solve_tree", "tree_objective"]


@dataclass(frozen=True, eq=False)
class TreeSolution:
    """Node histograms, edge plans (keyed like the problem's edges), and diagnostics."""

    node_marginals: dict
    edge_plans: dict
    report: SolveReport


def _sweep_orders(problem, root):
    """Directed edges for one upward (leaf-to-root) and one downward sweep."""
    parent = {root: None}
    order = [root]
    stack = [root]
    while stack:
        u = stack.pop()
        for v in problem.neighbors(u):
            if v not in parent:
                parent[v] = u
                order.append(v)
                stack.append(v)
    down = [(parent[u], u) for u in order if parent[u] is not None]
    up = [(v, u) for (u, v) in reversed(down)]
    return up, down


def _belief_at(problem, messages, u, floor):
    if u in problem.observations:
        return problem.observations[u].values
    prod = np.ones(problem.n_states)
    for v in problem.neighbors(u):
        prod = prod * messages[(v, u)]
    total = prod.sum()
    if total <= floor:
        raise ValidationError(
            f"belief at node {u!r} vanished; kernel supports are incompatible"
        )
    return problem.mass * prod / total


def _kernel_apply(problem, u, v, x):
    """Apply the edge kernel in the direction u -> v (transposing as stored)."""
    if (u, v) in problem.kernels:
        return problem.kernels[(u, v)].apply_transpose(x)
    return problem.kernels[(v, u)].apply(x)


def _edge_plan_arrays(problem, z, messages, floor):
    """Plans with exact row-side marginals: diag(z_u / phi s_v) phi diag(s_v)."""
    plans = {}
    for (u, v) in problem.edges:
        phi = problem.kernels[(u, v)].toarray()
        s_v = guarded_divide(z[v], messages[(u, v)], floor)
        denom = phi @ s_v
        s_u = guarded_divide(z[u], denom, floor)
        plans[(u, v)] = s_u[:, None] * phi * s_v[None, :]
    return plans


def _objective_value(problem, z, plan_arrays):
    total = 0.0
    for (u, v), plan in plan_arrays.items():
        phi = problem.kernels[(u, v)].toarray()
        pos = plan > 0
        if np.any(pos & (phi <= 0)):
            return float("inf")
        total += float(np.sum(xlogy(plan, plan)))
        total -= float(np.sum(np.where(pos, plan * np.log(np.where(pos, phi, 1.0)), 0.0)))
    for u in problem.nodes:
        nu = problem.degree(u)
        if nu > 1:
            total -= (nu - 1) * float(np.sum(xlogy(z[u], z[u])))
    return total


def solve_tree(problem: TreeCGM, opts=None) -> TreeSolution:
    """Propagate observed histograms across a tree.

    Messages are updated leaf-to-root then root-to-leaf (root: lowest-id
    observed node), normalized to unit sum, and swept until their maximal
    relative change drops below ``opts.tolerance``; one extra sweep pair then
    tightens the returned fixed point.  Edge plans are assembled with exact
    row-side marginals; the reported residual is the worst column-side
    consistency violation per unit mass.
    """
    opts = opts or DEFAULT_OPTIONS
    if not isinstance(problem, TreeCGM):
        raise ValidationError("problem must be a TreeCGM")
    if not problem.observations:
        raise ValidationError("at least one node must be observed")
    root = sorted(problem.observed_nodes, key=lambda u: (str(type(u)), str(u)))[0]
    up, down = _sweep_orders(problem, root)
    n = problem.n_states
    floor = opts.epsilon_floor

    messages = {}
    for (u, v) in problem.edges:
        messages[(u, v)] = np.full(n, 1.0 / n)
        messages[(v, u)] = np.full(n, 1.0 / n)

    def run_sweep_pair(track_change):
        change = 0.0
        for direction in (up, down):
            for (u, v) in direction:
                z_u = _belief_at(problem, messages, u, floor)
                fresh = _kernel_apply(
                    problem, u, v, guarded_divide(z_u, messages[(v, u)], floor)
                )
                fresh = fresh / fresh.sum()
                if track_change:
                    change = max(
                        change,
                        float(np.max(np.abs(fresh - messages[(u, v)])
                                     / np.maximum(messages[(u, v)], 1e-30))),
                    )
                messages[(u, v)] = fresh
        return change

    objectives = []
    err = np.inf
    sweeps = 0
    for sweeps in range(1, opts.max_iterations + 1):
        err = run_sweep_pair(track_change=True)
        z = {u: _belief_at(problem, messages, u, floor) for u in problem.nodes}
        objectives.append(
            _objective_value(problem, z, _edge_plan_arrays(problem, z, messages, floor))
        )
        if err <= opts.tolerance:
            break
    converged = err <= opts.tolerance
    run_sweep_pair(track_change=False)

    z = {u: _belief_at(problem, messages, u, floor) for u in problem.nodes}
    node_marginals = {u: Histogram(z[u]) for u in problem.nodes}
    plan_arrays = _edge_plan_arrays(problem, z, messages, floor)
    edge_plans = {}
    plan_residual = 0.0
    for (u, v), plan in plan_arrays.items():
        col_err = float(np.max(np.abs(plan.sum(axis=0) - z[v]))) / problem.mass
        plan_residual = max(plan_residual, col_err)
        edge_plans[(u, v)] = TransportPlan(
            plan,
            row_marginal=node_marginals[u],
            col_marginal=node_marginals[v],
            marginal_tolerance=col_err * (1 + 1e-6) + 1e-13,
        )
    residual = max(err, plan_residual) if converged else err
    report = SolveReport(
        iterations=sweeps,
        residual=residual,
        objective=_objective_value(problem, z, plan_arrays),
        converged=converged and residual <= opts.tolerance,
        tolerance=opts.tolerance,
        objective_history=tuple(objectives),
    )
    return TreeSolution(node_marginals=node_marginals, edge_plans=edge_plans,
                        report=report)


def tree_objective(solution: TreeSolution, problem: TreeCGM) -> float:
    """Evaluate the tree objective at a solution (``0 log 0 = 0``).

    Leaf nodes contribute no entropy term (their degree-minus-one weight is
    zero); plan mass outside a kernel's support yields ``+inf``.
    """
    z = {}
    for u in problem.nodes:
        h = solution.node_marginals.get(u)
        if h is None:
            raise ValidationError(f"solution is missing node {u!r}")
        h = as_histogram(h)
        if h.n != problem.n_states:
            raise ValidationError(f"marginal at {u!r} has wrong length {h.n}")
        z[u] = h.values
    plans = {}
    for e in problem.edges:
        p = solution.edge_plans.get(e)
        if p is None:
            raise ValidationError(f"solution is missing edge plan {e!r}")
        entries = p.entries if isinstance(p, TransportPlan) else np.asarray(p, float)
        if entries.shape != (problem.n_states, problem.n_states):
            raise ValidationError(f"edge plan {e!r} has wrong shape {entries.shape}")
        plans[e] = entries
    return _objective_value(problem, z, plans)
