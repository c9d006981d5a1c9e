"""Entropy-regularized optimal transport via Sinkhorn-Knopp scaling.

Solvers work on unnormalized histograms with total mass ``F``; the objective
uses the raw negative entropy ``sum T log T`` without normalization, so
values computed at mass ``F`` and on the simplex relate by explicit
``F``-scaling (see :func:`cgm_log_joint_approx`).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, xlogy

from .core import (
    DEFAULT_OPTIONS,
    Histogram,
    NumericError,
    SolveReport,
    TransportPlan,
    ValidationError,
    as_cost_matrix,
    as_histogram,
    as_kernel,
    guarded_divide,
    masses_match,
)

__all__ = [
    "EntropicObjectiveValue",
    "sinkhorn_plan",
    "transport_cost",
    "sinkhorn_distance",
    "cgm_log_joint_approx",
]


@dataclass(frozen=True)
class EntropicObjectiveValue:
    """Split of the entropic objective: ``sum C*T`` plus ``eps * sum T log T``."""

    transport_cost: float
    entropy_term: float

    @property
    def total(self) -> float:
        return self.transport_cost + self.entropy_term


def _plan_entries(T) -> np.ndarray:
    if isinstance(T, TransportPlan):
        return T.entries
    T = np.asarray(T, dtype=float)
    if T.ndim != 2:
        raise ValidationError(f"plan must be 2-D, got shape {T.shape}")
    if np.any(T < 0):
        raise ValidationError("plan entries must be non-negative")
    return T


def transport_cost(T, C, epsilon: float) -> EntropicObjectiveValue:
    """Evaluate the entropic transport objective at a plan.

    Parameters
    ----------
    T : TransportPlan or array
    C : CostMatrix or array
    epsilon : float
        Entropy weight, >= 0.  ``0 * log 0`` evaluates to 0; with
        ``epsilon = 0`` the entropy term is exactly 0.
    """
    T = _plan_entries(T)
    C = as_cost_matrix(C)
    if T.shape != C.entries.shape:
        raise ValidationError(
            f"plan shape {T.shape} does not match cost shape {C.entries.shape}"
        )
    if epsilon < 0:
        raise ValidationError(f"epsilon must be >= 0, got {epsilon}")
    cost = float(np.sum(C.entries * T))
    entropy = float(epsilon * np.sum(xlogy(T, T))) if epsilon > 0 else 0.0
    return EntropicObjectiveValue(transport_cost=cost, entropy_term=entropy)


def _dual_value(epsilon, a, b, log_u, log_v, mass, coupling_total):
    # Dual of the entropic problem at scaling vectors (u, v); exact coordinate
    # ascent makes this non-decreasing along Sinkhorn iterations.
    term_a = float(np.sum(np.where(a > 0, a * log_u, 0.0)))
    term_b = float(np.sum(np.where(b > 0, b * log_v, 0.0)))
    return epsilon * (term_a + term_b + mass - coupling_total)


def sinkhorn_plan(a, b, C, epsilon: float, opts=None):
    """Entropic OT plan by Sinkhorn-Knopp diagonal scaling.

    Returns a plan of the exact form ``diag(u) K diag(v)`` with
    ``K = exp(-C / epsilon)``, iterated until the max-norm marginal violation
    per unit mass falls below ``opts.tolerance``.

    Parameters
    ----------
    a, b : Histogram or array
        Marginals with equal total mass (1e-9 relative).
    C : CostMatrix or array
    epsilon : float, > 0
    opts : SolverOptions, optional
        With ``log_domain=True`` the iteration runs on log-scalings with
        max-shifted log-sum-exp reductions, which survives kernels that
        underflow in the dense path.

    Returns
    -------
    (TransportPlan, SolveReport)
        The report stores the scaling vectors and the per-iteration dual
        objective values.  If the iteration cap is reached the plan is still
        returned with ``converged=False``.
    """
    opts = opts or DEFAULT_OPTIONS
    a = as_histogram(a)
    b = as_histogram(b)
    C = as_cost_matrix(C)
    if a.n != C.n or b.n != C.n:
        raise ValidationError(
            f"marginal lengths ({a.n}, {b.n}) do not match cost size {C.n}"
        )
    if not epsilon > 0:
        raise ValidationError(f"epsilon must be > 0, got {epsilon}")
    if not masses_match(a, b):
        raise ValidationError(f"marginal masses differ: {a.mass} vs {b.mass}")
    if a.mass <= 0:
        raise ValidationError("total mass must be positive")

    if opts.log_domain:
        T, report = _sinkhorn_log(a, b, C, epsilon, opts)
    else:
        T, report = _sinkhorn_dense(a, b, C, epsilon, opts)
    plan = TransportPlan(
        T,
        row_marginal=a,
        col_marginal=b,
        marginal_tolerance=max(opts.tolerance, report.residual) * (1 + 1e-9) + 1e-15,
    )
    return plan, report


def _sinkhorn_dense(a, b, C, epsilon, opts):
    av, bv = a.values, b.values
    mass = a.mass
    K = np.exp(-C.entries / epsilon)
    if np.any((K.sum(axis=1) == 0) & (av > 0)) or np.any((K.sum(axis=0) == 0) & (bv > 0)):
        raise NumericError(
            "kernel exp(-C/epsilon) underflowed to zero rows/columns; "
            "retry with SolverOptions(log_domain=True)"
        )
    n = C.n
    v = np.ones(n)
    u = np.ones(n)
    duals = []
    err = np.inf
    it = 0
    for it in range(1, opts.max_iterations + 1):
        Kv = K @ v
        if np.any((Kv <= opts.epsilon_floor) & (av > 0)):
            raise NumericError(
                "scaling denominator underflowed; retry with "
                "SolverOptions(log_domain=True)"
            )
        u = guarded_divide(av, Kv, opts.epsilon_floor)
        Ktu = K.T @ u
        if np.any((Ktu <= opts.epsilon_floor) & (bv > 0)):
            raise NumericError(
                "scaling denominator underflowed; retry with "
                "SolverOptions(log_domain=True)"
            )
        v = guarded_divide(bv, Ktu, opts.epsilon_floor)
        # column marginals are exact after the v-update; only rows can violate
        Kv = K @ v
        row = u * Kv
        err = float(np.max(np.abs(row - av))) / mass
        with np.errstate(divide="ignore"):
            duals.append(
                _dual_value(epsilon, av, bv, np.log(np.where(u > 0, u, 1.0)),
                            np.log(np.where(v > 0, v, 1.0)), mass, float(u @ Kv))
            )
        if err <= opts.tolerance:
            break
    T = u[:, None] * K * v[None, :]
    obj = transport_cost(T, C, epsilon).total
    return T, SolveReport(
        iterations=it,
        residual=err,
        objective=obj,
        converged=err <= opts.tolerance,
        tolerance=opts.tolerance,
        scaling_u=u,
        scaling_v=v,
        dual_history=tuple(duals),
    )


def _sinkhorn_log(a, b, C, epsilon, opts):
    av, bv = a.values, b.values
    mass = a.mass
    M = -C.entries / epsilon
    with np.errstate(divide="ignore"):
        log_a = np.log(av)
        log_b = np.log(bv)
    n = C.n
    log_v = np.zeros(n)
    log_u = np.full(n, -np.inf)
    duals = []
    err = np.inf
    it = 0
    for it in range(1, opts.max_iterations + 1):
        log_u = log_a - logsumexp(M + log_v[None, :], axis=1)
        log_v = log_b - logsumexp(M + log_u[:, None], axis=0)
        log_T = log_u[:, None] + M + log_v[None, :]
        row = np.exp(logsumexp(log_T, axis=1))
        err = float(np.max(np.abs(row - av))) / mass
        duals.append(
            _dual_value(
                epsilon, av, bv,
                np.where(av > 0, log_u, 0.0),
                np.where(bv > 0, log_v, 0.0),
                mass,
                float(np.exp(logsumexp(log_T))),
            )
        )
        if err <= opts.tolerance:
            break
    T = np.exp(log_u[:, None] + M + log_v[None, :])
    obj = transport_cost(T, C, epsilon).total
    return T, SolveReport(
        iterations=it,
        residual=err,
        objective=obj,
        converged=err <= opts.tolerance,
        tolerance=opts.tolerance,
        scaling_u=np.exp(log_u),
        scaling_v=np.exp(log_v),
        dual_history=tuple(duals),
    )


def sinkhorn_distance(a, b, C, epsilon: float, opts=None) -> float:
    """Optimal value of the entropic transport problem.

    Composition of :func:`sinkhorn_plan` and :func:`transport_cost`.  Warns
    if the iteration cap was reached before convergence.
    """
    plan, report = sinkhorn_plan(a, b, C, epsilon, opts)
    if not report.converged:
        warnings.warn(
            f"Sinkhorn did not converge in {report.iterations} iterations "
            f"(residual {report.residual:.3e}); value may be inaccurate",
            stacklevel=2,
        )
    return transport_cost(plan, C, epsilon).total


def cgm_log_joint_approx(T, psi, F: float) -> float:
    """Continuously-relaxed negative log joint of the two-node aggregate model.

    For a plan ``T`` with total mass ``F`` and a strictly positive potential
    matrix ``psi`` this is::

        sum_ij [T_ij log T_ij - T_ij log psi_ij] - F log F + F log Z

    with ``Z = sum_ij psi_ij``.  Per unit mass it equals the entropic
    transport objective of ``T/F`` under cost ``-log psi`` at ``epsilon = 1``,
    shifted by ``log Z``.
    """
    T = _plan_entries(T)
    psi = as_kernel(psi)
    if psi.is_sparse:
        raise ValidationError("potential matrix must be dense and strictly positive")
    if T.shape != psi.entries.shape:
        raise ValidationError(
            f"plan shape {T.shape} does not match potential shape {psi.entries.shape}"
        )
    if not F > 0:
        raise ValidationError(f"total mass F must be positive, got {F}")
    total = float(T.sum())
    if abs(total - F) > 1e-9 * max(1.0, F):
        raise ValidationError(f"plan total {total} does not equal F={F}")
    Z = psi.total
    ent = float(np.sum(xlogy(T, T)))
    inter = float(np.sum(T * np.log(psi.entries)))
    return ent - inter - F * np.log(F) + F * np.log(Z)
