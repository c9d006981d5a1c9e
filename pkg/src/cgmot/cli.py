"""Command-line interface.

Exit codes: 0 success, 1 solver non-convergence, 2 I/O or parse failure,
3 configuration error.  The ``CGMOT_THREADS`` environment variable caps
parallelism in the grid benchmark.
"""

from __future__ import annotations

import os
import sys

import click
import numpy as np

from .core import (
    ConfigurationError,
    ConvergenceError,
    SolverOptions,
    ValidationError,
    build_grid_rate_matrix,
)
from .entropic import sinkhorn_plan, transport_cost
from .experiments import ExperimentConfig, generate_grid_series, run_grid_mape, run_synthetic_line
from .interpolate import PathInterpolationProblem, interpolate_path
from .io import (
    ParseError,
    ResolutionError,
    format_float,
    load_histogram,
    load_matrix,
    load_tree,
    save_histogram,
    save_matrix,
)
from .noisy import NoiseModel, noisy_objective, noisy_ot_solve
from .oracles import NonUniqueBarycenter, analytic_wb_line
from .trees import solve_tree

__all__ = ["main", "entrypoint", "cli"]


def _options(ctx) -> SolverOptions:
    o = ctx.obj
    return SolverOptions(
        tolerance=o["tolerance"],
        max_iterations=o["max_iters"],
        log_domain=o["log_domain"],
    )


def _out_path(ctx, name):
    out_dir = ctx.obj["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


def parse_noise_spec(spec: str) -> NoiseModel:
    """Parse ``gaussian:sigma=0.1``, ``poisson``, or ``exact`` / ``exact_marginal``."""
    head, _, rest = spec.partition(":")
    head = head.strip().lower()
    params = {}
    if rest:
        for item in rest.split(","):
            key, eq, val = item.partition("=")
            if not eq:
                raise ConfigurationError(f"bad noise parameter {item!r} in {spec!r}")
            params[key.strip()] = float(val)
    if head == "gaussian":
        if set(params) != {"sigma"}:
            raise ConfigurationError(f"gaussian noise takes exactly sigma=..., got {spec!r}")
        return NoiseModel("gaussian", sigma=params["sigma"])
    if head == "poisson":
        if params:
            raise ConfigurationError("poisson noise takes no parameters")
        return NoiseModel("poisson")
    if head in ("exact", "exact_marginal"):
        if params:
            raise ConfigurationError("exact_marginal noise takes no parameters")
        return NoiseModel("exact_marginal")
    raise ConfigurationError(f"unknown noise kind {head!r}")


@click.group()
@click.option("--tolerance", type=float, default=1e-9, show_default=True,
              help="Solver convergence tolerance.")
@click.option("--max-iters", type=int, default=10000, show_default=True,
              help="Solver iteration cap.")
@click.option("--log-domain", is_flag=True, help="Run Sinkhorn on log scalings.")
@click.option("--seed", type=int, default=0, show_default=True,
              help="Random seed for generators.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=".",
              show_default=True, help="Directory for output files.")
@click.pass_context
def cli(ctx, tolerance, max_iters, log_domain, seed, out_dir):
    """Optimal transport and histogram interpolation via aggregate models."""
    ctx.obj = {
        "tolerance": tolerance,
        "max_iters": max_iters,
        "log_domain": log_domain,
        "seed": seed,
        "out_dir": out_dir,
    }


@cli.command()
@click.option("--a", "a_path", required=True, type=click.Path(exists=True))
@click.option("--b", "b_path", required=True, type=click.Path(exists=True))
@click.option("--cost", "cost_path", required=True, type=click.Path(exists=True))
@click.option("--epsilon", type=float, default=1.0, show_default=True)
@click.option("--plan-out", type=str, default=None,
              help="Also write the transport plan CSV under this name.")
@click.pass_context
def distance(ctx, a_path, b_path, cost_path, epsilon, plan_out):
    """Entropic transport distance between two histogram files."""
    a = load_histogram(a_path)
    b = load_histogram(b_path)
    C = _dense(load_matrix(cost_path))
    plan, report = sinkhorn_plan(a, b, C, epsilon, _options(ctx))
    if plan_out:
        save_matrix(_out_path(ctx, plan_out), plan.entries)
    click.echo(format_float(transport_cost(plan, C, epsilon).total))
    if not report.converged:
        raise ConvergenceError(
            f"Sinkhorn stopped at residual {report.residual:.3e} after "
            f"{report.iterations} iterations"
        )


@cli.command("noisy-distance")
@click.option("--a", "a_path", required=True, type=click.Path(exists=True))
@click.option("--b", "b_path", required=True, type=click.Path(exists=True))
@click.option("--cost", "cost_path", required=True, type=click.Path(exists=True))
@click.option("--noise-a", "noise_a_spec", required=True,
              help="gaussian:sigma=S | poisson | exact")
@click.option("--noise-b", "noise_b_spec", required=True,
              help="gaussian:sigma=S | poisson | exact")
@click.option("--mass", "-F", "mass", type=float, required=True,
              help="Sample count F behind the observed histograms.")
@click.option("--asymptotic", is_flag=True,
              help="Report the large-F objective form.")
@click.option("--plan-out", type=str, default=None)
@click.pass_context
def noisy_distance(ctx, a_path, b_path, cost_path, noise_a_spec, noise_b_spec,
                   mass, asymptotic, plan_out):
    """Transport objective between noisily observed histograms."""
    a = load_histogram(a_path)
    b = load_histogram(b_path)
    C = _dense(load_matrix(cost_path))
    noise_a = parse_noise_spec(noise_a_spec)
    noise_b = parse_noise_spec(noise_b_spec)
    plan, report = noisy_ot_solve(a, b, C, noise_a, noise_b, mass, _options(ctx))
    if plan_out:
        save_matrix(_out_path(ctx, plan_out), plan.entries)
    value = noisy_objective(
        plan, C, noise_a.bind(a), noise_b.bind(b), mass, asymptotic=asymptotic
    )
    click.echo(format_float(value))
    if not report.converged:
        raise ConvergenceError(
            f"scaling stopped at residual {report.residual:.3e} after "
            f"{report.iterations} iterations"
        )


def _dense(matrix):
    if hasattr(matrix, "toarray"):
        return matrix.toarray()
    return matrix


@cli.command()
@click.option("--method", type=click.Choice(["path", "ctmc", "tree"]), required=True)
@click.option("--t", type=float, default=None, help="Interior time in [0, 1].")
@click.option("--a", "a_path", type=click.Path(exists=True), default=None)
@click.option("--b", "b_path", type=click.Path(exists=True), default=None)
@click.option("--psi", "psi_path", type=click.Path(exists=True), default=None,
              help="Common edge kernel (path method).")
@click.option("--N", "n_nodes", type=int, default=None, help="Path node count.")
@click.option("--k", "k_node", type=int, default=None,
              help="Interior node (default: nearest to t on the path grid).")
@click.option("--Q", "q_path", type=click.Path(exists=True), default=None,
              help="Rate matrix CSV (ctmc method).")
@click.option("--tree", "tree_path", type=click.Path(exists=True), default=None,
              help="Tree JSON document (tree method).")
@click.option("--out", "out_name", type=str, default="c.csv", show_default=True)
@click.option("--plans-out", type=str, default=None,
              help="Prefix for T1/T2 plan dumps.")
@click.pass_context
def interpolate(ctx, method, t, a_path, b_path, psi_path, n_nodes, k_node,
                q_path, tree_path, out_name, plans_out):
    """Estimate histograms between (path, ctmc) or across (tree) observations."""
    opts = _options(ctx)
    if method == "tree":
        if tree_path is None:
            raise ConfigurationError("tree method needs --tree")
        problem = load_tree(tree_path)
        solution = solve_tree(problem, opts)
        for u in problem.unobserved_nodes:
            save_histogram(_out_path(ctx, f"node_{u}.csv"),
                           solution.node_marginals[u])
            click.echo(f"node_{u}.csv")
        if not solution.report.converged:
            raise ConvergenceError(
                f"propagation stopped at residual {solution.report.residual:.3e}"
            )
        return
    if a_path is None or b_path is None:
        raise ConfigurationError(f"{method} method needs --a and --b")
    a = load_histogram(a_path)
    b = load_histogram(b_path)
    if method == "path":
        if psi_path is None or n_nodes is None:
            raise ConfigurationError("path method needs --psi and --N")
        if k_node is None:
            if t is None:
                raise ConfigurationError("path method needs --t or --k")
            k_node = int(np.clip(round(t * (n_nodes - 1)) + 1, 2, n_nodes - 1))
        problem = PathInterpolationProblem.undirected(a, b, load_matrix(psi_path),
                                                      n_nodes, k_node, options=opts)
    else:
        if q_path is None or t is None:
            raise ConfigurationError("ctmc method needs --Q and --t")
        problem = PathInterpolationProblem.ctmc(a, b, _dense(load_matrix(q_path)),
                                                t, options=opts)
    result = interpolate_path(problem)
    save_histogram(_out_path(ctx, out_name), result.c)
    if plans_out:
        save_matrix(_out_path(ctx, f"{plans_out}_T1.csv"), result.T1.entries)
        save_matrix(_out_path(ctx, f"{plans_out}_T2.csv"), result.T2.entries)
    click.echo(f"realized_t={format_float(result.realized_time)}")
    click.echo(out_name)
    if not result.report.converged:
        raise ConvergenceError(
            f"interpolation stopped at residual {result.report.residual:.3e}"
        )


@cli.command("barycenter-line")
@click.option("--n", type=int, required=True, help="Number of cells on the line.")
@click.option("--mass", "-F", type=float, default=1.0, show_default=True)
@click.option("--t", type=float, required=True)
@click.option("--epsilon", type=float, required=True)
@click.option("--out", "out_name", type=str, default=None,
              help="Write the histogram CSV instead of printing it.")
@click.pass_context
def barycenter_line(ctx, n, mass, t, epsilon, out_name):
    """Closed-form barycenter between endpoint spikes on a line."""
    result = analytic_wb_line(n, mass, t, epsilon)
    if isinstance(result, NonUniqueBarycenter):
        click.echo(f"non-unique: every histogram with mass {mass:g} is optimal at t=0.5")
        return
    if out_name:
        save_histogram(_out_path(ctx, out_name), result)
        click.echo(out_name)
    else:
        for i, v in enumerate(result.values):
            click.echo(f"{i},{format_float(v)}")


@cli.group()
def experiment():
    """Deterministic experiment runners."""


@experiment.command("synthetic-line")
@click.option("--n", type=int, default=10, show_default=True)
@click.option("--mass", "-F", type=float, default=100.0, show_default=True)
@click.option("--q", type=float, default=1.0, show_default=True)
@click.option("--wb-epsilon", type=float, default=1.0, show_default=True)
@click.pass_context
def experiment_synthetic_line(ctx, n, mass, q, wb_epsilon):
    """Interpolation table on the n-cell line (writes synthetic_line.tsv)."""
    config = ExperimentConfig.synthetic_line(
        n=n, mass=mass, q=q, wb_epsilon=wb_epsilon,
        out_dir=ctx.obj["out_dir"], options=_options(ctx),
    )
    run_synthetic_line(config)
    click.echo("synthetic_line.tsv")


@experiment.command("grid-mape")
@click.option("--rows", type=int, default=14, show_default=True)
@click.option("--cols", type=int, default=14, show_default=True)
@click.option("--hours", type=int, default=24, show_default=True)
@click.option("--days", type=int, default=1, show_default=True)
@click.option("--q", type=float, default=0.1, show_default=True,
              help="Ground-truth generator rate.")
@click.option("--q-interp", type=float, multiple=True, default=(0.1,),
              show_default=True, help="Interpolation rates to score (repeatable).")
@click.option("--noise-sigma", type=float, default=0.0, show_default=True)
@click.option("--inject-truth", is_flag=True,
              help="Debug: score the truth against itself (MAPE 0).")
@click.pass_context
def experiment_grid_mape(ctx, rows, cols, hours, days, q, q_interp, noise_sigma,
                         inject_truth):
    """Synthetic grid benchmark (writes grid_mape.tsv and grid_mape_raw.tsv)."""
    config = ExperimentConfig.grid_mape(
        rows=rows, cols=cols, hours=hours, days=days, q=q,
        q_interp=q_interp, noise_sigma=noise_sigma, seed=ctx.obj["seed"],
        out_dir=ctx.obj["out_dir"], debug_truth_injection=inject_truth,
        options=_options(ctx),
    )
    run_grid_mape(config)
    click.echo("grid_mape.tsv")


@cli.command("gen-data")
@click.option("--rows", type=int, default=14, show_default=True)
@click.option("--cols", type=int, default=14, show_default=True)
@click.option("--hours", type=int, default=24, show_default=True)
@click.option("--days", type=int, default=1, show_default=True)
@click.option("--q", type=float, default=0.1, show_default=True)
@click.option("--noise-sigma", type=float, default=0.0, show_default=True)
@click.pass_context
def gen_data(ctx, rows, cols, hours, days, q, noise_sigma):
    """Write the synthetic grid series as histogram CSV files."""
    config = ExperimentConfig.grid_mape(
        rows=rows, cols=cols, hours=hours, days=days, q=q,
        noise_sigma=noise_sigma, seed=ctx.obj["seed"], out_dir=ctx.obj["out_dir"],
    )
    truth, observed = generate_grid_series(config)
    for d in range(days):
        for h in range(hours):
            save_histogram(_out_path(ctx, f"truth_d{d}_h{h:02d}.csv"),
                           truth[d, h])
            save_histogram(_out_path(ctx, f"obs_d{d}_h{h:02d}.csv"),
                           observed[d, h])
    click.echo(f"wrote {2 * days * hours} files to {ctx.obj['out_dir']}")


def main(argv=None) -> int:
    """Run the CLI and map exceptions onto documented exit codes."""
    try:
        cli.main(args=argv, prog_name="cgmot", standalone_mode=False)
        return 0
    except ConvergenceError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except (ParseError, ResolutionError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except (ConfigurationError, ValidationError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 3
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return 3
    except click.ClickException as exc:
        exc.show()
        return 3
    except click.exceptions.Abort:
        return 130


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
