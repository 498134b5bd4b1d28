"""Command line interface: run scenarios, compare backends, validate
configs and query the closed-form sliding-box solution.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

import sys

import click
import yaml

from .bench import (
    compare,
    run,
    sliding_box_oracle,
    write_comparison,
)
from .errors import ConfigError, SparseMpmError
from .scenarios import load_config
from .solver import BACKENDS


def _fail(exc):
    click.echo(f"error: {exc}", err=True)
    sys.exit(2 if isinstance(exc, ConfigError) else 1)


@click.group()
@click.version_option(package_name="sparsempm")
def main():
    """Material point method solver with dense and sparse grid backends."""


@main.command("run")
@click.argument("config", type=click.Path())
@click.option("--backend", type=click.Choice(BACKENDS), default=None,
              help="Override the grid backend from the config.")
@click.option("--threads", type=int, default=None,
              help="Override the worker thread count.")
@click.option("--deterministic/--no-deterministic", "deterministic",
              default=None, help="Force bit-reproducible serial scatter.")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Directory for frame and metrics CSV output.")
@click.option("--max-steps", type=int, default=None,
              help="Stop after this many steps.")
def cmd_run(config, backend, threads, deterministic, out_dir, max_steps):
    """Run one scenario and print its timing summary."""
    try:
        scenario = load_config(config)
        metrics = run(scenario, backend=backend, threads=threads,
                      deterministic=deterministic, out_dir=out_dir,
                      max_steps=max_steps)
    except SparseMpmError as exc:
        _fail(exc)
    click.echo(f"scenario:        {metrics.scenario}")
    click.echo(f"backend:         {metrics.backend} "
               f"(threads={metrics.n_threads}, "
               f"deterministic={metrics.deterministic})")
    click.echo(f"particles:       {metrics.n_particles}")
    click.echo(f"steps:           {metrics.n_steps} "
               f"(simulated {metrics.sim_time:.6g} s)")
    click.echo(f"compute total:   {metrics.compute_total:.6g} s")
    for phase, total in metrics.phase_totals.items():
        click.echo(f"  {phase + ':':14s} {total:.6g} s")
    click.echo(f"n_dense:         {metrics.n_dense}")
    click.echo(f"max n_active:    {max(metrics.n_active_series)}")
    click.echo(f"sparsity ratio:  {metrics.r_active:.6g}")
    click.echo(f"peak nodal mem:  {metrics.peak_nodal_bytes} bytes")
    if out_dir is not None:
        click.echo(f"output:          {out_dir}")


@main.command("compare")
@click.argument("config", type=click.Path())
@click.option("--sparse-backend", type=click.Choice(["scan", "hash"]),
              default="scan", help="Sparse backend to benchmark.")
@click.option("--threads", type=int, default=None,
              help="Worker thread count for both runs.")
@click.option("--max-steps", type=int, default=None,
              help="Stop both runs after this many steps.")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write the comparison table to this CSV file.")
def cmd_compare(config, sparse_backend, threads, max_steps, out_path):
    """Benchmark dense versus sparse on the same scenario."""
    try:
        scenario = load_config(config)
        dense = run(scenario, backend="dense", threads=threads,
                    max_steps=max_steps)
        sparse = run(scenario, backend=sparse_backend, threads=threads,
                     max_steps=max_steps)
        report = compare(dense, sparse)
        if out_path is not None:
            write_comparison(out_path, report)
    except SparseMpmError as exc:
        _fail(exc)
    except ValueError as exc:
        _fail(exc)
    click.echo(f"scenario:          {report.scenario}")
    click.echo(f"steps:             {dense.n_steps}")
    click.echo(f"dense compute:     {dense.compute_total:.6g} s")
    click.echo(f"{sparse_backend} compute:      {sparse.compute_total:.6g} s")
    click.echo(f"speedup:           {report.speedup:.4g}x")
    click.echo(f"memory reduction:  {report.memory_reduction:.4g}x")
    click.echo(f"sparsity ratio:    {report.r_active:.4g}")
    click.echo("per-phase seconds (dense / sparse / ratio):")
    for phase, (d, s, ratio) in report.phase_table().items():
        click.echo(f"  {phase + ':':14s} {d:.6g} / {s:.6g} / {ratio:.4g}")
    if out_path is not None:
        click.echo(f"report:            {out_path}")


@main.command("validate-config")
@click.argument("config", type=click.Path())
def cmd_validate(config):
    """Validate a scenario file and echo it fully resolved."""
    try:
        scenario = load_config(config)
    except SparseMpmError as exc:
        _fail(exc)
    click.echo(yaml.safe_dump(scenario.to_dict(), sort_keys=True), nl=False)


@main.group("oracle")
def oracle():
    """Closed-form reference solutions."""


@oracle.command("sliding-box")
@click.option("--theta-deg", type=float, required=True,
              help="Incline angle in degrees.")
@click.option("--mu", type=float, required=True,
              help="Coulomb friction coefficient.")
@click.option("--g", type=float, default=9.81, show_default=True,
              help="Gravity magnitude in m/s^2.")
@click.option("--t", type=float, default=1.0, show_default=True,
              help="Elapsed time in seconds.")
def cmd_sliding_box(theta_deg, mu, g, t):
    """Print the analytic downslope displacement of a rigid slider."""
    try:
        disp = sliding_box_oracle(theta_deg, mu, g=g, t=t)
    except ValueError as exc:
        _fail(ConfigError(str(exc)))
    click.echo(repr(disp))


if __name__ == "__main__":
    main()
