import os
import sys

import click

from . import experiments
from .config import parse_config
from .errors import ConfigError, FixedPointError
from .metadata import HEAD

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _fail(code, msg):
    print(HEAD + msg, file=sys.stderr, flush=True)
    sys.exit(code)


def _run(experiment, config, jobs, seed, out):
    try:
        cfg = parse_config(config, experiment, {"jobs": jobs, "seed": seed, "out": out})
    except ConfigError as e:
        _fail(EXIT_CONFIG, f"config error in {config}: {e}")

    try:
        experiments.run(cfg)
    except ConfigError as e:
        _fail(EXIT_CONFIG, f"config error: {e}")
    except (FixedPointError, FloatingPointError, KeyError, OSError, ValueError) as e:
        where = getattr(e, "phase", experiment)
        _fail(EXIT_RUNTIME, f"{type(e).__name__} while {where}: {e}")


def experiment_options(func):
    func = click.option(
        "--out", default=None, type=click.Path(file_okay=False),
        help="output directory (overrides output.dir and FIXEDPOINT_OUT_DIR)",
    )(func)
    func = click.option(
        "--seed", default=None, type=click.IntRange(min=0), help="master seed"
    )(func)
    func = click.option(
        "--jobs", default=None, type=click.IntRange(min=1), help="number of parallel traces"
    )(func)
    func = click.option(
        "--config", "config", required=True, type=click.Path(dir_okay=False),
        help="YAML experiment config",
    )(func)
    return func


@click.group()
def main():
    """Recursive explanations: fixed points, cycles and their properties.
    """


@main.command()
@experiment_options
def feature(config, jobs, seed, out):
    """Feature-mask recursion over dataset inputs."""
    _run("feature", config, jobs, seed, out)


@main.command()
@experiment_options
def proto(config, jobs, seed, out):
    """Prototype transition digraphs and recursions."""
    _run("proto", config, jobs, seed, out)


@main.command()
@experiment_options
def sae(config, jobs, seed, out):
    """Sparse autoencoder recursion on hidden activations."""
    _run("sae", config, jobs, seed, out)


@main.command("linear-mc")
@experiment_options
def linear_mc(config, jobs, seed, out):
    """Monte Carlo classification of random linear dynamics."""
    _run("linear_mc", config, jobs, seed, out)


@main.command()
@click.option(
    "--traces", "trace_dir", required=True, type=click.Path(file_okay=False),
    help="directory of trace JSON files",
)
@click.option(
    "--out", default=None, type=click.Path(dir_okay=False),
    help="summary CSV to write (default: summary.csv next to the trace directory)",
)
@click.option(
    "--group-by", multiple=True, default=("dataset", "explainer"),
    help="record fields to group traces by",
)
def report(trace_dir, out, group_by):
    """Re-aggregate trace files into a summary table."""
    if not os.path.isdir(trace_dir):
        _fail(EXIT_CONFIG, f"{trace_dir} is not a directory")
    if out is None:
        out = os.path.join(os.path.dirname(os.path.abspath(trace_dir)), "summary.csv")
    try:
        experiments.reaggregate(trace_dir, out, tuple(group_by))
    except (FixedPointError, OSError, ValueError) as e:
        _fail(EXIT_RUNTIME, f"{type(e).__name__} while aggregating: {e}")
