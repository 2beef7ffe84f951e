"""
PourGPS - Guided Policy Search for Delayed Precision Pouring
Command-line entry point
"""
import sys

import click

from config import load_config
from services.errors import ConfigError
from services.experiment_service import EXIT_ERROR, evaluate_checkpoint, resume_experiment, run_experiment
from services.logging_service import configure_logging
from services.oracle_service import ORACLES, run_oracles


def _overrides(seed=None, out=None, log_level=None) -> dict:
    values = {}
    if seed is not None:
        values[('experiment', 'seed')] = str(seed)
        values[('gps', 'seed')] = str(seed)
    if out:
        values[('experiment', 'out_dir')] = out
    if log_level:
        values[('experiment', 'log_level')] = log_level
    return values


def _load(config_path, **flags):
    try:
        return load_config(config_path, _overrides(**flags))
    except ConfigError as exc:
        click.echo(f'error: {exc}', err=True)
        sys.exit(EXIT_ERROR)


@click.group()
def cli():
    """Guided policy search with delayed sensor measurements."""


@cli.command()
@click.argument('config_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--seed', type=int, default=None, help='Override the experiment seed.')
@click.option('--out', default=None, help='Output directory for this run.')
@click.option('--dry-run', is_flag=True, help='Validate and print the resolved config without running.')
@click.option('--log-level', default=None, help='DEBUG, INFO, WARNING or ERROR.')
def run(config_path, seed, out, dry_run, log_level):
    """Run an experiment from CONFIG_PATH."""
    cfg = _load(config_path, seed=seed, out=out, log_level=log_level)
    configure_logging(log_level, config=cfg)
    result = run_experiment(cfg, dry_run=dry_run)
    if dry_run:
        click.echo(result['config_text'])
    elif result['success']:
        click.echo(f"{result['status']} after {result['iterations']} iterations; errors in {result['errors_csv']}")
    else:
        click.echo(f"error: {result['error']}", err=True)
    sys.exit(result['exit_code'])


@cli.command()
@click.argument('checkpoint', type=click.Path(exists=True, dir_okay=False))
@click.option('--out', default=None, help='Write results to a different directory.')
@click.option('--log-level', default=None, help='DEBUG, INFO, WARNING or ERROR.')
def resume(checkpoint, out, log_level):
    """Continue a run from its run-state CHECKPOINT."""
    configure_logging(log_level)
    result = resume_experiment(checkpoint, _overrides(out=out, log_level=log_level))
    if result['success']:
        click.echo(f"{result['status']} after {result['iterations']} iterations; errors in {result['errors_csv']}")
    else:
        click.echo(f"error: {result['error']}", err=True)
    sys.exit(result['exit_code'])


@cli.command(name='eval')
@click.argument('policy_checkpoint', type=click.Path(exists=True, dir_okay=False))
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Experiment config describing the environment (defaults if omitted).')
@click.option('--seed', type=int, default=None, help='Override the experiment seed.')
@click.option('--log-level', default=None, help='DEBUG, INFO, WARNING or ERROR.')
def evaluate(policy_checkpoint, config_path, seed, log_level):
    """Roll out a saved policy from every initial fill and print the pour errors."""
    cfg = _load(config_path, seed=seed, log_level=log_level)
    configure_logging(log_level, config=cfg)
    result = evaluate_checkpoint(policy_checkpoint, cfg)
    if not result['success']:
        click.echo(f"error: {result['error']}", err=True)
        sys.exit(result['exit_code'])
    for i, error in enumerate(result['errors']):
        click.echo(f'traj_{i}: {error:+.2f} g')
    click.echo(f"mean {result['mean']:+.2f} g, stddev {result['stddev']:.2f} g, max |error| {result['max_abs']:.2f} g")
    sys.exit(result['exit_code'])


@cli.command()
@click.option('--seed', type=int, default=0, help='Seed for the random test problems.')
@click.option('--only', multiple=True, type=click.Choice(sorted(ORACLES)), help='Run only these oracles.')
@click.option('--log-level', default='WARNING', help='DEBUG, INFO, WARNING or ERROR.')
def oracle(seed, only, log_level):
    """Run the analytic oracles and print pass/fail."""
    configure_logging(log_level)
    results = run_oracles(seed=seed, names=list(only) or None)
    for result in results:
        click.echo(result.line())
    sys.exit(0 if all(r.passed for r in results) else EXIT_ERROR)


if __name__ == '__main__':
    cli()
