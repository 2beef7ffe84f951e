"""
Experiment Service - Run Harness and Result Sinks
Drives run_gps for a configured experiment and writes the run directory:
resolved config, per-iteration error CSV, rollout traces, checkpoints,
failure context and the SQLite run record.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from datetime import datetime
from typing import Optional

import numpy as np

from config import ExperimentConfig, create_app, db, parse_config_text, resolved_config_text
from models import ExperimentRun, IterationRecord
from services.checkpoint_service import load_policy, load_run_state, save_dynamics, save_policy, save_run_state
from services.errors import GpsError, GpsRunError
from services.gps_service import evaluate_policy, lam_for_iteration, layout_for, run_gps, stop_rule_met
from services.pouring_service import write_trace

logger = logging.getLogger(__name__)

EXIT_CONVERGED = 0
EXIT_ERROR = 1
EXIT_ITERATION_LIMIT = 2

ERRORS_FILE = 'errors.csv'
FAILURE_FILE = 'failure.json'
RESOLVED_CONFIG_FILE = 'config.resolved.ini'
DB_FILE = 'runs.db'
CHECKPOINT_DIR = 'checkpoints'
TRACE_DIR = 'traces'
RUN_STATE_FILE = 'run_state.npz'
POLICY_FILE = 'policy.npz'


def errors_header(num_trajectories: int) -> list:
    return ['iteration', *[f'traj_{i}' for i in range(num_trajectories)], 'mean', 'stddev']


def write_errors_csv(path, reports, num_trajectories: int) -> None:
    """One row per outer iteration; floats written with repr so reruns compare byte for byte."""
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(errors_header(num_trajectories))
        for r in reports:
            writer.writerow([r.iteration, *[repr(e) for e in r.errors], repr(r.mean), repr(r.std)])


def read_errors_csv(path) -> list:
    with open(path, newline='') as fh:
        return list(csv.DictReader(fh))


class RunRecorder:
    """SQLite sink: one ExperimentRun plus an IterationRecord per report."""

    def __init__(self, cfg: ExperimentConfig, config_text: str):
        self.app = create_app(os.path.join(cfg.out_dir, DB_FILE))
        with self.app.app_context():
            run = ExperimentRun(name=cfg.name, seed=cfg.gps.seed, out_dir=os.path.abspath(cfg.out_dir),
                                config_text=config_text)
            db.session.add(run)
            db.session.commit()
            self.run_id = run.id

    def record(self, report) -> None:
        with self.app.app_context():
            db.session.add(IterationRecord(
                run_id=self.run_id, iteration=report.iteration, errors_json=json.dumps(list(report.errors)),
                mean_error=report.mean, std_error=report.std, max_abs_error=report.max_abs,
                policy_mse=report.policy_mse if np.isfinite(report.policy_mse) else None,
                lam=report.lam, converged=report.converged,
            ))
            db.session.commit()

    def finish(self, status: str, exit_code: int, error: Optional[str] = None) -> None:
        with self.app.app_context():
            run = db.session.get(ExperimentRun, self.run_id)
            run.status = status
            run.exit_code = exit_code
            run.error = error
            run.finished_at = datetime.utcnow()
            db.session.commit()


def _checkpoint_path(cfg: ExperimentConfig, name: str) -> str:
    return os.path.join(cfg.out_dir, CHECKPOINT_DIR, name)


def _write_failure(cfg: ExperimentConfig, exc: Exception) -> str:
    path = os.path.join(cfg.out_dir, FAILURE_FILE)
    payload = {
        'error': str(exc),
        'type': type(exc).__name__,
        'context': getattr(exc, 'context', {}),
        'time': datetime.utcnow().isoformat(),
    }
    with open(path, 'w') as fh:
        json.dump(payload, fh, indent=2, default=str)
    return path


def run_experiment(cfg: ExperimentConfig, dry_run: bool = False, state=None, record: bool = True) -> dict:
    """Run (or continue, given ``state``) one experiment.

    Returns a result dict; ``exit_code`` is 0 on convergence, 2 when the
    iteration limit stops the run and 1 on error.
    """
    config_text = resolved_config_text(cfg)
    if dry_run:
        return {'success': True, 'exit_code': EXIT_CONVERGED, 'dry_run': True, 'config_text': config_text,
                'error': None}

    g = cfg.gps
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, RESOLVED_CONFIG_FILE), 'w') as fh:
        fh.write(config_text)
    errors_path = os.path.join(out, ERRORS_FILE)
    recorder = RunRecorder(cfg, config_text) if record else None
    latest = {'state': state}

    def on_rollout(iteration, traj_index, rollout):
        if cfg.write_traces:
            path = os.path.join(out, TRACE_DIR, f'iter_{iteration:03d}_traj_{traj_index:02d}.csv')
            os.makedirs(os.path.dirname(path), exist_ok=True)
            write_trace(path, rollout.trace)

    def on_iteration(report, gps_state):
        latest['state'] = gps_state
        write_errors_csv(errors_path, gps_state.reports, g.N)
        if recorder is not None:
            recorder.record(report)
        every = cfg.checkpoint_every
        if every and (report.iteration % every == 0 or report.converged):
            save_run_state(_checkpoint_path(cfg, RUN_STATE_FILE), gps_state, config_text, report.lam)
            save_policy(_checkpoint_path(cfg, f'policy_iter_{report.iteration:03d}.npz'), gps_state.policy)
            for i, model in enumerate(gps_state.models):
                save_dynamics(_checkpoint_path(cfg, f'dynamics_iter_{report.iteration:03d}_traj_{i:02d}.npz'),
                              model)

    logger.info('Starting experiment %s (seed %d, N=%d, T=%d, n=%d) in %s', cfg.name, g.seed, g.N, g.T, g.n, out)
    try:
        reports = run_gps(g, state=state, on_iteration=on_iteration, on_rollout=on_rollout)
    except GpsError as exc:
        failure = _write_failure(cfg, exc)
        logger.error('Experiment %s failed: %s (context in %s)', cfg.name, exc, failure)
        if recorder is not None:
            recorder.finish('failed', EXIT_ERROR, str(exc))
        return {'success': False, 'exit_code': EXIT_ERROR, 'error': str(exc),
                'context': exc.context if isinstance(exc, GpsRunError) else {}}

    if reports:
        write_errors_csv(errors_path, reports, g.N)
    final = latest['state']
    if final is not None and final.policy is not None:
        save_policy(os.path.join(out, POLICY_FILE), final.policy)

    converged = bool(reports) and reports[-1].converged
    status, exit_code = ('converged', EXIT_CONVERGED) if converged else ('iteration_limit', EXIT_ITERATION_LIMIT)
    if recorder is not None:
        recorder.finish(status, exit_code)
    logger.info('Experiment %s finished: %s after %d iterations', cfg.name, status, len(reports))
    return {
        'success': True,
        'exit_code': exit_code,
        'status': status,
        'iterations': len(reports),
        'reports': reports,
        'errors_csv': errors_path,
        'error': None,
    }


def resume_experiment(checkpoint_path: str, overrides: Optional[dict] = None, record: bool = True) -> dict:
    """Continue a run from its run-state checkpoint with the config stored inside it."""
    try:
        state, config_text, lam = load_run_state(checkpoint_path)
        cfg = parse_config_text(config_text, overrides)
    except GpsError as exc:
        logger.error('Cannot resume from %s: %s', checkpoint_path, exc)
        return {'success': False, 'exit_code': EXIT_ERROR, 'error': str(exc)}
    expected = lam_for_iteration(cfg.gps, state.iteration - 1) if state.iteration else None
    if expected is not None and expected != lam:
        logger.warning('Checkpoint lam %g differs from the schedule (%g); the schedule wins', lam, expected)
    logger.info('Resuming %s at iteration %d', cfg.name, state.iteration)
    return run_experiment(cfg, state=state, record=record)


def evaluate_checkpoint(policy_path: str, cfg: ExperimentConfig) -> dict:
    """Roll a saved policy out from every initial fill and report the pour errors."""
    try:
        policy = load_policy(policy_path)
        expected = layout_for(cfg.gps).policy_dim
        if policy.input_dim != expected:
            raise GpsError(f'policy expects {policy.input_dim} inputs but history n={cfg.gps.n} gives {expected}')
        errors = evaluate_policy(cfg.gps, policy)
    except GpsError as exc:
        logger.error('Evaluation of %s failed: %s', policy_path, exc)
        return {'success': False, 'exit_code': EXIT_ERROR, 'error': str(exc)}
    arr = np.asarray(errors)
    max_abs = float(np.max(np.abs(arr)))
    within = stop_rule_met(max_abs, cfg.gps.convergence_threshold)
    return {
        'success': True,
        'exit_code': EXIT_CONVERGED if within else EXIT_ITERATION_LIMIT,
        'errors': errors,
        'mean': float(arr.mean()),
        'stddev': float(arr.std()),
        'max_abs': max_abs,
        'error': None,
    }
