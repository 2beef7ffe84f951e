"""
Checkpoint Service - Versioned Binary Checkpoints
Policy networks, fitted dynamics models and resumable run state stored as
numpy archives whose numeric arrays are all explicit little-endian
('<f8' / '<i8'), so a load reproduces the saved values bit for bit.
"""
from __future__ import annotations

import logging
import os
import zipfile
from dataclasses import replace

import numpy as np

from services.core_service import JointGaussian, Trajectory
from services.delay_service import HistoryLayout
from services.dynamics_service import DynamicsModel
from services.errors import CheckpointError
from services.gps_service import GpsState, IterationReport
from services.policy_service import PolicyNet

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = 'pourgps'

KIND_POLICY = 'policy'
KIND_DYNAMICS = 'dynamics'
KIND_RUN_STATE = 'run_state'


def _f8(value) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(value, dtype=np.float64), dtype='<f8')


def _i8(value) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(value, dtype=np.int64), dtype='<i8')


def _text(value: str) -> np.ndarray:
    return np.frombuffer(value.encode('utf-8'), dtype=np.uint8)


def _header(kind: str) -> dict:
    return {'magic': _text(MAGIC), 'kind': _text(kind), 'version': _i8([FORMAT_VERSION])}


def _write(path, arrays: dict) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = f'{path}.tmp'
    with open(tmp, 'wb') as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def _read(path, kind: str) -> dict:
    """Load and check the header; every failure becomes a CheckpointError."""
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except FileNotFoundError:
        raise CheckpointError(f'checkpoint not found: {path}') from None
    except (OSError, ValueError, EOFError, zipfile.BadZipFile, KeyError) as exc:
        raise CheckpointError(f'unreadable checkpoint {path}: {exc}') from None

    for name in ('magic', 'kind', 'version'):
        if name not in arrays:
            raise CheckpointError(f'checkpoint {path} has no {name} header')
    if bytes(arrays['magic']).decode('utf-8', 'replace') != MAGIC:
        raise CheckpointError(f'{path} is not a PourGPS checkpoint')
    version = int(arrays['version'][0])
    if version != FORMAT_VERSION:
        raise CheckpointError(f'checkpoint version {version} is not supported (expected {FORMAT_VERSION})')
    found = bytes(arrays['kind']).decode('utf-8', 'replace')
    if found != kind:
        raise CheckpointError(f'checkpoint {path} holds a {found}, expected a {kind}')
    return arrays


def _require(arrays: dict, *names: str) -> None:
    missing = [n for n in names if n not in arrays]
    if missing:
        raise CheckpointError(f'checkpoint is missing {", ".join(missing)}')


def _policy_arrays(net: PolicyNet, prefix: str = '') -> dict:
    return {
        f'{prefix}W_hidden': _f8(net.W_hidden), f'{prefix}b_hidden': _f8(net.b_hidden),
        f'{prefix}W_out': _f8(net.W_out), f'{prefix}b_out': _f8(net.b_out),
        f'{prefix}input_mean': _f8(net.input_mean), f'{prefix}input_scale': _f8(net.input_scale),
        f'{prefix}standardized': _i8([int(net.standardized)]),
    }


def _policy_from(arrays: dict, prefix: str = '') -> PolicyNet:
    names = ('W_hidden', 'b_hidden', 'W_out', 'b_out', 'input_mean', 'input_scale', 'standardized')
    _require(arrays, *(prefix + n for n in names))
    try:
        return PolicyNet(arrays[f'{prefix}W_hidden'], arrays[f'{prefix}b_hidden'], arrays[f'{prefix}W_out'],
                         arrays[f'{prefix}b_out'], arrays[f'{prefix}input_mean'], arrays[f'{prefix}input_scale'],
                         standardized=bool(arrays[f'{prefix}standardized'][0]))
    except ValueError as exc:
        raise CheckpointError(f'corrupt policy weights: {exc}') from None


def save_policy(path, net: PolicyNet) -> None:
    _write(path, {**_header(KIND_POLICY), **_policy_arrays(net)})
    logger.debug('Saved policy checkpoint %s', path)


def load_policy(path) -> PolicyNet:
    return _policy_from(_read(path, KIND_POLICY))


def save_dynamics(path, model: DynamicsModel) -> None:
    """Per-timestep joint means/covariances plus the history layout."""
    layout = model.layout
    arrays = {
        **_header(KIND_DYNAMICS),
        'layout': _i8([layout.n, layout.state_dim, layout.control_dim]),
        'M': _i8([model.M]),
        'means': _f8([g.mean for g in model.per_timestep]),
        'covs': _f8([g.cov for g in model.per_timestep]),
    }
    _write(path, arrays)
    logger.debug('Saved dynamics checkpoint %s (T=%d)', path, model.horizon)


def load_dynamics(path) -> DynamicsModel:
    arrays = _read(path, KIND_DYNAMICS)
    _require(arrays, 'layout', 'M', 'means', 'covs')
    n, d, du = (int(v) for v in arrays['layout'])
    try:
        layout = HistoryLayout(n=n, state_dim=d, control_dim=du)
        block_dims = (layout.aug_dim, layout.control_dim, layout.state_dim)
        gaussians = tuple(JointGaussian(mean, cov, block_dims) for mean, cov in zip(arrays['means'], arrays['covs']))
        return DynamicsModel(per_timestep=gaussians, layout=layout, M=int(arrays['M'][0]))
    except ValueError as exc:
        raise CheckpointError(f'corrupt dynamics checkpoint: {exc}') from None


def save_run_state(path, state, config_text: str, lam: float) -> None:
    """Everything resume needs: datasets, policy, iteration, lam, mu per trajectory, reports."""
    datasets = state.datasets
    arrays = {
        **_header(KIND_RUN_STATE),
        'iteration': _i8([state.iteration]),
        'lam': _f8([lam]),
        'mus': _f8(state.mus),
        'dataset_sizes': _i8([len(ds) for ds in datasets]),
        'config': _text(config_text),
        'report_errors': _f8([r.errors for r in state.reports]) if state.reports else _f8(np.zeros((0, len(datasets)))),
        'report_mse': _f8([r.policy_mse for r in state.reports]),
        'report_lam': _f8([r.lam for r in state.reports]),
        'report_converged': _i8([r.converged for r in state.reports]),
        'has_policy': _i8([state.policy is not None]),
    }
    for i, ds in enumerate(datasets):
        arrays[f'states_{i}'] = _f8([traj.states for traj in ds])
        arrays[f'controls_{i}'] = _f8([traj.controls for traj in ds])
    if state.policy is not None:
        arrays.update(_policy_arrays(state.policy, prefix='policy_'))
    _write(path, arrays)
    logger.debug('Saved run state %s at iteration %d', path, state.iteration)


def load_run_state(path):
    """Returns (GpsState, config_text, lam)."""
    arrays = _read(path, KIND_RUN_STATE)
    _require(arrays, 'iteration', 'lam', 'mus', 'dataset_sizes', 'config', 'report_errors', 'report_mse',
             'report_lam', 'report_converged', 'has_policy')
    sizes = [int(s) for s in arrays['dataset_sizes']]
    datasets = []
    for i, size in enumerate(sizes):
        _require(arrays, f'states_{i}', f'controls_{i}')
        states, controls = arrays[f'states_{i}'], arrays[f'controls_{i}']
        if len(states) != size or len(controls) != size:
            raise CheckpointError(f'trajectory {i} dataset is truncated')
        datasets.append([Trajectory(s, c) for s, c in zip(states, controls)])
    policy = _policy_from(arrays, prefix='policy_') if int(arrays['has_policy'][0]) else None

    reports = []
    columns = zip(arrays['report_errors'], arrays['report_mse'], arrays['report_lam'], arrays['report_converged'])
    for k, (errors, mse, lam, converged) in enumerate(columns):
        report = IterationReport.from_errors(k + 1, errors, float('inf'), float(lam), float(mse))
        reports.append(replace(report, converged=bool(converged)))
    state = GpsState(iteration=int(arrays['iteration'][0]), datasets=datasets, policy=policy,
                     mus=[float(m) for m in arrays['mus']], reports=reports)
    return state, bytes(arrays['config']).decode('utf-8'), float(arrays['lam'][0])
