"""
PourGPS Configuration
Typed experiment configuration loaded from INI text, plus the Flask app
factory that binds the SQLite results store.
"""
import configparser
import dataclasses
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Optional

from flask import Flask
from flask_sqlalchemy import SQLAlchemy

from services.errors import ConfigError

# Extensions (initialized without app)
db = SQLAlchemy()

# Base directory
basedir = os.path.abspath(os.path.dirname(__file__))

OUTPUT_DIR_ENV = 'GPS_OUTPUT_DIR'


@dataclass
class EnvConfig:
    dt: float = 0.5
    outflow_gain: float = 60.0
    cup_capacity: float = 500.0
    critical_margin: float = 0.05
    fall_delay: int = 1
    scale_delay: int = 1
    filter_tau: float = 0.5
    resolution: float = 0.1
    velocity_limit: float = 1.0
    obs_noise: float = 0.0
    target: float = 100.0
    fill_min: float = 200.0
    fill_max: float = 400.0


@dataclass
class GmmConfig:
    prior: str = 'gmm'
    K: int = 5
    max_iters: int = 100
    tol: float = 1e-6
    floor: float = 1e-8
    pool_trajectories: bool = False


@dataclass
class TrajoptConfig:
    w_u: float = 1e-3
    w_r: float = 1e-2
    w_T: float = 10.0
    lam_init: float = 0.1
    lam_factor: float = 2.0
    lam_max: float = 10.0
    mu_init: float = 1e-6


@dataclass
class PolicyConfig:
    epochs: int = 200
    learning_rate: float = 1e-3
    batch_size: int = 32
    momentum: float = 0.9
    samples_per_step: int = 20
    sigma_fraction: float = 0.05


@dataclass
class GpsConfig:
    N: int = 10
    T: int = 50
    n: int = 4
    inner_iters: int = 10
    max_outer_iters: int = 40
    convergence_threshold: float = 10.0
    pid_p: float = 0.02
    pid_i: float = 0.001
    pid_d: float = 0.05
    pid_jitter: float = 0.1
    control_noise: float = 0.0
    workers: int = 1
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    gmm: GmmConfig = field(default_factory=GmmConfig)
    trajopt: TrajoptConfig = field(default_factory=TrajoptConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)


@dataclass
class ExperimentConfig:
    name: str = 'pouring'
    seed: int = 0
    out_dir: str = 'runs'
    checkpoint_every: int = 1
    write_traces: bool = True
    log_level: str = 'INFO'
    gps: GpsConfig = field(default_factory=GpsConfig)


SECTIONS = ('experiment', 'gps', 'env', 'gmm', 'trajopt', 'policy')


def _section_target(cfg: ExperimentConfig, section: str):
    if section == 'experiment':
        return cfg
    if section == 'gps':
        return cfg.gps
    return getattr(cfg.gps, section)


def _scalar_fields(obj) -> dict:
    """Config keys of one section (nested section dataclasses excluded)."""
    return {f.name: f for f in dataclasses.fields(obj) if f.type in (int, float, str, bool)}


def _convert(raw: str, kind, field_name: str, line: Optional[int]):
    kind = kind.__name__
    text = raw.strip()
    try:
        if kind == 'int':
            return int(text)
        if kind == 'float':
            return float(text)
        if kind == 'bool':
            lowered = text.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(text)
        return text
    except ValueError:
        raise ConfigError(f"cannot parse '{text}' as {kind}", field=field_name, line=line) from None


def _line_index(text: str) -> dict:
    """Map (section, key) to the 1-based line it appears on."""
    index = {}
    section = None
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        header = re.match(r'^\[([^\]]+)\]$', stripped)
        if header:
            section = header.group(1).strip()
            index[(section, None)] = number
            continue
        match = re.match(r'^([^=:#;\s][^=:]*?)\s*[=:]', stripped)
        if match and section is not None:
            index[(section, match.group(1).strip())] = number
    return index


def apply_values(cfg: ExperimentConfig, values: dict, lines: Optional[dict] = None) -> ExperimentConfig:
    """Apply {(section, key): raw string} onto cfg, rejecting unknown keys."""
    lines = lines or {}
    for (section, key), raw in values.items():
        line = lines.get((section, key))
        if section not in SECTIONS:
            raise ConfigError(f"unknown section '[{section}]'", field=section, line=lines.get((section, None)))
        target = _section_target(cfg, section)
        fields = _scalar_fields(target)
        if key not in fields:
            raise ConfigError('unknown key', field=f'{section}.{key}', line=line)
        setattr(target, key, _convert(raw, fields[key].type, f'{section}.{key}', line))
    return cfg


def validate_config(cfg: ExperimentConfig, lines: Optional[dict] = None) -> ExperimentConfig:
    lines = lines or {}
    g = cfg.gps

    def check(ok, section, key, message):
        if not ok:
            raise ConfigError(message, field=f'{section}.{key}', line=lines.get((section, key)))

    check(g.N >= 1, 'gps', 'N', 'must be >= 1')
    check(g.T >= 2, 'gps', 'T', 'must be >= 2')
    check(g.n >= 1, 'gps', 'n', 'must be >= 1')
    check(g.inner_iters >= 1, 'gps', 'inner_iters', 'must be >= 1')
    check(g.max_outer_iters >= 1, 'gps', 'max_outer_iters', 'must be >= 1')
    check(g.convergence_threshold >= 0, 'gps', 'convergence_threshold', 'must be >= 0')
    check(g.pid_jitter >= 0, 'gps', 'pid_jitter', 'must be >= 0')
    check(g.control_noise >= 0, 'gps', 'control_noise', 'must be >= 0')
    check(g.workers >= 1, 'gps', 'workers', 'must be >= 1')
    e = g.env
    check(e.dt > 0, 'env', 'dt', 'must be > 0')
    check(e.velocity_limit > 0, 'env', 'velocity_limit', 'must be > 0')
    check(e.fall_delay >= 0, 'env', 'fall_delay', 'must be >= 0')
    check(e.scale_delay >= 0, 'env', 'scale_delay', 'must be >= 0')
    check(0 < e.target < e.fill_min, 'env', 'target', 'must satisfy 0 < target < fill_min')
    check(e.fill_min <= e.fill_max, 'env', 'fill_max', 'must be >= fill_min')
    check(e.fill_max <= e.cup_capacity, 'env', 'fill_max', 'must not exceed cup_capacity')
    check(g.gmm.prior in ('gmm', 'global'), 'gmm', 'prior', "must be 'gmm' or 'global'")
    check(g.gmm.K >= 1, 'gmm', 'K', 'must be >= 1')
    check(g.gmm.max_iters >= 1, 'gmm', 'max_iters', 'must be >= 1')
    check(g.gmm.floor > 0, 'gmm', 'floor', 'must be > 0')
    t = g.trajopt
    check(min(t.w_u, t.w_r, t.w_T) >= 0, 'trajopt', 'w_u', 'cost weights must be >= 0')
    check(t.w_u > 0, 'trajopt', 'w_u', 'must be > 0 so the control Hessian is positive definite')
    check(t.lam_init >= 0, 'trajopt', 'lam_init', 'must be >= 0')
    check(t.lam_factor >= 1, 'trajopt', 'lam_factor', 'must be >= 1')
    check(t.lam_max >= t.lam_init, 'trajopt', 'lam_max', 'must be >= lam_init')
    check(t.mu_init >= 0, 'trajopt', 'mu_init', 'must be >= 0')
    p = g.policy
    check(p.epochs >= 1, 'policy', 'epochs', 'must be >= 1')
    check(p.learning_rate > 0, 'policy', 'learning_rate', 'must be > 0')
    check(p.batch_size >= 1, 'policy', 'batch_size', 'must be >= 1')
    check(0 <= p.momentum < 1, 'policy', 'momentum', 'must be in [0, 1)')
    check(p.samples_per_step >= 0, 'policy', 'samples_per_step', 'must be >= 0')
    check(p.sigma_fraction >= 0, 'policy', 'sigma_fraction', 'must be >= 0')
    check(cfg.checkpoint_every >= 0, 'experiment', 'checkpoint_every', 'must be >= 0')
    check(bool(cfg.out_dir), 'experiment', 'out_dir', 'must not be empty')
    return cfg


def parse_config_text(text: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, 'lineno', None)
        raise ConfigError(f'malformed config: {exc.message}', line=line) from None
    lines = _line_index(text)
    values = {(section, key): parser.get(section, key) for section in parser.sections() for key in parser[section]}
    cfg = apply_values(ExperimentConfig(), values, lines)
    if overrides:
        apply_values(cfg, overrides)
    # experiment seed drives the run unless [gps] seed is set explicitly
    if ('gps', 'seed') not in values and not (overrides and ('gps', 'seed') in overrides):
        cfg.gps.seed = cfg.seed
    env_out = os.environ.get(OUTPUT_DIR_ENV)
    if env_out and not (overrides and ('experiment', 'out_dir') in overrides):
        cfg.out_dir = env_out
    return validate_config(cfg, lines)


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Load, override and validate. ``path=None`` gives the defaults."""
    text = ''
    if path:
        try:
            with open(path, encoding='utf-8') as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f'cannot read config file: {exc.strerror}', field=str(path)) from None
    return parse_config_text(text, overrides)


def resolved_config_text(cfg: ExperimentConfig) -> str:
    """Every field with defaults expanded, in INI form; parse_config_text() round-trips it."""
    out = []
    for section in SECTIONS:
        target = _section_target(cfg, section)
        out.append(f'[{section}]')
        for name, f in _scalar_fields(target).items():
            value = getattr(target, name)
            if isinstance(value, bool):
                value = 'true' if value else 'false'
            elif isinstance(value, float):
                value = repr(value)
            out.append(f'{name} = {value}')
        out.append('')
    return '\n'.join(out)


def create_app(db_path: Optional[str] = None):
    """Application factory binding the results store to ``db_path``."""
    app = Flask(__name__)

    # leave an already-configured root logger (CLI level) alone
    if not logging.getLogger().handlers:
        from services.logging_service import configure_logging
        configure_logging()

    if db_path is None:
        db_path = os.path.join(basedir, 'data', 'pourgps.db')
    os.makedirs(os.path.dirname(os.path.abspath(db_path)), exist_ok=True)
    app.config['SQLALCHEMY_DATABASE_URI'] = f'sqlite:///{os.path.abspath(db_path)}'
    app.config['SQLALCHEMY_TRACK_MODIFICATIONS'] = False

    db.init_app(app)

    with app.app_context():
        import models  # noqa: F401  (registers tables)
        db.create_all()

    return app
