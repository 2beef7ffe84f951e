"""
PourGPS Database Models
Experiment runs and their per-iteration error reports.
"""
import json
from datetime import datetime

from config import db


class ExperimentRun(db.Model):
    """One invocation of run/resume."""
    id = db.Column(db.Integer, primary_key=True)
    name = db.Column(db.String(200), nullable=False)
    seed = db.Column(db.Integer, nullable=False)
    out_dir = db.Column(db.String(500), nullable=False)
    status = db.Column(db.String(20), default='running')  # running, converged, iteration_limit, failed
    exit_code = db.Column(db.Integer, nullable=True)
    config_text = db.Column(db.Text, nullable=True)
    error = db.Column(db.Text, nullable=True)
    started_at = db.Column(db.DateTime, default=datetime.utcnow)
    finished_at = db.Column(db.DateTime, nullable=True)

    def to_dict(self):
        return {
            'id': self.id,
            'name': self.name,
            'seed': self.seed,
            'out_dir': self.out_dir,
            'status': self.status,
            'exit_code': self.exit_code,
            'started_at': self.started_at.isoformat() if self.started_at else None,
            'finished_at': self.finished_at.isoformat() if self.finished_at else None,
            'error': self.error,
        }


class IterationRecord(db.Model):
    """Pour errors after one outer iteration."""
    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(db.Integer, db.ForeignKey('experiment_run.id'), nullable=False)
    iteration = db.Column(db.Integer, nullable=False)
    errors_json = db.Column(db.Text, nullable=False)
    mean_error = db.Column(db.Float, nullable=False)
    std_error = db.Column(db.Float, nullable=False)
    max_abs_error = db.Column(db.Float, nullable=False)
    policy_mse = db.Column(db.Float, nullable=True)
    lam = db.Column(db.Float, nullable=True)
    converged = db.Column(db.Boolean, default=False)
    created_at = db.Column(db.DateTime, default=datetime.utcnow)

    run = db.relationship('ExperimentRun', backref=db.backref('iterations', lazy=True, order_by='IterationRecord.iteration'))

    def get_errors(self):
        try:
            return json.loads(self.errors_json)
        except Exception:
            return []

    def to_dict(self):
        return {
            'iteration': self.iteration,
            'errors': self.get_errors(),
            'mean': self.mean_error,
            'stddev': self.std_error,
            'max_abs': self.max_abs_error,
            'policy_mse': self.policy_mse,
            'lam': self.lam,
            'converged': self.converged,
        }
