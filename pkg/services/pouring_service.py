"""
Pouring Service - Simulated Precision-Pouring Environment
A cup rotated about the wrist pours into a bowl on a delayed, filtered scale.
Water in flight and the scale pipeline make the observed state lag the true
pour by roughly 0.75-1.0 s at 2 Hz.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from services.core_service import ControlVec, StateVec
from services.errors import InfeasiblePourError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PouringParams:
    dt: float = 0.5
    outflow_gain: float = 60.0       # grams per (rad * s) above the critical angle
    cup_capacity: float = 500.0      # grams at which the critical angle reaches zero
    critical_margin: float = 0.05    # fraction of pi/2 added to the critical angle
    fall_delay: int = 1              # steps from cup lip to bowl
    scale_delay: int = 1             # steps of transport delay in the scale
    filter_tau: float = 0.5          # seconds, first-order scale filter
    resolution: float = 0.1          # grams
    velocity_limit: float = 1.0      # rad/s
    obs_noise: float = 0.0           # grams, stddev on the scale reading

    def __post_init__(self):
        if self.dt <= 0 or self.outflow_gain < 0 or self.cup_capacity <= 0:
            raise ValueError('dt and cup_capacity must be positive and outflow_gain non-negative')
        if self.fall_delay < 0 or self.scale_delay < 0:
            raise ValueError('delays must be non-negative step counts')
        if self.filter_tau < 0 or self.resolution < 0 or self.velocity_limit <= 0 or self.obs_noise < 0:
            raise ValueError('invalid pouring simulator parameters')

    @property
    def filter_alpha(self) -> float:
        if self.filter_tau == 0:
            return 1.0
        return 1.0 - math.exp(-self.dt / self.filter_tau)


def critical_angle(v_cup: float, params: PouringParams) -> float:
    """Angle beyond which water leaves the cup; fuller cups pour earlier."""
    return (math.pi / 2) * (1.0 - v_cup / params.cup_capacity + params.critical_margin)


class PouringSim:
    """One pouring episode; exclusively owned by a single rollout."""

    def __init__(self, params: Optional[PouringParams] = None):
        self.params = params or PouringParams()
        self.theta = 0.0
        self.v_cup = 0.0
        self.bowl = 0.0
        self.transit: deque = deque()
        self.initial_fill = 0.0
        self.target = 0.0
        self.steps = 0
        self.scale_reading = 0.0
        self._bowl_history: deque = deque()
        self._filtered = 0.0
        self._prev_remaining = 0.0
        self._d_remaining = 0.0
        self._rng = np.random.default_rng(0)
        self._is_reset = False

    def reset(self, initial_fill: float, target: float, seed: int = 0) -> StateVec:
        if not 0 < target < initial_fill:
            raise InfeasiblePourError()
        self.theta = 0.0
        self.v_cup = float(initial_fill)
        self.bowl = 0.0
        self.transit = deque()
        self.initial_fill = float(initial_fill)
        self.target = float(target)
        self.steps = 0
        self._bowl_history = deque([0.0] * (self.params.scale_delay + 1), maxlen=self.params.scale_delay + 1)
        self._filtered = 0.0
        self.scale_reading = 0.0
        self._rng = np.random.default_rng(seed)
        self._prev_remaining = self.target
        self._d_remaining = 0.0
        self._is_reset = True
        return self.observe()

    def _require_reset(self):
        if not self._is_reset:
            raise RuntimeError('simulator must be reset before use')

    @property
    def in_transit(self) -> float:
        return float(sum(g for g, _ in self.transit))

    @property
    def poured(self) -> float:
        """Grams that have left the cup (landed or still falling)."""
        return self.initial_fill - self.v_cup

    def step(self, u) -> None:
        self._require_reset()
        p = self.params
        if isinstance(u, ControlVec):
            u = u.wrist_velocity
        u = float(np.clip(np.ravel(u)[0], -p.velocity_limit, p.velocity_limit))
        self.theta = min(max(self.theta + u * p.dt, 0.0), math.pi)

        excess = max(0.0, self.theta - critical_angle(self.v_cup, p))
        outflow = min(self.v_cup, p.outflow_gain * excess * p.dt)
        self.steps += 1
        if outflow > 0.0:
            self.v_cup -= outflow
            # lands fall_delay steps after the step it left the cup
            self.transit.append((outflow, self.steps + p.fall_delay))

        while self.transit and self.transit[0][1] <= self.steps:
            grams, _ = self.transit.popleft()
            self.bowl += grams

        self._bowl_history.append(self.bowl)
        delayed = self._bowl_history[0]
        self._filtered += p.filter_alpha * (delayed - self._filtered)
        reading = self._filtered
        if p.obs_noise > 0:
            reading += p.obs_noise * float(self._rng.standard_normal())
        if p.resolution > 0:
            reading = round(reading / p.resolution) * p.resolution
        self.scale_reading = reading

        remaining = self.target - self.scale_reading
        self._d_remaining = remaining - self._prev_remaining
        self._prev_remaining = remaining

    def observe(self) -> StateVec:
        self._require_reset()
        return StateVec(
            angle=self.theta,
            remaining=self.target - self.scale_reading,
            d_remaining=self._d_remaining,
            in_cup=self.initial_fill - self.scale_reading,
        )

    def mass_balance_error(self) -> float:
        return abs(self.v_cup + self.in_transit + self.bowl - self.initial_fill)

    def trace_row(self, t: int, u: float) -> dict:
        obs = self.observe()
        return {
            't': t, 'u': u, 'theta': self.theta, 'v_cup': self.v_cup, 'bowl': self.bowl,
            'scale_reading': self.scale_reading, 'obs_angle': obs.angle, 'obs_remaining': obs.remaining,
            'obs_d_remaining': obs.d_remaining, 'obs_in_cup': obs.in_cup,
        }


TRACE_COLUMNS = ('t', 'u', 'theta', 'v_cup', 'bowl', 'scale_reading',
                 'obs_angle', 'obs_remaining', 'obs_d_remaining', 'obs_in_cup')


def write_trace(path, rows) -> None:
    """Per-step rollout trace as CSV."""
    with open(path, 'w', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
