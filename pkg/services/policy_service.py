"""
Policy Service - Element-Wise Product Network
Forward pass, analytic input Jacobian, regression training and the
gains-based synthesis of extra training pairs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from services.errors import PolicyTrainingDivergedError

logger = logging.getLogger(__name__)

MAX_LR_RETRIES = 3


def _frozen(array) -> np.ndarray:
    out = np.array(array, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PolicyNet:
    """input -> ReLU hidden (one unit per input) -> element-wise product with input -> linear.

    Inputs are standardized with (input_mean, input_scale) before the first layer.
    """
    W_hidden: np.ndarray
    b_hidden: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray
    input_mean: np.ndarray
    input_scale: np.ndarray
    standardized: bool = False

    def __post_init__(self):
        for name in ('W_hidden', 'b_hidden', 'W_out', 'b_out', 'input_mean', 'input_scale'):
            value = _frozen(getattr(self, name))
            if not np.all(np.isfinite(value)):
                raise ValueError(f'PolicyNet.{name} contains non-finite values')
            object.__setattr__(self, name, value)
        D = self.W_hidden.shape[0]
        if self.W_hidden.shape != (D, D):
            raise ValueError(f'hidden layer must have one unit per input, got {self.W_hidden.shape}')
        if self.b_hidden.shape != (D,) or self.input_mean.shape != (D,) or self.input_scale.shape != (D,):
            raise ValueError('hidden bias and standardization vectors must match the input dimension')
        if self.W_out.ndim != 2 or self.W_out.shape[1] != D or self.b_out.shape != (self.W_out.shape[0],):
            raise ValueError(f'output layer shape {self.W_out.shape} does not match input dimension {D}')
        if np.any(self.input_scale <= 0):
            raise ValueError('input_scale must be positive')

    @property
    def input_dim(self) -> int:
        return self.W_hidden.shape[0]

    @property
    def output_dim(self) -> int:
        return self.W_out.shape[0]

    @classmethod
    def zeros(cls, input_dim: int, output_dim: int = 1) -> 'PolicyNet':
        return cls(np.zeros((input_dim, input_dim)), np.zeros(input_dim), np.zeros((output_dim, input_dim)),
                   np.zeros(output_dim), np.zeros(input_dim), np.ones(input_dim))

    @classmethod
    def initialize(cls, input_dim: int, output_dim: int = 1, seed: int = 0, inputs=None) -> 'PolicyNet':
        """Weights uniform in +-1/sqrt(input_dim), zero biases.

        With ``inputs`` the per-dimension mean/scale are taken from them and
        stay fixed for the life of the net; otherwise the transform is identity.
        """
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(input_dim)
        mean, scale = np.zeros(input_dim), np.ones(input_dim)
        if inputs is not None:
            mean, scale = input_statistics(inputs)
        return cls(rng.uniform(-bound, bound, (input_dim, input_dim)), np.zeros(input_dim),
                   rng.uniform(-bound, bound, (output_dim, input_dim)), np.zeros(output_dim),
                   mean, scale, standardized=inputs is not None)

    def params(self) -> tuple:
        return self.W_hidden, self.b_hidden, self.W_out, self.b_out

    def with_params(self, W_hidden, b_hidden, W_out, b_out) -> 'PolicyNet':
        return replace(self, W_hidden=W_hidden, b_hidden=b_hidden, W_out=W_out, b_out=b_out)


@dataclass(frozen=True)
class RegressionSet:
    inputs: np.ndarray
    targets: np.ndarray
    traj_index: np.ndarray
    timestep: np.ndarray
    sampled: np.ndarray

    def __post_init__(self):
        inputs = _frozen(np.atleast_2d(self.inputs))
        targets = _frozen(np.asarray(self.targets, dtype=np.float64).reshape(inputs.shape[0], -1))
        object.__setattr__(self, 'inputs', inputs)
        object.__setattr__(self, 'targets', targets)
        for name in ('traj_index', 'timestep'):
            value = np.array(getattr(self, name), dtype=np.int64)
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        sampled = np.array(self.sampled, dtype=bool)
        sampled.setflags(write=False)
        object.__setattr__(self, 'sampled', sampled)
        n = inputs.shape[0]
        if not (targets.shape[0] == self.traj_index.shape[0] == self.timestep.shape[0] == self.sampled.shape[0] == n):
            raise ValueError('regression set columns have different lengths')

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @classmethod
    def concatenate(cls, sets: Sequence['RegressionSet']) -> 'RegressionSet':
        return cls(np.vstack([s.inputs for s in sets]), np.vstack([s.targets for s in sets]),
                   np.concatenate([s.traj_index for s in sets]), np.concatenate([s.timestep for s in sets]),
                   np.concatenate([s.sampled for s in sets]))


@dataclass(frozen=True)
class PolicyFit:
    net: PolicyNet
    mse: float
    learning_rate: float
    epochs: int
    losses: tuple = field(default=(), repr=False)


def _standardize(net: PolicyNet, X: np.ndarray) -> np.ndarray:
    return (X - net.input_mean) / net.input_scale


def _forward_std(params, S: np.ndarray):
    W, b, Wo, bo = params
    A = S @ W.T + b
    H = np.maximum(A, 0.0)
    P = H * S
    return A, H, P, P @ Wo.T + bo


def policy_forward(net: PolicyNet, x_aug) -> np.ndarray:
    """Control for one input vector (or a batch of rows); unclamped."""
    x = np.asarray(x_aug, dtype=np.float64)
    if x.shape[-1] != net.input_dim:
        raise ValueError(f'policy input has dimension {x.shape[-1]}, expected {net.input_dim}')
    _, _, _, U = _forward_std(net.params(), _standardize(net, np.atleast_2d(x)))
    return U[0] if x.ndim == 1 else U


def policy_jacobian(net: PolicyNet, x_aug) -> np.ndarray:
    """du/dx (output_dim x input_dim); inactive side at ReLU kinks."""
    x = np.asarray(x_aug, dtype=np.float64).ravel()
    if x.shape != (net.input_dim,):
        raise ValueError(f'policy input has dimension {x.shape[0]}, expected {net.input_dim}')
    s = _standardize(net, x)
    a = net.W_hidden @ s + net.b_hidden
    active = (a > 0).astype(np.float64)
    h = a * active
    # d(h_i s_i)/ds_j = active_i W_ij s_i + h_i delta_ij
    dp_ds = (active * s)[:, None] * net.W_hidden + np.diag(h)
    return (net.W_out @ dp_ds) / net.input_scale


def mse_and_gradients(params, S: np.ndarray, Y: np.ndarray):
    """Mean over rows of ||pi(s) - y||^2 and its parameter gradients."""
    W, b, Wo, bo = params
    A, H, P, U = _forward_std(params, S)
    E = U - Y
    B = S.shape[0]
    loss = float(np.sum(E ** 2) / B)
    dU = 2.0 * E / B
    dWo = dU.T @ P
    dbo = dU.sum(axis=0)
    dH = (dU @ Wo) * S
    dA = dH * (A > 0)
    dW = dA.T @ S
    db = dA.sum(axis=0)
    return loss, (dW, db, dWo, dbo)


def input_statistics(inputs) -> tuple:
    """Per-dimension mean and std of the rows; constant columns get scale 1."""
    X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    scale = X.std(axis=0)
    return X.mean(axis=0), np.where(scale > 1e-8, scale, 1.0)


def _train(net: PolicyNet, S: np.ndarray, Y: np.ndarray, epochs: int, lr: float, batch_size: int,
           momentum: float, rng: np.random.Generator):
    params = [p.copy() for p in net.params()]
    velocity = [np.zeros_like(p) for p in params]
    N = S.shape[0]
    losses = []
    for _ in range(epochs):
        order = rng.permutation(N)
        for start in range(0, N, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = mse_and_gradients(params, S[idx], Y[idx])
            if not np.isfinite(loss):
                return None, losses
            for p, v, g in zip(params, velocity, grads):
                v *= momentum
                v -= lr * g
                p += v
        epoch_loss, _ = mse_and_gradients(params, S, Y)
        if not np.isfinite(epoch_loss) or not all(np.all(np.isfinite(p)) for p in params):
            return None, losses
        losses.append(epoch_loss)
    return params, losses


def fit_policy(net: PolicyNet, data: RegressionSet, epochs: int = 200, learning_rate: float = 1e-3,
               seed: int = 0, batch_size: int = 32, momentum: float = 0.9) -> PolicyFit:
    """Mini-batch momentum SGD on the mean squared error; returns a new net.

    Only the weights move; the input transform of ``net`` is kept as is.
    """
    if len(data) == 0:
        raise ValueError('fit_policy needs a non-empty regression set')
    if data.inputs.shape[1] != net.input_dim or data.targets.shape[1] != net.output_dim:
        raise ValueError('regression set dimensions do not match the policy')
    S = _standardize(net, data.inputs)
    Y = data.targets

    lr = learning_rate
    for attempt in range(MAX_LR_RETRIES + 1):
        params, losses = _train(net, S, Y, epochs, lr, batch_size, momentum, np.random.default_rng(seed))
        if params is not None:
            mse, _ = mse_and_gradients(params, S, Y)
            return PolicyFit(net.with_params(*params), mse, lr, epochs, tuple(losses))
        if attempt < MAX_LR_RETRIES:
            logger.warning('Policy training diverged at lr=%g; retrying with lr=%g', lr, lr / 2)
            lr /= 2
    raise PolicyTrainingDivergedError()


def training_mse(net: PolicyNet, data: RegressionSet) -> float:
    pred = policy_forward(net, data.inputs)
    return float(np.sum((pred - data.targets) ** 2) / len(data))


def synthesize_training_pairs(result, sigma, K: int = 20, seed: int = 0, traj_index: int = 0,
                              policy_input=None, limit=None) -> RegressionSet:
    """Nominal pairs plus K gains-corrected samples around every open-loop state.

    ``policy_input`` maps stacked states z to policy inputs (identity by default);
    ``limit`` clips sampled targets to the executable control range.
    """
    if K < 0:
        raise ValueError(f'samples per timestep K must be >= 0, got {K}')
    select = policy_input or (lambda z: z)
    rng = np.random.default_rng(seed)
    z_hat = result.open_loop.states
    u_hat = result.open_loop.controls
    T, dz = u_hat.shape[0], z_hat.shape[1]
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (dz,))

    inputs, targets, steps, sampled = [], [], [], []
    for t in range(T):
        inputs.append(select(z_hat[t]))
        targets.append(u_hat[t])
        steps.append(t)
        sampled.append(False)
        if K:
            xs = z_hat[t] + sigma * rng.standard_normal((K, dz))
            us = u_hat[t] + (xs - z_hat[t]) @ result.gains[t].T
            if limit is not None:
                us = np.clip(us, -limit, limit)
            for k in range(K):
                inputs.append(select(xs[k]))
                targets.append(us[k])
                steps.append(t)
                sampled.append(True)
    return RegressionSet(np.array(inputs), np.array(targets), np.full(len(steps), traj_index), steps, sampled)
