"""Probabilistic ensemble dynamics model trained by Gaussian negative log-likelihood.

Each of the B members is a feedforward network mapping a normalized
(state, action) pair to the mean and log-variance of the normalized state
delta. Forward and backward passes are written out in numpy and vectorized
over the ensemble axis, so every parameter tensor has shape (B, ...).
"""

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .confspace import Configuration
from .errors import (
    CorruptCheckpoint,
    DimensionMismatch,
    EmptyDataset,
    NonFiniteInput,
    NonFiniteLoss,
    ValidationError,
    VersionMismatch,
)
from .trainable import pack_arrays, unpack_arrays
from .utils import get_logger

logger = get_logger(__name__)

ENSEMBLE_SIZE = 5
HIDDEN = (64, 64)
BATCH_SIZE = 32
MIN_LOGVAR = -10.0
MAX_LOGVAR = 1.0
MIN_STD = 1e-8
MODEL_FORMAT = 1
LOG_2PI = math.log(2.0 * math.pi)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

def gaussian_nll(mean, log_var, target) -> float:
    """Diagonal Gaussian NLL summed over dimensions, averaged over the batch."""
    mean = np.asarray(mean, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if not (mean.shape == log_var.shape == target.shape):
        raise DimensionMismatch(f"Shapes differ: mean {mean.shape}, log_var {log_var.shape}, target {target.shape}")
    per_dim = 0.5 * LOG_2PI + 0.5 * log_var + 0.5 * (target - mean) ** 2 * np.exp(-log_var)
    if per_dim.ndim <= 1:
        return float(per_dim.sum())
    return float(per_dim.sum(axis=-1).mean())

def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)

def _swish(z: np.ndarray) -> np.ndarray:
    return z * expit(z)

def _swish_grad(z: np.ndarray) -> np.ndarray:
    s = expit(z)
    return s + z * s * (1.0 - s)

def soft_clamp_logvar(raw: np.ndarray) -> np.ndarray:
    """Smoothly squash raw log-variances into [MIN_LOGVAR, MAX_LOGVAR]."""
    upper = MAX_LOGVAR - _softplus(MAX_LOGVAR - raw)
    return MIN_LOGVAR + _softplus(upper - MIN_LOGVAR)

@dataclass
class ModelTrainHp:
    learning_rate: float = 1e-3
    weight_decay: float = 4e-4
    training_epochs: int = 5

    @classmethod
    def from_configuration(cls, config: Configuration) -> "ModelTrainHp":
        return cls(
            learning_rate=float(config["learning_rate"]),
            weight_decay=float(config["weight_decay"]),
            training_epochs=config.as_int("training_epochs"),
        )

@dataclass
class TrainingReport:
    epoch_nll: List[float] = field(default_factory=list)

    @property
    def final_nll(self) -> Optional[float]:
        return self.epoch_nll[-1] if self.epoch_nll else None

class TransitionDataset:
    """Append-only store of (state, action, next_state, reward) records."""

    def __init__(self, state_dim: int, action_dim: int):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.states = np.zeros((0, state_dim))
        self.actions = np.zeros((0, action_dim))
        self.next_states = np.zeros((0, state_dim))
        self.rewards = np.zeros(0)
        self.trials = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def n_trials(self) -> int:
        return len(np.unique(self.trials))

    def append(self, states, actions, next_states, rewards, trial: int):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        next_states = np.atleast_2d(np.asarray(next_states, dtype=np.float64))
        rewards = np.atleast_1d(np.asarray(rewards, dtype=np.float64))
        n = len(rewards)
        if states.shape != (n, self.state_dim) or next_states.shape != (n, self.state_dim):
            raise DimensionMismatch(f"Expected {n} states of dimension {self.state_dim}")
        if actions.shape != (n, self.action_dim):
            raise DimensionMismatch(f"Expected {n} actions of dimension {self.action_dim}")
        self.states = np.concatenate([self.states, states])
        self.actions = np.concatenate([self.actions, actions])
        self.next_states = np.concatenate([self.next_states, next_states])
        self.rewards = np.concatenate([self.rewards, rewards])
        self.trials = np.concatenate([self.trials, np.full(n, trial, dtype=np.int64)])

    def inputs(self) -> np.ndarray:
        return np.concatenate([self.states, self.actions], axis=1)

    def targets(self) -> np.ndarray:
        return self.next_states - self.states

    def subset(self, mask: np.ndarray) -> "TransitionDataset":
        out = TransitionDataset(self.state_dim, self.action_dim)
        out.states = self.states[mask]
        out.actions = self.actions[mask]
        out.next_states = self.next_states[mask]
        out.rewards = self.rewards[mask]
        out.trials = self.trials[mask]
        return out

    def last_trials(self, n_trials: int) -> "TransitionDataset":
        """Records of the most recent n_trials trials (all when fewer exist)."""
        if len(self) == 0:
            return self.subset(np.zeros(0, dtype=bool))
        distinct = np.unique(self.trials)
        keep = distinct[-n_trials:]
        return self.subset(np.isin(self.trials, keep))

    def to_bytes(self) -> bytes:
        return pack_arrays([
            np.array([self.state_dim, self.action_dim], dtype=np.int64),
            self.states, self.actions, self.next_states, self.rewards, self.trials,
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "TransitionDataset":
        arrays = unpack_arrays(data)
        if len(arrays) != 6:
            raise CorruptCheckpoint("Transition dataset needs six arrays")
        dims, states, actions, next_states, rewards, trials = arrays
        out = cls(int(dims[0]), int(dims[1]))
        out.states = states.reshape(-1, out.state_dim)
        out.actions = actions.reshape(-1, out.action_dim)
        out.next_states = next_states.reshape(-1, out.state_dim)
        out.rewards = rewards
        out.trials = trials
        return out

def bootstrap_indices(n_samples: int, ensemble_size: int, rng: np.random.Generator) -> np.ndarray:
    """One resample with replacement of size n_samples per ensemble member."""
    return rng.integers(0, n_samples, size=(ensemble_size, n_samples))

class GaussianEnsemble:
    """Ensemble of MLPs whose outputs parameterize diagonal Gaussians over state deltas."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        ensemble_size: int = ENSEMBLE_SIZE,
        hidden: Sequence[int] = HIDDEN,
        seed: int = 0,
    ):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.ensemble_size = ensemble_size
        self.hidden = tuple(int(h) for h in hidden)
        self.in_dim = state_dim + action_dim
        self.out_dim = state_dim
        self.sizes = (self.in_dim,) + self.hidden + (2 * self.out_dim,)
        self.n_layers = len(self.sizes) - 1

        rng = np.random.default_rng(seed)
        self.params: Dict[str, np.ndarray] = {}
        for layer, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            std = 1.0 / (2.0 * math.sqrt(fan_in))
            weights = np.clip(rng.normal(0.0, std, size=(ensemble_size, fan_in, fan_out)), -2 * std, 2 * std)
            self.params[f"W{layer}"] = weights
            self.params[f"b{layer}"] = np.zeros((ensemble_size, fan_out))
        self.adam_m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.adam_v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.adam_t = 0

        self.input_mean = np.zeros(self.in_dim)
        self.input_std = np.ones(self.in_dim)
        self.target_mean = np.zeros(self.out_dim)
        self.target_std = np.ones(self.out_dim)

    # -- normalization --------------------------------------------------

    @staticmethod
    def _safe_std(values: np.ndarray) -> np.ndarray:
        std = values.std(axis=0)
        # near-constant dimensions keep unit scale so later data cannot explode
        return np.where(std < MIN_STD, 1.0, std)

    def fit_normalizer(self, inputs: np.ndarray, targets: np.ndarray):
        self.input_mean = inputs.mean(axis=0)
        self.input_std = self._safe_std(inputs)
        self.target_mean = targets.mean(axis=0)
        self.target_std = self._safe_std(targets)

    def normalize_inputs(self, inputs: np.ndarray) -> np.ndarray:
        return (inputs - self.input_mean) / self.input_std

    # -- forward / backward ---------------------------------------------

    def _forward(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, tuple]:
        """x: (B, N, in) normalized. Returns normalized mean, log-variance, cache."""
        activations = [x]
        preacts = []
        h = x
        for layer in range(self.n_layers):
            z = h @ self.params[f"W{layer}"] + self.params[f"b{layer}"][:, None, :]
            if layer < self.n_layers - 1:
                preacts.append(z)
                h = _swish(z)
                activations.append(h)
            else:
                h = z
        mean = h[..., :self.out_dim]
        raw = h[..., self.out_dim:]
        upper = MAX_LOGVAR - _softplus(MAX_LOGVAR - raw)
        log_var = MIN_LOGVAR + _softplus(upper - MIN_LOGVAR)
        return mean, log_var, (activations, preacts, raw, upper)

    def loss_and_grads(self, inputs: np.ndarray, targets: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        """Per-member batch NLL in normalized units and its exact gradients.

        inputs/targets are already normalized, shaped (N, d) (shared by all
        members) or (B, N, d). The returned gradients are those of the sum of
        the per-member losses.
        """
        x = np.asarray(inputs, dtype=np.float64)
        t = np.asarray(targets, dtype=np.float64)
        if x.ndim == 2:
            x = np.broadcast_to(x, (self.ensemble_size,) + x.shape)
        if t.ndim == 2:
            t = np.broadcast_to(t, (self.ensemble_size,) + t.shape)
        if x.shape[-1] != self.in_dim or t.shape[-1] != self.out_dim or x.shape[:2] != t.shape[:2]:
            raise DimensionMismatch(f"Inputs {x.shape} / targets {t.shape} do not fit the ensemble")
        n = x.shape[1]

        mean, log_var, (activations, preacts, raw, upper) = self._forward(x)
        inv_var = np.exp(-log_var)
        diff = mean - t
        per_member = (0.5 * LOG_2PI + 0.5 * log_var + 0.5 * diff ** 2 * inv_var).sum(axis=-1).mean(axis=-1)

        d_mean = diff * inv_var / n
        d_log_var = 0.5 * (1.0 - diff ** 2 * inv_var) / n
        d_upper = d_log_var * expit(upper - MIN_LOGVAR)
        d_raw = d_upper * expit(MAX_LOGVAR - raw)
        d_out = np.concatenate([d_mean, d_raw], axis=-1)

        grads: Dict[str, np.ndarray] = {}
        for layer in range(self.n_layers - 1, -1, -1):
            h_in = activations[layer]
            grads[f"W{layer}"] = np.swapaxes(h_in, 1, 2) @ d_out
            grads[f"b{layer}"] = d_out.sum(axis=1)
            if layer > 0:
                d_h = d_out @ np.swapaxes(self.params[f"W{layer}"], 1, 2)
                d_out = d_h * _swish_grad(preacts[layer - 1])
        return per_member, grads

    def total_loss(self, inputs: np.ndarray, targets: np.ndarray) -> float:
        """Sum of per-member NLLs (the quantity loss_and_grads differentiates)."""
        per_member, _ = self.loss_and_grads(inputs, targets)
        return float(per_member.sum())

    # -- training ---------------------------------------------------------

    def _adam_step(self, grads: Dict[str, np.ndarray], learning_rate: float, weight_decay: float):
        self.adam_t += 1
        bias1 = 1.0 - ADAM_BETA1 ** self.adam_t
        bias2 = 1.0 - ADAM_BETA2 ** self.adam_t
        for name, grad in grads.items():
            m = self.adam_m[name]
            v = self.adam_v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * grad
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * grad ** 2
            param = self.params[name]
            param -= learning_rate * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
            if name.startswith("W"):
                # decoupled weight decay on weights only
                param -= learning_rate * weight_decay * param

    def train(self, data: TransitionDataset, hp: ModelTrainHp, seed) -> TrainingReport:
        """Train every member on its own bootstrap of data for hp.training_epochs epochs."""
        report = TrainingReport()
        if hp.training_epochs <= 0:
            return report
        if len(data) == 0:
            raise EmptyDataset("Cannot train on an empty dataset")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

        inputs = data.inputs()
        targets = data.targets()
        self.fit_normalizer(inputs, targets)
        x = self.normalize_inputs(inputs)
        t = (targets - self.target_mean) / self.target_std

        n = len(data)
        resample = bootstrap_indices(n, self.ensemble_size, rng)
        for epoch in range(hp.training_epochs):
            order = rng.permuted(resample, axis=1)
            batch_losses = []
            for start in range(0, n, BATCH_SIZE):
                batch = order[:, start:start + BATCH_SIZE]
                per_member, grads = self.loss_and_grads(x[batch], t[batch])
                loss = float(per_member.mean())
                if not math.isfinite(loss):
                    raise NonFiniteLoss(f"Model loss diverged in epoch {epoch}")
                self._adam_step(grads, hp.learning_rate, hp.weight_decay)
                batch_losses.append(loss)
            report.epoch_nll.append(float(np.mean(batch_losses)))
            logger.debug(f"Epoch {epoch + 1}/{hp.training_epochs}: NLL {report.epoch_nll[-1]:.4f}")
        return report

    # -- prediction -------------------------------------------------------

    def _check_inputs(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if states.shape[-1] != self.state_dim or actions.shape[-1] != self.action_dim:
            raise DimensionMismatch(f"Expected state dim {self.state_dim} and action dim {self.action_dim}")
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))):
            raise NonFiniteInput("Model queried with non-finite state or action")
        return np.concatenate([states, actions], axis=-1)

    def _predict_member(self, inputs: np.ndarray, member: int) -> Tuple[np.ndarray, np.ndarray]:
        """Denormalized (mean delta, variance) of one member for raw inputs (N, in)."""
        h = self.normalize_inputs(inputs)
        for layer in range(self.n_layers):
            h = h @ self.params[f"W{layer}"][member] + self.params[f"b{layer}"][member]
            if layer < self.n_layers - 1:
                h = _swish(h)
        mean = h[:, :self.out_dim] * self.target_std + self.target_mean
        log_var = soft_clamp_logvar(h[:, self.out_dim:])
        return mean, np.exp(log_var) * self.target_std ** 2

    def predict(self, state, action, member_index: int) -> Tuple[np.ndarray, np.ndarray]:
        """Mean state delta and its variance from one ensemble member."""
        if not 0 <= member_index < self.ensemble_size:
            raise IndexError(f"Member {member_index} outside ensemble of {self.ensemble_size}")
        single = np.ndim(state) == 1
        mean, var = self._predict_member(self._check_inputs(state, action), member_index)
        return (mean[0], var[0]) if single else (mean, var)

    def predict_batch(self, states, actions) -> Tuple[np.ndarray, np.ndarray]:
        """(B, N, D) mean deltas and variances from every member."""
        inputs = self._check_inputs(states, actions)
        outs = [self._predict_member(inputs, m) for m in range(self.ensemble_size)]
        return np.stack([o[0] for o in outs]), np.stack([o[1] for o in outs])

    def ensemble_mean(self, states, actions) -> np.ndarray:
        """Point estimate of the next state averaged over members."""
        means, _ = self.predict_batch(states, actions)
        return np.atleast_2d(states) + means.mean(axis=0)

    def sample_next(self, states: np.ndarray, actions: np.ndarray, members: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Sample next states, row i propagated through ensemble member members[i]."""
        inputs = np.concatenate([states, actions], axis=-1)
        next_states = np.empty_like(states)
        for member in range(self.ensemble_size):
            rows = members == member
            if not np.any(rows):
                continue
            mean, var = self._predict_member(inputs[rows], member)
            noise = rng.standard_normal(mean.shape)
            next_states[rows] = states[rows] + mean + np.sqrt(var) * noise
        return next_states

    # -- serialization ----------------------------------------------------

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([self.params[name].ravel() for name in self.params])

    def to_bytes(self) -> bytes:
        header = json.dumps({
            "format": MODEL_FORMAT,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "ensemble_size": self.ensemble_size,
            "hidden": list(self.hidden),
        }, separators=(",", ":")).encode("utf-8")
        names = list(self.params)
        arrays = [np.frombuffer(header, dtype=np.uint8)]
        arrays += [self.params[k] for k in names]
        arrays += [self.adam_m[k] for k in names]
        arrays += [self.adam_v[k] for k in names]
        arrays += [np.array([self.adam_t], dtype=np.int64)]
        arrays += [self.input_mean, self.input_std, self.target_mean, self.target_std]
        return pack_arrays(arrays)

    def load_bytes(self, data: bytes):
        arrays = unpack_arrays(data)
        if not arrays:
            raise CorruptCheckpoint("Empty model state")
        try:
            header = json.loads(arrays[0].tobytes().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CorruptCheckpoint(f"Unreadable model header: {e}") from e
        if header.get("format") != MODEL_FORMAT:
            raise VersionMismatch(f"Model format {header.get('format')}, expected {MODEL_FORMAT}")
        shape = (header.get("state_dim"), header.get("action_dim"), header.get("ensemble_size"), tuple(header.get("hidden", ())))
        if shape != (self.state_dim, self.action_dim, self.ensemble_size, self.hidden):
            raise ValidationError(f"Model state built for {shape}, not this ensemble")
        names = list(self.params)
        k = len(names)
        if len(arrays) != 1 + 3 * k + 1 + 4:
            raise CorruptCheckpoint("Model state has the wrong number of arrays")
        body = arrays[1:]
        expected = [self.params[name].shape for name in names] * 3 + [(1,)]
        expected += [(self.in_dim,), (self.in_dim,), (self.out_dim,), (self.out_dim,)]
        for i, (array, want) in enumerate(zip(body, expected)):
            if array.shape != want:
                raise ValidationError(f"Model array {i} has shape {array.shape}, expected {want}")
        for i, name in enumerate(names):
            self.params[name] = body[i].copy()
            self.adam_m[name] = body[k + i].copy()
            self.adam_v[name] = body[2 * k + i].copy()
        self.adam_t = int(body[3 * k][0])
        self.input_mean, self.input_std, self.target_mean, self.target_std = (a.copy() for a in body[3 * k + 1:])

    @classmethod
    def from_bytes(cls, data: bytes, state_dim: int, action_dim: int, ensemble_size: int = ENSEMBLE_SIZE, hidden: Sequence[int] = HIDDEN) -> "GaussianEnsemble":
        model = cls(state_dim, action_dim, ensemble_size=ensemble_size, hidden=hidden)
        model.load_bytes(data)
        return model
