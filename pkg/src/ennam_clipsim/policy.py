"""
Tabular softmax policies.

A :class:`PolicyTable` holds one row of logits per state. Probabilities are the
row-wise softmax computed with max subtraction, entropies are in nats, and
``p log p`` is taken as 0 below :data:`TINY_PROB`.

Tables are immutable; every update builds a new table, so a table can be
shared freely between threads.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import (
    DegenerateSnapshotError,
    InvalidParameterError,
    SpecMismatchError,
    StateIndexError,
)

TINY_PROB = 1e-300

# Largest relative error of an estimated probability in noisy_snapshot.
SNAPSHOT_NOISE_CAP = 1.0


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max subtraction."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def _plogp(probs: np.ndarray, log_probs: np.ndarray) -> np.ndarray:
    return np.where(probs < TINY_PROB, 0.0, probs * log_probs)


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """Per-state logits over a finite action alphabet."""

    logits: np.ndarray

    def __post_init__(self) -> None:
        logits = _readonly(self.logits)
        if logits.ndim != 2 or logits.shape[0] < 1 or logits.shape[1] < 1:
            raise SpecMismatchError(f"Logits must be a non-empty matrix, got shape {logits.shape}")
        object.__setattr__(self, "logits", logits)

    @property
    def state_count(self) -> int:
        return int(self.logits.shape[0])

    @property
    def action_count(self) -> int:
        return int(self.logits.shape[1])

    @classmethod
    def uniform(cls, state_count: int, action_count: int) -> "PolicyTable":
        return cls(np.zeros((state_count, action_count)))

    @classmethod
    def random(
        cls,
        state_count: int,
        action_count: int,
        rng: np.random.Generator,
        scale: float = 1.0,
    ) -> "PolicyTable":
        """Logits drawn i.i.d. from N(0, scale^2)."""
        return cls(scale * rng.standard_normal((state_count, action_count)))

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "PolicyTable":
        probs = np.asarray(probs, dtype=np.float64)
        if np.any(probs <= 0.0):
            raise InvalidParameterError("Probabilities must be strictly positive")
        return cls(np.log(probs / probs.sum(axis=-1, keepdims=True)))

    def probs(self, temperature: float = 1.0) -> np.ndarray:
        """Probabilities for every state, optionally at a sampling temperature."""
        return softmax(self.scaled_logits(temperature))

    def log_probs(self, temperature: float = 1.0) -> np.ndarray:
        return log_softmax(self.scaled_logits(temperature))

    def scaled_logits(self, temperature: float) -> np.ndarray:
        if temperature <= 0.0:
            raise InvalidParameterError(f"Temperature must be positive, got {temperature}")
        return self.logits if temperature == 1.0 else self.logits / temperature

    def with_logits(self, logits: np.ndarray) -> "PolicyTable":
        if np.shape(logits) != self.logits.shape:
            raise SpecMismatchError(
                f"Logit shape {np.shape(logits)} does not match {self.logits.shape}"
            )
        return PolicyTable(logits)

    def snapshot(self) -> "PolicySnapshot":
        return PolicySnapshot(self.probs())

    def check_state(self, state: int) -> None:
        if not 0 <= state < self.state_count:
            raise StateIndexError(f"State {state} out of range [0, {self.state_count})")

    def check_action(self, action: int) -> None:
        if not 0 <= action < self.action_count:
            raise StateIndexError(f"Action {action} out of range [0, {self.action_count})")


@dataclass(frozen=True, eq=False)
class PolicySnapshot:
    """Frozen probabilities of the policy that generated a batch (the old policy)."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "probs", _readonly(self.probs))

    @property
    def state_count(self) -> int:
        return int(self.probs.shape[0])

    @property
    def action_count(self) -> int:
        return int(self.probs.shape[1])

    def log_probs(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probs)

    def as_policy(self) -> PolicyTable:
        """The snapshot as a policy table, to sample or measure visitation under it."""
        return PolicyTable(self.log_probs())


def noisy_snapshot(
    policy: PolicyTable, samples: int, rng: np.random.Generator
) -> PolicySnapshot:
    """
    The policy as seen through an estimate from ``samples`` draws per state.

    Each log-probability is shifted by ``s z - s**2 / 2`` with ``z`` standard
    normal and ``s = sqrt((1 - p) / (samples * p))``, the relative standard error
    of an empirical frequency, capped at :data:`SNAPSHOT_NOISE_CAP`. The shift has
    unit mean in probability space: rare actions are usually underestimated and
    now and then overestimated by a wide margin. Rows are renormalized.
    """
    if samples < 1:
        raise InvalidParameterError(f"samples must be at least 1, got {samples}")
    probs = policy.probs()
    with np.errstate(divide="ignore"):
        scale = np.sqrt((1.0 - probs) / (samples * probs))
    scale = np.minimum(scale, SNAPSHOT_NOISE_CAP)
    noise = scale * rng.standard_normal(probs.shape) - 0.5 * scale**2
    return PolicySnapshot(softmax(policy.log_probs() + noise))


def softmax_probs(policy: PolicyTable, state: int) -> np.ndarray:
    policy.check_state(state)
    return softmax(policy.logits[state])


def state_entropy(policy: PolicyTable, state: int) -> float:
    policy.check_state(state)
    row = policy.logits[state]
    return float(-_plogp(softmax(row), log_softmax(row)).sum())


def entropies(policy: PolicyTable) -> np.ndarray:
    """Entropy of every state row."""
    return -_plogp(policy.probs(), policy.log_probs()).sum(axis=1)


def entropy_gradients(policy: PolicyTable) -> np.ndarray:
    """dH(s)/dtheta(s, a) for every state, as a matrix."""
    probs, log_probs = policy.probs(), policy.log_probs()
    expected = _plogp(probs, log_probs).sum(axis=1, keepdims=True)
    return -probs * (log_probs - expected)


def state_entropy_gradient(policy: PolicyTable, state: int) -> np.ndarray:
    policy.check_state(state)
    row = policy.logits[state]
    probs, log_probs = softmax(row), log_softmax(row)
    return -probs * (log_probs - _plogp(probs, log_probs).sum())


def sample_action(
    policy: PolicyTable,
    state: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
) -> int:
    """Inverse-CDF draw of one action; consumes exactly one uniform from ``rng``."""
    policy.check_state(state)
    cdf = np.cumsum(softmax(policy.scaled_logits(temperature)[state]))
    action = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(action, policy.action_count - 1)


def ratio(policy: PolicyTable, snapshot: PolicySnapshot, state: int, action: int) -> float:
    policy.check_state(state)
    policy.check_action(action)
    old = snapshot.probs[state, action]
    if old < TINY_PROB:
        raise DegenerateSnapshotError(
            f"Snapshot probability {old:g} at (state={state}, action={action}) is too small"
        )
    return float(softmax(policy.logits[state])[action] / old)


def ratios(
    policy: PolicyTable,
    snapshot: PolicySnapshot,
    probs: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Ratio matrix pi/pi_old over all (state, action) pairs."""
    check_compatible(policy, snapshot)
    if np.any(snapshot.probs < TINY_PROB):
        raise DegenerateSnapshotError("Snapshot contains probabilities below 1e-300")
    current = policy.probs() if probs is None else probs
    return current / snapshot.probs


def check_compatible(policy: PolicyTable, snapshot: PolicySnapshot) -> None:
    if policy.logits.shape != snapshot.probs.shape:
        raise SpecMismatchError(
            f"Policy shape {policy.logits.shape} does not match snapshot {snapshot.probs.shape}"
        )
