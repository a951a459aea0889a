"""
Clipped surrogate objective, clip events and the idealized updates.

The surrogate over a batch of trajectories sharing an old policy is

    J = mean_i (1/T) sum_t min(r_t A_i, clip(r_t, 1 - eps_low, 1 + eps_high) A_i)

and is maximized. A token contributes gradient only while its ratio is on
the unclipped side for the sign of its advantage; ratios exactly on a
threshold count as unclipped.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .env import RolloutBatch, VisitationMeasure
from .exceptions import DegenerateSnapshotError, EmptyBatchError, InvalidParameterError
from .policy import (
    TINY_PROB,
    PolicySnapshot,
    PolicyTable,
    check_compatible,
    ratios,
)
from .rewards import AdvantageModel, RolloutGroup

logger = logging.getLogger(__name__)

CLIP_LOW_OFF = 1.0
CLIP_HIGH_OFF = math.inf


@dataclass(frozen=True)
class ClipConfig:
    """
    Clip range ``[1 - eps_low, 1 + eps_high]``.

    ``eps_low = CLIP_LOW_OFF`` puts the lower threshold at 0, which no ratio
    can fall below; ``eps_high = CLIP_HIGH_OFF`` removes the upper threshold.
    """

    eps_low: float = 0.2
    eps_high: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 < self.eps_low <= 1.0:
            raise InvalidParameterError(f"eps_low must lie in (0, 1], got {self.eps_low}")
        if not self.eps_high > 0.0:
            raise InvalidParameterError(f"eps_high must be positive, got {self.eps_high}")

    @property
    def low(self) -> float:
        return 1.0 - self.eps_low

    @property
    def high(self) -> float:
        return 1.0 + self.eps_high

    @property
    def low_off(self) -> bool:
        return self.eps_low >= CLIP_LOW_OFF

    @property
    def high_off(self) -> bool:
        return math.isinf(self.eps_high)


@dataclass(frozen=True, eq=False)
class AdvantageBatch:
    """Trajectories with one advantage each, all generated by the same old policy."""

    batch: RolloutBatch
    advantages: np.ndarray

    def __post_init__(self) -> None:
        if len(self.batch) == 0:
            raise EmptyBatchError("The batch contains no trajectories")
        if len(self.advantages) != len(self.batch):
            raise InvalidParameterError("One advantage per trajectory is required")

    def __len__(self) -> int:
        return len(self.batch)

    @classmethod
    def from_groups(cls, groups: Sequence[RolloutGroup]) -> "AdvantageBatch":
        if not groups:
            raise EmptyBatchError("No rollout groups given")
        return cls(
            RolloutBatch.concat([g.batch for g in groups]),
            np.concatenate([g.advantages for g in groups]),
        )

    def select(self, indices: np.ndarray) -> "AdvantageBatch":
        return AdvantageBatch(self.batch.select(indices), self.advantages[indices])


Batch = Union[AdvantageBatch, Sequence[RolloutGroup]]


def as_advantage_batch(groups: Batch) -> AdvantageBatch:
    if isinstance(groups, AdvantageBatch):
        return groups
    return AdvantageBatch.from_groups(groups)


def _token_ratios(
    policy: PolicyTable, snapshot: PolicySnapshot, data: AdvantageBatch
) -> Tuple[np.ndarray, np.ndarray]:
    """Current probabilities and per-token ratios, shape (N, T)."""
    check_compatible(policy, snapshot)
    states, tokens = data.batch.states, data.batch.tokens
    old = snapshot.probs[states, tokens]
    if np.any(old < TINY_PROB):
        raise DegenerateSnapshotError("A sampled token has snapshot probability below 1e-300")
    probs = policy.probs()
    return probs, probs[states, tokens] / old


def _active(r: np.ndarray, advantages: np.ndarray, clip: ClipConfig) -> np.ndarray:
    return ((advantages > 0) & (r <= clip.high)) | ((advantages < 0) & (r >= clip.low))


def _accumulate(
    probs: np.ndarray, data: AdvantageBatch, coeff: np.ndarray
) -> np.ndarray:
    """
    Chain per-token d/d(log pi) coefficients through the softmax Jacobian.

    d log pi(a|s) / d theta(s, b) = 1[a = b] - pi(b|s).
    """
    states = data.batch.states.ravel()
    grad = np.zeros_like(probs)
    np.add.at(grad, (states, data.batch.tokens.ravel()), coeff.ravel())
    grad -= np.bincount(states, weights=coeff.ravel(), minlength=probs.shape[0])[:, None] * probs
    return grad


def surrogate_value(
    policy: PolicyTable, snapshot: PolicySnapshot, groups: Batch, clip: ClipConfig
) -> float:
    data = as_advantage_batch(groups)
    _, r = _token_ratios(policy, snapshot, data)
    adv = data.advantages[:, None]
    clipped = np.clip(r, clip.low, clip.high)
    return float(np.minimum(r * adv, clipped * adv).sum() / r.size)


def surrogate_gradient(
    policy: PolicyTable, snapshot: PolicySnapshot, groups: Batch, clip: ClipConfig
) -> np.ndarray:
    """Exact gradient of :func:`surrogate_value` with respect to all logits."""
    data = as_advantage_batch(groups)
    probs, r = _token_ratios(policy, snapshot, data)
    adv = data.advantages[:, None]
    coeff = adv * r * _active(r, adv, clip) / r.size
    return _accumulate(probs, data, coeff)


def _piecewise_terms(
    r: np.ndarray, adv: np.ndarray, clip: ClipConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """Indicator expansion of the clipped term and its derivative in r."""
    positive = adv >= 0
    upper_clipped = r > clip.high
    lower_clipped = r < clip.low
    value = np.where(
        positive,
        adv * np.where(upper_clipped, clip.high, r),
        adv * np.where(lower_clipped, clip.low, r),
    )
    slope = adv * np.where(positive, ~upper_clipped, ~lower_clipped)
    return value, slope


def piecewise_surrogate_value(
    policy: PolicyTable, snapshot: PolicySnapshot, groups: Batch, clip: ClipConfig
) -> float:
    data = as_advantage_batch(groups)
    _, r = _token_ratios(policy, snapshot, data)
    value, _ = _piecewise_terms(r, data.advantages[:, None], clip)
    return float(value.sum() / r.size)


def piecewise_surrogate_gradient(
    policy: PolicyTable, snapshot: PolicySnapshot, groups: Batch, clip: ClipConfig
) -> np.ndarray:
    data = as_advantage_batch(groups)
    probs, r = _token_ratios(policy, snapshot, data)
    _, slope = _piecewise_terms(r, data.advantages[:, None], clip)
    # d r / d log pi = r
    return _accumulate(probs, data, slope * r / r.size)


def reinforce_gradient(
    policy: PolicyTable, groups: Batch, per_token_mean: bool = True
) -> np.ndarray:
    """
    REINFORCE estimate sum_t grad log pi(y_t | s_t) A, averaged over trajectories.

    With ``per_token_mean`` the token sum is divided by the horizon, matching
    the normalization of the surrogate so both agree at ratio 1.
    """
    data = as_advantage_batch(groups)
    horizon = data.batch.horizon
    scale = len(data) * (horizon if per_token_mean else 1)
    coeff = np.broadcast_to(data.advantages[:, None], data.batch.states.shape) / scale
    return _accumulate(policy.probs(), data, coeff)


@dataclass(frozen=True)
class ClipEventReport:
    """Clip events at one state, with masses under the current and the old policy."""

    state: int
    low: Tuple[int, ...]
    high: Tuple[int, ...]
    p: float
    q: float
    p_old: float
    q_old: float
    h: Tuple[float, ...]


@dataclass(frozen=True, eq=False)
class ClipEventTable:
    """Clip events for every state; ``h`` is ``1_X - 1_Y`` as a matrix."""

    low: np.ndarray
    high: np.ndarray
    p: np.ndarray
    q: np.ndarray
    p_old: np.ndarray
    q_old: np.ndarray

    @property
    def h(self) -> np.ndarray:
        return self.low.astype(np.float64) - self.high.astype(np.float64)

    @property
    def has_events(self) -> bool:
        return bool(self.low.any() or self.high.any())

    def report(self, state: int) -> ClipEventReport:
        return ClipEventReport(
            state=state,
            low=tuple(int(a) for a in np.flatnonzero(self.low[state])),
            high=tuple(int(a) for a in np.flatnonzero(self.high[state])),
            p=float(self.p[state]),
            q=float(self.q[state]),
            p_old=float(self.p_old[state]),
            q_old=float(self.q_old[state]),
            h=tuple(float(x) for x in self.h[state]),
        )


def clip_event_table(
    policy: PolicyTable, snapshot: PolicySnapshot, clip: ClipConfig
) -> ClipEventTable:
    probs = policy.probs()
    r = ratios(policy, snapshot, probs)
    low = r < clip.low
    high = r > clip.high
    return ClipEventTable(
        low=low,
        high=high,
        p=(probs * low).sum(axis=1),
        q=(probs * high).sum(axis=1),
        p_old=(snapshot.probs * low).sum(axis=1),
        q_old=(snapshot.probs * high).sum(axis=1),
    )


def detect_clip_events(
    policy: PolicyTable, snapshot: PolicySnapshot, state: int, clip: ClipConfig
) -> ClipEventReport:
    policy.check_state(state)
    return clip_event_table(policy, snapshot, clip).report(state)


def _step_size(
    model: AdvantageModel, eta: float, visitation: VisitationMeasure, policy: PolicyTable
) -> np.ndarray:
    if eta < 0.0:
        raise InvalidParameterError(f"eta must be nonnegative, got {eta}")
    if visitation.mass.shape != (policy.state_count,):
        raise InvalidParameterError(
            f"Visitation covers {visitation.mass.shape[0]} states, policy has {policy.state_count}"
        )
    return model.mu * model.nu * eta * visitation.mass


def pg_step(
    policy: PolicyTable,
    snapshot: PolicySnapshot,
    model: AdvantageModel,
    clip: ClipConfig,
    eta: float,
    visitation: VisitationMeasure,
    events: Optional[ClipEventTable] = None,
) -> PolicyTable:
    """Expected full-batch policy-gradient step on the clipped surrogate."""
    events = clip_event_table(policy, snapshot, clip) if events is None else events
    step = _step_size(model, eta, visitation, policy)
    probs, h = policy.probs(), events.h
    centered = h - (probs * h).sum(axis=1, keepdims=True)
    return policy.with_logits(policy.logits + step[:, None] * probs * centered)


def npg_step(
    policy: PolicyTable,
    snapshot: PolicySnapshot,
    model: AdvantageModel,
    clip: ClipConfig,
    eta: float,
    visitation: VisitationMeasure,
    events: Optional[ClipEventTable] = None,
) -> PolicyTable:
    """Expected natural-gradient step: pi * exp(delta h) / Z, stored as log pi."""
    events = clip_event_table(policy, snapshot, clip) if events is None else events
    delta = _step_size(model, eta, visitation, policy)
    normalizer = (
        np.exp(delta) * events.p + np.exp(-delta) * events.q + (1.0 - events.p - events.q)
    )
    logits = policy.log_probs() + delta[:, None] * events.h - np.log(normalizer)[:, None]
    return policy.with_logits(logits)
