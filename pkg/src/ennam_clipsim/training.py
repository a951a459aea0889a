"""
Outer training iterations.

Both trainers snapshot the current policy as the old policy and then apply
several inner updates against it:

* :func:`grpo_train_epoch` samples groups of responses per prompt, centers
  rewards within each group and steps an adaptive-moment optimizer on the
  clipped surrogate over shuffled minibatches;
* :func:`idealized_train_epoch` takes the old policy from a finite-sample
  estimate of the current one and applies the expected plain policy-gradient
  (``pg``) or natural policy-gradient (``npg``) step under a random-sign
  advantage.
"""

import logging
from contextlib import contextmanager
from dataclasses import astuple, dataclass, fields
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from .env import TreeSpec, VisitationMeasure, rollout_batch, visitation_exact
from .evaluation import batch_entropy_estimate
from .exceptions import (
    DegenerateSnapshotError,
    EmptyBatchError,
    InvalidParameterError,
    NonFiniteError,
)
from .objective import (
    AdvantageBatch,
    ClipConfig,
    clip_event_table,
    npg_step,
    pg_step,
    surrogate_gradient,
    surrogate_value,
)
from .policy import PolicySnapshot, PolicyTable, noisy_snapshot, ratios
from .rewards import (
    AdvantageModel,
    RewardSource,
    RolloutGroup,
    draw_rewards,
    idealized_advantages,
)

logger = logging.getLogger(__name__)

IDEALIZED_STEPS: Dict[str, Callable[..., PolicyTable]] = {"pg": pg_step, "npg": npg_step}


@dataclass(frozen=True)
class OptimizerConfig:
    prompts_per_batch: int = 64
    group_size: int = 8
    inner_updates: int = 16
    minibatch_size: int = 256
    learning_rate: float = 5.0e-7
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1.0e-8
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        for name in ("prompts_per_batch", "inner_updates", "minibatch_size"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"optimizer.{name} must be at least 1")
        if self.group_size < 2:
            raise InvalidParameterError("optimizer.group_size must be at least 2")
        if self.learning_rate < 0.0 or self.weight_decay < 0.0 or self.epsilon <= 0.0:
            raise InvalidParameterError(
                "learning_rate and weight_decay must be nonnegative, epsilon positive"
            )
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise InvalidParameterError("beta1 and beta2 must lie in [0, 1)")


class AdamOptimizer:
    """
    Adaptive-moment gradient ascent on a logit matrix.

    Moment estimates live on the optimizer, so one instance carries its state
    across the outer iterations of a run. Weight decay is decoupled.
    """

    def __init__(self, config: OptimizerConfig) -> None:
        self.config = config
        self.m: Optional[np.ndarray] = None
        self.v: Optional[np.ndarray] = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        cfg = self.config
        if self.m is None or self.v is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = cfg.beta1 * self.m + (1.0 - cfg.beta1) * grad
        self.v = cfg.beta2 * self.v + (1.0 - cfg.beta2) * grad**2
        m_hat = self.m / (1.0 - cfg.beta1**self.t)
        v_hat = self.v / (1.0 - cfg.beta2**self.t)
        decayed = params * (1.0 - cfg.learning_rate * cfg.weight_decay)
        return decayed + cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


@dataclass(frozen=True)
class TrainStepLog:
    """Metrics of one inner update, measured at the policy before the update."""

    step: int
    entropy_est: float
    clip_frac_low: float
    clip_frac_high: float
    surrogate: float
    grad_norm: float
    reward_mean: float

    @classmethod
    def columns(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def as_row(self) -> tuple:
        return astuple(self)


@dataclass(frozen=True, eq=False)
class UpdateEvent:
    """What an ``on_update`` callback receives after every inner update."""

    step: int
    before: PolicyTable
    after: PolicyTable
    snapshot: PolicySnapshot
    log: TrainStepLog
    advantages: np.ndarray
    model: Optional[AdvantageModel] = None
    visitation: Optional[VisitationMeasure] = None


OnUpdate = Callable[[UpdateEvent], None]


def clip_fractions(
    policy: PolicyTable, snapshot: PolicySnapshot, data: AdvantageBatch, clip: ClipConfig
) -> Tuple[float, float]:
    """Fraction of sampled tokens whose ratio lies below / above the clip range."""
    r = ratios(policy, snapshot)[data.batch.states, data.batch.tokens]
    return float((r < clip.low).mean()), float((r > clip.high).mean())


def _check_finite(name: str, values: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"Non-finite {name}", step=step)


@contextmanager
def _at_step(step: int) -> Iterator[None]:
    """Report a degenerate old policy as a numerical failure at ``step``."""
    try:
        yield
    except DegenerateSnapshotError as exc:
        raise NonFiniteError(f"Degenerate old policy: {exc}", step=step) from exc


def _minibatches(n: int, size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless shuffled minibatches; the order is redrawn after every pass."""
    size = min(size, n)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - size + 1, size):
            yield order[start : start + size]


def collect_groups(
    policy: PolicyTable,
    spec: TreeSpec,
    source: RewardSource,
    prompts_per_batch: int,
    group_size: int,
    rng: np.random.Generator,
) -> List[RolloutGroup]:
    """Sample ``group_size`` responses for each of ``prompts_per_batch`` drawn prompts."""
    prompts = rng.choice(spec.prompt_count, size=prompts_per_batch, p=spec.weights)
    batch = rollout_batch(policy, spec, 0, rng, prompts=np.repeat(prompts, group_size))
    rewards = draw_rewards(source, batch, rng)
    groups = []
    for g in range(prompts_per_batch):
        idx = np.arange(g * group_size, (g + 1) * group_size)
        groups.append(RolloutGroup.from_rewards(batch.select(idx), rewards[idx]))
    return groups


def grpo_train_epoch(
    policy: PolicyTable,
    spec: TreeSpec,
    source: RewardSource,
    clip: ClipConfig,
    opt: OptimizerConfig,
    rng: np.random.Generator,
    optimizer: Optional[AdamOptimizer] = None,
    step_offset: int = 0,
    on_update: Optional[OnUpdate] = None,
) -> Tuple[PolicyTable, List[TrainStepLog]]:
    """One outer GRPO iteration: snapshot, collect groups, ``inner_updates`` Adam steps."""
    spec.check_policy(policy)
    optimizer = AdamOptimizer(opt) if optimizer is None else optimizer
    snapshot = policy.snapshot()
    groups = collect_groups(policy, spec, source, opt.prompts_per_batch, opt.group_size, rng)
    data = AdvantageBatch.from_groups(groups)
    reward_mean = float(np.mean(np.concatenate([g.rewards for g in groups])))
    batches = _minibatches(len(data), opt.minibatch_size, rng)

    logs: List[TrainStepLog] = []
    for j in range(opt.inner_updates):
        step = step_offset + j
        minibatch = data.select(next(batches))
        with _at_step(step):
            grad = surrogate_gradient(policy, snapshot, minibatch, clip)
            _check_finite("gradient", grad, step)
            low, high = clip_fractions(policy, snapshot, minibatch, clip)
            log = TrainStepLog(
                step=step,
                entropy_est=batch_entropy_estimate(policy, minibatch.batch),
                clip_frac_low=low,
                clip_frac_high=high,
                surrogate=surrogate_value(policy, snapshot, minibatch, clip),
                grad_norm=float(np.linalg.norm(grad)),
                reward_mean=reward_mean,
            )
        updated = policy.with_logits(optimizer.step(policy.logits, grad))
        _check_finite("logits", updated.logits, step)
        logger.debug("grpo update %d: %s", step, log)
        if on_update is not None:
            on_update(UpdateEvent(step, policy, updated, snapshot, log, data.advantages))
        logs.append(log)
        policy = updated
    return policy, logs


def idealized_train_epoch(
    policy: PolicyTable,
    spec: TreeSpec,
    model: AdvantageModel,
    clip: ClipConfig,
    updater: str,
    eta: float,
    rollouts: int,
    inner_updates: int,
    rng: np.random.Generator,
    snapshot_samples: int = 1024,
    step_offset: int = 0,
    on_update: Optional[OnUpdate] = None,
) -> Tuple[PolicyTable, List[TrainStepLog]]:
    """
    One outer iteration of the expected idealized dynamics.

    The old policy is the current one as estimated from ``snapshot_samples``
    draws per state (:func:`~ennam_clipsim.policy.noisy_snapshot`), so ratios
    start away from 1. Every inner update is then the exact
    :func:`~ennam_clipsim.objective.pg_step` or
    :func:`~ennam_clipsim.objective.npg_step` with the old policy's visitation
    ``d / horizon``; with no clip event the policy does not move.

    ``rollouts`` trajectories sampled under the old policy, with advantages drawn
    from ``model``, only feed the sampled columns of the step logs.
    """
    advance = IDEALIZED_STEPS.get(updater)
    if advance is None:
        raise InvalidParameterError(f"Unknown idealized updater '{updater}'")
    if rollouts < 1:
        raise EmptyBatchError("rollouts_per_step must be at least 1")
    spec.check_policy(policy)
    snapshot = noisy_snapshot(policy, snapshot_samples, rng)
    behaviour = snapshot.as_policy()
    visitation = visitation_exact(behaviour, spec).per_token()
    batch = rollout_batch(behaviour, spec, rollouts, rng)
    data = AdvantageBatch(batch, idealized_advantages(model, rollouts, rng))
    reward_mean = float(data.advantages.mean())

    logs: List[TrainStepLog] = []
    for j in range(inner_updates):
        step = step_offset + j
        with _at_step(step):
            events = clip_event_table(policy, snapshot, clip)
            updated = advance(policy, snapshot, model, clip, eta, visitation, events)
            _check_finite("logits", updated.logits, step)
            grad = surrogate_gradient(policy, snapshot, data, clip)
            low, high = clip_fractions(policy, snapshot, data, clip)
            log = TrainStepLog(
                step=step,
                entropy_est=batch_entropy_estimate(policy, batch),
                clip_frac_low=low,
                clip_frac_high=high,
                surrogate=surrogate_value(policy, snapshot, data, clip),
                grad_norm=float(np.linalg.norm(grad)),
                reward_mean=reward_mean,
            )
        logger.debug("%s update %d: %s", updater, step, log)
        if on_update is not None:
            on_update(
                UpdateEvent(
                    step, policy, updated, snapshot, log, data.advantages, model, visitation
                )
            )
        logs.append(log)
        policy = updated
    return policy, logs
