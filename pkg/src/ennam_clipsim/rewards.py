"""
Reward sources and advantages.

Three reward kinds are supported: ``bernoulli`` (reward independent of the
response), ``gaussian`` (standard normal, also independent) and
``verifiable`` (1 when the response is one of the prompt's target
sequences). Group advantages are mean-centered without std normalization.
"""

from dataclasses import dataclass, field
from typing import FrozenSet, Optional, Sequence, Tuple

import numpy as np

from .env import RolloutBatch, TreeSpec, Trajectory
from .exceptions import DegenerateGroupError, InvalidParameterError

REWARD_KINDS = ("bernoulli", "gaussian", "verifiable")

Targets = Tuple[Tuple[Tuple[int, ...], ...], ...]


@dataclass(frozen=True)
class RewardSource:
    """
    Where rewards come from.

    ``targets`` holds, per prompt, the token sequences counted as correct for
    the verifiable kind. A single entry is shared by every prompt.
    """

    kind: str
    p: float = 0.5
    targets: Targets = ()
    _lookup: Tuple[FrozenSet[Tuple[int, ...]], ...] = field(
        init=False, repr=False, compare=False, default=()
    )

    def __post_init__(self) -> None:
        if self.kind not in REWARD_KINDS:
            raise InvalidParameterError(
                f"Unknown reward kind '{self.kind}'; expected one of {', '.join(REWARD_KINDS)}"
            )
        if self.kind == "bernoulli" and not 0.0 <= self.p <= 1.0:
            raise InvalidParameterError(f"Bernoulli p must lie in [0, 1], got {self.p}")
        if self.kind == "verifiable":
            if not self.targets:
                raise InvalidParameterError("A verifiable reward source needs target sequences")
            targets = tuple(
                tuple(tuple(int(a) for a in seq) for seq in group) for group in self.targets
            )
            object.__setattr__(self, "targets", targets)
            object.__setattr__(self, "_lookup", tuple(frozenset(group) for group in targets))

    @classmethod
    def bernoulli(cls, p: float = 0.5) -> "RewardSource":
        return cls("bernoulli", p=p)

    @classmethod
    def gaussian(cls) -> "RewardSource":
        return cls("gaussian")

    @classmethod
    def verifiable(cls, targets: Sequence[Sequence[Sequence[int]]]) -> "RewardSource":
        return cls("verifiable", targets=tuple(tuple(tuple(s) for s in g) for g in targets))

    @classmethod
    def parse(cls, text: str) -> "RewardSource":
        """Parse ``bernoulli:0.3`` or ``gaussian`` as used on the command line."""
        kind, _, value = text.strip().partition(":")
        if kind == "bernoulli":
            try:
                return cls.bernoulli(float(value) if value else 0.5)
            except ValueError as exc:
                raise InvalidParameterError(f"Invalid Bernoulli probability in '{text}'") from exc
        if kind == "gaussian" and not value:
            return cls.gaussian()
        raise InvalidParameterError(
            f"Cannot parse reward source '{text}'; use bernoulli:<p> or gaussian"
        )

    @property
    def label(self) -> str:
        if self.kind == "bernoulli":
            return f"bernoulli:{self.p:g}"
        return self.kind

    def is_correct(self, prompt: int, tokens: Sequence[int]) -> bool:
        if self.kind != "verifiable":
            raise InvalidParameterError(f"A {self.kind} reward source has no notion of correctness")
        lookup = self._lookup[0] if len(self._lookup) == 1 else self._lookup[prompt]
        return tuple(int(a) for a in tokens) in lookup

    def correct(self, batch: RolloutBatch) -> np.ndarray:
        """Correctness of every trajectory in the batch, as a boolean vector."""
        return np.fromiter(
            (self.is_correct(int(p), row) for p, row in zip(batch.prompts, batch.tokens)),
            dtype=bool,
            count=len(batch),
        )


@dataclass(frozen=True)
class AdvantageModel:
    """Symmetric three-atom law: +mu and -mu with probability nu each, else 0."""

    nu: float
    mu: float

    def __post_init__(self) -> None:
        if not 0.0 < self.nu <= 0.5:
            raise InvalidParameterError(f"nu must lie in (0, 1/2], got {self.nu}")
        if not self.mu > 0.0:
            raise InvalidParameterError(f"mu must be positive, got {self.mu}")


@dataclass(frozen=True, eq=False)
class RolloutGroup:
    """K responses to one prompt with their rewards and advantages."""

    batch: RolloutBatch
    rewards: np.ndarray
    advantages: np.ndarray

    def __post_init__(self) -> None:
        if len(self.rewards) != len(self.batch) or len(self.advantages) != len(self.batch):
            raise InvalidParameterError("Group rewards and advantages must match the batch size")
        if len(self.batch) and np.any(self.batch.prompts != self.batch.prompts[0]):
            raise InvalidParameterError("All responses of a group must share one prompt")

    @classmethod
    def from_rewards(cls, batch: RolloutBatch, rewards: np.ndarray) -> "RolloutGroup":
        rewards = np.asarray(rewards, dtype=np.float64)
        return cls(batch, rewards, group_advantages(rewards))


def draw_reward(source: RewardSource, trajectory: Trajectory, rng: np.random.Generator) -> float:
    if source.kind == "bernoulli":
        return float(rng.random() < source.p)
    if source.kind == "gaussian":
        return float(rng.standard_normal())
    return float(source.is_correct(trajectory.prompt, trajectory.tokens))


def draw_rewards(source: RewardSource, batch: RolloutBatch, rng: np.random.Generator) -> np.ndarray:
    """Rewards for a whole batch; verifiable rewards consume no randomness."""
    if source.kind == "bernoulli":
        return (rng.random(len(batch)) < source.p).astype(np.float64)
    if source.kind == "gaussian":
        return rng.standard_normal(len(batch))
    return source.correct(batch).astype(np.float64)


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape[0] < 2:
        raise DegenerateGroupError(f"A group needs at least 2 responses, got {rewards.shape[0]}")
    return rewards - rewards.mean()


def idealized_advantage(model: AdvantageModel, rng: np.random.Generator) -> float:
    u = rng.random()
    if u < model.nu:
        return model.mu
    if u < 2.0 * model.nu:
        return -model.mu
    return 0.0


def idealized_advantages(model: AdvantageModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorized :func:`idealized_advantage`; the same uniforms give the same draws."""
    u = rng.random(n)
    return np.where(u < model.nu, model.mu, np.where(u < 2.0 * model.nu, -model.mu, 0.0))


def toy_targets(spec: TreeSpec, count: int, rng: np.random.Generator) -> Targets:
    """Pick ``count`` distinct target responses per prompt for the verifiable task."""
    leaves = spec.vocab_size**spec.horizon
    if not 1 <= count <= leaves:
        raise InvalidParameterError(f"target_count must lie in [1, {leaves}], got {count}")
    targets = []
    for _ in range(spec.prompt_count):
        codes = np.sort(rng.choice(leaves, size=count, replace=False))
        powers = spec.vocab_size ** np.arange(spec.horizon - 1, -1, -1)
        digits = (codes[:, None] // powers) % spec.vocab_size
        targets.append(tuple(tuple(int(a) for a in row) for row in digits))
    return tuple(targets)


def estimate_advantage_model(advantages: np.ndarray) -> Optional[AdvantageModel]:
    """
    Empirical (nu, mu) of a batch of advantages.

    nu is the average of the positive and negative frequencies and mu the
    mean magnitude of the nonzero advantages. Returns None when every
    advantage is zero.
    """
    advantages = np.asarray(advantages, dtype=np.float64)
    nonzero = advantages != 0.0
    if not nonzero.any():
        return None
    nu = 0.5 * float(nonzero.mean())
    mu = float(np.abs(advantages[nonzero]).mean())
    return AdvantageModel(nu=nu, mu=mu)
