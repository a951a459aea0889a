"""
Prefix-tree token-generation environment.

A state is a prompt together with the tokens generated so far; appending a
token moves to the child state. Responses have exactly ``horizon`` tokens, so
states exist for prefix lengths ``0 .. horizon - 1`` and the leaves reached
after the last token carry no policy row.

State ordering is prompt-major, then breadth-first by prefix length, then
lexicographic by tokens. The index of a prefix is therefore

    prompt * states_per_prompt + level_offset(depth) + code(tokens)

where ``code`` reads the tokens as a base-``vocab_size`` number.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import (
    ExactModeTooLargeError,
    InvalidParameterError,
    SpecMismatchError,
    StateIndexError,
)
from .policy import PolicyTable, entropies
from .settings import clipsim_settings

logger = logging.getLogger(__name__)

_MC_CHUNK = 65_536


@dataclass(frozen=True)
class TreeSpec:
    """Shape of the tree and the prompt distribution."""

    vocab_size: int
    horizon: int
    prompt_count: int = 1
    prompt_weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self) -> None:
        for name in ("vocab_size", "horizon", "prompt_count"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidParameterError(f"{name} must be a positive integer, got {value!r}")
        if self.prompt_weights is None:
            weights = (1.0 / self.prompt_count,) * self.prompt_count
        else:
            weights = tuple(float(w) for w in self.prompt_weights)
            if len(weights) != self.prompt_count:
                raise InvalidParameterError(
                    f"prompt_weights has {len(weights)} entries for {self.prompt_count} prompts"
                )
            if min(weights) < 0.0 or abs(sum(weights) - 1.0) > 1e-12:
                raise InvalidParameterError("prompt_weights must be a probability vector")
        object.__setattr__(self, "prompt_weights", weights)

    @property
    def weights(self) -> np.ndarray:
        return np.asarray(self.prompt_weights, dtype=np.float64)

    def level_offset(self, depth: int) -> int:
        return sum(self.vocab_size**t for t in range(depth))

    @property
    def states_per_prompt(self) -> int:
        return self.level_offset(self.horizon)

    @property
    def state_count(self) -> int:
        return self.prompt_count * self.states_per_prompt

    @property
    def leaf_count(self) -> int:
        return self.prompt_count * self.vocab_size**self.horizon

    def check_policy(self, policy: PolicyTable) -> None:
        expected = (self.state_count, self.vocab_size)
        if policy.logits.shape != expected:
            raise SpecMismatchError(
                f"Policy shape {policy.logits.shape} does not match tree {expected}"
            )

    def check_budget(self, budget: Optional[int] = None) -> None:
        limit = clipsim_settings.EXACT_STATE_BUDGET if budget is None else budget
        if self.leaf_count > limit:
            raise ExactModeTooLargeError(
                f"Tree has {self.leaf_count} leaves, above the exact-mode budget of {limit}; "
                "use Monte Carlo visitation instead"
            )


class StateIndex:
    """Bijection between (prompt, prefix) pairs and state indices."""

    def __init__(self, spec: TreeSpec) -> None:
        self.spec = spec
        vocab, per_prompt = spec.vocab_size, spec.states_per_prompt
        depth = np.empty(per_prompt, dtype=np.int64)
        code = np.empty(per_prompt, dtype=np.int64)
        for t in range(spec.horizon):
            start = spec.level_offset(t)
            depth[start : start + vocab**t] = t
            code[start : start + vocab**t] = np.arange(vocab**t)

        self.depth = np.tile(depth, spec.prompt_count)
        self.code = np.tile(code, spec.prompt_count)
        self.prompt = np.repeat(np.arange(spec.prompt_count), per_prompt)
        self.roots = np.arange(spec.prompt_count) * per_prompt

        # Children of the deepest states are leaves and get -1.
        self.children = np.full((spec.state_count, vocab), -1, dtype=np.int64)
        inner = np.flatnonzero(self.depth < spec.horizon - 1)
        base = (
            self.prompt[inner] * per_prompt
            + np.array([spec.level_offset(t + 1) for t in self.depth[inner]], dtype=np.int64)
            + self.code[inner] * vocab
        )
        self.children[inner] = base[:, None] + np.arange(vocab)
        for array in (self.depth, self.code, self.prompt, self.roots, self.children):
            array.setflags(write=False)

    def __len__(self) -> int:
        return self.spec.state_count

    def level(self, depth: int) -> np.ndarray:
        """All states at prefix length ``depth``, in index order."""
        return np.flatnonzero(self.depth == depth)

    def index_of(self, prompt: int, tokens: Sequence[int]) -> int:
        spec = self.spec
        if not 0 <= prompt < spec.prompt_count:
            raise StateIndexError(f"Prompt {prompt} out of range [0, {spec.prompt_count})")
        if len(tokens) >= spec.horizon:
            raise StateIndexError(
                f"Prefix of length {len(tokens)} is a leaf for horizon {spec.horizon}"
            )
        code = 0
        for token in tokens:
            if not 0 <= token < spec.vocab_size:
                raise StateIndexError(f"Token {token} out of range [0, {spec.vocab_size})")
            code = code * spec.vocab_size + int(token)
        return prompt * spec.states_per_prompt + spec.level_offset(len(tokens)) + code

    def prefix_of(self, index: int) -> Tuple[int, Tuple[int, ...]]:
        if not 0 <= index < len(self):
            raise StateIndexError(f"State {index} out of range [0, {len(self)})")
        code, tokens = int(self.code[index]), []
        for _ in range(int(self.depth[index])):
            code, token = divmod(code, self.spec.vocab_size)
            tokens.append(token)
        return int(self.prompt[index]), tuple(reversed(tokens))


@lru_cache(maxsize=32)
def _build_index(spec: TreeSpec) -> StateIndex:
    return StateIndex(spec)


def enumerate_states(spec: TreeSpec, budget: Optional[int] = None) -> StateIndex:
    spec.check_budget(budget)
    return _build_index(spec)


@dataclass(frozen=True)
class Trajectory:
    prompt: int
    tokens: Tuple[int, ...]
    state_path: Tuple[int, ...]
    old_logprobs: Tuple[float, ...]


@dataclass(frozen=True, eq=False)
class RolloutBatch:
    """Array form of ``n`` trajectories; every field has ``n`` rows."""

    prompts: np.ndarray
    tokens: np.ndarray
    states: np.ndarray
    old_logprobs: np.ndarray

    def __len__(self) -> int:
        return int(self.prompts.shape[0])

    @property
    def horizon(self) -> int:
        return int(self.tokens.shape[1])

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(
            prompt=int(self.prompts[i]),
            tokens=tuple(int(a) for a in self.tokens[i]),
            state_path=tuple(int(s) for s in self.states[i]),
            old_logprobs=tuple(float(x) for x in self.old_logprobs[i]),
        )

    def trajectories(self) -> Iterator[Trajectory]:
        for i in range(len(self)):
            yield self.trajectory(i)

    def select(self, indices: np.ndarray) -> "RolloutBatch":
        return RolloutBatch(
            self.prompts[indices],
            self.tokens[indices],
            self.states[indices],
            self.old_logprobs[indices],
        )

    @classmethod
    def concat(cls, batches: Sequence["RolloutBatch"]) -> "RolloutBatch":
        return cls(
            np.concatenate([b.prompts for b in batches]),
            np.concatenate([b.tokens for b in batches]),
            np.concatenate([b.states for b in batches]),
            np.concatenate([b.old_logprobs for b in batches]),
        )

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory]) -> "RolloutBatch":
        return cls(
            np.array([t.prompt for t in trajectories], dtype=np.int64),
            np.array([t.tokens for t in trajectories], dtype=np.int64),
            np.array([t.state_path for t in trajectories], dtype=np.int64),
            np.array([t.old_logprobs for t in trajectories], dtype=np.float64),
        )


def rollout_batch(
    policy: PolicyTable,
    spec: TreeSpec,
    n: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
    prompts: Optional[np.ndarray] = None,
) -> RolloutBatch:
    """
    Sample ``n`` trajectories in one vectorized pass.

    Prompts are drawn from the prompt distribution unless given explicitly.
    Each step draws one uniform per trajectory and inverts the row CDF, the
    same way :func:`ennam_clipsim.policy.sample_action` does.
    """
    spec.check_policy(policy)
    if prompts is None:
        prompts = rng.choice(spec.prompt_count, size=n, p=spec.weights)
    else:
        prompts = np.asarray(prompts, dtype=np.int64)
        n = len(prompts)
    probs = policy.probs(temperature)
    log_probs = policy.log_probs(temperature)

    tokens = np.empty((n, spec.horizon), dtype=np.int64)
    states = np.empty((n, spec.horizon), dtype=np.int64)
    code = np.zeros(n, dtype=np.int64)
    base = prompts * spec.states_per_prompt
    for t in range(spec.horizon):
        states[:, t] = base + spec.level_offset(t) + code
        cdf = np.cumsum(probs[states[:, t]], axis=1)
        u = rng.random(n)[:, None] * cdf[:, -1:]
        actions = np.minimum((cdf <= u).sum(axis=1), spec.vocab_size - 1)
        tokens[:, t] = actions
        code = code * spec.vocab_size + actions
    old_logprobs = log_probs[states, tokens]
    return RolloutBatch(prompts.astype(np.int64), tokens, states, old_logprobs)


def rollout(policy: PolicyTable, spec: TreeSpec, rng: np.random.Generator) -> Trajectory:
    return rollout_batch(policy, spec, 1, rng).trajectory(0)


@dataclass(frozen=True, eq=False)
class VisitationMeasure:
    """Expected visit count per state; totals ``horizon`` for exact measures."""

    mass: np.ndarray
    horizon: int

    @property
    def total(self) -> float:
        return float(self.mass.sum())

    def per_token(self) -> "VisitationMeasure":
        """``mass / horizon``: where a uniformly chosen generated token is emitted."""
        return VisitationMeasure(self.mass / self.horizon, 1)


def visitation_exact(
    policy: PolicyTable, spec: TreeSpec, budget: Optional[int] = None
) -> VisitationMeasure:
    """One forward pass over the breadth-first order."""
    spec.check_policy(policy)
    index = enumerate_states(spec, budget)
    probs = policy.probs()
    mass = np.zeros(spec.state_count)
    mass[index.roots] = spec.weights
    for t in range(spec.horizon - 1):
        parents = index.level(t)
        mass[index.children[parents]] = mass[parents, None] * probs[parents]
    return VisitationMeasure(mass, spec.horizon)


def _visit_counts(
    policy: PolicyTable, spec: TreeSpec, samples: int, rng: np.random.Generator
) -> np.ndarray:
    counts = np.zeros(spec.state_count, dtype=np.int64)
    remaining = samples
    while remaining > 0:
        size = min(remaining, _MC_CHUNK)
        batch = rollout_batch(policy, spec, size, rng)
        counts += np.bincount(batch.states.ravel(), minlength=spec.state_count)
        remaining -= size
    return counts


def visitation_mc(
    policy: PolicyTable, spec: TreeSpec, samples: int, rng: np.random.Generator
) -> VisitationMeasure:
    if samples < 1:
        raise InvalidParameterError(f"samples must be at least 1, got {samples}")
    spec.check_policy(policy)
    return VisitationMeasure(_visit_counts(policy, spec, samples, rng) / samples, spec.horizon)


def visitation_mc_parallel(
    policy: PolicyTable,
    spec: TreeSpec,
    samples: int,
    seed: int,
    lanes: int = 8,
    workers: Optional[int] = None,
) -> VisitationMeasure:
    """
    Monte Carlo visitation split over independent lanes.

    Lane ``i`` draws from the stream spawned from ``(seed, i)`` and the lane
    counts are summed in lane order, so the result is the same for any
    number of workers.
    """
    if samples < 1:
        raise InvalidParameterError(f"samples must be at least 1, got {samples}")
    spec.check_policy(policy)
    workers = clipsim_settings.WORKERS if workers is None else workers
    lanes = max(1, min(lanes, samples))
    sizes = [len(part) for part in np.array_split(np.arange(samples), lanes)]
    streams = np.random.SeedSequence(seed).spawn(lanes)

    def lane(i: int) -> np.ndarray:
        return _visit_counts(policy, spec, sizes[i], np.random.default_rng(streams[i]))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        results: List[np.ndarray] = list(executor.map(lane, range(lanes)))
    logger.debug("Monte Carlo visitation: %d samples over %d lanes", samples, lanes)
    return VisitationMeasure(np.sum(results, axis=0) / samples, spec.horizon)


def aggregate_entropy(
    policy: PolicyTable, spec: TreeSpec, visitation: Optional[VisitationMeasure] = None
) -> float:
    """Visitation-weighted mean token entropy, sum_s d(s) H(s) / horizon."""
    if visitation is None:
        visitation = visitation_exact(policy, spec)
    return float(visitation.mass @ entropies(policy) / spec.horizon)
