"""
Batch entropy estimate and pass@k / mean@k evaluation on the verifiable task.
"""

from dataclasses import astuple, dataclass, fields
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .env import RolloutBatch, Trajectory, TreeSpec, rollout_batch
from .exceptions import EmptyBatchError, InvalidParameterError
from .policy import PolicyTable, entropies
from .rewards import RewardSource


@dataclass(frozen=True)
class EvalReport:
    step: int
    mean_at_k: float
    pass_at_k: float
    batch_entropy: float

    @classmethod
    def columns(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def as_row(self) -> tuple:
        return astuple(self)


def batch_entropy_estimate(
    policy: PolicyTable, trajectories: Union[RolloutBatch, Sequence[Trajectory]]
) -> float:
    """Mean over trajectories of the per-token entropy at the visited states."""
    if not isinstance(trajectories, RolloutBatch):
        if not trajectories:
            raise EmptyBatchError("Cannot estimate entropy from an empty batch")
        trajectories = RolloutBatch.from_trajectories(trajectories)
    if len(trajectories) == 0:
        raise EmptyBatchError("Cannot estimate entropy from an empty batch")
    return float(entropies(policy)[trajectories.states].mean())


def pass_at_k_unbiased(n: int, c: int, k: int) -> float:
    """
    Unbiased pass@k from ``c`` correct out of ``n`` samples.

    pass@k = 1 - C(n - c, k) / C(n, k), evaluated as a running product.
    """
    if not 1 <= k <= n:
        raise InvalidParameterError(f"k must lie in [1, n={n}], got {k}")
    if c == 0:
        return 0.0
    if n - c < k:
        return 1.0
    product = 1.0
    for i in range(k):
        product *= (n - c - i) / (n - i)
    return 1.0 - product


def evaluate_pass_mean(
    policy: PolicyTable,
    spec: TreeSpec,
    source: RewardSource,
    k: int,
    prompts: Sequence[int],
    rng: np.random.Generator,
    samples: Optional[int] = None,
    temperature: float = 1.0,
    step: int = 0,
) -> EvalReport:
    """
    Sample responses per prompt and score them against the verifiable targets.

    With ``samples`` unset exactly ``k`` responses are drawn per prompt and
    pass@k is the fraction of prompts with at least one correct response.
    With ``samples > k`` pass@k uses the unbiased estimator.
    """
    if source.kind != "verifiable":
        raise InvalidParameterError("pass@k evaluation needs a verifiable reward source")
    if k < 1:
        raise InvalidParameterError(f"k must be positive, got {k}")
    n = k if samples is None else samples
    if n < k:
        raise InvalidParameterError(f"evaluation.samples ({n}) must be at least k ({k})")
    prompts = np.asarray(prompts, dtype=np.int64)
    if prompts.size == 0:
        raise EmptyBatchError("No prompts to evaluate")

    batch = rollout_batch(policy, spec, 0, rng, temperature, prompts=np.repeat(prompts, n))
    correct = source.correct(batch).reshape(prompts.size, n)
    if n == k:
        pass_at_k = float(correct.any(axis=1).mean())
    else:
        counts = correct.sum(axis=1)
        pass_at_k = float(np.mean([pass_at_k_unbiased(n, int(c), k) for c in counts]))
    return EvalReport(
        step=step,
        mean_at_k=float(correct.mean()),
        pass_at_k=pass_at_k,
        batch_entropy=batch_entropy_estimate(policy, batch),
    )
