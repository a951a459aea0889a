"""
Numerical self-checks behind ``clipsim validate``.

Each check returns a :class:`ValidationResult` holding a pass flag and a
small table for the command to print. Instances are drawn from a seeded
generator, so a check is reproducible for a given seed.
"""

import logging
import tempfile
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import resolve_run_config
from .env import TreeSpec, rollout_batch, visitation_exact
from .experiments import run_experiment
from .objective import (
    CLIP_HIGH_OFF,
    CLIP_LOW_OFF,
    AdvantageBatch,
    ClipConfig,
    clip_event_table,
    piecewise_surrogate_gradient,
    piecewise_surrogate_value,
    surrogate_gradient,
    surrogate_value,
)
from .policy import PolicySnapshot, PolicyTable, state_entropy, state_entropy_gradient
from .rewards import AdvantageModel, group_advantages
from .theory import CONDITIONS, residual_scan

logger = logging.getLogger(__name__)

# Relative errors divide by max(|reference|, RELATIVE_FLOOR)
RELATIVE_FLOOR = 1e-3

GRADIENT_CLIPS = (
    ClipConfig(0.2, 0.2),
    ClipConfig(0.1, 0.3),
    ClipConfig(0.2, CLIP_HIGH_OFF),
    ClipConfig(CLIP_LOW_OFF, 0.28),
)


@dataclass
class ValidationResult:
    name: str
    passed: bool
    headers: Tuple[str, ...]
    rows: List[Tuple[Any, ...]] = field(default_factory=list)
    message: str = ""


def finite_difference(
    func: Callable[[np.ndarray], float], x0: np.ndarray, eps: float
) -> np.ndarray:
    """Centered-difference gradient of ``func`` at ``x0`` (any shape)."""
    grad = np.zeros_like(x0, dtype=np.float64)
    x = np.array(x0, dtype=np.float64)
    for j in np.ndindex(x0.shape):
        x[j] = x0[j] + eps
        f_plus = func(x)
        x[j] = x0[j] - eps
        f_minus = func(x)
        x[j] = x0[j]
        grad[j] = (f_plus - f_minus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    scale = max(float(np.abs(reference).max()), RELATIVE_FLOOR)
    return float(np.abs(analytic - reference).max() / scale)


def _gradient_instance(
    rng: np.random.Generator, spec: TreeSpec, group_size: int
) -> Tuple[PolicyTable, PolicySnapshot, AdvantageBatch]:
    old = PolicyTable.random(spec.state_count, spec.vocab_size, rng)
    batch = rollout_batch(old, spec, group_size, rng)
    advantages = group_advantages(rng.standard_normal(group_size))
    current = old.with_logits(old.logits + 0.3 * rng.standard_normal(old.logits.shape))
    return current, old.snapshot(), AdvantageBatch(batch, advantages)


def _near_boundary(
    policy: PolicyTable,
    snapshot: PolicySnapshot,
    data: AdvantageBatch,
    clip: ClipConfig,
    margin: float,
) -> bool:
    states, tokens = data.batch.states, data.batch.tokens
    r = policy.probs()[states, tokens] / snapshot.probs[states, tokens]
    return bool(np.any(np.abs(r - clip.low) < margin) or np.any(np.abs(r - clip.high) < margin))


def check_surrogate_gradients(
    instances: int = 100,
    seed: int = 0,
    tolerance: float = 1e-4,
    eps: float = 1e-5,
    margin: float = 1e-4,
) -> ValidationResult:
    """
    Analytic surrogate gradient against centered finite differences.

    Instances with a sampled ratio within ``margin`` of a clip threshold are
    redrawn, since the objective has a kink there. The piecewise indicator
    form of the objective is compared with the min form on every instance.
    """
    rng = np.random.default_rng(seed)
    spec = TreeSpec(vocab_size=5, horizon=2)
    errors: List[float] = []
    piecewise_mismatch = 0
    skipped = 0
    while len(errors) < instances and skipped < 10 * instances:
        clip = GRADIENT_CLIPS[len(errors) % len(GRADIENT_CLIPS)]
        policy, snapshot, data = _gradient_instance(rng, spec, group_size=4)
        if _near_boundary(policy, snapshot, data, clip, margin):
            skipped += 1
            logger.warning("Skipping gradient instance with a ratio near a clip threshold")
            continue

        def objective(logits: np.ndarray) -> float:
            return surrogate_value(policy.with_logits(logits), snapshot, data, clip)

        analytic = surrogate_gradient(policy, snapshot, data, clip)
        numeric = finite_difference(objective, policy.logits, eps)
        errors.append(relative_error(analytic, numeric))

        same_value = surrogate_value(policy, snapshot, data, clip) == piecewise_surrogate_value(
            policy, snapshot, data, clip
        )
        same_grad = np.array_equal(
            analytic, piecewise_surrogate_gradient(policy, snapshot, data, clip)
        )
        piecewise_mismatch += int(not (same_value and same_grad))

    worst = max(errors) if errors else float("nan")
    passed = len(errors) >= instances and worst <= tolerance and piecewise_mismatch == 0
    return ValidationResult(
        name="gradients",
        passed=passed,
        headers=("instances", "skipped", "max_rel_error", "tolerance", "piecewise_mismatches"),
        rows=[(len(errors), skipped, worst, tolerance, piecewise_mismatch)],
        message="surrogate gradient vs finite differences",
    )


def check_entropy_gradients(
    rows: int = 100, seed: int = 0, tolerance: float = 1e-6, eps: float = 1e-6
) -> ValidationResult:
    """Entropy gradient of single rows (2 to 16 actions) against finite differences."""
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(rows):
        width = int(rng.integers(2, 17))
        policy = PolicyTable(rng.standard_normal((1, width)))

        def entropy(logits: np.ndarray) -> float:
            return state_entropy(PolicyTable(logits), 0)

        numeric = finite_difference(entropy, policy.logits, eps)[0]
        errors.append(relative_error(state_entropy_gradient(policy, 0), numeric))
    worst = max(errors)
    return ValidationResult(
        name="entropy-gradient",
        passed=worst <= tolerance,
        headers=("rows", "max_rel_error", "tolerance"),
        rows=[(rows, worst, tolerance)],
        message="entropy gradient vs finite differences",
    )


def residual_instance(
    rng: np.random.Generator, spec: TreeSpec, clip: ClipConfig, noise: float = 0.5
) -> Tuple[PolicyTable, PolicySnapshot, PolicyTable]:
    """A random old policy and a perturbed current policy with at least one clip event."""
    while True:
        old = PolicyTable.random(spec.state_count, spec.vocab_size, rng)
        current = old.with_logits(old.logits + noise * rng.standard_normal(old.logits.shape))
        if clip_event_table(current, old.snapshot(), clip).has_events:
            return current, old.snapshot(), old


def check_residuals(
    updater: str,
    instances: int = 20,
    seed: int = 0,
    etas: Sequence[float] = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2),
    min_slope: float = 1.8,
    min_passing: Optional[int] = None,
) -> ValidationResult:
    """Log-log slope of the first-order residual over an eta sweep, per instance."""
    rng = np.random.default_rng(seed)
    spec = TreeSpec(vocab_size=5, horizon=2)
    clip = ClipConfig(0.2, 0.2)
    model = AdvantageModel(nu=0.5, mu=0.5)
    required = int(np.ceil(0.9 * instances)) if min_passing is None else min_passing
    table = []
    for i in range(instances):
        policy, snapshot, old = residual_instance(rng, spec, clip)
        scan = residual_scan(
            policy, snapshot, model, clip, etas, updater, visitation_exact(old, spec)
        )
        ok = scan.slope is not None and scan.slope >= min_slope
        table.append((i, scan.slope, float(scan.residuals[0]), float(scan.residuals[-1]), ok))
    passing = sum(1 for row in table if row[-1])
    return ValidationResult(
        name=f"residuals-{updater}",
        passed=passing >= required,
        headers=("instance", "slope", "residual_min_eta", "residual_max_eta", "ok"),
        rows=table,
        message=f"{passing}/{instances} instances with slope >= {min_slope} (need {required})",
    )


def check_conditions(
    steps: int = 100,
    seed: int = 0,
    threshold: float = 0.95,
    eps_low: Union[float, str] = 0.2,
    eps_high: Union[float, str] = 0.2,
) -> ValidationResult:
    """
    Fraction of (state, update) records satisfying each entropy condition in a
    random-reward run with the idealized pg updater, symmetric clipping by default.

    Every condition needs at least one clip event to be judged; one that is
    never defined fails the check.
    """
    config = resolve_run_config(
        {"updater": "pg", "clip": {"eps_low": eps_low, "eps_high": eps_high}, "steps": steps},
        seed=seed,
    )
    with tempfile.TemporaryDirectory(prefix="clipsim-conditions-") as out:
        artifacts = run_experiment(config, out)
    fractions = artifacts.conditions.fractions()
    table = [
        (name, artifacts.conditions.defined[name], fractions[name], threshold)
        for name in CONDITIONS
    ]
    empty = [name for name in CONDITIONS if fractions[name] is None]
    passed = not empty and all(fractions[name] >= threshold for name in CONDITIONS)
    message = f"{steps} idealized pg updates, eps_low = {eps_low}, eps_high = {eps_high}"
    if empty:
        message += f"; no clip events for {', '.join(empty)}"
    return ValidationResult(
        name="conditions",
        passed=passed,
        headers=("condition", "records", "fraction", "threshold"),
        rows=table,
        message=message,
    )
