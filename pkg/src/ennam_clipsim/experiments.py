"""
Experiment harness: runs, clip ablations and reward-source ablations.

A run writes four files into its output directory:

* ``steps.csv``   one row per policy update (:class:`TrainStepLog`);
* ``theory.csv``  one row per policy update with the visitation-weighted
  theory aggregates;
* ``eval.csv``    one row at step 0, every ``evaluation.interval`` updates
  and after the last update;
* ``config.resolved``  the fully resolved run config as YAML.

Floats are written with ``repr`` and undefined values as empty cells, so two
runs with the same config and seed produce byte-identical files.
"""

import csv
import dataclasses
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import RewardConfig, RunConfig, format_eps
from .env import VisitationMeasure, aggregate_entropy, rollout_batch, visitation_exact
from .evaluation import batch_entropy_estimate, evaluate_pass_mean
from .exceptions import ConfigError, InvalidParameterError, NonFiniteError
from .objective import CLIP_HIGH_OFF, CLIP_LOW_OFF
from .policy import PolicySnapshot, PolicyTable
from .rewards import AdvantageModel, RewardSource, estimate_advantage_model
from .settings import clipsim_settings
from .theory import ConditionTally, theory_step_report
from .training import (
    AdamOptimizer,
    TrainStepLog,
    UpdateEvent,
    grpo_train_epoch,
    idealized_train_epoch,
)

logger = logging.getLogger(__name__)

STEPS_COLUMNS = TrainStepLog.columns()
THEORY_COLUMNS = (
    "step",
    "d_weighted_H",
    "dH_actual",
    "dH_pred",
    "p_mean",
    "q_mean",
    "qcond_low",
    "qcond_high",
    "logcond_low",
    "logcond_high",
    "p_old_mean",
    "q_old_mean",
    "qcond_low_avg",
    "qcond_high_avg",
    "logcond_low_avg",
    "logcond_high_avg",
)
EVAL_COLUMNS = ("step", "mean_at_k", "pass_at_k", "batch_entropy")

ABLATION_COLUMNS = (
    "eps_low",
    "eps_high",
    "reward",
    "initial_entropy",
    "final_entropy",
    "entropy_ratio",
    "final_pass_at_k",
    "final_mean_at_k",
)

# Stands in when every advantage of a batch is zero; the prediction is dropped then.
_NULL_MODEL = AdvantageModel(nu=0.5, mu=1.0)


@dataclass
class RunArtifacts:
    """Everything a run produced, in memory as well as on disk."""

    output_dir: str
    config: RunConfig
    initial_entropy: float
    final_entropy: float
    steps: List[TrainStepLog] = field(default_factory=list)
    theory: List[Dict[str, Any]] = field(default_factory=list)
    evals: List[Dict[str, Any]] = field(default_factory=list)
    conditions: ConditionTally = field(default_factory=ConditionTally)
    final_policy: Optional[PolicyTable] = None

    @property
    def final_eval(self) -> Optional[Dict[str, Any]]:
        return self.evals[-1] if self.evals else None


@dataclass(frozen=True)
class AblationRow:
    eps_low: float
    eps_high: float
    reward: str
    initial_entropy: float
    final_entropy: float
    entropy_ratio: float
    final_pass_at_k: Optional[float]
    final_mean_at_k: Optional[float]

    def as_row(self) -> tuple:
        return (
            format_eps(self.eps_low, CLIP_LOW_OFF),
            format_eps(self.eps_high, CLIP_HIGH_OFF),
            self.reward,
            self.initial_entropy,
            self.final_entropy,
            self.entropy_ratio,
            self.final_pass_at_k,
            self.final_mean_at_k,
        )


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: str, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(value) for value in row])


def _streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent generators for initialization, training and evaluation."""
    init, train, evaluation = np.random.SeedSequence(seed).spawn(3)
    return (
        np.random.default_rng(init),
        np.random.default_rng(train),
        np.random.default_rng(evaluation),
    )


def _evaluate(
    policy: PolicyTable,
    config: RunConfig,
    source: RewardSource,
    rng: np.random.Generator,
    step: int,
) -> Dict[str, Any]:
    spec, ev = config.tree, config.evaluation
    prompts = np.arange(spec.prompt_count)
    if source.kind == "verifiable":
        report = evaluate_pass_mean(
            policy, spec, source, ev.k, prompts, rng, ev.samples, ev.temperature, step
        )
        return dataclasses.asdict(report)
    per_prompt = ev.k if ev.samples is None else ev.samples
    batch = rollout_batch(
        policy, spec, 0, rng, ev.temperature, prompts=np.repeat(prompts, per_prompt)
    )
    return {
        "step": step,
        "mean_at_k": None,
        "pass_at_k": None,
        "batch_entropy": batch_entropy_estimate(policy, batch),
    }


class _TheoryRecorder:
    """``on_update`` callback turning every inner update into a theory row."""

    def __init__(self, config: RunConfig) -> None:
        self.config = config
        self.rows: List[Dict[str, Any]] = []
        self.tally = ConditionTally()
        self.eta = config.eta if config.idealized else config.optimizer.learning_rate
        self._snapshot: Optional[PolicySnapshot] = None
        self._visitation: Optional[VisitationMeasure] = None

    def visitation(self, event: UpdateEvent) -> VisitationMeasure:
        """d/horizon of the event's old policy, computed once per snapshot."""
        if event.visitation is not None:
            return event.visitation
        if self._visitation is None or event.snapshot is not self._snapshot:
            d_old = visitation_exact(event.snapshot.as_policy(), self.config.tree)
            self._snapshot, self._visitation = event.snapshot, d_old.per_token()
        return self._visitation

    def __call__(self, event: UpdateEvent) -> None:
        model = event.model or estimate_advantage_model(event.advantages)
        report = theory_step_report(
            event.before,
            event.snapshot,
            self.config.clip,
            model or _NULL_MODEL,
            self.eta or 0.0,
            self.visitation(event),
        )
        self.tally.update(report)
        updater = "npg" if self.config.updater == "npg" else "pg"
        row: Dict[str, Any] = report.aggregates()
        row["step"] = event.step
        row["dH_actual"] = report.actual(event.after)
        row["dH_pred"] = report.predicted(updater) if model is not None else None
        for key in ("d_weighted_H", "dH_actual"):
            if not np.isfinite(row[key]):
                raise NonFiniteError(f"Non-finite {key}", step=event.step)
        self.rows.append(row)


def run_experiment(config: RunConfig, output_dir: str) -> RunArtifacts:
    """Run the configured update loop and write the run's CSV files."""
    os.makedirs(output_dir, exist_ok=True)
    spec = config.tree
    init_rng, train_rng, eval_rng = _streams(config.seed)
    policy = PolicyTable.random(spec.state_count, spec.vocab_size, init_rng, config.logit_scale)
    source = config.reward.build(spec, config.seed)
    optimizer = None if config.idealized else AdamOptimizer(config.optimizer)

    recorder = _TheoryRecorder(config)
    evals = [_evaluate(policy, config, source, eval_rng, 0)]
    initial_entropy = aggregate_entropy(policy, spec)
    logger.info(
        "Starting %s run: %d updates, refresh every %d, initial entropy %.6f",
        config.updater,
        config.steps,
        config.refresh_period,
        initial_entropy,
    )

    def on_update(event: UpdateEvent) -> None:
        recorder(event)
        done = event.step + 1
        if done % config.evaluation.interval == 0 or done == config.steps:
            evals.append(_evaluate(event.after, config, source, eval_rng, done))

    steps: List[TrainStepLog] = []
    step = 0
    while step < config.steps:
        inner = min(config.refresh_period, config.steps - step)
        if config.idealized:
            policy, logs = idealized_train_epoch(
                policy,
                spec,
                config.advantage,
                config.clip,
                config.updater,
                float(config.eta or 0.0),
                config.rollouts_per_step,
                inner,
                train_rng,
                snapshot_samples=config.snapshot_samples,
                step_offset=step,
                on_update=on_update,
            )
        else:
            assert optimizer is not None
            policy, logs = grpo_train_epoch(
                policy,
                spec,
                source,
                config.clip,
                dataclasses.replace(config.optimizer, inner_updates=inner),
                train_rng,
                optimizer=optimizer,
                step_offset=step,
                on_update=on_update,
            )
        steps.extend(logs)
        step += inner
        entropy = aggregate_entropy(policy, spec)
        if not np.isfinite(entropy):
            raise NonFiniteError("Non-finite aggregate entropy", step=step)
        logger.debug("After %d updates: aggregate entropy %.6f", step, entropy)

    final_entropy = aggregate_entropy(policy, spec)
    artifacts = RunArtifacts(
        output_dir=output_dir,
        config=config,
        initial_entropy=initial_entropy,
        final_entropy=final_entropy,
        steps=steps,
        theory=recorder.rows,
        evals=evals,
        conditions=recorder.tally,
        final_policy=policy,
    )
    _write_run(artifacts)
    logger.info(
        "Finished run in %s: entropy %.6f -> %.6f", output_dir, initial_entropy, final_entropy
    )
    return artifacts


def _write_run(artifacts: RunArtifacts) -> None:
    out = artifacts.output_dir
    write_csv(
        os.path.join(out, "steps.csv"), STEPS_COLUMNS, (log.as_row() for log in artifacts.steps)
    )
    write_csv(
        os.path.join(out, "theory.csv"),
        THEORY_COLUMNS,
        ([row.get(c) for c in THEORY_COLUMNS] for row in artifacts.theory),
    )
    write_csv(
        os.path.join(out, "eval.csv"),
        EVAL_COLUMNS,
        ([row.get(c) for c in EVAL_COLUMNS] for row in artifacts.evals),
    )
    with open(os.path.join(out, "config.resolved"), "w", encoding="utf-8") as handle:
        handle.write(artifacts.config.to_yaml())


def _summarize(artifacts: RunArtifacts) -> AblationRow:
    config, final = artifacts.config, artifacts.final_eval or {}
    return AblationRow(
        eps_low=config.clip.eps_low,
        eps_high=config.clip.eps_high,
        reward=config.reward.build(config.tree, config.seed).label,
        initial_entropy=artifacts.initial_entropy,
        final_entropy=artifacts.final_entropy,
        entropy_ratio=artifacts.final_entropy / artifacts.initial_entropy
        if artifacts.initial_entropy > 0.0
        else float("nan"),
        final_pass_at_k=final.get("pass_at_k"),
        final_mean_at_k=final.get("mean_at_k"),
    )


def _run_grid(
    cells: Sequence[Tuple[str, RunConfig]], output_dir: str, workers: Optional[int]
) -> List[AblationRow]:
    workers = clipsim_settings.WORKERS if workers is None else workers

    def run(cell: Tuple[str, RunConfig]) -> AblationRow:
        name, config = cell
        return _summarize(run_experiment(config, os.path.join(output_dir, name)))

    os.makedirs(output_dir, exist_ok=True)
    # map keeps grid order whatever the worker count
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        rows = list(executor.map(run, cells))
    path = os.path.join(output_dir, "ablation.csv")
    write_csv(path, ABLATION_COLUMNS, (row.as_row() for row in rows))
    return rows


def _eps_label(value: float, off: float) -> str:
    formatted = format_eps(value, off)
    return formatted if isinstance(formatted, str) else f"{formatted:g}"


def ablate_clipping(
    base: RunConfig,
    eps_lows: Sequence[float],
    eps_highs: Sequence[float],
    output_dir: str,
    workers: Optional[int] = None,
) -> List[AblationRow]:
    """
    Run every (eps_low, eps_high) cell; one run directory per cell plus ``ablation.csv``.

    Each cell is re-validated, so a threshold out of range raises
    :class:`~ennam_clipsim.exceptions.ConfigError` before any run starts.
    """
    if not eps_lows or not eps_highs:
        raise InvalidParameterError("Both eps_low and eps_high lists must be nonempty")
    cells = []
    for low in eps_lows:
        for high in eps_highs:
            config = base.replace(
                clip={
                    "eps_low": format_eps(low, CLIP_LOW_OFF),
                    "eps_high": format_eps(high, CLIP_HIGH_OFF),
                }
            )
            name = (
                f"eps_low={_eps_label(low, CLIP_LOW_OFF)}"
                f"_eps_high={_eps_label(high, CLIP_HIGH_OFF)}"
            )
            cells.append((name, config))
    logger.info("Clip ablation over %d cells", len(cells))
    return _run_grid(cells, output_dir, workers)


def parse_reward(text: str) -> RewardConfig:
    source = RewardSource.parse(text)
    return RewardConfig(kind=source.kind, p=source.p)


def ablate_rewards(
    base: RunConfig,
    rewards: Sequence[RewardConfig],
    output_dir: str,
    workers: Optional[int] = None,
) -> List[AblationRow]:
    """
    Run the base config once per reward source.

    Only ``grpo-sgd`` reads rewards; the idealized updaters draw advantages from
    the advantage model, so a pg or npg base is a :class:`ConfigError`.
    """
    if not rewards:
        raise InvalidParameterError("The reward list must be nonempty")
    if base.idealized:
        raise ConfigError(
            f"Reward ablations need updater grpo-sgd; {base.updater} ignores the reward source"
        )
    cells = []
    for reward in rewards:
        config = base.replace(reward=reward.to_dict())
        label = reward.build(base.tree, base.seed).label.replace(":", "-")
        cells.append((f"reward={label}", config))
    logger.info("Reward ablation over %d sources", len(cells))
    return _run_grid(cells, output_dir, workers)
