"""
Run configuration.

A run config is a YAML document with nested sections. It is merged over the
``RUN_DEFAULTS`` setting, every key is checked against the defaults (unknown
keys are an error at any level) and every value is type- and range-checked.

Clip thresholds accept ``off``; note that unquoted ``off`` is the boolean
false in YAML, which is read the same way.
"""

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np
import yaml

from .env import TreeSpec
from .exceptions import ClipsimError, ConfigError
from .objective import CLIP_HIGH_OFF, CLIP_LOW_OFF, ClipConfig
from .rewards import REWARD_KINDS, AdvantageModel, RewardSource, toy_targets
from .settings import RUN_DEFAULTS, clipsim_settings
from .training import OptimizerConfig

UPDATERS = ("pg", "npg", "grpo-sgd")

# Stream key mixed into the run seed for drawing verifiable targets
TARGET_STREAM = 0x7A26


@dataclass(frozen=True)
class RewardConfig:
    kind: str = "bernoulli"
    p: float = 0.5
    target_count: int = 1

    def build(self, spec: TreeSpec, seed: int) -> RewardSource:
        """Reward source for a run; verifiable targets depend only on (spec, seed)."""
        if self.kind == "verifiable":
            rng = np.random.default_rng([seed, TARGET_STREAM])
            return RewardSource.verifiable(toy_targets(spec, self.target_count, rng))
        return RewardSource(self.kind, p=self.p)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "p": self.p, "target_count": self.target_count}


@dataclass(frozen=True)
class EvaluationConfig:
    k: int = 8
    interval: int = 10
    samples: Optional[int] = None
    temperature: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    tree: TreeSpec
    reward: RewardConfig
    clip: ClipConfig
    updater: str
    advantage: AdvantageModel
    optimizer: OptimizerConfig
    steps: int
    refresh_period: int
    eta: Optional[float]
    snapshot_samples: int
    rollouts_per_step: int
    logit_scale: float
    seed: int
    evaluation: EvaluationConfig

    @property
    def idealized(self) -> bool:
        return self.updater in ("pg", "npg")

    def replace(self, **changes: Any) -> "RunConfig":
        """A copy with top-level sections replaced, re-validated."""
        raw = self.to_dict()
        for key, value in changes.items():
            raw[key] = value
        return resolve_run_config(raw, use_settings=False)

    def to_dict(self) -> Dict[str, Any]:
        """The fully resolved config in file form."""
        return {
            "tree": {
                "vocab_size": self.tree.vocab_size,
                "horizon": self.tree.horizon,
                "prompt_count": self.tree.prompt_count,
                "prompt_weights": list(self.tree.prompt_weights or ()),
            },
            "reward": self.reward.to_dict(),
            "clip": {
                "eps_low": format_eps(self.clip.eps_low, CLIP_LOW_OFF),
                "eps_high": format_eps(self.clip.eps_high, CLIP_HIGH_OFF),
            },
            "updater": self.updater,
            "advantage": {"mu": self.advantage.mu, "nu": self.advantage.nu},
            "optimizer": {
                "prompts_per_batch": self.optimizer.prompts_per_batch,
                "group_size": self.optimizer.group_size,
                "inner_updates": self.optimizer.inner_updates,
                "minibatch_size": self.optimizer.minibatch_size,
                "learning_rate": self.optimizer.learning_rate,
                "beta1": self.optimizer.beta1,
                "beta2": self.optimizer.beta2,
                "epsilon": self.optimizer.epsilon,
                "weight_decay": self.optimizer.weight_decay,
            },
            "steps": self.steps,
            "refresh_period": self.refresh_period,
            "eta": self.eta,
            "snapshot_samples": self.snapshot_samples,
            "rollouts_per_step": self.rollouts_per_step,
            "init": {"logit_scale": self.logit_scale},
            "seed": self.seed,
            "evaluation": {
                "k": self.evaluation.k,
                "interval": self.evaluation.interval,
                "samples": self.evaluation.samples,
                "temperature": self.evaluation.temperature,
            },
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)


def format_eps(value: float, off: float) -> Union[float, str]:
    return "off" if value == off else value


def parse_eps(value: Any, off: float, name: str) -> float:
    """Read a clip epsilon; ``off`` (or YAML false) selects the disabling sentinel."""
    if value is False or (isinstance(value, str) and value.strip().lower() == "off"):
        return off
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError as exc:
            raise ConfigError(f"{name} must be a number or 'off', got '{value}'") from exc
    return _number(value, name)


def _number(value: Any, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    return float(value)


def _integer(value: Any, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(f"{name} must be at least {minimum}, got {value}")
    return value


def _merge(defaults: Mapping[str, Any], raw: Mapping[str, Any], path: str = "") -> Dict[str, Any]:
    merged = copy.deepcopy(dict(defaults))
    for key, value in raw.items():
        where = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"Unknown config key '{where}'")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"Config section '{where}' must be a mapping")
            merged[key] = _merge(defaults[key], value, f"{where}.")
        else:
            merged[key] = value
    return merged


def _run_defaults(use_settings: bool) -> Dict[str, Any]:
    if not use_settings:
        return copy.deepcopy(RUN_DEFAULTS)
    # Settings may override only part of the defaults
    return _merge(RUN_DEFAULTS, clipsim_settings.RUN_DEFAULTS)


def resolve_run_config(
    raw: Optional[Mapping[str, Any]] = None,
    seed: Optional[int] = None,
    use_settings: bool = True,
) -> RunConfig:
    """Merge ``raw`` over the defaults, validate it and resolve per-updater defaults."""
    if raw is not None and not isinstance(raw, Mapping):
        raise ConfigError("A run config must be a mapping of sections")
    data = _merge(_run_defaults(use_settings), raw or {})
    if seed is not None:
        data["seed"] = seed
    try:
        return _build(data)
    except ConfigError:
        raise
    except ClipsimError as exc:
        raise ConfigError(str(exc)) from exc


def _build(data: Dict[str, Any]) -> RunConfig:
    tree_raw = data["tree"]
    weights = tree_raw["prompt_weights"]
    tree = TreeSpec(
        vocab_size=_integer(tree_raw["vocab_size"], "tree.vocab_size"),
        horizon=_integer(tree_raw["horizon"], "tree.horizon"),
        prompt_count=_integer(tree_raw["prompt_count"], "tree.prompt_count"),
        prompt_weights=None
        if weights is None
        else tuple(_number(w, "tree.prompt_weights") for w in weights),
    )

    reward_raw = data["reward"]
    if reward_raw["kind"] not in REWARD_KINDS:
        raise ConfigError(
            f"reward.kind must be one of {', '.join(REWARD_KINDS)}, got {reward_raw['kind']!r}"
        )
    reward = RewardConfig(
        kind=reward_raw["kind"],
        p=_number(reward_raw["p"], "reward.p"),
        target_count=_integer(reward_raw["target_count"], "reward.target_count"),
    )
    if not 0.0 <= reward.p <= 1.0:
        raise ConfigError(f"reward.p must lie in [0, 1], got {reward.p}")
    if reward.kind == "verifiable" and reward.target_count > tree.vocab_size**tree.horizon:
        raise ConfigError("reward.target_count exceeds the number of distinct responses")

    clip = ClipConfig(
        eps_low=parse_eps(data["clip"]["eps_low"], CLIP_LOW_OFF, "clip.eps_low"),
        eps_high=parse_eps(data["clip"]["eps_high"], CLIP_HIGH_OFF, "clip.eps_high"),
    )

    updater = data["updater"]
    if updater not in UPDATERS:
        raise ConfigError(f"updater must be one of {', '.join(UPDATERS)}, got {updater!r}")

    advantage = AdvantageModel(
        nu=_number(data["advantage"]["nu"], "advantage.nu"),
        mu=_number(data["advantage"]["mu"], "advantage.mu"),
    )

    opt_raw = data["optimizer"]
    optimizer = OptimizerConfig(
        prompts_per_batch=_integer(opt_raw["prompts_per_batch"], "optimizer.prompts_per_batch"),
        group_size=_integer(opt_raw["group_size"], "optimizer.group_size", minimum=2),
        inner_updates=_integer(opt_raw["inner_updates"], "optimizer.inner_updates"),
        minibatch_size=_integer(opt_raw["minibatch_size"], "optimizer.minibatch_size"),
        learning_rate=_number(opt_raw["learning_rate"], "optimizer.learning_rate"),
        beta1=_number(opt_raw["beta1"], "optimizer.beta1"),
        beta2=_number(opt_raw["beta2"], "optimizer.beta2"),
        epsilon=_number(opt_raw["epsilon"], "optimizer.epsilon"),
        weight_decay=_number(opt_raw["weight_decay"], "optimizer.weight_decay"),
    )

    refresh = data["refresh_period"]
    eta = data["eta"]
    if updater == "grpo-sgd":
        if refresh is not None and refresh != optimizer.inner_updates:
            raise ConfigError("For grpo-sgd, refresh_period must equal optimizer.inner_updates")
        refresh = optimizer.inner_updates
        eta = None
    else:
        refresh = clipsim_settings.IDEALIZED_REFRESH_PERIOD if refresh is None else refresh
        eta = clipsim_settings.IDEALIZED_ETA[updater] if eta is None else eta
        eta = _number(eta, "eta")
        if eta < 0.0:
            raise ConfigError(f"eta must be nonnegative, got {eta}")
    refresh = _integer(refresh, "refresh_period")

    eval_raw = data["evaluation"]
    evaluation = EvaluationConfig(
        k=_integer(eval_raw["k"], "evaluation.k"),
        interval=_integer(eval_raw["interval"], "evaluation.interval"),
        samples=None
        if eval_raw["samples"] is None
        else _integer(eval_raw["samples"], "evaluation.samples"),
        temperature=_number(eval_raw["temperature"], "evaluation.temperature"),
    )
    if evaluation.samples is not None and evaluation.samples < evaluation.k:
        raise ConfigError("evaluation.samples must be at least evaluation.k")
    if evaluation.temperature <= 0.0:
        raise ConfigError("evaluation.temperature must be positive")

    logit_scale = _number(data["init"]["logit_scale"], "init.logit_scale")
    if logit_scale < 0.0:
        raise ConfigError("init.logit_scale must be nonnegative")

    return RunConfig(
        tree=tree,
        reward=reward,
        clip=clip,
        updater=updater,
        advantage=advantage,
        optimizer=optimizer,
        steps=_integer(data["steps"], "steps"),
        refresh_period=refresh,
        eta=eta,
        snapshot_samples=_integer(data["snapshot_samples"], "snapshot_samples"),
        rollouts_per_step=_integer(data["rollouts_per_step"], "rollouts_per_step"),
        logit_scale=logit_scale,
        seed=_integer(data["seed"], "seed", minimum=0),
        evaluation=evaluation,
    )


def load_run_config(path: Union[str, Path], seed: Optional[int] = None) -> RunConfig:
    """Read and resolve a YAML run config; ``seed`` overrides the file's seed."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = yaml.safe_load(handle)
    except OSError as exc:
        raise ConfigError(f"Cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"Config file {path} is not valid YAML: {exc}") from exc
    return resolve_run_config(raw, seed=seed)
