"""
Settings configuration for ennam-django-clipsim.

Usage in Django settings.py:

    CLIPSIM_SETTINGS = {
        'OUTPUT_DIR': '/path/to/clipsim_runs/',
        'EXACT_STATE_BUDGET': 200000,
        'WORKERS': 4,
        'RUN_DEFAULTS': {
            'tree': {'vocab_size': 6, 'horizon': 3, 'prompt_count': 4},
            'clip': {'eps_low': 0.2, 'eps_high': 0.2},
        },
    }

Outside a Django project (plain library use or the ``clipsim`` console
script) the user settings are empty and environment variables and defaults
apply.
"""

import copy
import os
from typing import Any, Callable, Dict, Optional, Set, cast

from django.conf import settings

RUN_DEFAULTS: Dict[str, Any] = {
    "tree": {
        "vocab_size": 6,
        "horizon": 3,
        "prompt_count": 4,
        "prompt_weights": None,  # None = uniform over prompts
    },
    "reward": {
        "kind": "bernoulli",
        "p": 0.5,
        "target_count": 1,  # verifiable task only
    },
    "clip": {
        "eps_low": 0.2,
        "eps_high": 0.2,
    },
    "updater": "pg",
    "advantage": {
        "mu": 0.5,
        "nu": 0.5,
    },
    # Rollout and optimizer settings for grpo-sgd
    "optimizer": {
        "prompts_per_batch": 64,
        "group_size": 8,
        "inner_updates": 16,
        "minibatch_size": 256,
        "learning_rate": 5.0e-7,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1.0e-8,
        "weight_decay": 0.0,
    },
    "steps": 500,
    "refresh_period": None,  # Default: 1 for pg/npg, optimizer.inner_updates for grpo-sgd
    "eta": None,  # Default: per-updater value from IDEALIZED_ETA
    "snapshot_samples": 1024,  # pg/npg: draws per state behind the old-policy estimate
    "rollouts_per_step": 64,
    "init": {
        "logit_scale": 1.5,
    },
    "seed": 0,
    "evaluation": {
        "k": 8,
        "interval": 10,
        "samples": None,  # None = exactly k responses per prompt
        "temperature": 1.0,
    },
}

DEFAULTS: Dict[str, Any] = {
    # Output configuration
    "OUTPUT_DIR": None,  # Default: <cwd>/clipsim_runs/
    # Exact enumeration refuses trees with more than this many leaves
    "EXACT_STATE_BUDGET": 200_000,
    # Worker threads for ablation grids
    "WORKERS": 1,
    "RUN_DEFAULTS": RUN_DEFAULTS,
    "IDEALIZED_ETA": {"pg": 100.0, "npg": 8.0},
    "IDEALIZED_REFRESH_PERIOD": 1,
    # Acceptance settings for the validate subcommands
    "VALIDATION": {
        "gradient_instances": 100,
        "gradient_tolerance": 1e-4,
        "entropy_gradient_rows": 100,
        "entropy_gradient_tolerance": 1e-6,
        "residual_instances": 20,
        "residual_min_slope": 1.8,
        "residual_min_passing": 18,
        "residual_etas": [1e-4, 3e-4, 1e-3, 3e-3, 1e-2],
        "condition_steps": 100,
        "condition_threshold": 0.95,
    },
}

ENVIRONMENT_OVERRIDES: Dict[str, Callable[[str], Any]] = {
    "OUTPUT_DIR": str,
    "EXACT_STATE_BUDGET": int,
    "WORKERS": int,
}


class ClipsimSettings:
    """
    A settings object that allows clipsim settings to be accessed as properties.

    Settings are read from Django's settings.py under the CLIPSIM_SETTINGS dict,
    with fallback to environment variables (CLIPSIM_<KEY>) and defaults.

    Example:
        from ennam_clipsim.settings import clipsim_settings

        budget = clipsim_settings.EXACT_STATE_BUDGET
        output_dir = clipsim_settings.get_output_dir()
    """

    def __init__(self) -> None:
        self.defaults: Dict[str, Any] = DEFAULTS
        self._cached_attrs: Set[str] = set()

    @property
    def user_settings(self) -> Dict[str, Any]:
        """Get user-defined settings from Django settings, if Django is configured."""
        if not hasattr(self, "_user_settings"):
            if settings.configured:
                self._user_settings = getattr(settings, "CLIPSIM_SETTINGS", {}) or {}
            else:
                self._user_settings = {}
        return self._user_settings

    def __getattr__(self, attr: str) -> Any:
        if attr.startswith("_") or attr not in self.defaults:
            raise AttributeError(f"Invalid clipsim setting: '{attr}'")

        try:
            val = self.user_settings[attr]
        except KeyError:
            env_value = os.environ.get(f"CLIPSIM_{attr}")
            if env_value is not None and attr in ENVIRONMENT_OVERRIDES:
                val = ENVIRONMENT_OVERRIDES[attr](env_value)
            else:
                # Nested defaults are handed out as copies so callers can merge into them
                val = copy.deepcopy(self.defaults[attr])

        self._cached_attrs.add(attr)
        setattr(self, attr, val)
        return val

    def get_output_dir(self, override: Optional[str] = None) -> str:
        """Get the output directory; a command-line override wins over settings."""
        output_dir = override or self.OUTPUT_DIR
        if not output_dir:
            output_dir = os.path.join(os.getcwd(), "clipsim_runs")
        return cast(str, output_dir)

    def reload(self) -> None:
        """Reload settings (useful for testing)."""
        for attr in self._cached_attrs:
            try:
                delattr(self, attr)
            except AttributeError:
                pass
        self._cached_attrs.clear()
        if hasattr(self, "_user_settings"):
            delattr(self, "_user_settings")


# Global settings instance
clipsim_settings = ClipsimSettings()
