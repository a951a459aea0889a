"""
Django management command for the clipping-bias entropy simulator.

Runs simulations, clip and reward-source ablations and the numerical
self-checks, writing CSV traces plus the resolved config of every run.

Usage:
    python manage.py clipsim init [--output DIR] [--force]
    python manage.py clipsim simulate --config FILE [--out DIR] [--seed N]
    python manage.py clipsim validate gradients|residuals|conditions|entropy-gradient
        [--instances N] [--seed N] [--threshold X] [--steps N]
    python manage.py clipsim ablate --config FILE --eps-low a,b --eps-high x,y [--out DIR]
    python manage.py clipsim ablate --config FILE --rewards bernoulli:0.3,gaussian [--out DIR]

Outside a Django project the same command is available as ``clipsim``.

Install:
    pip install ennam-django-clipsim
"""

import logging
import os
import shutil
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from django.core.management.base import BaseCommand, CommandError

from ennam_clipsim.config import load_run_config, parse_eps
from ennam_clipsim.exceptions import ClipsimError, ConfigError, InvalidParameterError
from ennam_clipsim.experiments import (
    AblationRow,
    ablate_clipping,
    ablate_rewards,
    parse_reward,
    run_experiment,
)
from ennam_clipsim.objective import CLIP_HIGH_OFF, CLIP_LOW_OFF
from ennam_clipsim.settings import DEFAULTS, clipsim_settings
from ennam_clipsim.validation import (
    ValidationResult,
    check_conditions,
    check_entropy_gradients,
    check_residuals,
    check_surrogate_gradients,
)

VALIDATE_CHECKS = ("gradients", "residuals", "conditions", "entropy-gradient")

STARTER_CONFIGS = (
    "random_reward.yaml",
    "verifiable_task.yaml",
    "reward_ablation.yaml",
    "entropy_control.yaml",
)


class Command(BaseCommand):
    help = "Clipping-bias entropy simulator - simulate, validate and ablate"

    @property
    def templates_dir(self) -> Path:
        """Get the templates directory within the package."""
        return Path(__file__).parent.parent.parent / "templates"

    @property
    def validation_settings(self) -> Dict[str, Any]:
        # Users may override only some of the validation keys
        return {**DEFAULTS["VALIDATION"], **clipsim_settings.VALIDATION}

    def add_arguments(self, parser: Any) -> None:
        subparsers = parser.add_subparsers(
            dest="subcommand",
            title="subcommands",
            description="Available commands",
        )

        # Init subcommand
        init_parser = subparsers.add_parser(
            "init",
            help="Write starter run configs",
        )
        init_parser.add_argument(
            "--output",
            "-o",
            type=str,
            help="Output directory (default: clipsim_runs/)",
        )
        init_parser.add_argument(
            "--force",
            "-f",
            action="store_true",
            help="Overwrite existing files",
        )

        # Simulate subcommand
        simulate_parser = subparsers.add_parser(
            "simulate",
            help="Run one experiment from a config file",
        )
        simulate_parser.add_argument(
            "--config",
            "-c",
            type=str,
            required=True,
            help="YAML run config",
        )
        simulate_parser.add_argument(
            "--out",
            "-o",
            type=str,
            help="Run directory (default: clipsim_runs/)",
        )
        simulate_parser.add_argument(
            "--seed",
            type=int,
            help="Override the config seed",
        )

        # Validate subcommand
        validate_parser = subparsers.add_parser(
            "validate",
            help="Run a numerical self-check",
        )
        validate_parser.add_argument(
            "check",
            choices=VALIDATE_CHECKS,
            help="Which check to run",
        )
        validate_parser.add_argument(
            "--instances",
            type=int,
            help="Number of random instances (rows for entropy-gradient)",
        )
        validate_parser.add_argument(
            "--seed",
            type=int,
            default=0,
            help="Seed for the random instances (default: 0)",
        )
        validate_parser.add_argument(
            "--threshold",
            type=float,
            help="Acceptance fraction for the conditions check",
        )
        validate_parser.add_argument(
            "--steps",
            type=int,
            help="Number of updates for the conditions check",
        )

        # Ablate subcommand
        ablate_parser = subparsers.add_parser(
            "ablate",
            help="Run a clip or reward-source ablation grid",
        )
        ablate_parser.add_argument(
            "--config",
            "-c",
            type=str,
            required=True,
            help="YAML base run config",
        )
        ablate_parser.add_argument(
            "--eps-low",
            type=str,
            help="Comma-separated eps_low values ('off' allowed)",
        )
        ablate_parser.add_argument(
            "--eps-high",
            type=str,
            help="Comma-separated eps_high values ('off' allowed)",
        )
        ablate_parser.add_argument(
            "--rewards",
            type=str,
            help="Comma-separated reward sources, e.g. bernoulli:0.3,gaussian",
        )
        ablate_parser.add_argument(
            "--out",
            "-o",
            type=str,
            help="Grid directory (default: clipsim_runs/)",
        )
        ablate_parser.add_argument(
            "--workers",
            type=int,
            help="Worker threads (default: WORKERS setting)",
        )

    def handle(self, *args: Any, **options: Any) -> None:
        subcommand = options.get("subcommand")

        if options.get("verbosity", 1) >= 2:
            logging.getLogger("ennam_clipsim").setLevel(logging.DEBUG)

        try:
            if subcommand == "init":
                self.handle_init(options)
            elif subcommand == "simulate":
                self.handle_simulate(options)
            elif subcommand == "validate":
                self.handle_validate(options)
            elif subcommand == "ablate":
                self.handle_ablate(options)
            else:
                # No subcommand - show help
                self.print_help("manage.py", "clipsim")
        except ConfigError as exc:
            raise CommandError(f"Config error: {exc}", returncode=2) from exc
        except ClipsimError as exc:
            raise CommandError(str(exc), returncode=1) from exc

    # =========================================================================
    # Init Command
    # =========================================================================
    def handle_init(self, options: Dict[str, Any]) -> List[str]:
        """Copy the starter run configs into the output directory."""
        output_dir = clipsim_settings.get_output_dir(options.get("output"))
        force = options.get("force", False)

        self.stdout.write("Initializing clipsim run configs...")
        if not os.path.exists(output_dir):
            os.makedirs(output_dir)
            self.stdout.write(f"  Created: {output_dir}/")

        written = []
        for name in STARTER_CONFIGS:
            template_path = self.templates_dir / name
            if not template_path.exists():
                self.stdout.write(self.style.WARNING(f"  Template not found: {name}"))
                continue
            dest_path = os.path.join(output_dir, name)
            if os.path.exists(dest_path) and not force:
                self.stdout.write(f"  Skipped (exists): {name}")
                continue
            shutil.copy(template_path, dest_path)
            written.append(dest_path)
            self.stdout.write(self.style.SUCCESS(f"  Created: {name}"))

        self.stdout.write("\nNext steps:")
        self.stdout.write(
            f"  Run: clipsim simulate --config {os.path.join(output_dir, STARTER_CONFIGS[0])}"
        )
        return written

    # =========================================================================
    # Simulate Command
    # =========================================================================
    def handle_simulate(self, options: Dict[str, Any]) -> str:
        """Run one experiment and report its entropy trace endpoints."""
        config = load_run_config(options["config"], seed=options.get("seed"))
        out = clipsim_settings.get_output_dir(options.get("out"))

        self.stdout.write(
            f"Simulating {config.updater}, {config.steps} updates, seed {config.seed}..."
        )
        artifacts = run_experiment(config, out)

        self.stdout.write(f"  Initial entropy: {artifacts.initial_entropy:.6f}")
        self.stdout.write(f"  Final entropy:   {artifacts.final_entropy:.6f}")
        final = artifacts.final_eval
        if final is not None and final.get("pass_at_k") is not None:
            self.stdout.write(
                f"  Final pass@{config.evaluation.k}: {final['pass_at_k']:.4f}"
                f"  mean@{config.evaluation.k}: {final['mean_at_k']:.4f}"
            )
        self.stdout.write(self.style.SUCCESS(f"Run written to: {out}"))
        return out

    # =========================================================================
    # Validate Command
    # =========================================================================
    def handle_validate(self, options: Dict[str, Any]) -> List[ValidationResult]:
        """Run one self-check; fail with return code 1 when it does not pass."""
        check = options["check"]
        seed = options.get("seed", 0)
        instances = options.get("instances")
        cfg = self.validation_settings

        if check == "gradients":
            results = [
                check_surrogate_gradients(
                    instances=instances or cfg["gradient_instances"],
                    seed=seed,
                    tolerance=cfg["gradient_tolerance"],
                )
            ]
        elif check == "entropy-gradient":
            results = [
                check_entropy_gradients(
                    rows=instances or cfg["entropy_gradient_rows"],
                    seed=seed,
                    tolerance=cfg["entropy_gradient_tolerance"],
                )
            ]
        elif check == "residuals":
            count = instances or cfg["residual_instances"]
            # The passing count setting belongs to the default instance count
            min_passing = (
                cfg["residual_min_passing"] if count == cfg["residual_instances"] else None
            )
            results = [
                check_residuals(
                    updater,
                    instances=count,
                    seed=seed,
                    etas=cfg["residual_etas"],
                    min_slope=cfg["residual_min_slope"],
                    min_passing=min_passing,
                )
                for updater in ("pg", "npg")
            ]
        else:
            threshold = options.get("threshold")
            results = [
                check_conditions(
                    steps=options.get("steps") or cfg["condition_steps"],
                    seed=seed,
                    threshold=cfg["condition_threshold"] if threshold is None else threshold,
                )
            ]

        for result in results:
            self._print_result(result)

        failed = [r.name for r in results if not r.passed]
        if failed:
            raise CommandError(f"Validation failed: {', '.join(failed)}", returncode=1)
        return results

    def _print_result(self, result: ValidationResult) -> None:
        self.stdout.write(f"\n{result.name}: {result.message}")
        self.stdout.write("  " + "  ".join(result.headers))
        for row in result.rows:
            self.stdout.write("  " + "  ".join(self._format_cell(v) for v in row))
        if result.passed:
            self.stdout.write(self.style.SUCCESS(f"[PASS] {result.name}"))
        else:
            self.stdout.write(self.style.ERROR(f"[FAIL] {result.name}"))

    @staticmethod
    def _format_cell(value: Any) -> str:
        if value is None:
            return "-"
        if isinstance(value, float):
            return f"{value:.4g}"
        return str(value)

    # =========================================================================
    # Ablate Command
    # =========================================================================
    def handle_ablate(self, options: Dict[str, Any]) -> List[AblationRow]:
        """Run a clip grid (--eps-low/--eps-high) or a reward grid (--rewards)."""
        base = load_run_config(options["config"])
        out = clipsim_settings.get_output_dir(options.get("out"))
        workers = options.get("workers")
        rewards = options.get("rewards")
        eps_low, eps_high = options.get("eps_low"), options.get("eps_high")

        if rewards and (eps_low or eps_high):
            raise CommandError("Use either --rewards or --eps-low/--eps-high, not both")
        if rewards:
            try:
                sources = [parse_reward(item) for item in _split(rewards)]
            except InvalidParameterError as exc:
                raise ConfigError(str(exc)) from exc
            self.stdout.write(f"Reward ablation over {len(sources)} sources...")
            rows = ablate_rewards(base, sources, out, workers=workers)
        elif eps_low or eps_high:
            lows = self._parse_eps_list(eps_low, CLIP_LOW_OFF, "--eps-low", base.clip.eps_low)
            highs = self._parse_eps_list(
                eps_high, CLIP_HIGH_OFF, "--eps-high", base.clip.eps_high
            )
            self.stdout.write(f"Clip ablation over {len(lows) * len(highs)} cells...")
            rows = ablate_clipping(base, lows, highs, out, workers=workers)
        else:
            raise CommandError("ablate needs --eps-low/--eps-high or --rewards")

        self.stdout.write("  eps_low  eps_high  reward  entropy_ratio")
        for row in rows:
            eps_low_cell, eps_high_cell, reward = row.as_row()[:3]
            self.stdout.write(
                f"  {eps_low_cell}  {eps_high_cell}  {reward}  {row.entropy_ratio:.4f}"
            )
        self.stdout.write(
            self.style.SUCCESS(f"Ablation written to: {os.path.join(out, 'ablation.csv')}")
        )
        return rows

    @staticmethod
    def _parse_eps_list(
        text: Optional[str], off: float, name: str, fallback: float
    ) -> List[float]:
        if not text:
            return [fallback]
        return [parse_eps(item, off, name) for item in _split(text)]


def _split(text: str) -> Sequence[str]:
    items = [item.strip() for item in text.split(",") if item.strip()]
    if not items:
        raise ConfigError(f"Empty list: '{text}'")
    return items
