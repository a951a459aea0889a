"""
Tests for the numerical self-checks.
"""

import numpy as np
import pytest

from ennam_clipsim.env import TreeSpec
from ennam_clipsim.objective import ClipConfig, clip_event_table
from ennam_clipsim.validation import (
    ValidationResult,
    check_conditions,
    check_entropy_gradients,
    check_residuals,
    check_surrogate_gradients,
    finite_difference,
    relative_error,
    residual_instance,
)


class TestHelpers:
    """Tests for the finite-difference helpers."""

    def test_finite_difference_quadratic(self):
        x0 = np.array([[1.0, -2.0], [0.5, 3.0]])
        grad = finite_difference(lambda x: float((x**2).sum()), x0, 1e-5)
        np.testing.assert_allclose(grad, 2 * x0, rtol=1e-8)

    def test_finite_difference_restores_input(self):
        x0 = np.array([0.3, 0.7])
        finite_difference(lambda x: float(x.sum()), x0, 1e-3)
        np.testing.assert_array_equal(x0, [0.3, 0.7])

    def test_relative_error_floor(self):
        """Tiny references are compared on an absolute scale."""
        assert relative_error(np.array([2e-6]), np.array([1e-6])) == pytest.approx(1e-3)
        assert relative_error(np.array([1.1]), np.array([1.0])) == pytest.approx(0.1)

    def test_residual_instance_has_events(self, rng):
        spec = TreeSpec(5, 2)
        clip = ClipConfig()
        policy, snapshot, old = residual_instance(rng, spec, clip)
        assert clip_event_table(policy, snapshot, clip).has_events
        np.testing.assert_allclose(old.probs(), snapshot.probs)


class TestChecks:
    """Small runs of every check; each is expected to pass."""

    def test_surrogate_gradients(self):
        result = check_surrogate_gradients(instances=20, seed=1)
        assert isinstance(result, ValidationResult)
        assert result.passed, result.rows
        instances, _, worst, _, mismatches = result.rows[0]
        assert instances == 20
        assert worst <= 1e-4
        assert mismatches == 0

    def test_entropy_gradients(self):
        result = check_entropy_gradients(rows=20, seed=2)
        assert result.passed, result.rows
        assert result.headers == ("rows", "max_rel_error", "tolerance")

    @pytest.mark.parametrize("updater", ["pg", "npg"])
    def test_residuals(self, updater):
        """First-order predictions leave a second-order residual."""
        result = check_residuals(updater, instances=5, seed=3, min_passing=4)
        assert result.name == f"residuals-{updater}"
        assert result.passed, result.message
        assert len(result.rows) == 5

    def test_conditions(self):
        """With the default tree and thresholds every condition is measured and holds."""
        result = check_conditions()
        assert result.passed, result.message
        assert [row[0] for row in result.rows] == [
            "qcond_low", "qcond_high", "logcond_low", "logcond_high",
        ]
        assert all(row[1] > 0 for row in result.rows)

    def test_conditions_without_clip_events_fail(self, mock_clipsim_settings):
        """No clip event means nothing was measured, which is not a pass."""
        result = check_conditions(steps=8, seed=0, eps_low="off", eps_high="off")
        assert all(row[2] is None for row in result.rows)
        assert not result.passed
        assert "no clip events" in result.message

    def test_conditions_unreachable_threshold(self, mock_clipsim_settings):
        """A threshold above 1 fails as soon as any condition is measured."""
        result = check_conditions(steps=16, seed=0, threshold=1.1)
        measured = [row for row in result.rows if row[2] is not None]
        assert measured
        assert not result.passed
