"""
Tests for the clipped surrogate, clip events and the idealized updates.
"""

import math

import numpy as np
import pytest

from ennam_clipsim.env import RolloutBatch, TreeSpec, VisitationMeasure, rollout_batch
from ennam_clipsim.exceptions import EmptyBatchError, InvalidParameterError
from ennam_clipsim.objective import (
    CLIP_HIGH_OFF,
    CLIP_LOW_OFF,
    AdvantageBatch,
    ClipConfig,
    clip_event_table,
    detect_clip_events,
    npg_step,
    pg_step,
    piecewise_surrogate_gradient,
    piecewise_surrogate_value,
    reinforce_gradient,
    surrogate_gradient,
    surrogate_value,
)
from ennam_clipsim.policy import PolicySnapshot, PolicyTable, entropies
from ennam_clipsim.rewards import AdvantageModel, RolloutGroup, group_advantages
from ennam_clipsim.validation import finite_difference, relative_error

HALF = AdvantageModel(nu=0.5, mu=0.5)
UNIT_MASS = VisitationMeasure(np.array([1.0]), horizon=1)


def one_step_batch(tokens, advantages) -> AdvantageBatch:
    """Single-prompt, one-token batch on the root state."""
    n = len(tokens)
    batch = RolloutBatch(
        np.zeros(n, dtype=np.int64),
        np.array(tokens, dtype=np.int64)[:, None],
        np.zeros((n, 1), dtype=np.int64),
        np.zeros((n, 1)),
    )
    return AdvantageBatch(batch, np.array(advantages, dtype=np.float64))


@pytest.fixture
def skewed_pair():
    """Current (0.75, 0.25) against old (0.5, 0.5): ratios 1.5 and 0.5."""
    return PolicyTable.from_probs(np.array([[0.75, 0.25]])), PolicySnapshot(np.array([[0.5, 0.5]]))


class TestClipConfig:
    """Tests for ClipConfig."""

    def test_thresholds(self):
        """Thresholds are 1 - eps_low and 1 + eps_high."""
        clip = ClipConfig(0.1, 0.28)
        assert clip.low == pytest.approx(0.9)
        assert clip.high == pytest.approx(1.28)

    def test_off_sentinels(self):
        """The off sentinels put the thresholds at 0 and infinity."""
        clip = ClipConfig(CLIP_LOW_OFF, CLIP_HIGH_OFF)
        assert clip.low == 0.0 and clip.low_off
        assert math.isinf(clip.high) and clip.high_off

    def test_validation(self):
        """eps_low must lie in (0, 1] and eps_high must be positive."""
        for low, high in [(0.0, 0.2), (1.5, 0.2), (0.2, 0.0)]:
            with pytest.raises(InvalidParameterError):
                ClipConfig(low, high)


class TestSurrogateValue:
    """Tests for surrogate_value."""

    def test_hand_computed(self, skewed_pair):
        """Min-form terms 1.2, 0.5, -1.5, -0.8 average to -0.15."""
        policy, snapshot = skewed_pair
        data = one_step_batch([0, 1, 0, 1], [1.0, 1.0, -1.0, -1.0])
        assert surrogate_value(policy, snapshot, data, ClipConfig()) == pytest.approx(-0.15)

    def test_clip_high_off(self, skewed_pair):
        """Without clip-high the positive-advantage token keeps ratio 1.5."""
        policy, snapshot = skewed_pair
        data = one_step_batch([0, 1, 0, 1], [1.0, 1.0, -1.0, -1.0])
        value = surrogate_value(policy, snapshot, data, ClipConfig(0.2, CLIP_HIGH_OFF))
        assert value == pytest.approx(-0.075)

    def test_accepts_groups(self, small_spec, rng):
        """A list of rollout groups is the same as their concatenated batch."""
        policy = PolicyTable.random(small_spec.state_count, 3, rng)
        groups = [
            RolloutGroup.from_rewards(
                rollout_batch(policy, small_spec, 0, rng, prompts=np.full(4, p)),
                rng.standard_normal(4),
            )
            for p in (0, 1)
        ]
        current = policy.with_logits(policy.logits + 0.2)
        value = surrogate_value(current, policy.snapshot(), groups, ClipConfig())
        data = AdvantageBatch.from_groups(groups)
        assert value == surrogate_value(current, policy.snapshot(), data, ClipConfig())

    def test_empty_batch(self):
        """A batch without trajectories is rejected."""
        with pytest.raises(EmptyBatchError):
            one_step_batch([], [])
        with pytest.raises(EmptyBatchError):
            AdvantageBatch.from_groups([])


class TestSurrogateGradient:
    """Tests for surrogate_gradient."""

    def test_all_tokens_clipped(self, skewed_pair):
        """Tokens in their clipped region contribute no gradient."""
        policy, snapshot = skewed_pair
        data = one_step_batch([0, 1], [1.0, -1.0])
        np.testing.assert_array_equal(surrogate_gradient(policy, snapshot, data, ClipConfig()), 0.0)

    def test_matches_reinforce_at_snapshot(self, small_spec, rng):
        """At policy = snapshot the clip is inactive and the gradient is REINFORCE."""
        policy = PolicyTable.random(small_spec.state_count, 3, rng)
        batch = rollout_batch(policy, small_spec, 0, rng, prompts=np.zeros(8, dtype=np.int64))
        group = RolloutGroup.from_rewards(batch, (rng.random(8) < 0.5).astype(float))
        grad = surrogate_gradient(policy, policy.snapshot(), [group], ClipConfig())
        np.testing.assert_allclose(grad, reinforce_gradient(policy, [group]), atol=1e-12)

    def test_finite_differences(self, oracle_spec):
        """The analytic gradient matches centered differences away from the kinks."""
        rng = np.random.default_rng(21)
        clips = (ClipConfig(0.2, 0.2), ClipConfig(0.2, CLIP_HIGH_OFF))
        while True:
            old = PolicyTable.random(oracle_spec.state_count, 5, rng)
            batch = rollout_batch(old, oracle_spec, 4, rng)
            data = AdvantageBatch(batch, group_advantages(rng.standard_normal(4)))
            policy = old.with_logits(old.logits + 0.3 * rng.standard_normal(old.logits.shape))
            snapshot = old.snapshot()
            picked = (batch.states, batch.tokens)
            r = policy.probs()[picked] / snapshot.probs[picked]
            if np.all(np.abs(r - 0.8) > 1e-4) and np.all(np.abs(r - 1.2) > 1e-4):
                break
        for clip in clips:
            numeric = finite_difference(
                lambda logits: surrogate_value(policy.with_logits(logits), snapshot, data, clip),
                policy.logits,
                1e-5,
            )
            analytic = surrogate_gradient(policy, snapshot, data, clip)
            assert relative_error(analytic, numeric) <= 1e-4

    def test_piecewise_form_agrees(self, oracle_spec, rng):
        """The indicator decomposition equals the min form exactly."""
        old = PolicyTable.random(oracle_spec.state_count, 5, rng)
        data = AdvantageBatch(rollout_batch(old, oracle_spec, 16, rng), rng.standard_normal(16))
        policy = old.with_logits(old.logits + 0.5 * rng.standard_normal(old.logits.shape))
        for clip in (ClipConfig(), ClipConfig(0.1, 0.28), ClipConfig(CLIP_LOW_OFF, CLIP_HIGH_OFF)):
            snapshot = old.snapshot()
            assert surrogate_value(policy, snapshot, data, clip) == piecewise_surrogate_value(
                policy, snapshot, data, clip
            )
            np.testing.assert_array_equal(
                surrogate_gradient(policy, snapshot, data, clip),
                piecewise_surrogate_gradient(policy, snapshot, data, clip),
            )


class TestReinforceGradient:
    """Tests for reinforce_gradient."""

    def test_zero_advantages(self, small_spec, rng):
        """Zero advantages give a zero gradient."""
        policy = PolicyTable.random(small_spec.state_count, 3, rng)
        data = AdvantageBatch(rollout_batch(policy, small_spec, 10, rng), np.zeros(10))
        np.testing.assert_array_equal(reinforce_gradient(policy, data), 0.0)

    def test_random_rewards_have_zero_mean(self):
        """Averaged over many random-reward batches the gradient vanishes within 4 sigma."""
        rng = np.random.default_rng(8)
        spec = TreeSpec(2, 2)
        policy = PolicyTable.random(spec.state_count, 2, rng)
        samples = []
        for _ in range(4000):
            batch = rollout_batch(policy, spec, 8, rng)
            group = RolloutGroup.from_rewards(batch, (rng.random(8) < 0.5).astype(float))
            samples.append(reinforce_gradient(policy, [group]))
        samples = np.array(samples)
        mean = samples.mean(axis=0)
        stderr = samples.std(axis=0) / math.sqrt(len(samples))
        assert np.all(np.abs(mean) <= 4 * stderr + 1e-15)


class TestClipEvents:
    """Tests for clip-event detection."""

    def test_no_events_at_snapshot(self, small_spec, rng):
        """A policy against its own snapshot has no events."""
        policy = PolicyTable.random(small_spec.state_count, 3, rng)
        report = detect_clip_events(policy, policy.snapshot(), 0, ClipConfig())
        assert report.low == () and report.high == ()
        assert report.p == 0.0 and report.q == 0.0

    def test_low_event(self):
        """Ratio 0.7 with eps_low 0.2 is a clip-low event; masses use both policies."""
        policy = PolicyTable.from_probs(np.array([[0.35, 0.65]]))
        snapshot = PolicySnapshot(np.array([[0.5, 0.5]]))
        report = detect_clip_events(policy, snapshot, 0, ClipConfig(0.2, 0.4))
        assert report.low == (0,) and report.high == ()
        assert report.p == pytest.approx(0.35)
        assert report.p_old == pytest.approx(0.5)
        assert report.h == (1.0, 0.0)

    def test_clip_high_off(self, rng):
        """Without an upper threshold no action is ever clip-high."""
        policy = PolicyTable.random(20, 4, rng, scale=3.0)
        snapshot = PolicyTable.random(20, 4, rng, scale=3.0).snapshot()
        table = clip_event_table(policy, snapshot, ClipConfig(0.2, CLIP_HIGH_OFF))
        assert not table.high.any()
        np.testing.assert_array_equal(table.q, 0.0)

    def test_monotone_in_eps(self, rng):
        """Wider clip ranges never add events."""
        policy = PolicyTable.random(30, 5, rng)
        snapshot = PolicyTable.random(30, 5, rng).snapshot()
        tables = [clip_event_table(policy, snapshot, ClipConfig(e, e)) for e in (0.1, 0.2, 0.3)]
        for narrow, wide in zip(tables, tables[1:]):
            assert not np.any(wide.low & ~narrow.low)
            assert not np.any(wide.high & ~narrow.high)


class TestPgStep:
    """Tests for the idealized policy-gradient step."""

    def test_no_events_unchanged(self, small_spec, rng):
        """Without clip events the policy does not move."""
        policy = PolicyTable.random(small_spec.state_count, 3, rng)
        visitation = VisitationMeasure(np.ones(small_spec.state_count), small_spec.horizon)
        updated = pg_step(policy, policy.snapshot(), HALF, ClipConfig(), 5.0, visitation)
        np.testing.assert_array_equal(updated.logits, policy.logits)

    def test_formula_oracle(self):
        """pi = (0.2, 0.3, 0.5) with only action 0 clip-low, mu = nu = 0.5, eta = 0.1."""
        policy = PolicyTable.from_probs(np.array([[0.2, 0.3, 0.5]]))
        snapshot = PolicySnapshot(np.array([[0.3, 0.27, 0.43]]))
        report = detect_clip_events(policy, snapshot, 0, ClipConfig())
        assert report.low == (0,) and report.high == ()
        updated = pg_step(policy, snapshot, HALF, ClipConfig(), 0.1, UNIT_MASS)
        pi, h = np.array([0.2, 0.3, 0.5]), np.array([1.0, 0.0, 0.0])
        expected = 0.5 * 0.5 * 0.1 * pi * (h - pi @ h)
        np.testing.assert_allclose(updated.logits - policy.logits, [expected], atol=1e-12)

    def test_centered_and_equivariant(self, rng):
        """Per-state logit changes sum to zero and commute with action relabeling."""
        policy = PolicyTable.random(10, 4, rng)
        snapshot = PolicyTable.random(10, 4, rng).snapshot()
        visitation = VisitationMeasure(rng.random(10), 1)
        updated = pg_step(policy, snapshot, HALF, ClipConfig(), 2.0, visitation)
        delta = updated.logits - policy.logits
        np.testing.assert_allclose(delta.sum(axis=1), 0.0, atol=1e-12)

        perm = np.array([2, 0, 3, 1])
        permuted = pg_step(
            PolicyTable(policy.logits[:, perm]),
            PolicySnapshot(snapshot.probs[:, perm]),
            HALF,
            ClipConfig(),
            2.0,
            visitation,
        )
        np.testing.assert_allclose(
            permuted.logits - policy.logits[:, perm], delta[:, perm], atol=1e-12
        )

    def test_negative_eta(self):
        """A negative step size is rejected."""
        policy = PolicyTable.uniform(1, 2)
        with pytest.raises(InvalidParameterError):
            pg_step(policy, policy.snapshot(), HALF, ClipConfig(), -1.0, UNIT_MASS)


class TestNpgStep:
    """Tests for the idealized natural-policy-gradient step."""

    def test_formula_oracle(self):
        """pi = (0.3, 0.7) with action 0 clip-low and action 1 clip-high, delta = 0.05."""
        policy = PolicyTable.from_probs(np.array([[0.3, 0.7]]))
        snapshot = PolicySnapshot(np.array([[0.5, 0.5]]))
        # delta = mu nu eta d = 0.5 * 0.5 * 0.2 * 1
        updated = npg_step(policy, snapshot, HALF, ClipConfig(), 0.2, UNIT_MASS)
        z = 0.3 * math.exp(0.05) + 0.7 * math.exp(-0.05)
        expected = [0.3 * math.exp(0.05) / z, 0.7 * math.exp(-0.05) / z]
        np.testing.assert_allclose(updated.probs()[0], expected, atol=1e-12)
        assert entropies(updated)[0] > entropies(policy)[0]

    def test_simplex_and_no_event_rows(self, rng):
        """Rows stay normalized and rows without events keep their distribution."""
        policy = PolicyTable.random(12, 4, rng)
        snapshot = PolicyTable(policy.logits + 0.8 * rng.standard_normal((12, 4))).snapshot()
        visitation = VisitationMeasure(np.ones(12), 1)
        updated = npg_step(policy, snapshot, HALF, ClipConfig(), 3.0, visitation)
        np.testing.assert_allclose(np.exp(updated.logits).sum(axis=1), 1.0, atol=1e-12)
        table = clip_event_table(policy, snapshot, ClipConfig())
        quiet = ~(table.low.any(axis=1) | table.high.any(axis=1))
        np.testing.assert_allclose(updated.probs()[quiet], policy.probs()[quiet], atol=1e-12)
