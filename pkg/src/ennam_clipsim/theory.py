"""
First-order entropy-change predictions for the idealized updates.

For one update from pi_k with clip events X (mass p) and Y (mass q) and
step size delta = mu * nu * eta * d(s):

    policy gradient:  dH(s) ~ delta * (p (E[Q] - E[Q|X]) - q (E[Q] - E[Q|Y]))
    natural gradient: dH(s) ~ delta * (p (E[-log pi|X] - H) - q (E[-log pi|Y] - H))

with Q(a) = pi(a) (log pi(a) + H). Conditional expectations over an empty
event set are undefined; they are kept as ``None`` (scalar API) or masked
(array API) and are only ever multiplied by a zero mass.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from .env import VisitationMeasure
from .exceptions import InvalidParameterError, TheoryConsistencyError
from .objective import (
    ClipConfig,
    ClipEventReport,
    ClipEventTable,
    clip_event_table,
    npg_step,
    pg_step,
)
from .policy import PolicySnapshot, PolicyTable, entropies
from .rewards import AdvantageModel

logger = logging.getLogger(__name__)

UPDATERS = ("pg", "npg")

CONDITIONS = ("qcond_low", "qcond_high", "logcond_low", "logcond_high")


class QStatistics(NamedTuple):
    EQ: float
    EQ_X: Optional[float]
    EQ_Y: Optional[float]


class LogStatistics(NamedTuple):
    ELx: Optional[float]
    ELy: Optional[float]
    H: float


def _row_terms(policy: PolicyTable, state: int) -> tuple:
    policy.check_state(state)
    probs = policy.probs()[state]
    log_probs = policy.log_probs()[state]
    entropy = float(entropies(policy)[state])
    return probs, log_probs, entropy


def _conditional(probs: np.ndarray, values: np.ndarray, actions: Sequence[int]) -> Optional[float]:
    if not actions:
        return None
    idx = list(actions)
    mass = probs[idx].sum()
    if mass <= 0.0:
        return None
    return float((probs[idx] * values[idx]).sum() / mass)


def q_statistics(policy: PolicyTable, events: ClipEventReport, state: int) -> QStatistics:
    probs, log_probs, entropy = _row_terms(policy, state)
    q_values = probs * (log_probs + entropy)
    return QStatistics(
        EQ=float((probs * q_values).sum()),
        EQ_X=_conditional(probs, q_values, events.low),
        EQ_Y=_conditional(probs, q_values, events.high),
    )


def log_statistics(policy: PolicyTable, events: ClipEventReport, state: int) -> LogStatistics:
    probs, log_probs, entropy = _row_terms(policy, state)
    return LogStatistics(
        ELx=_conditional(probs, -log_probs, events.low),
        ELy=_conditional(probs, -log_probs, events.high),
        H=entropy,
    )


def _bracket(mass: float, gap: Optional[float], name: str) -> float:
    if mass == 0.0:
        return 0.0
    if gap is None:
        raise TheoryConsistencyError(f"{name} is undefined but its event mass is {mass}")
    return mass * gap


def predict_dH_pg(
    d: float,
    p: float,
    q: float,
    EQ: float,
    EQ_X: Optional[float],
    EQ_Y: Optional[float],
    model: AdvantageModel,
    eta: float,
) -> float:
    low = _bracket(p, None if EQ_X is None else EQ - EQ_X, "E[Q|X]")
    high = _bracket(q, None if EQ_Y is None else EQ - EQ_Y, "E[Q|Y]")
    return model.mu * model.nu * eta * d * (low - high)


def predict_dH_npg(
    d: float,
    p: float,
    q: float,
    ELx: Optional[float],
    ELy: Optional[float],
    H: float,
    model: AdvantageModel,
    eta: float,
) -> float:
    low = _bracket(p, None if ELx is None else ELx - H, "E[-log pi|X]")
    high = _bracket(q, None if ELy is None else ELy - H, "E[-log pi|Y]")
    return model.mu * model.nu * eta * d * (low - high)


def _masked_conditional(
    probs: np.ndarray, values: np.ndarray, mask: np.ndarray, mass: np.ndarray
) -> np.ma.MaskedArray:
    total = (probs * values * mask).sum(axis=1)
    defined = mass > 0.0
    out = np.divide(total, mass, out=np.zeros_like(total), where=defined)
    return np.ma.masked_array(out, mask=~defined)


@dataclass(frozen=True, eq=False)
class TheoryStepReport:
    """
    Per-state theory quantities for one update, plus aggregates.

    Aggregates weight states by ``d / horizon`` (the old policy's visitation
    normalized to a distribution over visited tokens). Conditional gaps are
    also summarized by a plain average over the states where they are defined.
    """

    d: np.ndarray
    p: np.ndarray
    q: np.ndarray
    p_old: np.ndarray
    q_old: np.ndarray
    EQ: np.ndarray
    EQ_X: np.ma.MaskedArray
    EQ_Y: np.ma.MaskedArray
    ELx: np.ma.MaskedArray
    ELy: np.ma.MaskedArray
    H: np.ndarray
    dH_pred_pg: np.ndarray
    dH_pred_npg: np.ndarray
    horizon: int

    @property
    def weights(self) -> np.ndarray:
        return self.d / self.horizon

    def gaps(self) -> Dict[str, np.ma.MaskedArray]:
        """The four condition gaps, masked where the conditional is undefined."""
        return {
            "qcond_low": self.EQ - self.EQ_X,
            "qcond_high": self.EQ - self.EQ_Y,
            "logcond_low": self.ELx - self.H,
            "logcond_high": self.ELy - self.H,
        }

    def predicted(self, updater: str) -> float:
        per_state = self.dH_pred_pg if updater == "pg" else self.dH_pred_npg
        return float(self.weights @ per_state)

    def weighted_entropy(self) -> float:
        return float(self.weights @ self.H)

    def actual(self, after: PolicyTable) -> float:
        """Weighted exact entropy change from this report's policy to ``after``."""
        return float(self.weights @ (entropies(after) - self.H))

    def aggregates(self) -> Dict[str, Optional[float]]:
        weights = self.weights
        total = weights.sum()
        row: Dict[str, Optional[float]] = {
            "d_weighted_H": self.weighted_entropy(),
            "p_mean": float(weights @ self.p / total),
            "q_mean": float(weights @ self.q / total),
            "p_old_mean": float(weights @ self.p_old / total),
            "q_old_mean": float(weights @ self.q_old / total),
        }
        for name, gap in self.gaps().items():
            defined = ~np.ma.getmaskarray(gap)
            values = np.ma.getdata(gap)[defined]
            w = weights[defined]
            row[name] = float(w @ values / w.sum()) if w.sum() > 0.0 else None
            row[f"{name}_avg"] = float(values.mean()) if values.size else None
        return row


def theory_step_report(
    policy: PolicyTable,
    snapshot: PolicySnapshot,
    clip: ClipConfig,
    model: AdvantageModel,
    eta: float,
    visitation: VisitationMeasure,
    events: Optional[ClipEventTable] = None,
) -> TheoryStepReport:
    """Vectorized Q- and log-statistics and both predictions for every state."""
    events = clip_event_table(policy, snapshot, clip) if events is None else events
    probs, log_probs = policy.probs(), policy.log_probs()
    entropy = entropies(policy)
    q_values = probs * (log_probs + entropy[:, None])

    EQ = (probs * q_values).sum(axis=1)
    EQ_X = _masked_conditional(probs, q_values, events.low, events.p)
    EQ_Y = _masked_conditional(probs, q_values, events.high, events.q)
    ELx = _masked_conditional(probs, -log_probs, events.low, events.p)
    ELy = _masked_conditional(probs, -log_probs, events.high, events.q)

    step = model.mu * model.nu * eta * visitation.mass
    pred_pg = step * (
        events.p * (EQ - EQ_X).filled(0.0) - events.q * (EQ - EQ_Y).filled(0.0)
    )
    pred_npg = step * (
        events.p * (ELx - entropy).filled(0.0) - events.q * (ELy - entropy).filled(0.0)
    )
    return TheoryStepReport(
        d=np.asarray(visitation.mass, dtype=np.float64),
        p=events.p,
        q=events.q,
        p_old=events.p_old,
        q_old=events.q_old,
        EQ=EQ,
        EQ_X=EQ_X,
        EQ_Y=EQ_Y,
        ELx=ELx,
        ELy=ELy,
        H=entropy,
        dH_pred_pg=np.asarray(pred_pg),
        dH_pred_npg=np.asarray(pred_npg),
        horizon=visitation.horizon,
    )


@dataclass
class ConditionTally:
    """Running counts of (state, update) records satisfying each condition."""

    tolerance: float = 1e-12
    satisfied: Dict[str, int] = field(default_factory=lambda: dict.fromkeys(CONDITIONS, 0))
    defined: Dict[str, int] = field(default_factory=lambda: dict.fromkeys(CONDITIONS, 0))

    def update(self, report: TheoryStepReport) -> None:
        for name, gap in report.gaps().items():
            values = gap.compressed()
            self.defined[name] += int(values.size)
            self.satisfied[name] += int((values >= -self.tolerance).sum())

    def fraction(self, name: str) -> Optional[float]:
        if self.defined[name] == 0:
            return None
        return self.satisfied[name] / self.defined[name]

    def fractions(self) -> Dict[str, Optional[float]]:
        return {name: self.fraction(name) for name in CONDITIONS}


@dataclass(frozen=True)
class ResidualScan:
    """Residuals of the first-order prediction over a sweep of step sizes."""

    etas: np.ndarray
    actual: np.ndarray
    predicted: np.ndarray
    residuals: np.ndarray
    slope: Optional[float]
    vacuous: bool


def residual_scan(
    policy: PolicyTable,
    snapshot: PolicySnapshot,
    model: AdvantageModel,
    clip: ClipConfig,
    etas: Sequence[float],
    updater: str,
    visitation: Optional[VisitationMeasure] = None,
) -> ResidualScan:
    """
    Apply one idealized update per step size from the same (policy, snapshot).

    Clip events are fixed by the pair, so every update in the sweep moves
    along the same direction. Without a visitation measure every state gets
    unit mass. The slope is the least-squares fit of log residual against
    log eta; vacuous instances (no clip event anywhere) get no slope.
    """
    if updater not in UPDATERS:
        raise InvalidParameterError(f"Unknown updater '{updater}'; expected pg or npg")
    etas_arr = np.asarray(etas, dtype=np.float64)
    if etas_arr.size == 0 or np.any(etas_arr <= 0.0):
        raise InvalidParameterError("Step sizes must be positive")
    if visitation is None:
        visitation = VisitationMeasure(np.ones(policy.state_count), 1)

    events = clip_event_table(policy, snapshot, clip)
    update = pg_step if updater == "pg" else npg_step
    actual: List[float] = []
    predicted: List[float] = []
    for eta in etas_arr:
        report = theory_step_report(policy, snapshot, clip, model, eta, visitation, events)
        after = update(policy, snapshot, model, clip, eta, visitation, events)
        actual.append(report.actual(after))
        predicted.append(report.predicted(updater))

    actual_arr, predicted_arr = np.array(actual), np.array(predicted)
    residuals = np.abs(actual_arr - predicted_arr)
    vacuous = not events.has_events
    slope: Optional[float] = None
    positive = residuals > 0.0
    if vacuous:
        logger.warning("Residual scan has no clip events; excluded from the fit")
    elif positive.sum() >= 2:
        slope = float(np.polyfit(np.log(etas_arr[positive]), np.log(residuals[positive]), 1)[0])
    return ResidualScan(etas_arr, actual_arr, predicted_arr, residuals, slope, vacuous)
