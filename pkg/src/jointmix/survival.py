"""Cox proportional-hazards component with a profiled discrete baseline.

The baseline hazard is a nonparametric step function with jumps at the
distinct observed times.  Profiling it out of the expected complete-data
log-likelihood gives Breslow-type jumps: the number of events at a time
divided by the posterior-weighted risk-set total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DataError, PackedData, SurvivalRecord, _readonly

# exp() inputs are clipped here; |linear predictor| beyond this is far outside
# any usable parameter region and would otherwise overflow risk-set sums
_LP_BOUND = 300.0


class EmptyRiskSetError(ValueError):
    """No subject is at risk at a requested time."""


class InvalidHazardError(ValueError):
    """An event time carries no positive hazard jump."""


@dataclass(frozen=True)
class SurvivalParams:
    """Coefficients of the proportional-hazards linear predictor."""

    delta0: float
    delta1: float

    def __post_init__(self):
        if not (np.isfinite(self.delta0) and np.isfinite(self.delta1)):
            raise ValueError("delta coefficients must be finite")


@dataclass(frozen=True)
class HazardSteps:
    """Baseline hazard as jump sizes at strictly increasing event times.

    Censored-only time points are retained with explicit zero jumps.  The
    cumulative hazard is the right-continuous partial sum, zero at t=0.
    """

    times: np.ndarray
    jumps: np.ndarray

    def __post_init__(self):
        times = _readonly(self.times, float)
        jumps = _readonly(self.jumps, float)
        if times.ndim != 1 or times.shape != jumps.shape:
            raise ValueError("times and jumps must be 1-d arrays of equal length")
        if times.size and (times[0] <= 0 or np.any(np.diff(times) <= 0)):
            raise ValueError("times must be strictly increasing and positive")
        if np.any(jumps < 0) or not np.all(np.isfinite(jumps)):
            raise ValueError("jumps must be nonnegative and finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "jumps", jumps)
        prefix = np.concatenate([[0.0], np.cumsum(jumps)])
        prefix.flags.writeable = False
        object.__setattr__(self, "_prefix", prefix)

    def cum(self, t):
        """Cumulative hazard at ``t`` (scalar or array), right-continuous."""
        idx = np.searchsorted(self.times, t, side="right")
        return self._prefix[idx]

    @property
    def total(self) -> float:
        return float(self._prefix[-1])


def cum_hazard(hazard: HazardSteps, t) -> float:
    """Evaluate the cumulative hazard step function at ``t``."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be nonnegative")
    return hazard.cum(t)


def linear_predictors(theta: np.ndarray, delta: SurvivalParams, covariates: np.ndarray) -> np.ndarray:
    """Matrix lp[i, r] = theta[r] * delta0 + X[i] * delta1."""
    return np.clip(theta[None, :] * delta.delta0 + covariates[:, None] * delta.delta1,
                   -_LP_BOUND, _LP_BOUND)


class RiskSetTables:
    """Dataset-wide aggregates for one parameter point, shared read-only.

    Holds the profiled hazard together with the empirical M0/M1 tables and
    the prefix sums of (M1/M0) dLambda needed by the score functions.  All
    tables are indexed by the packed dataset's distinct observed times.
    """

    def __init__(self, packed: PackedData, gamma: np.ndarray, theta: np.ndarray,
                 delta: SurvivalParams):
        gamma = np.asarray(gamma, dtype=float)
        theta = np.asarray(theta, dtype=float)
        if gamma.shape != (packed.n, theta.size):
            raise ValueError(f"gamma must have shape ({packed.n}, {theta.size})")
        self.theta = theta
        self.delta = delta
        self.times = packed.distinct_times
        self.event_counts = packed.event_counts
        self.n = packed.n

        lp = linear_predictors(theta, delta, packed.covariates)
        w = gamma * np.exp(lp)
        s0_group = packed.suffix_sums(w)          # (K, R)
        s0 = s0_group.sum(axis=1)
        s0_x = packed.suffix_sums(w.sum(axis=1) * packed.covariates)
        if np.any((self.event_counts > 0) & (s0 <= 0)):
            raise EmptyRiskSetError("zero weighted risk set at an event time")

        self.m0_group = s0_group / packed.n
        self.m0 = s0 / packed.n
        self.m0_x = s0_x / packed.n
        self.jumps = np.where(self.event_counts > 0, self.event_counts / np.where(s0 > 0, s0, 1.0), 0.0)
        self.cum_jumps = np.cumsum(self.jumps)

        safe_m0 = np.where(self.m0 > 0, self.m0, 1.0)
        self.ratio_theta = delta.delta0 * self.m0_group / safe_m0[:, None]   # (K, R)
        self.ratio_d0 = (self.m0_group @ theta) / safe_m0                   # (K,)
        self.ratio_d1 = self.m0_x / safe_m0                                  # (K,)
        jl = self.jumps[:, None]
        self.int_theta = np.cumsum(jl * self.ratio_theta, axis=0)
        self.int_d0 = np.cumsum(self.jumps * self.ratio_d0)
        self.int_d1 = np.cumsum(self.jumps * self.ratio_d1)

    def hazard_steps(self) -> HazardSteps:
        return HazardSteps(self.times, self.jumps)

    def time_slot(self, t: float) -> int:
        """Index of an observed time in the tables; errors for foreign times."""
        k = int(np.searchsorted(self.times, t))
        if k >= self.times.size or self.times[k] != t:
            raise ValueError(f"time {t!r} is not an observed time of the dataset behind these tables")
        return k

    def matches(self, theta: np.ndarray, delta: SurvivalParams) -> bool:
        return (self.theta.size == np.asarray(theta).size
                and np.array_equal(self.theta, theta)
                and self.delta == delta)


def risk_set_tables(data, gamma: np.ndarray, theta: np.ndarray, delta: SurvivalParams,
                    n_levels: int | None = None, n_items: int | None = None) -> RiskSetTables:
    """Build the per-parameter-point aggregate tables for a dataset."""
    return RiskSetTables(PackedData.coerce(data, n_levels, n_items), gamma, np.asarray(theta, float), delta)


def risk_aggregates(t: float, data, gamma: np.ndarray, theta: np.ndarray,
                    delta: SurvivalParams):
    """Empirical (M0, M1) at time ``t`` in the paper's condensed 3-vector form.

    M0(t) = n^-1 sum_i 1{T_i >= t} sum_r gamma_ir exp(theta_r d0 + X_i d1),
    and M1 weights the same sum by (delta0, theta_r, X_i).
    """
    packed = PackedData.coerce(data)
    gamma = np.asarray(gamma, dtype=float)
    theta = np.asarray(theta, dtype=float)
    at_risk = packed.times >= t
    if not np.any(at_risk):
        raise EmptyRiskSetError(f"no subject at risk at t={t!r}")
    lp = linear_predictors(theta, delta, packed.covariates)
    w = gamma * np.exp(lp)
    w[~at_risk] = 0.0
    m0 = w.sum() / packed.n
    m1 = np.array([
        delta.delta0 * w.sum() / packed.n,
        (w @ theta).sum() / packed.n,
        (w.sum(axis=1) * packed.covariates).sum() / packed.n,
    ])
    return m0, m1


def profile_hazard(data, gamma: np.ndarray, theta: np.ndarray, delta: SurvivalParams) -> HazardSteps:
    """Profiled baseline hazard: event counts over weighted risk-set totals.

    Ties share a single jump whose numerator is the number of events at that
    time; censored-only times carry explicit zero jumps.
    """
    return risk_set_tables(data, gamma, theta, delta).hazard_steps()


def survival_loglik(rec: SurvivalRecord, group_effect: float, hazard: HazardSteps,
                    delta: SurvivalParams) -> float:
    """Discrete-hazard survival log-likelihood of one subject in one group.

    d (log lambda(T) + theta_r d0 + X d1) - Lambda(T) exp(theta_r d0 + X d1).
    """
    lp = group_effect * delta.delta0 + rec.covariate * delta.delta1
    value = -hazard.cum(rec.time) * np.exp(lp)
    if rec.event:
        k = np.searchsorted(hazard.times, rec.time)
        if k >= hazard.times.size or hazard.times[k] != rec.time or hazard.jumps[k] <= 0:
            raise InvalidHazardError(f"event at t={rec.time!r} has no positive hazard jump")
        value += np.log(hazard.jumps[k]) + lp
    return float(value)


def loglik_matrix(packed: PackedData, tables: RiskSetTables, theta: np.ndarray,
                  delta: SurvivalParams) -> np.ndarray:
    """Per-subject, per-group survival log-likelihoods as an (n, R) matrix."""
    lp = linear_predictors(theta, delta, packed.covariates)
    cum = tables.cum_jumps[packed.time_index]
    log_jump = np.zeros(packed.n)
    ev = packed.events > 0
    jumps_at = tables.jumps[packed.time_index[ev]]
    if np.any(jumps_at <= 0):
        bad = np.flatnonzero(ev)[jumps_at <= 0][0]
        raise InvalidHazardError(
            f"subject {packed.subject_ids[bad]!r} has an event at a zero-jump time")
    log_jump[ev] = np.log(jumps_at)
    return (packed.events * log_jump)[:, None] + packed.events[:, None] * lp - cum[:, None] * np.exp(lp)


def _score_pieces(packed: PackedData, gamma: np.ndarray, tables: RiskSetTables):
    theta, delta = tables.theta, tables.delta
    lp = linear_predictors(theta, delta, packed.covariates)
    ge = gamma * np.exp(lp)                       # gamma_r exp(lp_r)
    total = ge.sum(axis=1)
    k = packed.time_index
    cum = tables.cum_jumps[k]
    return theta, delta, ge, total, k, cum


def profile_scores(packed: PackedData, gamma: np.ndarray, tables: RiskSetTables) -> np.ndarray:
    """Per-subject survival profile scores over [theta[2..R], delta0, delta1].

    Assembled as the derivative of the per-observation profiled
    log-likelihood: the event term differentiates log lambda-hat(T) through
    -M1/M0, and the exp term differentiates Lambda-hat through the prefix
    integral of (M1/M0) dLambda-hat, with the posterior held constant.
    """
    theta, delta, ge, total, k, cum = _score_pieces(packed, gamma, tables)
    d = packed.events
    x = packed.covariates
    R = theta.size

    score_theta = (gamma * delta.delta0 * d[:, None]
                   - ge * delta.delta0 * cum[:, None]
                   - d[:, None] * tables.ratio_theta[k]
                   + total[:, None] * tables.int_theta[k])[:, 1:]
    score_d0 = (d * (gamma @ theta - tables.ratio_d0[k])
                - (ge @ theta) * cum
                + total * tables.int_d0[k])
    score_d1 = (d * (x - tables.ratio_d1[k])
                - x * total * cum
                + total * tables.int_d1[k])
    out = np.empty((packed.n, R + 1))
    out[:, :R - 1] = score_theta
    out[:, R - 1] = score_d0
    out[:, R] = score_d1
    return out


def survival_profile_score(rec: SurvivalRecord, gamma_row: np.ndarray, tables: RiskSetTables,
                           theta: np.ndarray, delta: SurvivalParams) -> np.ndarray:
    """Profile score of one subject; see :func:`profile_scores` for the layout."""
    if not tables.matches(theta, delta):
        raise ValueError("aggregate tables were built at a different parameter point")
    gamma_row = np.asarray(gamma_row, dtype=float)
    k = tables.time_slot(rec.time)
    lp = np.asarray(theta) * delta.delta0 + rec.covariate * delta.delta1
    ge = gamma_row * np.exp(lp)
    total = ge.sum()
    d = float(rec.event)
    cum = tables.cum_jumps[k]
    score_theta = (gamma_row * delta.delta0 * d - ge * delta.delta0 * cum
                   - d * tables.ratio_theta[k] + total * tables.int_theta[k])[1:]
    score_d0 = (d * (gamma_row @ tables.theta - tables.ratio_d0[k])
                - ge @ tables.theta * cum + total * tables.int_d0[k])
    score_d1 = (d * (rec.covariate - tables.ratio_d1[k])
                - rec.covariate * total * cum + total * tables.int_d1[k])
    return np.concatenate([score_theta, [score_d0, score_d1]])


def _step_integrals(tables: RiskSetTables, baseline) -> tuple[np.ndarray, np.ndarray]:
    """Lambda mass of ``baseline`` on the intervals between observed times.

    Returns (mass, cum_at_times); mass[k] is Lambda((t_{k-1}, t_k]), exact for
    any cumulative hazard because M1/M0 is constant on those intervals.
    """
    cum_at = np.asarray(baseline.cum(tables.times), dtype=float)
    mass = np.diff(cum_at, prepend=0.0)
    return mass, cum_at


def efficient_scores(packed: PackedData, gamma: np.ndarray, baseline, tables: RiskSetTables) -> np.ndarray:
    """Closed-form efficient survival scores against a supplied cumulative hazard.

    sum_r gamma_r d [v_r - M1(T)/M0(T)]
        - sum_r gamma_r exp(lp_r) Int_0^T [v_r - M1(u)/M0(u)] dLambda(u),
    with v_r = (delta0 e_r-slot, theta_r, X) in the [theta[2..R], delta0,
    delta1] layout.  ``baseline`` may be a :class:`HazardSteps` or any object
    with a ``cum(t)`` method; the integral is an exact finite sum.
    """
    theta, delta, ge, total, k, _ = _score_pieces(packed, gamma, tables)
    d = packed.events
    x = packed.covariates
    R = theta.size

    mass, cum_at = _step_integrals(tables, baseline)
    lam_T = cum_at[k]
    int_theta = np.cumsum(mass[:, None] * tables.ratio_theta, axis=0)[k]
    int_d0 = np.cumsum(mass * tables.ratio_d0)[k]
    int_d1 = np.cumsum(mass * tables.ratio_d1)[k]

    score_theta = (d[:, None] * (gamma * delta.delta0 - tables.ratio_theta[k])
                   - (ge * delta.delta0 * lam_T[:, None] - total[:, None] * int_theta))[:, 1:]
    score_d0 = (d * (gamma @ theta - tables.ratio_d0[k])
                - ((ge @ theta) * lam_T - total * int_d0))
    score_d1 = (d * (x - tables.ratio_d1[k])
                - (x * total * lam_T - total * int_d1))
    out = np.empty((packed.n, R + 1))
    out[:, :R - 1] = score_theta
    out[:, R - 1] = score_d0
    out[:, R] = score_d1
    return out


def efficient_score_survival(rec: SurvivalRecord, gamma_row: np.ndarray, baseline,
                             theta: np.ndarray, delta: SurvivalParams,
                             tables: RiskSetTables) -> np.ndarray:
    """Efficient score of one subject; layout as in :func:`profile_scores`."""
    if not tables.matches(theta, delta):
        raise ValueError("aggregate tables were built at a different parameter point")
    gamma_row = np.asarray(gamma_row, dtype=float)
    k = tables.time_slot(rec.time)
    lp = np.asarray(theta) * delta.delta0 + rec.covariate * delta.delta1
    ge = gamma_row * np.exp(lp)
    total = ge.sum()
    d = float(rec.event)

    mass, cum_at = _step_integrals(tables, baseline)
    upto = slice(0, k + 1)
    lam_T = cum_at[k]
    int_theta = mass[upto] @ tables.ratio_theta[upto]
    int_d0 = mass[upto] @ tables.ratio_d0[upto]
    int_d1 = mass[upto] @ tables.ratio_d1[upto]

    score_theta = (d * (gamma_row * delta.delta0 - tables.ratio_theta[k])
                   - (ge * delta.delta0 * lam_T - total * int_theta))[1:]
    score_d0 = (d * (gamma_row @ tables.theta - tables.ratio_d0[k])
                - (ge @ tables.theta * lam_T - total * int_d0))
    score_d1 = (d * (rec.covariate - tables.ratio_d1[k])
                - (rec.covariate * total * lam_T - total * int_d1))
    return np.concatenate([score_theta, [score_d0, score_d1]])


def envelope_gradient(packed: PackedData, gamma: np.ndarray, tables: RiskSetTables) -> np.ndarray:
    """Gradient of the summed profiled survival objective over [theta free, d0, d1].

    At the profiling maximizer the partial derivatives through the hazard
    jumps cancel in the dataset sum, so only the direct terms
    sum_ir gamma_ir v_r (d_i - exp(lp_ir) Lambda(T_i)) remain.
    """
    theta, delta, ge, total, k, cum = _score_pieces(packed, gamma, tables)
    d = packed.events
    core = gamma * d[:, None] - ge * cum[:, None]     # (n, R)
    g_theta = delta.delta0 * core.sum(axis=0)[1:]
    g_d0 = core @ theta
    g_d1 = core.sum(axis=1) * packed.covariates
    return np.concatenate([g_theta, [g_d0.sum(), g_d1.sum()]])
