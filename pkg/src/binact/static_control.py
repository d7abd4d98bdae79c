"""Iterative point-to-point controller.

Each iteration reads the settled state, computes the remaining error,
searches a switch vector minimizing the configured cost, applies it by XOR
to the input vector, waits for the next steady state, and repeats until the
target tolerance is met or a stopping guard fires.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr
from scipy.stats import chi2, ncx2

from binact.calibration import CalibrationReport
from binact.core import (
    ConfigurationError,
    ContractError,
    ControlAbort,
    DispersionModel,
    InfluenceMatrix,
    TargetSpec,
    state_error,
    superpose,
    updated_jacobian,
)
from binact.optimizer import GAParams, combined_search
from binact.plant import PlantSession, ScheduledFault, ScheduledLoad

_PROB_COST_CAP = 1e12
_MC_SEED = 0x5EEDED
_MC_SAMPLES = 100_000

COST_KINDS = ("residual", "penalized", "probabilistic")


@dataclass
class StaticConfig:
    cost_kind: str = "penalized"
    penalty_beta: float = 0.2
    max_iterations: int = 15
    stop_rule: str = "tolerance-met"  # or 'convergence-probability'
    p_conv_min: float = 0.5
    settle_time: float = 3.0
    excluded_actuators: frozenset = frozenset()
    ga: GAParams = field(default_factory=GAParams)
    exhaustive_max_switches: int = 3

    def __post_init__(self):
        if self.cost_kind not in COST_KINDS:
            raise ConfigurationError(f"cost_kind must be one of {COST_KINDS}")
        if self.stop_rule not in ("tolerance-met", "convergence-probability"):
            raise ConfigurationError(f"unknown stop_rule {self.stop_rule!r}")
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")
        if self.penalty_beta < 0:
            raise ConfigurationError("penalty_beta must be >= 0")
        if not 0.0 < self.p_conv_min < 1.0:
            raise ConfigurationError("p_conv_min must be in (0, 1)")
        self.excluded_actuators = frozenset(int(k) for k in self.excluded_actuators)


# ---------------------------------------------------------------------------
# Cost functions (batch evaluate over (k, m) candidate arrays)

def _columns(J) -> np.ndarray:
    return J.columns if isinstance(J, InfluenceMatrix) else np.asarray(J, dtype=np.float64)


class ResidualCost:
    """Weighted Euclidean norm of the resolution error."""

    def __init__(self, J_tilde, x_e, weights):
        cols = _columns(J_tilde)
        self.weighted_J = cols * np.asarray(weights, dtype=np.float64)[:, np.newaxis]
        self.weighted_x_e = np.asarray(x_e, dtype=np.float64) * np.asarray(weights, dtype=np.float64)

    def evaluate(self, B) -> np.ndarray:
        B = np.atleast_2d(B).astype(np.float64)
        res = B @ self.weighted_J.T - self.weighted_x_e
        return np.linalg.norm(res, axis=1)


class PenalizedCost:
    """Residual norm plus a penalty proportional to the switching count."""

    def __init__(self, J_tilde, x_e, weights, beta: float = 0.2):
        self.residual = ResidualCost(J_tilde, x_e, weights)
        self.beta = float(beta)

    def evaluate(self, B) -> np.ndarray:
        B = np.atleast_2d(B)
        return self.residual.evaluate(B) + self.beta * B.sum(axis=1)


class ProbabilisticCost:
    """Inverse of the probability of landing inside the target tolerance box."""

    def __init__(self, J_tilde, x_e, dispersion: DispersionModel, target: TargetSpec):
        self.cols = _columns(J_tilde)
        self.x_e = np.asarray(x_e, dtype=np.float64)
        self.dispersion = dispersion
        self.target = target

    def evaluate(self, B) -> np.ndarray:
        B = np.atleast_2d(B)
        p = _on_target_probability_batch(B, self.cols, self.x_e, self.dispersion, self.target)
        return 1.0 / np.maximum(p, 1.0 / _PROB_COST_CAP)


def make_cost(config: StaticConfig, J_tilde, x_e, dispersion, target: TargetSpec):
    if config.cost_kind == "residual":
        return ResidualCost(J_tilde, x_e, target.weights)
    if config.cost_kind == "penalized":
        return PenalizedCost(J_tilde, x_e, target.weights, config.penalty_beta)
    return ProbabilisticCost(J_tilde, x_e, dispersion, target)


def cost_residual(b, J_tilde, x_e, weights) -> float:
    return float(ResidualCost(J_tilde, x_e, weights).evaluate(b)[0])


def cost_penalized(b, J_tilde, x_e, weights, beta: float = 0.2) -> float:
    return float(PenalizedCost(J_tilde, x_e, weights, beta).evaluate(b)[0])


# ---------------------------------------------------------------------------
# Probabilities

def _on_target_probability_batch(
    B: np.ndarray,
    cols: np.ndarray,
    x_e: np.ndarray,
    dispersion: DispersionModel,
    target: TargetSpec,
) -> np.ndarray:
    mask = target.weighted_mask
    mu = (B.astype(np.float64) @ cols.T - x_e)[:, mask]
    sigma = dispersion.sigma_for_batch(B)[:, mask]
    eps_d = target.tolerance[mask]

    prob = np.empty_like(mu)
    random_part = sigma > 0
    if np.any(random_part):
        s = sigma[random_part]
        m_ = mu[random_part]
        e_ = np.broadcast_to(eps_d, mu.shape)[random_part]
        prob[random_part] = ndtr((e_ - m_) / s) - ndtr((-e_ - m_) / s)
    degenerate = ~random_part
    if np.any(degenerate):
        e_ = np.broadcast_to(eps_d, mu.shape)[degenerate]
        prob[degenerate] = (np.abs(mu[degenerate]) < e_).astype(np.float64)
    return prob.prod(axis=1)


def on_target_probability(
    b, J_tilde, x_e, dispersion: DispersionModel, target: TargetSpec
) -> float:
    """Probability that the state after applying b lands inside the target
    tolerance box on every weighted DOF, assuming independent normal errors."""
    B = np.atleast_2d(np.asarray(b, dtype=np.uint8))
    return float(
        _on_target_probability_batch(B, _columns(J_tilde), np.asarray(x_e, float), dispersion, target)[0]
    )


def convergence_probability(eps_r, sigma, x_e_norm: float, weights=None) -> float:
    """Probability that the next error norm is smaller than the current one.

    The next error is -(eps_r + eps_a) with per-DOF independent zero-mean
    normal eps_a.  With equal sigmas across the weighted DOFs the norm follows
    a noncentral chi-squared distribution; unequal sigmas fall back to a
    seeded Monte Carlo estimate.
    """
    eps_r = np.asarray(eps_r, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if eps_r.shape != sigma.shape:
        raise ContractError("eps_r and sigma must have the same shape")
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        keep = w > 0
        eps_r = (w * eps_r)[keep]
        sigma = (w * sigma)[keep]
    x_e_norm = float(x_e_norm)

    deterministic = sigma == 0
    const = float(np.sum(eps_r[deterministic] ** 2))
    eps = eps_r[~deterministic]
    sig = sigma[~deterministic]
    if eps.size == 0:
        return 1.0 if np.sqrt(const) < x_e_norm else 0.0
    threshold_sq = x_e_norm**2 - const
    if threshold_sq <= 0:
        return 0.0

    if np.allclose(sig, sig[0], rtol=1e-9, atol=0.0):
        s = sig[0]
        k = eps.size
        lam = float(np.sum((eps / s) ** 2))
        q = threshold_sq / s**2
        if lam < 1e-12:
            return float(chi2.cdf(q, k))
        return float(ncx2.cdf(q, k, lam))

    rng = np.random.default_rng(_MC_SEED)
    samples = eps + rng.normal(0.0, 1.0, size=(_MC_SAMPLES, eps.size)) * sig
    return float(np.mean(np.einsum("ij,ij->i", samples, samples) < threshold_sq))


# ---------------------------------------------------------------------------
# Planning and the iteration loop

@dataclass
class PlanDiagnostics:
    predicted_a: np.ndarray
    eps_r: np.ndarray
    sigma: np.ndarray
    cost: float
    evaluations: int
    source: str
    note: str = ""


def plan_correction(
    x_e,
    J_tilde: InfluenceMatrix,
    config: StaticConfig,
    dispersion: DispersionModel,
    target: TargetSpec,
    rng: np.random.Generator,
    excluded=None,
    search_fn=combined_search,
) -> tuple[np.ndarray, PlanDiagnostics]:
    """Search the switch vector minimizing the configured cost, with excluded
    (detected faulty) actuators forced to zero in every candidate."""
    x_e = np.asarray(x_e, dtype=np.float64)
    m = J_tilde.m
    excluded = config.excluded_actuators if excluded is None else frozenset(excluded)
    if len(excluded) >= m:
        b = np.zeros(m, dtype=np.uint8)
        diag = PlanDiagnostics(
            predicted_a=np.zeros(x_e.size),
            eps_r=-x_e,
            sigma=np.zeros(x_e.size),
            cost=float("nan"),
            evaluations=0,
            source="none",
            note="no recruitable actuators",
        )
        return b, diag
    cost = make_cost(config, J_tilde, x_e, dispersion, target)
    result = search_fn(
        cost,
        m,
        params=config.ga,
        rng=rng,
        excluded=excluded,
        max_switches=config.exhaustive_max_switches,
    )
    a = superpose(J_tilde, result.best_b)
    diag = PlanDiagnostics(
        predicted_a=a,
        eps_r=a - x_e,
        sigma=dispersion.sigma_for(result.best_b),
        cost=result.best_cost,
        evaluations=result.evaluations,
        source=result.source,
    )
    return result.best_b, diag


@dataclass
class IterationRecord:
    """One planning/correction cycle; realized quantities are filled once the
    following steady state has been read."""

    index: int
    x: np.ndarray
    x_e: np.ndarray
    b: np.ndarray
    predicted_a: np.ndarray
    eps_r: np.ndarray
    predicted_sigma: np.ndarray
    cost: float
    evaluations: int
    source: str
    sim_time: float
    realized_eps_a: np.ndarray | None = None
    on_target: bool = False

    @property
    def s_n(self) -> int:
        return int(self.b.sum())


@dataclass
class StaticRunResult:
    target: TargetSpec
    records: list
    n_f: int
    final_error: float
    final_x: np.ndarray
    converged: bool
    reason: str  # 'tolerance' | 'max-iterations' | 'stall' | 'limit-cycle'
    sim_time: float
    switch_total: int


def weighted_norm(v, weights) -> float:
    return float(np.linalg.norm(np.asarray(v, float) * np.asarray(weights, float)))


def within_tolerance(x_e, target: TargetSpec) -> bool:
    mask = target.weighted_mask
    return bool(np.all(np.abs(np.asarray(x_e, float)[mask]) < target.tolerance[mask]))


def _fire_events(events, idx, upto, session: PlantSession, excluded: set):
    while idx < len(events) and events[idx].at <= upto:
        ev = events[idx]
        if isinstance(ev, ScheduledFault):
            session.set_fault(ev.actuator, ev.mode)
            if ev.detected:
                excluded.add(int(ev.actuator))
        elif isinstance(ev, ScheduledLoad):
            session.set_load(ev.f_ext)
        else:
            raise ConfigurationError(f"unknown scheduled event {ev!r}")
        idx += 1
    return idx


def run_static(
    session: PlantSession,
    calibration: CalibrationReport,
    targets,
    config: StaticConfig,
    rng: np.random.Generator,
    events=(),
    linearizer=None,
) -> list[StaticRunResult]:
    """Run the iterative controller over a sequence of targets.

    The input vector persists from one target to the next.  Scheduled faults
    and loads fire on the global correction counter; detected faults also
    extend the excluded actuator set from that point on.
    """
    if calibration.m != session.plant.m or calibration.n != session.plant.n:
        raise ConfigurationError("calibration dimensions do not match the plant")
    events = sorted(events, key=lambda e: e.at)
    ev_idx = 0
    excluded = set(config.excluded_actuators)
    global_iter = 0
    results = []

    for target in targets:
        records: list[IterationRecord] = []
        pending: IterationRecord | None = None
        prev_x: np.ndarray | None = None
        corrections = 0
        reason = "max-iterations"
        converged = False
        switch_total = 0
        while True:
            ev_idx = _fire_events(events, ev_idx, global_iter, session, excluded)
            x = session.read_steady(config.settle_time)
            if not np.all(np.isfinite(x)):
                raise ControlAbort(f"non-finite state readout at iteration {global_iter}")
            x_e = state_error(target.x_d, x)
            met = within_tolerance(x_e, target)
            if pending is not None:
                pending.realized_eps_a = (x - prev_x) - pending.predicted_a
                pending.on_target = met
                records.append(pending)
                pending = None
            if met:
                reason = "tolerance"
                converged = True
                break
            if corrections >= config.max_iterations:
                reason = "max-iterations"
                break
            J_t = updated_jacobian(calibration.J, session.u, x, linearizer)
            b, diag = plan_correction(
                x_e, J_t, config, calibration.dispersion, target, rng, excluded=frozenset(excluded)
            )
            if int(b.sum()) == 0:
                reason = "stall"
                break
            if config.stop_rule == "convergence-probability":
                p_conv = convergence_probability(
                    diag.eps_r, diag.sigma, weighted_norm(x_e, target.weights), target.weights
                )
                if p_conv < config.p_conv_min:
                    reason = "limit-cycle"
                    break
            session.apply_switch(b)
            pending = IterationRecord(
                index=corrections,
                x=x,
                x_e=x_e,
                b=b,
                predicted_a=diag.predicted_a,
                eps_r=diag.eps_r,
                predicted_sigma=diag.sigma,
                cost=diag.cost,
                evaluations=diag.evaluations,
                source=diag.source,
                sim_time=session.sim_time,
            )
            prev_x = x
            switch_total += int(b.sum())
            corrections += 1
            global_iter += 1
        results.append(
            StaticRunResult(
                target=target,
                records=records,
                n_f=corrections,
                final_error=weighted_norm(x_e, target.weights),
                final_x=x,
                converged=converged,
                reason=reason,
                sim_time=session.sim_time,
                switch_total=switch_total,
            )
        )
    return results
