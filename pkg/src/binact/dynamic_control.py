"""Bang-bang sliding-mode motion controller.

Each actuator is recruited independently from the sign of the dot product
between the composite error (error derivative plus lambda times error) and
its updated force influence vector.  Keeping the composite error near zero
imposes first-order error decay with time constant 1/lambda.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from binact.calibration import CalibrationReport
from binact.core import (
    ConfigurationError,
    ContractError,
    ControlAbort,
    InfluenceMatrix,
    as_bits,
    as_state,
    updated_jacobian,
)
from binact.plant import PlantSession, ScheduledFault, ScheduledLoad


@dataclass
class DynamicConfig:
    lam: float = 2.0              # composite-error gain, 1/s
    control_period: float = 0.01  # s
    deadband: float = 0.0         # dot-product recruitment threshold
    use_displacement_vectors: bool = False  # isotropic shortcut
    derivative_window: int = 1    # backward-difference span, in ticks

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigurationError("lam must be > 0")
        if self.control_period <= 0:
            raise ConfigurationError("control_period must be > 0")
        if self.deadband < 0:
            raise ConfigurationError("deadband must be >= 0")
        if self.derivative_window < 1:
            raise ConfigurationError("derivative_window must be >= 1")


# ---------------------------------------------------------------------------
# Trajectories

@dataclass(frozen=True)
class HoldTrajectory:
    """Constant desired state."""

    x_d: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x_d", as_state(self.x_d))

    def sample(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        return self.x_d.copy(), np.zeros_like(self.x_d)


@dataclass(frozen=True)
class CircleTrajectory:
    """Circle in a pair of DOFs around a fixed center, period in seconds."""

    center: np.ndarray
    radius: float
    period: float
    dofs: tuple[int, int] = (0, 1)
    phase: float = 0.0

    def __post_init__(self):
        center = as_state(self.center)
        if self.radius <= 0 or self.period <= 0:
            raise ConfigurationError("circle radius and period must be > 0")
        i, j = self.dofs
        if not (0 <= i < center.size and 0 <= j < center.size and i != j):
            raise ConfigurationError("circle DOF indices must be distinct and in range")
        object.__setattr__(self, "center", center)

    def sample(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        omega = 2.0 * np.pi / self.period
        ang = omega * t + self.phase
        x_d = self.center.copy()
        x_dot = np.zeros_like(x_d)
        i, j = self.dofs
        x_d[i] += self.radius * np.cos(ang)
        x_d[j] += self.radius * np.sin(ang)
        x_dot[i] = -self.radius * omega * np.sin(ang)
        x_dot[j] = self.radius * omega * np.cos(ang)
        return x_d, x_dot


@dataclass(frozen=True)
class PolylineTrajectory:
    """Piecewise-linear path through time-stamped waypoints; clamped at ends."""

    times: np.ndarray
    points: np.ndarray  # (T, n)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        points = np.asarray(self.points, dtype=np.float64)
        if times.ndim != 1 or points.ndim != 2 or points.shape[0] != times.size:
            raise ConfigurationError("polyline needs one waypoint row per time stamp")
        if times.size < 2 or np.any(np.diff(times) <= 0):
            raise ConfigurationError("polyline time stamps must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "points", points)

    def sample(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        times, pts = self.times, self.points
        if t <= times[0]:
            return pts[0].copy(), np.zeros(pts.shape[1])
        if t >= times[-1]:
            return pts[-1].copy(), np.zeros(pts.shape[1])
        j = int(np.searchsorted(times, t, side="right"))
        dt = times[j] - times[j - 1]
        lam = (t - times[j - 1]) / dt
        x_d = (1 - lam) * pts[j - 1] + lam * pts[j]
        return x_d, (pts[j] - pts[j - 1]) / dt


# ---------------------------------------------------------------------------
# Control law

def composite_error(x_e, x_e_dot, lam: float) -> np.ndarray:
    """Sliding variable: error derivative plus lam times the error."""
    x_e = np.asarray(x_e, dtype=np.float64)
    x_e_dot = np.asarray(x_e_dot, dtype=np.float64)
    if x_e.shape != x_e_dot.shape:
        raise ContractError("error and derivative must have the same shape")
    return x_e_dot + lam * x_e


def bang_bang_direct(s, F_raw, deadband: float = 0.0, weights=None) -> np.ndarray:
    """Direct recruitment: actuator k is ON next tick iff s . f_k > deadband
    using the raw (calibrated, not sign-updated) force columns."""
    cols = F_raw.columns if isinstance(F_raw, InfluenceMatrix) else np.asarray(F_raw, float)
    s = np.asarray(s, dtype=np.float64)
    if weights is not None:
        s = s * np.asarray(weights, dtype=np.float64)
    dots = s @ cols
    return (dots > deadband).astype(np.uint8)


def bang_bang(s, F_tilde, u, deadband: float = 0.0, weights=None) -> np.ndarray:
    """Per-actuator recruitment from the updated force influence vectors.

    An actuator toggles when the composite error projects onto its updated
    column beyond the deadband; the switch vector is applied to the current
    input by XOR.  The result is cross-checked each call against the direct
    formulation on the raw columns wherever the two provably coincide (for an
    ON actuator the dot product must clear the deadband in magnitude).
    """
    cols = F_tilde.columns if isinstance(F_tilde, InfluenceMatrix) else np.asarray(F_tilde, float)
    u = as_bits(u, m=cols.shape[1])
    s = np.asarray(s, dtype=np.float64)
    if weights is not None:
        s = s * np.asarray(weights, dtype=np.float64)
    dots_tilde = s @ cols
    b = (dots_tilde > deadband).astype(np.uint8)
    u_next = np.bitwise_xor(u, b)

    signs = 1.0 - 2.0 * u.astype(np.float64)
    dots_raw = dots_tilde * signs
    direct = (dots_raw > deadband).astype(np.uint8)
    decidable = (u == 0) | (np.abs(dots_raw) > deadband)
    if np.any(u_next[decidable] != direct[decidable]):
        raise ControlAbort("toggle-form and direct-form recruitment disagree")
    return u_next


# ---------------------------------------------------------------------------
# Closed-loop run

@dataclass
class DynamicTrace:
    times: np.ndarray
    x: np.ndarray
    x_d: np.ndarray
    x_e: np.ndarray
    s: np.ndarray
    u: np.ndarray
    switches: np.ndarray

    def error_norms(self, weights=None) -> np.ndarray:
        err = self.x_e if weights is None else self.x_e * np.asarray(weights, float)
        return np.linalg.norm(err, axis=1)

    @property
    def ticks(self) -> int:
        return self.times.size


def _fire_events(events, idx, now, session: PlantSession):
    while idx < len(events) and events[idx].at <= now:
        ev = events[idx]
        if isinstance(ev, ScheduledFault):
            session.set_fault(ev.actuator, ev.mode)
        elif isinstance(ev, ScheduledLoad):
            session.set_load(ev.f_ext)
        else:
            raise ConfigurationError(f"unknown scheduled event {ev!r}")
        idx += 1
    return idx


def run_dynamic(
    session: PlantSession,
    calibration: CalibrationReport,
    trajectory,
    config: DynamicConfig,
    duration: float,
    events=(),
    weights=None,
) -> DynamicTrace:
    """Tick the bang-bang controller against the integrated plant dynamics.

    Each tick measures the state, estimates the error derivative by backward
    difference, recruits actuators, then holds the input while the plant
    integrates one control period (whole substeps of a stable size).
    """
    plant = session.plant
    if calibration.m != plant.m or calibration.n != plant.n:
        raise ConfigurationError("calibration dimensions do not match the plant")
    if config.use_displacement_vectors:
        if not plant.is_isotropic:
            raise ConfigurationError(
                "displacement influence shortcut requires an isotropic plant"
            )
        force = calibration.J
    else:
        if calibration.F is None:
            raise ConfigurationError("calibration has no force influence matrix")
        force = calibration.F

    period = config.control_period
    substeps = max(1, int(np.ceil(period / plant.stable_dt())))
    dt = period / substeps
    ticks = int(round(duration / period))
    if ticks < 1:
        raise ConfigurationError("duration must cover at least one control period")

    events = sorted(events, key=lambda e: e.at)
    ev_idx = 0
    session.settle_to_equilibrium()

    n, m = plant.n, plant.m
    times = np.empty(ticks)
    xs = np.empty((ticks, n))
    xds = np.empty((ticks, n))
    xes = np.empty((ticks, n))
    ss = np.empty((ticks, n))
    us = np.empty((ticks, m), dtype=np.uint8)
    switches = np.empty(ticks, dtype=int)

    history: deque[np.ndarray] = deque(maxlen=config.derivative_window + 1)
    for tick in range(ticks):
        t = tick * period
        ev_idx = _fire_events(events, ev_idx, t, session)
        x_meas = session.measure()
        if not np.all(np.isfinite(x_meas)):
            raise ControlAbort(f"non-finite state at t={t:.4f}s")
        x_d, _ = trajectory.sample(t)
        x_e = x_d - x_meas
        history.append(x_e)
        if len(history) > 1:
            span = len(history) - 1
            x_e_dot = (history[-1] - history[0]) / (span * period)
        else:
            x_e_dot = np.zeros(n)
        s = composite_error(x_e, x_e_dot, config.lam)
        F_t = updated_jacobian(force, session.u)
        u_prev = session.u.copy()
        u_next = bang_bang(s, F_t, session.u, config.deadband, weights)
        session.u = u_next

        times[tick] = t
        xs[tick] = x_meas
        xds[tick] = x_d
        xes[tick] = x_e
        ss[tick] = s
        us[tick] = u_next
        switches[tick] = int(np.bitwise_xor(u_prev, u_next).sum())

        session.integrate(period, dt)

    return DynamicTrace(times=times, x=xs, x_d=xds, x_e=xes, s=ss, u=us, switches=switches)


# ---------------------------------------------------------------------------
# Trace diagnostics

def chattering_amplitude(trace: DynamicTrace, weights=None, tail_fraction: float = 0.4) -> float:
    """RMS of the weighted error norm over the steady tail of a trace."""
    if not 0 < tail_fraction <= 1:
        raise ContractError("tail_fraction must be in (0, 1]")
    err = trace.error_norms(weights)
    start = int(round(trace.ticks * (1.0 - tail_fraction)))
    tail = err[start:]
    return float(np.sqrt(np.mean(tail**2)))


def fit_decay_rate(times, error_norms, floor_mult: float = 3.0) -> float:
    """Exponential-envelope rate of an error transient.

    The fit spans from the onset of decay (first sample below 90 % of the
    initial error) down to where the error approaches the chatter floor
    (estimated from the final fifth of the trace).
    """
    times = np.asarray(times, dtype=np.float64)
    err = np.asarray(error_norms, dtype=np.float64)
    if err.size < 10:
        raise ContractError("too few samples to fit a decay rate")
    floor = float(np.mean(err[int(err.size * 0.8):]))
    onset_candidates = np.flatnonzero(err < 0.9 * err[0])
    if onset_candidates.size == 0:
        raise ContractError("error never decays below 90% of its initial value")
    start = int(onset_candidates[0])
    keep = np.flatnonzero(err[start:] > floor_mult * floor) + start
    if keep.size < 5:
        raise ContractError("decay window too short for a fit")
    stop = int(keep[-1])
    window = slice(start, stop + 1)
    t = times[window]
    y = np.log(err[window])
    slope = np.polyfit(t, y, 1)[0]
    return float(-slope)
