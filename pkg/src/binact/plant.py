"""Ground-truth simulated robot.

A plant maps binary actuator inputs to a steady-state output through a
stiffness matrix and a force map, with optional quadratic cross-coupling
between actuators, readout noise, actuator faults and external loads.
Second-order dynamics (mass, damping, stiffness) are integrated with a
semi-implicit Euler step for the motion-control experiments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg

from binact.core import (
    ConfigurationError,
    ContractError,
    as_bits,
    as_state,
    fit_sqrt_dispersion,
)

PLANT_SCHEMA_VERSION = 1

# Dispersion level (per DOF) the nonlinear reference presets are tuned to.
NONLINEAR_DISPERSION_TARGET = 0.35


def _check_spd(name: str, mat: np.ndarray, n: int) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape != (n, n):
        raise ConfigurationError(f"{name} must be {n}x{n}, got {mat.shape}")
    if not np.allclose(mat, mat.T, atol=1e-12):
        raise ConfigurationError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ConfigurationError(f"{name} must be positive-definite") from None
    return mat


@dataclass(frozen=True)
class FaultState:
    """Actuators stuck in a fixed state, regardless of the commanded input."""

    stuck_on: frozenset[int] = frozenset()
    stuck_off: frozenset[int] = frozenset()

    def __post_init__(self):
        on = frozenset(int(k) for k in self.stuck_on)
        off = frozenset(int(k) for k in self.stuck_off)
        if on & off:
            raise ConfigurationError(f"fault sets overlap on actuators {sorted(on & off)}")
        if any(k < 0 for k in on | off):
            raise ConfigurationError("fault indices must be non-negative")
        object.__setattr__(self, "stuck_on", on)
        object.__setattr__(self, "stuck_off", off)

    @classmethod
    def none(cls) -> "FaultState":
        return cls()

    @property
    def faulty(self) -> frozenset[int]:
        return self.stuck_on | self.stuck_off

    def with_fault(self, actuator: int, mode: str) -> "FaultState":
        """Return a copy with one actuator forced to a mode; later entries win."""
        actuator = int(actuator)
        on = set(self.stuck_on) - {actuator}
        off = set(self.stuck_off) - {actuator}
        if mode == "stuck_on":
            on.add(actuator)
        elif mode == "stuck_off":
            off.add(actuator)
        else:
            raise ConfigurationError(f"unknown fault mode {mode!r}")
        return FaultState(frozenset(on), frozenset(off))


@dataclass(frozen=True)
class LoadState:
    """External force applied to the output, zero by default."""

    f_ext: np.ndarray = None

    def __post_init__(self):
        if self.f_ext is not None:
            f = np.asarray(self.f_ext, dtype=np.float64)
            if f.ndim != 1 or not np.all(np.isfinite(f)):
                raise ContractError("external force must be a finite 1-D vector")
            object.__setattr__(self, "f_ext", f)

    @classmethod
    def none(cls) -> "LoadState":
        return cls()

    def force(self, n: int) -> np.ndarray:
        if self.f_ext is None:
            return np.zeros(n)
        if self.f_ext.size != n:
            raise ContractError(f"external force has dimension {self.f_ext.size}, expected {n}")
        return self.f_ext


@dataclass(frozen=True)
class PlantModel:
    """Immutable ground-truth robot model.

    Fields
    ------
    n, m : output DOF count and actuator count.
    A : (n, m) true force influence columns.
    K, C, M : stiffness, damping and inertia matrices (positive-definite).
    gamma : gain on the quadratic input cross-coupling.
    Q : (n, m, m) symmetric coupling tensors with zero diagonal, so that
        single-actuator responses stay exactly linear.
    noise_sigma : (n,) readout noise standard deviations.
    x_rest : steady state with every actuator OFF.
    """

    n: int
    m: int
    A: np.ndarray
    K: np.ndarray
    C: np.ndarray
    M: np.ndarray
    gamma: float = 0.0
    Q: np.ndarray | None = None
    noise_sigma: np.ndarray | None = None
    x_rest: np.ndarray | None = None

    def __post_init__(self):
        n, m = int(self.n), int(self.m)
        if n < 1 or m < 1:
            raise ConfigurationError("plant needs n >= 1 DOFs and m >= 1 actuators")
        A = np.asarray(self.A, dtype=np.float64)
        if A.shape != (n, m) or not np.all(np.isfinite(A)):
            raise ConfigurationError(f"force map A must be finite with shape ({n}, {m})")
        K = _check_spd("K", self.K, n)
        C = _check_spd("C", self.C, n)
        M = _check_spd("M", self.M, n)
        gamma = float(self.gamma)
        if gamma < 0 or not np.isfinite(gamma):
            raise ConfigurationError("gamma must be finite and non-negative")
        Q = self.Q
        if Q is None:
            Q = np.zeros((n, m, m))
        else:
            Q = np.asarray(Q, dtype=np.float64)
            if Q.shape != (n, m, m) or not np.all(np.isfinite(Q)):
                raise ConfigurationError(f"coupling tensors must have shape ({n}, {m}, {m})")
            if not np.allclose(Q, np.swapaxes(Q, 1, 2), atol=1e-12):
                raise ConfigurationError("coupling tensors must be symmetric")
            if np.any(np.abs(Q[:, range(m), range(m)]) > 0):
                raise ConfigurationError("coupling tensors must have zero diagonal")
        noise = self.noise_sigma
        noise = np.zeros(n) if noise is None else np.asarray(noise, dtype=np.float64)
        if noise.shape != (n,) or np.any(noise < 0) or not np.all(np.isfinite(noise)):
            raise ConfigurationError("noise sigma must be a non-negative (n,) vector")
        x_rest = self.x_rest
        x_rest = np.zeros(n) if x_rest is None else as_state(x_rest, n=n)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "noise_sigma", noise)
        object.__setattr__(self, "x_rest", x_rest)

    @cached_property
    def displacement_influence(self) -> np.ndarray:
        """True displacement influence columns K^-1 A, shape (n, m)."""
        return np.linalg.solve(self.K, self.A)

    @cached_property
    def max_frequency(self) -> float:
        """Fastest undamped mode frequency, rad/s (from eig of M^-1 K)."""
        eigs = scipy.linalg.eigh(self.K, self.M, eigvals_only=True)
        return float(np.sqrt(np.max(eigs)))

    @property
    def is_isotropic(self) -> bool:
        """True when K is a scalar multiple of the identity."""
        return bool(np.allclose(self.K, self.K[0, 0] * np.eye(self.n)))

    @property
    def has_noise(self) -> bool:
        return bool(np.any(self.noise_sigma > 0))

    def stable_dt(self, safety: float = 0.25) -> float:
        """A safe integration step for the semi-implicit integrator."""
        return safety * 2.0 / self.max_frequency

    def coupling_shift(self, u_eff: np.ndarray) -> np.ndarray:
        """Quadratic cross-coupling displacement q(u) per DOF."""
        if self.gamma == 0.0:
            return np.zeros(self.n)
        uf = u_eff.astype(np.float64)
        return self.gamma * np.einsum("k,ikl,l->i", uf, self.Q, uf)


def effective_input(u, faults: FaultState | None, m: int | None = None) -> np.ndarray:
    """Mask a commanded input with the current fault state."""
    u = as_bits(u, m=m)
    if faults is None:
        return u.copy()
    for k in faults.faulty:
        if k >= u.size:
            raise ConfigurationError(f"fault index {k} out of range for m={u.size}")
    out = u.copy()
    if faults.stuck_on:
        out[list(faults.stuck_on)] = 1
    if faults.stuck_off:
        out[list(faults.stuck_off)] = 0
    return out


def steady_state(
    plant: PlantModel,
    u,
    faults: FaultState | None = None,
    load: LoadState | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Steady-state output for a commanded input.

    Readout noise is drawn from ``rng``; pass None for a noiseless readout.
    """
    u_eff = effective_input(u, faults, m=plant.m)
    f = plant.A @ u_eff.astype(np.float64)
    if load is not None:
        f = f + load.force(plant.n)
    x = plant.x_rest + np.linalg.solve(plant.K, f) + plant.coupling_shift(u_eff)
    if rng is not None and plant.has_noise:
        x = x + rng.normal(0.0, plant.noise_sigma)
    return x


def measure(plant: PlantModel, x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Noisy readout of an instantaneous state."""
    if rng is not None and plant.has_noise:
        return x + rng.normal(0.0, plant.noise_sigma)
    return np.asarray(x, dtype=np.float64).copy()


def step(
    plant: PlantModel,
    x: np.ndarray,
    x_dot: np.ndarray,
    u,
    faults: FaultState | None = None,
    load: LoadState | None = None,
    dt: float = 1e-3,
) -> tuple[np.ndarray, np.ndarray]:
    """Advance the second-order dynamics by one semi-implicit Euler step.

    Governing form: M x'' + C x' + K (x - x_rest) = A u_eff + f_ext + coupling.
    The coupling enters as the force K * gamma * q(u) so that the dynamic
    equilibrium coincides with the steady-state map.
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    w_dt = dt * plant.max_frequency
    if w_dt >= 2.0:
        raise ConfigurationError(
            f"dt={dt:g} is unstable for the fastest mode ({plant.max_frequency:.3g} rad/s); "
            f"use dt < {2.0 / plant.max_frequency:.3g}, e.g. {plant.stable_dt():.3g}"
        )
    u_eff = effective_input(u, faults, m=plant.m)
    f = plant.A @ u_eff.astype(np.float64)
    if load is not None:
        f = f + load.force(plant.n)
    f = f + plant.K @ plant.coupling_shift(u_eff)
    acc = np.linalg.solve(plant.M, f - plant.C @ x_dot - plant.K @ (x - plant.x_rest))
    v_next = x_dot + dt * acc
    x_next = x + dt * v_next
    return x_next, v_next


class PlantSession:
    """Single-owner mutable simulation state around an immutable plant.

    Tracks the commanded input, active faults and load, a simulated clock
    and the noise stream.  One session per thread; independent sessions may
    run concurrently.
    """

    def __init__(self, plant: PlantModel, rng: np.random.Generator | None = None):
        self.plant = plant
        self.u = np.zeros(plant.m, dtype=np.uint8)
        self.faults = FaultState.none()
        self.load = LoadState.none()
        self.rng = rng
        self.sim_time = 0.0
        self.x = plant.x_rest.copy()
        self.x_dot = np.zeros(plant.n)

    def read_steady(self, settle_time: float = 0.0) -> np.ndarray:
        """Let the plant settle (simulated clock) and read the steady state."""
        self.sim_time += float(settle_time)
        self.x = steady_state(self.plant, self.u, self.faults, self.load, rng=None)
        self.x_dot = np.zeros(self.plant.n)
        return steady_state(self.plant, self.u, self.faults, self.load, rng=self.rng)

    def apply_switch(self, b) -> np.ndarray:
        self.u = np.bitwise_xor(self.u, as_bits(b, m=self.plant.m))
        return self.u

    def set_fault(self, actuator: int, mode: str):
        if not 0 <= int(actuator) < self.plant.m:
            raise ConfigurationError(f"fault actuator {actuator} out of range (m={self.plant.m})")
        self.faults = self.faults.with_fault(actuator, mode)

    def set_load(self, f_ext):
        self.load = LoadState(f_ext=as_state(f_ext, n=self.plant.n))

    def settle_to_equilibrium(self):
        """Place the dynamic state at the noiseless equilibrium for current u."""
        self.x = steady_state(self.plant, self.u, self.faults, self.load, rng=None)
        self.x_dot = np.zeros(self.plant.n)

    def integrate(self, duration: float, dt: float):
        """Integrate the dynamics for a duration, holding the current input."""
        steps = int(round(duration / dt))
        for _ in range(steps):
            self.x, self.x_dot = step(
                self.plant, self.x, self.x_dot, self.u, self.faults, self.load, dt=dt
            )
        self.sim_time += steps * dt

    def measure(self) -> np.ndarray:
        return measure(self.plant, self.x, self.rng)


# ---------------------------------------------------------------------------
# Scheduled events (consumed by the controllers and the scenario harness)

@dataclass(frozen=True)
class ScheduledFault:
    """A fault injected at a control iteration (static) or time in s (dynamic)."""

    at: float
    actuator: int
    mode: str  # 'stuck_on' | 'stuck_off'
    detected: bool = False


@dataclass(frozen=True)
class ScheduledLoad:
    """An external force applied from an iteration or time onward."""

    at: float
    f_ext: np.ndarray


# ---------------------------------------------------------------------------
# Reference presets

_MEAN_FREQ = 50.0   # rad/s, dominant mode scale for reference plants
_DAMPING = 0.7      # damping ratio at the dominant mode

_PRESET_SIZES = {
    "linear20x4": (4, 20, False),
    "nonlinear20x4": (4, 20, True),
    "linear8x2": (2, 8, False),
    "linear10x2": (2, 10, False),
    "linear12x3": (3, 12, False),
}


def preset_names() -> list[str]:
    return sorted(_PRESET_SIZES)


def _draw_influence_columns(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Diverse displacement columns: no near-parallel pair, well-conditioned
    on every 2-DOF projection."""
    min_angle = np.deg2rad(5.0)
    for _ in range(200):
        dirs = rng.normal(size=(n, m))
        dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
        mags = rng.uniform(0.8, 2.0, size=m)
        D = dirs * mags
        cos = np.abs(dirs.T @ dirs)
        np.fill_diagonal(cos, 0.0)
        if np.max(cos) > np.cos(min_angle):
            continue
        ok = True
        for i in range(n):
            for j in range(i + 1, n):
                if np.linalg.cond(D[[i, j], :]) >= 50.0:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return D
    raise ConfigurationError("could not draw a well-conditioned influence set")


def _draw_coupling(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    Q = np.empty((n, m, m))
    for i in range(n):
        Qi = rng.normal(size=(m, m))
        Qi = 0.5 * (Qi + Qi.T)
        np.fill_diagonal(Qi, 0.0)
        Q[i] = Qi
    return Q


def _probe_coupling_dispersion(
    Q: np.ndarray, rng: np.random.Generator, trials: int = 400, max_sn: int = 10
) -> np.ndarray:
    """Dispersion of the coupling shift over random transitions, per DOF.

    Uses the same sqrt-law estimator as the calibration procedure, so a
    tensor normalized by this probe calibrates back to the preset target.
    """
    n, m, _ = Q.shape
    errs = np.empty((trials, n))
    counts = np.empty(trials)
    for t in range(trials):
        u = rng.integers(0, 2, size=m).astype(np.float64)
        s_n = int(rng.integers(1, max_sn + 1))
        idx = rng.choice(m, size=s_n, replace=False)
        u2 = u.copy()
        u2[idx] = 1.0 - u2[idx]
        errs[t] = np.einsum("k,ikl,l->i", u2, Q, u2) - np.einsum("k,ikl,l->i", u, Q, u)
        counts[t] = s_n
    return fit_sqrt_dispersion(np.abs(errs), counts)


def make_reference_plant(preset: str, seed: int = 0) -> PlantModel:
    """Build a reproducible reference plant; same (preset, seed) twice gives
    identical models.

    Linear presets have no coupling and no readout noise.  Nonlinear presets
    draw random coupling tensors, normalize them per DOF against the
    sqrt-law dispersion probe, and set the gain so the calibrated dispersion
    lands on NONLINEAR_DISPERSION_TARGET per DOF.
    """
    if preset not in _PRESET_SIZES:
        raise ConfigurationError(
            f"unknown preset {preset!r}; available: {', '.join(preset_names())}"
        )
    n, m, nonlinear = _PRESET_SIZES[preset]
    rng = np.random.default_rng(int(seed))

    if preset == "linear8x2":
        k_diag = np.full(n, 40.0)  # isotropic: enables the displacement shortcut
        K = np.diag(k_diag)
    else:
        k_diag = rng.uniform(30.0, 60.0, size=n)
        K = np.diag(k_diag)
        if nonlinear:
            P = rng.normal(scale=0.03 * k_diag.mean(), size=(n, n))
            K = K + 0.5 * (P + P.T)
            np.fill_diagonal(K, k_diag)
            if np.min(np.linalg.eigvalsh(K)) <= 0:
                K = np.diag(k_diag)  # fall back to the diagonal draw

    M = np.diag(np.diag(K) / _MEAN_FREQ**2)
    C = _DAMPING * _MEAN_FREQ * M + (_DAMPING / _MEAN_FREQ) * K

    D = _draw_influence_columns(n, m, rng)
    A = K @ D

    gamma = 0.0
    Q = None
    noise = np.zeros(n)
    if nonlinear:
        Q = _draw_coupling(n, m, rng)
        probe_rng = np.random.default_rng(rng.integers(0, 2**63))
        sigma_probe = _probe_coupling_dispersion(Q, probe_rng)
        Q = Q / sigma_probe[:, np.newaxis, np.newaxis]
        gamma = NONLINEAR_DISPERSION_TARGET
        noise = np.full(n, 0.02)

    return PlantModel(n=n, m=m, A=A, K=K, C=C, M=M, gamma=gamma, Q=Q, noise_sigma=noise)


# ---------------------------------------------------------------------------
# JSON persistence

def plant_to_dict(plant: PlantModel) -> dict:
    return {
        "schema_version": PLANT_SCHEMA_VERSION,
        "n": plant.n,
        "m": plant.m,
        "A": plant.A.tolist(),
        "K": plant.K.tolist(),
        "C": plant.C.tolist(),
        "M": plant.M.tolist(),
        "gamma": plant.gamma,
        "Q": plant.Q.tolist(),
        "noise_sigma": plant.noise_sigma.tolist(),
        "x_rest": plant.x_rest.tolist(),
    }


def plant_from_dict(doc: dict) -> PlantModel:
    if doc.get("schema_version") != PLANT_SCHEMA_VERSION:
        raise ConfigurationError(
            f"plant document schema_version must be {PLANT_SCHEMA_VERSION}, "
            f"got {doc.get('schema_version')!r}"
        )
    return PlantModel(
        n=doc["n"],
        m=doc["m"],
        A=np.asarray(doc["A"]),
        K=np.asarray(doc["K"]),
        C=np.asarray(doc["C"]),
        M=np.asarray(doc["M"]),
        gamma=doc.get("gamma", 0.0),
        Q=np.asarray(doc["Q"]) if doc.get("Q") is not None else None,
        noise_sigma=np.asarray(doc["noise_sigma"]) if doc.get("noise_sigma") else None,
        x_rest=np.asarray(doc["x_rest"]) if doc.get("x_rest") else None,
    )


def save_plant(plant: PlantModel, path: str | Path):
    Path(path).write_text(json.dumps(plant_to_dict(plant), indent=2))


def load_plant(path: str | Path) -> PlantModel:
    return plant_from_dict(json.loads(Path(path).read_text()))
