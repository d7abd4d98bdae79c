"""Domain types and the pure algebra of influence vectors.

State vectors are plain float arrays of fixed dimension n; actuator input
and switch vectors are uint8 arrays of {0,1} of fixed length m.  All
operations here are pure and reentrant; values are freely shareable across
threads.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class BinactError(Exception):
    """Base class for all package errors."""


class ContractError(BinactError):
    """An argument violates an operation's contract (shape, domain, finiteness)."""


class ConfigurationError(BinactError):
    """A model or run configuration is invalid (singular matrices, bad schedules)."""


class CalibrationError(BinactError):
    """Calibration produced or received non-finite data."""


class BudgetError(BinactError):
    """A combinatorial search exceeded its evaluation budget."""


class ControlAbort(BinactError):
    """A control run hit a non-recoverable runtime condition."""


# ---------------------------------------------------------------------------
# Vector validation

def as_state(values, n: int | None = None) -> np.ndarray:
    """Validate and return a state vector as a float64 array of shape (n,)."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise ContractError(f"state vector must be 1-D and non-empty, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractError("state vector entries must be finite")
    if n is not None and x.size != n:
        raise ContractError(f"state vector has dimension {x.size}, expected {n}")
    return x


def as_bits(bits, m: int | None = None) -> np.ndarray:
    """Validate and return an input/switch vector as a uint8 array of {0,1}."""
    b = np.asarray(bits)
    if b.ndim != 1 or b.size < 1:
        raise ContractError(f"bit vector must be 1-D and non-empty, got shape {b.shape}")
    if not np.isin(b, (0, 1)).all():
        raise ContractError("bit vector entries must be exactly 0 or 1")
    if m is not None and b.size != m:
        raise ContractError(f"bit vector has length {b.size}, expected {m}")
    return b.astype(np.uint8)


def switching_count(b) -> int:
    """Number of switching actuators: the population count of a switch vector."""
    return int(as_bits(b).sum())


# ---------------------------------------------------------------------------
# Composite domain types

@dataclass(frozen=True)
class InfluenceMatrix:
    """Per-actuator influence vectors stacked as the columns of an n-by-m matrix.

    ``kind`` tags whether columns are steady-state displacements or
    constrained-output forces; the algebra is identical for both.
    """

    columns: np.ndarray
    kind: str = "displacement"

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=np.float64)
        if cols.ndim != 2 or cols.shape[0] < 1 or cols.shape[1] < 1:
            raise ContractError(f"influence matrix must be 2-D, got shape {cols.shape}")
        if not np.all(np.isfinite(cols)):
            raise ContractError("influence matrix entries must be finite")
        if self.kind not in ("displacement", "force"):
            raise ContractError(f"unknown influence kind {self.kind!r}")
        object.__setattr__(self, "columns", cols)

    @property
    def n(self) -> int:
        return self.columns.shape[0]

    @property
    def m(self) -> int:
        return self.columns.shape[1]

    def column(self, k: int) -> np.ndarray:
        return self.columns[:, k]


@dataclass(frozen=True)
class TargetSpec:
    """A desired state with per-DOF allowable errors and weights.

    Zero-weight DOFs are ignored by controllers (cost, stopping, probability
    products); tolerances must be strictly positive on weighted DOFs.
    """

    x_d: np.ndarray
    tolerance: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        x_d = as_state(self.x_d)
        n = x_d.size
        tol = np.asarray(self.tolerance, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if tol.shape != (n,) or w.shape != (n,):
            raise ContractError("tolerance and weights must match the target dimension")
        if not np.all(np.isfinite(tol)) or not np.all(np.isfinite(w)):
            raise ContractError("tolerance and weights must be finite")
        if np.any(w < 0):
            raise ContractError("weights must be non-negative")
        if not np.any(w > 0):
            raise ContractError("at least one weight must be strictly positive")
        if np.any(tol[w > 0] <= 0):
            raise ContractError("tolerances must be strictly positive on weighted DOFs")
        object.__setattr__(self, "x_d", x_d)
        object.__setattr__(self, "tolerance", tol)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.x_d.size

    @property
    def weighted_mask(self) -> np.ndarray:
        return self.weights > 0


@dataclass(frozen=True)
class DispersionModel:
    """Per-DOF standard deviation of the approximation error as a function of b.

    In per-actuator mode the variance for a switch vector b is the sum of the
    selected actuators' variance contributions.  When ``shared_sigma`` is set,
    all actuators share one contribution and the dispersion grows as
    sqrt(s_n) times that vector; the shared form takes precedence.
    """

    per_actuator_sigma: np.ndarray | None = None  # (n, m), column k = sigma_k
    shared_sigma: np.ndarray | None = None        # (n,)

    def __post_init__(self):
        per = self.per_actuator_sigma
        shared = self.shared_sigma
        if per is None and shared is None:
            raise ContractError("dispersion model needs per-actuator or shared sigmas")
        if per is not None:
            per = np.asarray(per, dtype=np.float64)
            if per.ndim != 2:
                raise ContractError("per-actuator sigma must be an (n, m) array")
            if not np.all(np.isfinite(per)) or np.any(per < 0):
                raise ContractError("per-actuator sigmas must be finite and non-negative")
            object.__setattr__(self, "per_actuator_sigma", per)
        if shared is not None:
            shared = np.asarray(shared, dtype=np.float64)
            if shared.ndim != 1:
                raise ContractError("shared sigma must be an (n,) vector")
            if not np.all(np.isfinite(shared)) or np.any(shared < 0):
                raise ContractError("shared sigma must be finite and non-negative")
            object.__setattr__(self, "shared_sigma", shared)
        if per is not None and shared is not None and per.shape[0] != shared.size:
            raise ContractError("per-actuator and shared sigmas disagree on n")

    @classmethod
    def shared(cls, sigma) -> "DispersionModel":
        return cls(per_actuator_sigma=None, shared_sigma=np.asarray(sigma, dtype=np.float64))

    @classmethod
    def per_actuator(cls, sigmas) -> "DispersionModel":
        return cls(per_actuator_sigma=np.asarray(sigmas, dtype=np.float64), shared_sigma=None)

    @classmethod
    def zero(cls, n: int) -> "DispersionModel":
        return cls.shared(np.zeros(n))

    @property
    def n(self) -> int:
        if self.shared_sigma is not None:
            return self.shared_sigma.size
        return self.per_actuator_sigma.shape[0]

    def sigma_for(self, b) -> np.ndarray:
        """Predicted per-DOF dispersion for one switch vector, shape (n,)."""
        return self.sigma_for_batch(np.atleast_2d(as_bits(b)))[0]

    def sigma_for_batch(self, B: np.ndarray) -> np.ndarray:
        """Predicted per-DOF dispersion for a (k, m) batch of switch vectors."""
        B = np.asarray(B, dtype=np.float64)
        if self.shared_sigma is not None:
            s_n = B.sum(axis=1, keepdims=True)
            return np.sqrt(s_n) * self.shared_sigma[np.newaxis, :]
        var = B @ (self.per_actuator_sigma ** 2).T
        return np.sqrt(var)


def fit_sqrt_dispersion(abs_errors: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Fit the shared per-DOF dispersion sigma from |error| ~ sigma*sqrt(s_n).

    Least squares of the absolute error against sqrt(s_n) through the origin,
    rescaled by sqrt(pi/2) so the slope estimates a standard deviation rather
    than a mean absolute error (half-normal correction).

    Parameters
    ----------
    abs_errors : (T, n) absolute approximation errors per trial and DOF.
    counts : (T,) switching count of each trial.
    """
    abs_errors = np.atleast_2d(np.asarray(abs_errors, dtype=np.float64))
    counts = np.asarray(counts, dtype=np.float64)
    if abs_errors.shape[0] != counts.size:
        raise ContractError("one switching count per trial row is required")
    if np.any(counts < 0):
        raise ContractError("switching counts must be non-negative")
    denom = counts.sum()
    if denom <= 0:
        raise ContractError("at least one trial must switch an actuator")
    slope = np.sqrt(counts) @ abs_errors / denom
    return slope * np.sqrt(np.pi / 2.0)


# ---------------------------------------------------------------------------
# Algebra

def state_error(x_d, x) -> np.ndarray:
    """Static state error: desired minus measured state, componentwise."""
    x_d = as_state(x_d)
    x = as_state(x, n=x_d.size)
    return x_d - x


def apply_switch(u, b) -> np.ndarray:
    """Apply a switch vector to an input vector: componentwise exclusive-or."""
    u = as_bits(u)
    b = as_bits(b, m=u.size)
    return np.bitwise_xor(u, b)


def update_influence(d_k, u_k) -> np.ndarray:
    """Sign-update one influence vector for the actuator's current input state.

    An actuator that is already ON can only go back OFF, so its usable
    influence is the negation of the calibrated one.
    """
    d_k = np.asarray(d_k, dtype=np.float64)
    if u_k not in (0, 1):
        raise ContractError(f"input bit must be 0 or 1, got {u_k!r}")
    return -d_k if u_k else d_k.copy()


def updated_jacobian(
    J: InfluenceMatrix,
    u,
    x=None,
    linearizer: Callable[[np.ndarray, np.ndarray, np.ndarray | None], np.ndarray] | None = None,
) -> InfluenceMatrix:
    """Columnwise sign-update of an influence matrix for the current input u.

    An optional ``linearizer(columns, u, x)`` may return state/input corrected
    columns; the correction is applied before the sign update.
    """
    u = as_bits(u, m=J.m)
    cols = J.columns
    if linearizer is not None:
        cols = np.asarray(linearizer(cols, u, x), dtype=np.float64)
        if cols.shape != J.columns.shape:
            raise CalibrationError(
                f"linearizer changed the influence shape from {J.columns.shape} to {cols.shape}"
            )
        if not np.all(np.isfinite(cols)):
            raise CalibrationError("linearizer returned non-finite influence values")
    signs = 1.0 - 2.0 * u.astype(np.float64)
    return InfluenceMatrix(columns=cols * signs[np.newaxis, :], kind=J.kind)


def superpose(J_tilde: InfluenceMatrix, b) -> np.ndarray:
    """First-order linear prediction of the state change for a switch vector."""
    b = as_bits(b, m=J_tilde.m)
    return J_tilde.columns @ b.astype(np.float64)


def residual(J_tilde: InfluenceMatrix, b, x_e) -> np.ndarray:
    """Resolution error: predicted state change minus the desired correction."""
    x_e = as_state(x_e, n=J_tilde.n)
    return superpose(J_tilde, b) - x_e


# ---------------------------------------------------------------------------
# Seed derivation

def substream(master_seed: int, name: str) -> np.random.Generator:
    """Derive a named, independent random stream from a master seed.

    sha256(master_seed ':' name) -> u64 -> PCG64.  Reseeding one named stream
    never perturbs any other.
    """
    digest = hashlib.sha256(f"{int(master_seed)}:{name}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little", signed=False))


def split_rng(rng: np.random.Generator, k: int) -> list[np.random.Generator]:
    """Pre-split k child streams so parallel and sequential use agree."""
    return rng.spawn(k)
