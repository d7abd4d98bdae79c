"""Start-up calibration: influence identification and dispersion modeling.

Influence vectors are identified by sequentially activating each actuator
from the all-OFF state.  The approximation-error dispersion is then
characterized from random correction trials and summarized as a sqrt-law
in the switching count.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.optimize
import scipy.stats

from binact.core import (
    CalibrationError,
    ConfigurationError,
    ContractError,
    DispersionModel,
    InfluenceMatrix,
    fit_sqrt_dispersion,
    superpose,
    updated_jacobian,
)
from binact.plant import FaultState, LoadState, PlantModel, steady_state

CALIBRATION_SCHEMA_VERSION = 1

# Per-actuator dispersion mode is only selected when actuator contributions
# genuinely differ; below this spread the shared sqrt-law form is used.
PER_ACTUATOR_SPREAD_FACTOR = 2.0


@dataclass(frozen=True)
class DispersionDiagnostics:
    """Raw trial data and correlation checks behind a dispersion model."""

    s_n: np.ndarray              # (T,)
    eps_a: np.ndarray            # (T, n) signed approximation errors
    base_distance: np.ndarray    # (T,) distance of the trial base point from x0
    shared_sigma: np.ndarray     # (n,) fitted sqrt-law sigma
    per_actuator_sigma: np.ndarray  # (n, m) estimated per-actuator sigma
    spearman_sn: tuple[float, float]             # rho, p of ||eps_a|| vs s_n
    spearman_base_distance: tuple[float, float]  # rho, p of ||eps_a|| vs base distance

    @property
    def trials(self) -> int:
        return self.s_n.size


@dataclass(frozen=True)
class CalibrationReport:
    """Everything the controllers need from a calibration run."""

    x0: np.ndarray
    J: InfluenceMatrix
    dispersion: DispersionModel
    F: InfluenceMatrix | None = None
    sample_count: int = 0
    residual_stats: tuple = ()
    diagnostics: DispersionDiagnostics | None = None

    @property
    def n(self) -> int:
        return self.J.n

    @property
    def m(self) -> int:
        return self.J.m


def identify_influence_vectors(
    plant: PlantModel,
    repeats: int = 1,
    faults: FaultState | None = None,
    load: LoadState | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, InfluenceMatrix]:
    """Identify the displacement influence columns by sequential activation.

    Each repeat reads the all-OFF baseline once and then every single-actuator
    state exactly once; readouts are averaged over repeats.
    """
    if repeats < 1:
        raise ContractError("repeats must be >= 1")
    n, m = plant.n, plant.m
    x0_acc = np.zeros(n)
    xk_acc = np.zeros((n, m))
    u = np.zeros(m, dtype=np.uint8)
    for _ in range(repeats):
        x0_acc += steady_state(plant, u, faults, load, rng)
        for k in range(m):
            u[k] = 1
            xk_acc[:, k] += steady_state(plant, u, faults, load, rng)
            u[k] = 0
    x0 = x0_acc / repeats
    columns = xk_acc / repeats - x0[:, np.newaxis]
    if not np.all(np.isfinite(x0)) or not np.all(np.isfinite(columns)):
        raise CalibrationError("calibration readouts contain non-finite values")
    return x0, InfluenceMatrix(columns=columns, kind="displacement")


def force_from_displacement(J: InfluenceMatrix, K: np.ndarray) -> InfluenceMatrix:
    """Convert displacement influence columns to force columns through K."""
    K = np.asarray(K, dtype=np.float64)
    if K.shape != (J.n, J.n):
        raise ContractError(f"stiffness must be {J.n}x{J.n}, got {K.shape}")
    try:
        np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        raise ConfigurationError("stiffness matrix must be positive-definite") from None
    return InfluenceMatrix(columns=K @ J.columns, kind="force")


def characterize_dispersion(
    plant: PlantModel,
    x0: np.ndarray,
    J: InfluenceMatrix,
    trials: int = 100,
    max_sn: int = 10,
    rng: np.random.Generator | None = None,
    faults: FaultState | None = None,
    load: LoadState | None = None,
) -> tuple[DispersionModel, DispersionDiagnostics]:
    """Measure approximation errors over random corrections and fit a model.

    Each trial draws a random base input (each bit Bernoulli 0.5) and a random
    switch vector with a uniform switching count in [1, max_sn], measures the
    realized state change against the first-order prediction, and records the
    per-DOF error.  The shared sigma comes from the sqrt-law fit; per-actuator
    contributions are estimated by non-negative least squares on the squared
    errors and only selected when their spread is large.
    """
    if trials < 30:
        raise ContractError("dispersion characterization needs at least 30 trials")
    if rng is None:
        rng = np.random.default_rng()
    n, m = plant.n, plant.m
    max_sn = min(int(max_sn), m)
    if max_sn < 1:
        raise ContractError("max_sn must be >= 1")

    eps_a = np.empty((trials, n))
    s_n = np.empty(trials, dtype=int)
    base_dist = np.empty(trials)
    B = np.zeros((trials, m))
    for t in range(trials):
        u = rng.integers(0, 2, size=m).astype(np.uint8)
        count = int(rng.integers(1, max_sn + 1))
        idx = rng.choice(m, size=count, replace=False)
        b = np.zeros(m, dtype=np.uint8)
        b[idx] = 1
        x_before = steady_state(plant, u, faults, load, rng)
        x_after = steady_state(plant, np.bitwise_xor(u, b), faults, load, rng)
        prediction = superpose(updated_jacobian(J, u), b)
        eps_a[t] = (x_after - x_before) - prediction
        s_n[t] = count
        base_dist[t] = np.linalg.norm(x_before - x0)
        B[t] = b

    shared = fit_sqrt_dispersion(np.abs(eps_a), s_n)

    # Per-actuator variance attribution: eps^2 ~ sum_k b_k sigma_k^2, NNLS per DOF.
    per_actuator = np.empty((n, m))
    for i in range(n):
        var_k, _ = scipy.optimize.nnls(B, eps_a[:, i] ** 2)
        per_actuator[i] = np.sqrt(var_k)

    norm_err = np.linalg.norm(eps_a, axis=1)
    rho_sn, p_sn = scipy.stats.spearmanr(s_n, norm_err)
    rho_bd, p_bd = scipy.stats.spearmanr(base_dist, norm_err)

    spread_exceeded = False
    for i in range(n):
        med = np.median(per_actuator[i])
        if med > 0 and np.max(per_actuator[i]) > PER_ACTUATOR_SPREAD_FACTOR * med:
            spread_exceeded = True
            break
    if spread_exceeded:
        model = DispersionModel(per_actuator_sigma=per_actuator, shared_sigma=None)
    else:
        model = DispersionModel(per_actuator_sigma=per_actuator, shared_sigma=shared)

    diag = DispersionDiagnostics(
        s_n=s_n,
        eps_a=eps_a,
        base_distance=base_dist,
        shared_sigma=shared,
        per_actuator_sigma=per_actuator,
        spearman_sn=(float(rho_sn), float(p_sn)),
        spearman_base_distance=(float(rho_bd), float(p_bd)),
    )
    return model, diag


def _residual_stats(diag: DispersionDiagnostics) -> tuple:
    stats = []
    for count in sorted(set(diag.s_n.tolist())):
        rows = diag.eps_a[diag.s_n == count]
        stats.append(
            {
                "s_n": int(count),
                "count": int(rows.shape[0]),
                "mean": rows.mean(axis=0).tolist(),
                "std": rows.std(axis=0, ddof=1).tolist() if rows.shape[0] > 1 else [0.0] * rows.shape[1],
            }
        )
    return tuple(stats)


def calibrate(
    plant: PlantModel,
    repeats: int = 1,
    trials: int = 100,
    max_sn: int = 10,
    rng: np.random.Generator | None = None,
    stiffness: np.ndarray | None = None,
    faults: FaultState | None = None,
    load: LoadState | None = None,
) -> CalibrationReport:
    """Full start-up calibration: identify influence vectors, convert to force
    columns, and characterize the approximation-error dispersion."""
    x0, J = identify_influence_vectors(plant, repeats, faults, load, rng)
    K = plant.K if stiffness is None else stiffness
    F = force_from_displacement(J, K)
    model, diag = characterize_dispersion(plant, x0, J, trials, max_sn, rng, faults, load)
    return CalibrationReport(
        x0=x0,
        J=J,
        F=F,
        dispersion=model,
        sample_count=diag.trials,
        residual_stats=_residual_stats(diag),
        diagnostics=diag,
    )


# ---------------------------------------------------------------------------
# Persistence

def report_to_dict(report: CalibrationReport) -> dict:
    doc = {
        "schema_version": CALIBRATION_SCHEMA_VERSION,
        "n": report.n,
        "m": report.m,
        "x0": report.x0.tolist(),
        "J": report.J.columns.tolist(),
        "F": report.F.columns.tolist() if report.F is not None else None,
        "dispersion": {
            "per_actuator_sigma": (
                report.dispersion.per_actuator_sigma.tolist()
                if report.dispersion.per_actuator_sigma is not None
                else None
            ),
            "shared_sigma": (
                report.dispersion.shared_sigma.tolist()
                if report.dispersion.shared_sigma is not None
                else None
            ),
        },
        "sample_count": report.sample_count,
        "residual_stats": list(report.residual_stats),
    }
    if report.diagnostics is not None:
        doc["correlations"] = {
            "spearman_sn": list(report.diagnostics.spearman_sn),
            "spearman_base_distance": list(report.diagnostics.spearman_base_distance),
        }
    return doc


def report_from_dict(doc: dict) -> CalibrationReport:
    if doc.get("schema_version") != CALIBRATION_SCHEMA_VERSION:
        raise ConfigurationError(
            f"calibration schema_version must be {CALIBRATION_SCHEMA_VERSION}, "
            f"got {doc.get('schema_version')!r}"
        )
    disp = doc["dispersion"]
    model = DispersionModel(
        per_actuator_sigma=(
            np.asarray(disp["per_actuator_sigma"]) if disp.get("per_actuator_sigma") else None
        ),
        shared_sigma=np.asarray(disp["shared_sigma"]) if disp.get("shared_sigma") else None,
    )
    return CalibrationReport(
        x0=np.asarray(doc["x0"], dtype=np.float64),
        J=InfluenceMatrix(columns=np.asarray(doc["J"]), kind="displacement"),
        F=InfluenceMatrix(columns=np.asarray(doc["F"]), kind="force") if doc.get("F") else None,
        dispersion=model,
        sample_count=doc.get("sample_count", 0),
        residual_stats=tuple(doc.get("residual_stats", ())),
    )


def save_report(report: CalibrationReport, path: str | Path):
    Path(path).write_text(json.dumps(report_to_dict(report), indent=2))


def load_report(path: str | Path) -> CalibrationReport:
    return report_from_dict(json.loads(Path(path).read_text()))


def write_dispersion_csv(diag: DispersionDiagnostics, path: str | Path):
    """Raw trial export: one row per random correction."""
    n = diag.eps_a.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial", "s_n"] + [f"eps_a_{i}" for i in range(n)])
        for t in range(diag.trials):
            writer.writerow(
                [t, int(diag.s_n[t])] + [format(v, ".12g") for v in diag.eps_a[t]]
            )
