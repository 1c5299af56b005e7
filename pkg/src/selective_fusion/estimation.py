"""Batch weighted-least-squares fusion and the misspecified-noise experiment.

Measurement model per sensor: ``x = H y + e`` with ``E[e e^T] = R``. Fusing
several sensors with the information-form sum gives the minimum-variance
unbiased estimate, but only when each declared ``R`` is honest. The
Monte-Carlo helpers here show what happens when one sensor under-reports its
noise.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

from selective_fusion.errors import InvalidInputError, InvalidModelError, SingularSystemError

PIVOT_TOL = 1e-10


@dataclass(frozen=True)
class MeasurementModel:
    H: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if R.shape != (H.shape[0], H.shape[0]):
            raise InvalidInputError(f"R has shape {R.shape}, expected {(H.shape[0],) * 2}")
        _check_spd(R, "R")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "R", R)

    @property
    def n_x(self) -> int:
        return self.H.shape[0]

    @property
    def n_y(self) -> int:
        return self.H.shape[1]


@dataclass(frozen=True)
class FusedEstimate:
    y_hat: np.ndarray
    covariance: np.ndarray


def _check_spd(M: np.ndarray, name: str) -> None:
    if not np.allclose(M, M.T, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise InvalidModelError(f"{name} is not symmetric")
    eig = np.linalg.eigvalsh(M)
    if eig[-1] <= 0 or eig[0] <= 1e-12 * eig[-1]:
        raise InvalidModelError(f"{name} is not positive definite (eigenvalues {eig[0]:g}..{eig[-1]:g})")


def _solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A z = b`` by pivoted LU, refusing near-singular systems."""
    with warnings.catch_warnings():
        # Singularity is reported below through the pivot check.
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
    pivots = np.abs(np.diag(lu))
    if pivots.max() == 0 or pivots.min() < PIVOT_TOL * pivots.max():
        raise SingularSystemError("normal equations are singular to within pivot tolerance")
    return scipy.linalg.lu_solve((lu, piv), b)


def _information(m: MeasurementModel, x: np.ndarray) -> tuple:
    """Return ``(H^T R^-1 H, H^T R^-1 x)`` without forming ``R^-1``."""
    cho = scipy.linalg.cho_factor(m.R)
    Rinv_H = scipy.linalg.cho_solve(cho, m.H)
    Rinv_x = scipy.linalg.cho_solve(cho, x)
    return m.H.T @ Rinv_H, m.H.T @ Rinv_x


def ls_estimate(H, x) -> np.ndarray:
    """Ordinary least squares via the normal equations."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != H.shape[0]:
        raise InvalidInputError(f"x has length {x.shape[0]}, H has {H.shape[0]} rows")
    return _solve(H.T @ H, H.T @ x)


def wls_estimate(m: MeasurementModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != m.n_x:
        raise InvalidInputError(f"x has length {x.shape[0]}, model expects {m.n_x}")
    info, vec = _information(m, x)
    return _solve(info, vec)


def batch_fuse(models: Sequence[MeasurementModel], xs: Sequence) -> FusedEstimate:
    """Fuse several sensors in information form; also returns the covariance."""
    if not models:
        raise InvalidInputError("no measurement models to fuse")
    if len(models) != len(xs):
        raise InvalidInputError(f"{len(models)} models but {len(xs)} measurement vectors")
    n_y = models[0].n_y
    info = np.zeros((n_y, n_y))
    vec = np.zeros(n_y)
    for m, x in zip(models, xs):
        if m.n_y != n_y:
            raise InvalidInputError("models disagree on the state dimension")
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != m.n_x:
            raise InvalidInputError(f"x has length {x.shape[0]}, model expects {m.n_x}")
        i_m, v_m = _information(m, x)
        info += i_m
        vec += v_m
    y_hat = _solve(info, vec)
    cov = _solve(info, np.eye(n_y))
    return FusedEstimate(y_hat, 0.5 * (cov + cov.T))


def stack_models(models: Sequence[MeasurementModel]) -> MeasurementModel:
    """Row-stack independent sensors into one block-diagonal-noise model."""
    return MeasurementModel(
        np.vstack([m.H for m in models]),
        scipy.linalg.block_diag(*[m.R for m in models]),
    )


def sample_measurements(true_y, models, true_noise_covs, rng: np.random.Generator) -> list:
    """Draw ``x_i = H_i y + e_i`` with ``e_i ~ N(0, true_noise_covs[i])``."""
    true_y = np.asarray(true_y, dtype=float).reshape(-1)
    xs = []
    for m, cov in zip(models, true_noise_covs):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        _check_spd(cov, "true noise covariance")
        L = np.linalg.cholesky(cov)
        xs.append(m.H @ true_y + L @ rng.standard_normal(m.n_x))
    return xs


def misspecification_trial(true_y, models, true_noise_covs, subset, rng: np.random.Generator) -> float:
    """One Monte-Carlo draw: squared error of fusing ``subset`` with the declared R.

    All sensors are sampled so that the RNG stream does not depend on the
    subset; comparisons between subsets therefore share the same noise.
    """
    if not subset:
        raise InvalidInputError("subset must be nonempty")
    if len(true_noise_covs) != len(models):
        raise InvalidInputError("need one true noise covariance per model")
    xs = sample_measurements(true_y, models, true_noise_covs, rng)
    est = batch_fuse([models[i] for i in subset], [xs[i] for i in subset])
    err = est.y_hat - np.asarray(true_y, dtype=float).reshape(-1)
    return float(err @ err)


@dataclass(frozen=True)
class SubsetResult:
    subset_id: str
    subset: tuple
    mean_squared_error: float
    std_error: float
    analytic_mse: float


def compare_subsets(true_y, models, true_noise_covs, subsets, trials: int, seed: int) -> list:
    """Mean squared error of each subset over seeded trials.

    Every subset sees the same measurement draws (common random numbers).
    ``analytic_mse`` is the trace of the declared fused covariance, which is
    only the true error when the declared noise is honest.
    """
    true_y = np.asarray(true_y, dtype=float).reshape(-1)
    chol = []
    for cov in true_noise_covs:
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        _check_spd(cov, "true noise covariance")
        chol.append(np.linalg.cholesky(cov))
    # Information form is linear in x: precompute the gain per subset.
    gains = {}
    for sid, subset in subsets.items():
        if not subset:
            raise InvalidInputError(f"subset {sid!r} is empty")
        info_terms = [_information(models[i], np.zeros(models[i].n_x))[0] for i in subset]
        info = sum(info_terms)
        cov = _solve(info, np.eye(len(true_y)))
        blocks = []
        for i in subset:
            cho = scipy.linalg.cho_factor(models[i].R)
            blocks.append(cov @ models[i].H.T @ scipy.linalg.cho_solve(cho, np.eye(models[i].n_x)))
        gains[sid] = (blocks, float(np.trace(cov)))

    rng = np.random.default_rng(seed)
    errs = {sid: np.empty(trials) for sid in subsets}
    for t in range(trials):
        xs = [m.H @ true_y + L @ rng.standard_normal(m.n_x) for m, L in zip(models, chol)]
        for sid, subset in subsets.items():
            blocks, _ = gains[sid]
            y_hat = sum(B @ xs[i] for B, i in zip(blocks, subset))
            d = y_hat - true_y
            errs[sid][t] = d @ d
    out = []
    for sid, subset in subsets.items():
        e = errs[sid]
        std_err = float(e.std(ddof=1) / np.sqrt(trials)) if trials > 1 else float("nan")
        out.append(SubsetResult(sid, tuple(subset), float(e.mean()), std_err, gains[sid][1]))
    return out


def load_wls_config(path) -> dict:
    """Parse a WLS experiment JSON into models, true covariances and subsets."""
    data = json.loads(Path(path).read_text())
    return wls_config_from_dict(data)


def wls_config_from_dict(data: dict) -> dict:
    try:
        sensors = data["sensors"]
        models = [MeasurementModel(np.asarray(s["H"], dtype=float), np.asarray(s["R"], dtype=float)) for s in sensors]
        true_covs = [np.atleast_2d(np.asarray(s.get("true_cov", s["R"]), dtype=float)) for s in sensors]
        names = [s.get("name", str(i)) for i, s in enumerate(sensors)]
        raw_subsets = data.get("subsets") or {"all": list(range(len(models)))}
        if isinstance(raw_subsets, list):
            raw_subsets = {"+".join(names[i] for i in sub): sub for sub in raw_subsets}
        subsets = {str(k): [int(i) for i in v] for k, v in raw_subsets.items()}
        for sub in subsets.values():
            if any(i < 0 or i >= len(models) for i in sub):
                raise InvalidInputError(f"subset {sub} references unknown sensor")
        true_y = np.asarray(data.get("true_y", [0.0] * models[0].n_y), dtype=float)
        return {
            "models": models,
            "true_noise_covs": true_covs,
            "subsets": subsets,
            "true_y": true_y,
            "trials": int(data.get("trials", 10_000)),
            "seed": int(data["seed"]),
        }
    except KeyError as exc:
        raise InvalidInputError(f"missing key {exc} in WLS config") from exc


def run_wls_demo(cfg: dict) -> list:
    return compare_subsets(
        cfg["true_y"], cfg["models"], cfg["true_noise_covs"], cfg["subsets"], cfg["trials"], cfg["seed"]
    )


def write_subset_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subset_id", "sensors", "mean_squared_error", "std_error", "declared_trace"])
        for r in results:
            w.writerow(
                [
                    r.subset_id,
                    " ".join(str(i) for i in r.subset),
                    f"{r.mean_squared_error:.10g}",
                    f"{r.std_error:.10g}",
                    f"{r.analytic_mse:.10g}",
                ]
            )
