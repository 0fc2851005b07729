"""Diffusion approximants built from the drivers of a coupled sample.

All paths live on one shared grid: the arrival epochs plus a uniform grid of
spacing delta. Between grid points they interpolate linearly, so sup-distances
against them are resolution-limited.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from kmtq import dist
from kmtq.kmt import BRANCH_PERTURBED, CoupledSample
from kmtq.paths import GridPath, linear_path, reflect, running_infimum, time_change
from kmtq.storage import InvariantError, ParameterError, error, write_csv

DEFAULT_DELTA_FRACTION = 1 / 4096

# Rounding slack allowed below zero before a negative E_n is an error.
E_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ApproximantSet:
    grid: np.ndarray
    H: GridPath
    H_hat: GridPath
    R: GridPath
    E: GridPath
    E_tilde: GridPath
    X: GridPath
    Y_hat: GridPath
    branch: str
    r_n: float

    @property
    def queue_length(self) -> GridPath:
        return approx_queue_length(self.X)


def shared_grid(sample: CoupledSample, horizon: float, delta: float | None = None) -> np.ndarray:
    """Arrival epochs joined with a uniform grid over [0, horizon]."""
    if not horizon > 0:
        error(f"Horizon must be positive, got {horizon}", ParameterError)
    step = horizon * DEFAULT_DELTA_FRACTION if delta is None else delta
    if not step > 0:
        error(f"Grid spacing must be positive, got {step}", ParameterError)
    uniform = np.append(np.arange(0.0, horizon, step), horizon)
    epochs = sample.T[(sample.T >= 0) & (sample.T <= horizon)]
    return np.unique(np.concatenate([uniform, epochs]))


def _shift(sample: CoupledSample, r_n: float | None) -> float:
    if sample.branch != BRANCH_PERTURBED:
        return 0.0
    return dist.r_n(sample.arrival) if r_n is None else r_n


def build_H(sample: CoupledSample, grid, r_n: float | None = None) -> GridPath:
    """H_n(t) = npG(t) [+ np r_n] + sqrt(n) (p B^br_G(t) + sqrt(p(1-p)) B-hat_G(t))."""
    grid = np.asarray(grid, dtype=float)
    n, p = sample.n, sample.p
    G = dist.limit_cdf(sample.arrival)
    tau = linear_path(grid, dist.cdf(G, grid), grid[-1])
    bridge = time_change(sample.bridge, tau).values
    dropout = time_change(sample.dropout_bm, tau).values
    values = (n * p * tau.values + n * p * _shift(sample, r_n)
              + math.sqrt(n) * (p * bridge + math.sqrt(p * (1 - p)) * dropout))
    return tau.with_values(values)


def build_R(H: GridPath, sample: CoupledSample) -> GridPath:
    """R_n(t) = sqrt(n) sigma B_pG(t) + mu H_n(t)."""
    G = dist.limit_cdf(sample.arrival)
    mu, sigma = sample.service.mean, sample.service.sd
    b = np.asarray(sample.service_bm.at(sample.p * dist.cdf(G, H.knots)), dtype=float)
    return H.with_values(math.sqrt(sample.n) * sigma * b + mu * H.values)


def build_E(G, p: float, n: int, mu: float, c_n: float, grid,
            r_n: float = 0.0) -> tuple[GridPath, GridPath]:
    """E_n(t) = c_n t/(n mu) [+ p r_n] + inf_{s<=t} E~_n(s), with E~_n(s) = pG(s) - c_n s/(n mu).

    Returns (E_n, E~_n). The infimum is taken over the grid, closed at t.
    """
    grid = np.asarray(grid, dtype=float)
    drift = c_n * grid / (n * mu)
    e_tilde = linear_path(grid, p * dist.cdf(G, grid) - drift, grid[-1])
    values = drift + p * r_n + running_infimum(e_tilde).values
    if np.any(values < -E_TOLERANCE):
        raise InvariantError(f"Time change E_n went negative (min {values.min():.3g})")
    return e_tilde.with_values(np.maximum(values, 0.0)), e_tilde


def build_X(H: GridPath, sample: CoupledSample, E: GridPath, c_n: float) -> GridPath:
    """X_n(t) = H_n(t) - c_n t/mu + sqrt(n) (sigma/mu) B_E_n(t)."""
    mu, sigma = sample.service.mean, sample.service.sd
    b = time_change(sample.service_bm, E).values
    return H.with_values(H.values - c_n * H.knots / mu + math.sqrt(sample.n) * sigma / mu * b)


def build_Yhat(H_hat: GridPath, sample: CoupledSample, E: GridPath, c_n: float) -> GridPath:
    """Y-hat_n(t) = H-hat_n(t) - c_n t/(sqrt(n) mu) + (sigma/mu) B_E_n(t); sqrt(n) Y-hat_n = X_n."""
    mu, sigma = sample.service.mean, sample.service.sd
    b = time_change(sample.service_bm, E).values
    root_n = math.sqrt(sample.n)
    return H_hat.with_values(H_hat.values - c_n * H_hat.knots / (root_n * mu) + sigma / mu * b)


def approx_queue_length(path: GridPath) -> GridPath:
    """phi(X_n) or phi(Y-hat_n)."""
    return reflect(path)


def reflected_workload(R: GridPath, c_n: float) -> GridPath:
    """phi(R_n - c_n id), the remaining-workload approximant."""
    return reflect(R.with_values(R.values - c_n * R.knots))


def build_approximants(sample: CoupledSample, c_n: float, grid) -> ApproximantSet:
    grid = np.asarray(grid, dtype=float)
    r = _shift(sample, None)
    H = build_H(sample, grid, r)
    H_hat = H.with_values(H.values / math.sqrt(sample.n))
    R = build_R(H, sample)
    E, E_tilde = build_E(dist.limit_cdf(sample.arrival), sample.p, sample.n,
                         sample.service.mean, c_n, grid, r)
    X = build_X(H, sample, E, c_n)
    Y_hat = build_Yhat(H_hat, sample, E, c_n)
    return ApproximantSet(grid, H, H_hat, R, E, E_tilde, X, Y_hat, sample.branch, r)


def write_approximants_csv(approx: ApproximantSet, file: Path) -> Path:
    """All approximants aligned on the shared grid."""
    names = ["H", "H_hat", "R", "E", "E_tilde", "X", "Y_hat"]
    cols = [getattr(approx, name).values for name in names]
    rows = [[float(t), *(float(c[i]) for c in cols)] for i, t in enumerate(approx.grid)]
    return write_csv(file, ["t", *names], rows)
