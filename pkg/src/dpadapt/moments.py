"""Gradient-moment statistics, clip/metric selection, and private scale estimation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from dpadapt.geometry import DiagonalMetric, Domain, diameter
from dpadapt.privacy import PrivacyBudget


@dataclass(frozen=True)
class LipschitzStats:
    p: float
    value: float
    metric: DiagonalMetric


@dataclass(frozen=True)
class MomentEstimate:
    sigma_hat: np.ndarray
    r: float
    source: str = "exact"
    # round at which each coordinate was frozen (0 = never crossed a threshold)
    frozen_at: np.ndarray | None = None


def lipschitz_witnesses(features, C: DiagonalMetric) -> np.ndarray:
    """``||z_i||_C`` for each row; the Lipschitz witness of a GLM with a
    1-Lipschitz link."""
    Z = np.atleast_2d(np.asarray(features, dtype=float))
    C.check_dim(Z)
    return np.sqrt((C.entries * Z * Z).sum(axis=1))


def empirical_lipschitz(samples, C: DiagonalMetric, p: float) -> LipschitzStats:
    """Empirical p-th moment ``(mean_i w_i^p)^{1/p}`` of Lipschitz witnesses.

    ``samples`` is either a 1-D array of witnesses ``w_i`` or an (n, d)
    matrix of GLM feature vectors, whose witnesses are ``||z_i||_C``.
    """
    if not p >= 1:
        raise ValueError("p must be >= 1")
    w = np.asarray(samples, dtype=float)
    if w.ndim == 2:
        w = lipschitz_witnesses(w, C)
    if w.size == 0:
        raise ValueError("empty sample")
    if np.any(w < 0):
        raise ValueError("witnesses are norms and must be non-negative")
    if math.isinf(p):
        return LipschitzStats(p, float(w.max()), C)
    top = w.max()
    if top == 0:
        return LipschitzStats(p, 0.0, C)
    # factor out the max so large p does not overflow
    value = top * float(np.mean((w / top) ** p)) ** (1.0 / p)
    return LipschitzStats(p, value, C)


def subgaussian_bound(mu: float, p: float, C: DiagonalMetric, sigma, kappa: float = 3.0) -> float:
    """``mu + kappa * sqrt(p) * sqrt(sum_j C_jj sigma_j^2)``."""
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    sigma = np.asarray(sigma, dtype=float)
    return float(mu + kappa * math.sqrt(p) * math.sqrt(np.sum(C.entries * sigma**2)))


def choose_B(alg: str, C: DiagonalMetric, p: float, G2p: float, X: Domain, n: int, budget: PrivacyBudget) -> float:
    """Clip level from the convergence bounds.

    PASAN: ``2 G (D_{C^-1} n eps / (D_2 sqrt(tr C^-1) sqrt(log 1/delta)))^{1/p}``.
    PAGAN: ``2 G (D_{C^-1} n eps / (D_inf sqrt(log 1/delta) tr C^{-1/2}))^{1/p}``.
    """
    if not (G2p > 0 and n > 0 and p >= 1):
        raise ValueError("G2p, n must be positive and p >= 1")
    if math.isinf(p):
        return 2.0 * G2p
    d_inv = diameter(X, "inv_metric", C)
    log_term = math.sqrt(math.log(1.0 / budget.delta))
    ne = n * budget.epsilon
    if alg == "pasan":
        ratio = d_inv * ne / (diameter(X, "l2") * math.sqrt(C.trace(-1.0)) * log_term)
    elif alg == "pagan":
        ratio = d_inv * ne / (diameter(X, "linf") * log_term * C.trace(-0.5))
    else:
        raise ValueError(f"unknown algorithm {alg!r}")
    return 2.0 * G2p * ratio ** (1.0 / p)


def choose_C(alg: str, sigma) -> DiagonalMetric:
    """Bound-optimal diagonal metric for coordinate scales ``sigma``:
    ``sigma^{-4/3}`` for PAGAN, ``sigma^{-1}`` for PASAN."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    if alg == "pagan":
        return DiagonalMetric(sigma ** (-4.0 / 3.0))
    if alg == "pasan":
        return DiagonalMetric(1.0 / sigma)
    raise ValueError(f"unknown algorithm {alg!r}")


def estimator_rounds(d: int) -> int:
    """``ceil(1.5 * log2 d)`` rounds, at least one."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    return max(1, math.ceil(1.5 * math.log2(d)))


def _log_r(r: float) -> float:
    # the truncation level 4 r Delta log r collapses as r -> 1; floor log r at 1
    return max(1.0, math.log(r))


def required_samples(d: int, r: float, budget: PrivacyBudget, beta: float) -> int:
    """Sample size under which the private estimator's guarantee holds:
    ``1000 r^2 log(8d/beta) max(T sqrt(d) log^2 r log(T/delta) / eps, r^2)``."""
    T = estimator_rounds(d)
    lr = _log_r(r)
    inner = max(T * math.sqrt(d) * lr**2 * math.log(T / budget.delta) / budget.epsilon, r * r)
    return math.ceil(1000 * r * r * math.log(8 * d / beta) * inner)


def private_second_moment(S, r: float, budget: PrivacyBudget, rng: np.random.Generator,
                          T: int | None = None, beta: float | None = None,
                          noise: bool = True) -> MomentEstimate:
    """Privately bucket the per-coordinate second moments of ``S`` into powers of 2.

    Round t (t = 1..T) truncates ``z_ij^2`` at ``rho_t^2`` with
    ``rho_t = 4 r Delta log r`` and ``Delta = 2^{1-t}``, adds Gaussian noise of
    variance ``rho_t^4 T^2 d log(T/delta) / (n eps)^2``, and freezes
    ``sigma_hat_j = 2^{-t}`` once the noisy second moment reaches
    ``2^{-2t-2}``. Coordinates that never cross get ``2^{-T}``.
    ``noise=False`` drops the Gaussian noise (not private; for testing).
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    n, d = S.shape
    if d == 0 or n == 0:
        raise ValueError("dataset must be non-empty")
    if not r > 1:
        raise ValueError("moment ratio r must exceed 1")
    if T is None:
        T = estimator_rounds(d)
    if beta is not None and n < required_samples(d, r, budget, beta):
        warnings.warn(
            f"n={n} is below the {required_samples(d, r, budget, beta)} samples the accuracy guarantee needs",
            stacklevel=2,
        )
    lr = _log_r(r)
    sq = S * S
    sigma_hat = np.full(d, 2.0**-T)
    frozen = np.zeros(d, dtype=int)
    active = np.ones(d, dtype=bool)
    delta_t = 1.0
    for t in range(1, T + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        rho = 4.0 * r * delta_t * lr
        stat = np.minimum(sq[:, idx], rho * rho).mean(axis=0)
        if noise:
            std = rho * rho * T * math.sqrt(d * math.log(T / budget.delta)) / (n * budget.epsilon)
            stat = stat + std * rng.standard_normal(idx.size)
        hit = stat >= 2.0 ** (-2 * t - 2)
        sigma_hat[idx[hit]] = 2.0**-t
        frozen[idx[hit]] = t
        active[idx[hit]] = False
        delta_t /= 2.0
    return MomentEstimate(sigma_hat, r, "private_estimator" if noise else "exact", frozen)


def hat_C(estimate: MomentEstimate) -> DiagonalMetric:
    """Metric ``(r sigma_hat_j)^{-4/3} / 4``."""
    return DiagonalMetric((estimate.r * estimate.sigma_hat) ** (-4.0 / 3.0) / 4.0)
