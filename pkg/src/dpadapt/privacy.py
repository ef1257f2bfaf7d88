"""Noise calibration, Gaussian noise with diagonal covariance, and an RDP accountant."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from dpadapt.geometry import DiagonalMetric

# Renyi orders used for composition: 1.25, 1.5, ..., 64.
RDP_ORDERS = tuple(float(a) for a in np.arange(1.25, 64.0 + 1e-9, 0.25))


class AccountantError(ValueError):
    pass


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian noise ``scale * xi`` with ``xi ~ N(0, A^{-1})``.

    The per-coordinate standard deviation is ``scale / sqrt(A_jj)``.
    """

    scale: float
    metric: DiagonalMetric
    batch: int = 1

    def __post_init__(self):
        if not self.scale >= 0 or not np.isfinite(self.scale):
            raise ValueError("noise scale must be finite and non-negative")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")

    @property
    def std(self) -> np.ndarray:
        return self.scale / np.sqrt(self.metric.entries)


def noise_scale(budget: PrivacyBudget, b: int) -> float:
    """Multiplier ``sqrt(log(1/delta)) / (b * epsilon)`` on the whitened noise."""
    if b < 1:
        raise ValueError("batch size must be >= 1")
    if math.isinf(budget.epsilon):
        return 0.0
    return math.sqrt(math.log(1.0 / budget.delta)) / (b * budget.epsilon)


def sample_noise(spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    d = spec.metric.dim
    if spec.scale == 0:
        return np.zeros(d)
    return spec.std * rng.standard_normal(d)


def max_steps(n: int, b: int, c: float = 1.0) -> int:
    """Iteration budget ``floor(c * n**2 / b**2)``, at least 1."""
    if b < 1 or n < b:
        raise ValueError(f"need n >= b >= 1, got n={n}, b={b}")
    if not c > 0:
        raise ValueError("c must be positive")
    return max(1, math.floor(c * n * n / (b * b)))


def accountant_multiplier(scale: float, b: int) -> float:
    """Noise multiplier seen by the accountant.

    Clipped gradients have whitened norm at most 1, so replacing one example
    moves the batch mean by at most ``2 / b`` in whitened coordinates.
    """
    return scale * b / 2.0


# ---------------------------------------------------------------------------
# Renyi accountant for the Poisson-subsampled Gaussian mechanism


@dataclass(frozen=True)
class AccountantEvent:
    q: float
    z: float
    steps: int

    def __post_init__(self):
        if not (0 < self.q <= 1):
            raise AccountantError(f"sampling rate must be in (0, 1], got {self.q}")
        if not self.z > 0 or math.isnan(self.z):
            raise AccountantError(f"noise multiplier must be positive, got {self.z}")
        if self.steps < 1:
            raise AccountantError("step count must be >= 1")


@dataclass
class AccountantLedger:
    events: list[AccountantEvent] = field(default_factory=list)

    def add(self, q: float, z: float, steps: int) -> "AccountantLedger":
        self.events.append(AccountantEvent(q, z, steps))
        return self


@dataclass(frozen=True)
class AccountantResult:
    epsilon: float
    order: float
    # fractional orders whose series diverged and were bounded by the next integer order
    bounded_orders: tuple[float, ...] = ()


def _log_add(a, b):
    return np.logaddexp(a, b)


def _log_erfc(x):
    return math.log(2.0) + special.log_ndtr(-x * math.sqrt(2.0))


def _log_a_int(q, z, alpha):
    log_a = -np.inf
    for i in range(int(alpha) + 1):
        log_coef = (
            special.gammaln(alpha + 1) - special.gammaln(i + 1) - special.gammaln(alpha - i + 1)
            + i * math.log(q) + (alpha - i) * math.log1p(-q)
        )
        log_a = _log_add(log_a, log_coef + (i * i - i) / (2.0 * z * z))
    return float(log_a)


def _log_a_frac(q, z, alpha, max_terms=1000):
    """Series for fractional orders, summing term magnitudes (an upper bound).

    Returns None if the series has not converged after ``max_terms`` terms.
    """
    log_a0, log_a1 = -np.inf, -np.inf
    z0 = z * z * math.log(1.0 / q - 1.0) + 0.5
    last0 = last1 = -np.inf
    for i in range(max_terms):
        log_coef = math.log(abs(special.binom(alpha, i)))
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2) * z))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2) * z))
        log_s0 = log_t0 + (i * i - i) / (2 * z * z) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2 * z * z) + log_e1
        log_a0 = _log_add(log_a0, log_s0)
        log_a1 = _log_add(log_a1, log_s1)
        total = _log_add(log_a0, log_a1)
        if log_s0 < last0 and log_s1 < last1 and max(log_s0, log_s1) < total - 30:
            return float(total)
        last0, last1 = log_s0, log_s1
    return None


def _rdp_event(q, z, alpha):
    """RDP of one step of the subsampled Gaussian at order alpha, plus a
    flag telling whether the integer-order upper bound was used."""
    if math.isinf(z):
        return 0.0, False
    if q == 1.0:
        return alpha / (2 * z * z), False
    if float(alpha).is_integer():
        return _log_a_int(q, z, int(alpha)) / (alpha - 1), False
    log_a = _log_a_frac(q, z, alpha)
    if log_a is not None:
        return log_a / (alpha - 1), False
    # Renyi divergence is nondecreasing in the order
    up = math.ceil(alpha)
    return _log_a_int(q, z, up) / (up - 1), True


def account_detail(ledger: AccountantLedger, delta: float, orders=RDP_ORDERS) -> AccountantResult:
    if not ledger.events:
        raise AccountantError("ledger is empty")
    if not 0 < delta < 1:
        raise AccountantError("delta must lie in (0, 1)")
    if all(math.isinf(e.z) for e in ledger.events):
        return AccountantResult(0.0, float("nan"))
    orders = np.asarray(orders, dtype=float)
    rdp = np.zeros_like(orders)
    bounded = set()
    for ev in ledger.events:
        for k, a in enumerate(orders):
            val, used_bound = _rdp_event(ev.q, ev.z, a)
            rdp[k] += ev.steps * val
            if used_bound:
                bounded.add(float(a))
    eps = rdp + math.log(1.0 / delta) / (orders - 1.0)
    k = int(np.nanargmin(eps))
    return AccountantResult(float(max(eps[k], 0.0)), float(orders[k]), tuple(sorted(bounded)))


def account(ledger: AccountantLedger, delta: float) -> float:
    """Upper bound on the total epsilon of the composed ledger at ``delta``.

    Events are Poisson-subsampled Gaussian mechanisms composed in Renyi DP
    over :data:`RDP_ORDERS` and converted with
    ``eps = min_a rdp(a) + log(1/delta) / (a - 1)``.
    """
    return account_detail(ledger, delta).epsilon
