"""Independent oracles and Monte-Carlo checks for the projection, stepsize
and estimator bounds the algorithms rely on.

Statistical checks compare an empirical mean (or violation rate) against
its bound with three standard errors of slack, and report the counts.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from dpadapt.geometry import DiagonalMetric, Ellipsoid, project_onto_ellipsoid


@dataclass(frozen=True)
class VerifierReport:
    name: str
    trials: int
    violations: int
    worst_margin: float
    passed: bool
    detail: dict | None = None

    def __post_init__(self):
        # keep reports JSON-serializable when fields arrive as numpy scalars
        object.__setattr__(self, "trials", int(self.trials))
        object.__setattr__(self, "violations", int(self.violations))
        object.__setattr__(self, "worst_margin", float(self.worst_margin))
        object.__setattr__(self, "passed", bool(self.passed))
        if self.detail is not None:
            object.__setattr__(self, "detail", {k: v.item() if isinstance(v, np.generic) else v
                                                for k, v in self.detail.items()})
        if not 0 <= self.violations <= self.trials:
            raise ValueError("violations must lie in [0, trials]")

    def to_dict(self) -> dict:
        return asdict(self)


def oracle_project(x, E: Ellipsoid) -> np.ndarray:
    """Euclidean projection onto ``E`` by plain bisection on the KKT multiplier.

    Deliberately simple scalar code, kept separate from the production solver.
    """
    x = [float(v) for v in np.asarray(x, dtype=float)]
    a = [float(v) for v in E.metric.entries]

    def sq_norm(lam):
        return sum(ai * xi * xi / (1.0 + lam * ai) ** 2 for ai, xi in zip(a, x))

    if sq_norm(0.0) <= 1.0:
        return np.array(x)
    lo, hi = 0.0, 1.0
    while sq_norm(hi) > 1.0:
        lo, hi = hi, hi * 2.0
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if sq_norm(mid) > 1.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * max(1.0, hi):
            break
    return np.array([xi / (1.0 + hi * ai) for ai, xi in zip(a, x)])


# ---------------------------------------------------------------------------
# projection bias


@dataclass(frozen=True)
class GaussianDist:
    """Centered Gaussian with independent coordinates of standard deviation ``std``."""

    std: np.ndarray

    def sample(self, rng, size):
        std = np.asarray(self.std, dtype=float)
        return rng.standard_normal((size, std.size)) * std

    def norm_moment(self, C: DiagonalMetric, p: float) -> float:
        """Exact ``E[||X||_C^p]^{1/p}`` for even integer p.

        ``||X||_C^2`` is a weighted chi-square with weights ``v_j = C_jj std_j^2``;
        its moments follow from the cumulants ``2^{k-1} (k-1)! sum v^k``.
        """
        if p != int(p) or int(p) % 2:
            raise ValueError("exact moments are available for even integer p only")
        m = int(p) // 2
        v = np.asarray(C.entries, dtype=float) * np.asarray(self.std, dtype=float) ** 2
        kappa = [0.0] + [2.0 ** (k - 1) * math.factorial(k - 1) * float(np.sum(v**k)) for k in range(1, m + 1)]
        mom = [1.0] + [0.0] * m
        for k in range(1, m + 1):
            mom[k] = sum(math.comb(k - 1, i - 1) * kappa[i] * mom[k - i] for i in range(1, k + 1))
        return mom[m] ** (1.0 / p)


def verify_projection_bias(dist: GaussianDist, C: DiagonalMetric, B: float, p: float,
                           trials: int, rng: np.random.Generator, chunk: int = 20000) -> VerifierReport:
    """Mean of ``||pi(X) - X||_C`` for the projection onto ``{||x||_C <= B}``
    against ``G^p / ((p - 1) B^{p-1})`` with ``G = E[||X||_C^p]^{1/p}``."""
    if not p > 1:
        raise ValueError("the bias bound needs p > 1")
    G = dist.norm_moment(C, p)
    bound = G**p / ((p - 1) * B ** (p - 1)) if math.isfinite(B) else 0.0
    total = total_sq = 0.0
    done = 0
    E = Ellipsoid.from_clip(C, B) if math.isfinite(B) else None
    while done < trials:
        k = min(chunk, trials - done)
        X = dist.sample(rng, k)
        if E is None:
            bias = np.zeros(k)
        else:
            D = project_onto_ellipsoid(X, E) - X
            bias = np.sqrt((C.entries * D * D).sum(axis=1))
        total += bias.sum()
        total_sq += (bias * bias).sum()
        done += k
    mean = total / trials
    se = math.sqrt(max(total_sq / trials - mean * mean, 0.0) / trials)
    margin = bound + 3 * se - mean
    return VerifierReport("projection_bias", trials, int(margin < 0), margin, margin >= 0,
                          {"mean_bias": mean, "bound": bound, "se": se, "G": G})


# ---------------------------------------------------------------------------
# stepsize sum inequality


def sum_inequality_gap(sequence) -> float:
    """``2 ||a_{1:n}|| - sum_k a_k^2 / ||a_{1:k}||``, skipping zero prefixes."""
    a = np.asarray(sequence, dtype=float)
    prefix = np.sqrt(np.cumsum(a * a))
    live = prefix > 0
    lhs = float(np.sum(a[live] ** 2 / prefix[live]))
    return 2.0 * float(prefix[-1]) - lhs if a.size else 0.0


def verify_sum_inequality(sequence) -> bool:
    """Check ``sum_k a_k^2 / ||a_{1:k}||_2 <= 2 ||a_{1:n}||_2``."""
    a = np.asarray(sequence, dtype=float)
    # allow for rounding in the cumulative sums
    return sum_inequality_gap(a) >= -1e-12 * max(1.0, float(np.sqrt(np.sum(a * a))))


def fuzz_sum_inequality(trials: int, rng: np.random.Generator, max_len: int = 200) -> VerifierReport:
    worst = math.inf
    bad = 0
    for _ in range(trials):
        n = int(rng.integers(1, max_len + 1))
        kind = rng.integers(0, 3)
        if kind == 0:
            a = rng.standard_normal(n)
        elif kind == 1:
            a = rng.standard_cauchy(n)
        else:
            a = rng.standard_normal(n) * np.exp(rng.uniform(-10, 10, n))
            a[rng.random(n) < 0.3] = 0.0
            if not a.any():
                a[-1] = 1.0
        scale = math.sqrt(float(np.sum(a * a)))
        worst = min(worst, sum_inequality_gap(a) / scale)
        bad += not verify_sum_inequality(a)
    return VerifierReport("sum_inequality", trials, bad, worst, bad == 0)


# ---------------------------------------------------------------------------
# truncation bias and concentration for the second-moment estimator


def truncated_second_moment(sigma: float, Delta: float) -> float:
    """Exact ``E[min(z^2, Delta^2)]`` for ``z ~ N(0, sigma^2)``."""
    if math.isinf(Delta) or sigma == 0:
        return sigma**2
    c = Delta / sigma
    inner = (2 * stats.norm.cdf(c) - 1) - 2 * c * stats.norm.pdf(c)
    return sigma**2 * inner + Delta**2 * 2 * stats.norm.sf(c)


def verify_truncation_bias(sigma: float, r: float, trials: int, rng: np.random.Generator,
                           Delta: float | None = None) -> VerifierReport:
    """Monte-Carlo ``|E min(z^2, Delta^2) - E z^2|`` for Gaussian z against
    ``sigma^2 / 8``, with ``Delta = 4 r sigma log r`` unless given."""
    if Delta is None:
        if not r > 1:
            raise ValueError("default truncation needs r > 1")
        Delta = 4 * r * sigma * math.log(r)
    z = rng.standard_normal(trials) * sigma
    # min(z^2, D^2) - z^2 is zero unless |z| > D; averaging it keeps the variance small
    diff = np.minimum(z * z, Delta * Delta) - z * z
    bias = abs(float(diff.mean()))
    se = float(diff.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    bound = sigma**2 / 8
    margin = bound + 3 * se - bias
    return VerifierReport("truncation_bias", trials, int(margin < 0), margin, margin >= 0,
                          {"bias": bias, "bound": bound, "se": se, "Delta": Delta,
                           "exact_bias": sigma**2 - truncated_second_moment(sigma, Delta)})


def verify_concentration(sigma: float, r: float, n: int, beta: float, trials: int,
                         rng: np.random.Generator, Delta: float | None = None,
                         chunk_elems: int = 4_000_000) -> VerifierReport:
    """Frequency with which ``|mean_i min(z_i^2, Delta^2) - E min(z^2, Delta^2)|``
    exceeds ``2 r^2 sigma^2 sqrt(log(2/beta)) / sqrt(n)``, against ``beta``
    plus three binomial standard errors."""
    if Delta is None:
        Delta = math.inf
    mean = sigma**2 if math.isinf(Delta) else truncated_second_moment(sigma, Delta)
    thresh = 2 * r * r * sigma**2 * math.sqrt(math.log(2 / beta)) / math.sqrt(n)
    per = max(1, chunk_elems // n)
    hits = 0
    worst = -math.inf
    done = 0
    while done < trials:
        k = min(per, trials - done)
        z = rng.standard_normal((k, n)) * sigma
        y = np.minimum(z * z, Delta * Delta).mean(axis=1)
        dev = np.abs(y - mean)
        hits += int(np.sum(dev > thresh))
        worst = max(worst, float(dev.max()))
        done += k
    rate = hits / trials
    allowed = beta + 3 * math.sqrt(beta * (1 - beta) / trials)
    return VerifierReport("concentration", trials, hits, allowed - rate, rate <= allowed,
                          {"rate": rate, "beta": beta, "threshold": thresh, "max_deviation": worst})


# ---------------------------------------------------------------------------
# regret terms


def regret_terms(grads) -> tuple[float, float]:
    """Non-private rate terms from a (T, d) record of batch gradients.

    Returns ``(sqrt(sum_k ||g_k||^2) / T, sum_j sqrt(sum_k g_kj^2) / T)``.
    """
    g = np.atleast_2d(np.asarray(grads, dtype=float))
    T = g.shape[0]
    col = (g * g).sum(axis=0)
    return float(math.sqrt(col.sum()) / T), float(np.sqrt(col).sum() / T)
