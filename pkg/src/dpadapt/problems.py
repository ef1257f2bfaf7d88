"""Convex test problems: synthetic absolute regression and random linear losses."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dpadapt.geometry import Domain


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    targets: np.ndarray | None = None
    x_star: np.ndarray | None = None

    def __post_init__(self):
        A = np.asarray(self.features, dtype=float)
        if A.ndim != 2:
            raise ValueError("features must be an n x d matrix")
        if not np.all(np.isfinite(A)):
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "features", A)
        if self.targets is not None:
            b = np.asarray(self.targets, dtype=float)
            if b.shape != (A.shape[0],) or not np.all(np.isfinite(b)):
                raise ValueError("targets must be n finite values")
            object.__setattr__(self, "targets", b)
        if self.x_star is not None:
            xs = np.asarray(self.x_star, dtype=float)
            if xs.shape != (A.shape[1],):
                raise ValueError("planted parameter has the wrong dimension")
            object.__setattr__(self, "x_star", xs)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def save(self, path) -> None:
        """Write ``<path>`` as CSV (columns f0..f{d-1}[, y]) and the planted
        parameter, if any, to ``<path>.json``."""
        path = Path(path)
        cols = [f"f{j}" for j in range(self.d)]
        data = self.features
        if self.targets is not None:
            cols.append("y")
            data = np.column_stack([data, self.targets])
        np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")
        meta = {"n": self.n, "d": self.d,
                "x_star": None if self.x_star is None else self.x_star.tolist()}
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if "y" in header:
            k = header.index("y")
            targets = data[:, k]
            features = np.delete(data, k, axis=1)
        else:
            targets, features = None, data
        x_star = None
        side = Path(str(path) + ".json")
        if side.exists():
            x_star = json.loads(side.read_text()).get("x_star")
        return cls(features, targets, None if x_star is None else np.asarray(x_star))


def gen_abs_regression(n: int, d: int, sigma, tau: float, rng: np.random.Generator) -> Dataset:
    """Planted absolute-regression data.

    ``x* ~ Uniform{-1, 1}^d``, ``a_i ~ N(0, diag(sigma)^2)`` and
    ``b_i = <a_i, x*> + xi_i`` with ``xi_i ~ Laplace(0, tau)`` (tau is the
    Laplace scale, so the noise variance is ``2 tau^2``).
    """
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (d,))
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    x_star = rng.choice([-1.0, 1.0], size=d)
    A = rng.standard_normal((n, d)) * sigma
    noise = rng.laplace(0.0, tau, size=n) if tau > 0 else np.zeros(n)
    return Dataset(A, A @ x_star + noise, x_star)


def power_sigma(d: int, exponent: float = 1.5) -> np.ndarray:
    """``sigma_j = j^{-exponent}`` for j = 1..d."""
    return np.arange(1, d + 1, dtype=float) ** (-exponent)


@dataclass(frozen=True)
class ProblemSpec:
    """Empirical risk ``f(x; S) = mean_i F(x; z_i)`` over ``domain``.

    ``kind`` is ``"abs_regression"`` (``F = |<a, x> - b|``) or ``"linear"``
    (``F = <x, z>``).
    """

    kind: str
    data: Dataset
    domain: Domain

    def __post_init__(self):
        if self.kind not in ("abs_regression", "linear"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "abs_regression" and self.data.targets is None:
            raise ValueError("absolute regression needs targets")
        if self.domain.dim != self.data.d:
            raise ValueError("domain and data dimensions differ")

    @property
    def n(self) -> int:
        return self.data.n

    @property
    def d(self) -> int:
        return self.data.d

    def loss(self, x) -> float:
        """Full empirical loss."""
        A = self.data.features
        if self.kind == "linear":
            return float(A.mean(axis=0) @ x)
        return float(np.mean(np.abs(A @ x - self.data.targets)))

    def loss_and_subgrad(self, x, idx):
        """Mean loss on the examples ``idx`` and their per-example subgradients.

        For absolute regression the subgradient is ``sign(<a, x> - b) * a``
        with ``sign(0) = 0``.
        """
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n):
            raise IndexError("example index out of range")
        A = self.data.features[idx]
        if self.kind == "linear":
            return float(np.mean(A @ x)), A.copy()
        r = A @ x - self.data.targets[idx]
        return float(np.mean(np.abs(r))), np.sign(r)[:, None] * A


def abs_regression_problem(n, d, sigma, tau, rng, radius=1.0) -> ProblemSpec:
    data = gen_abs_regression(n, d, sigma, tau, rng)
    return ProblemSpec("abs_regression", data, Domain("box", radius, d))


def linear_problem(sigma, n: int, rng: np.random.Generator, domain: Domain | None = None) -> ProblemSpec:
    """Random linear loss ``<x, z>`` with ``z_j ~ N(0, sigma_j^2)`` independent."""
    sigma = np.asarray(sigma, dtype=float)
    Z = rng.standard_normal((n, sigma.size)) * sigma
    if domain is None:
        domain = Domain("box", 1.0, sigma.size)
    return ProblemSpec("linear", Dataset(Z), domain)
