"""Diagonal Mahalanobis geometry: norms, ellipsoids, projections, diameters.

Every metric here is diagonal, so a metric is stored as the vector of its
diagonal entries and all operations are elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

DEFAULT_TOL = 1e-10
_MAX_ITER = 100


class GeometryError(ValueError):
    pass


def _as_vector(x, name="x"):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True)
class DiagonalMetric:
    """Positive diagonal matrix stored by its diagonal."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.atleast_1d(np.asarray(self.entries, dtype=float)).copy()
        if e.ndim != 1 or e.size < 1:
            raise GeometryError("metric must be a non-empty vector of diagonal entries")
        if not np.all(np.isfinite(e)) or np.any(e <= 0):
            raise GeometryError("metric entries must be finite and strictly positive")
        e.flags.writeable = False
        object.__setattr__(self, "entries", e)

    @classmethod
    def identity(cls, d: int) -> "DiagonalMetric":
        return cls(np.ones(d))

    @property
    def dim(self) -> int:
        return self.entries.size

    def scaled(self, s: float) -> "DiagonalMetric":
        return DiagonalMetric(self.entries * s)

    def inverse(self) -> "DiagonalMetric":
        return DiagonalMetric(1.0 / self.entries)

    def trace(self, power: float = 1.0) -> float:
        """Trace of the metric raised elementwise to ``power``."""
        return float(np.sum(self.entries ** power))

    def check_dim(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.dim:
            raise GeometryError(f"dimension mismatch: vector has {x.shape[-1]}, metric has {self.dim}")


@dataclass(frozen=True)
class Ellipsoid:
    """The unit ball ``{x : ||x||_A <= 1}`` of a diagonal metric A."""

    metric: DiagonalMetric

    @classmethod
    def from_clip(cls, C: DiagonalMetric, B: float) -> "Ellipsoid":
        """Ellipsoid with metric ``C / B**2``, i.e. ``{x : ||x||_C <= B}``."""
        if not B > 0 or not np.isfinite(B):
            raise GeometryError("clip level B must be positive and finite")
        return cls(C.scaled(1.0 / B**2))

    def contains(self, x, tol: float = 0.0) -> bool:
        return bool(mahalanobis_norm(x, self.metric) <= 1.0 + tol)


class DomainKind(str, Enum):
    BOX = "box"
    BALL = "ball"


@dataclass(frozen=True)
class Domain:
    """Constraint set: the box ``[-R, R]^d`` or the Euclidean ball of radius R."""

    kind: DomainKind
    radius: float
    dim: int

    def __post_init__(self):
        object.__setattr__(self, "kind", DomainKind(self.kind))
        if not (self.radius > 0 and np.isfinite(self.radius)):
            raise GeometryError("domain radius must be positive and finite")
        if self.dim < 1:
            raise GeometryError("domain dimension must be >= 1")

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        if self.kind is DomainKind.BOX:
            return bool(np.max(np.abs(x)) <= self.radius + tol)
        return bool(np.linalg.norm(x) <= self.radius + tol)


def mahalanobis_norm(x, M: DiagonalMetric) -> float:
    """Return ``sqrt(sum_j M_jj x_j**2)``."""
    x = _as_vector(x)
    M.check_dim(x)
    return float(np.sqrt(np.sum(M.entries * x * x)))


def _secular_scale(x, c, m, r, tol):
    """Solve for ``lam >= 0`` such that ``y = x / (1 + lam * c)`` has
    ``sum(m * y**2) = r**2``, row by row.

    ``x`` is (k, d) with every row strictly outside the constraint. Returns the
    multipliers, shape (k,). Newton runs on ``psi(lam) = 1/||y(lam)||_m``,
    which is concave and increasing, so iterates started left of the root
    climb to it without overshooting.
    """
    mx2 = m * x * x
    norm0 = np.sqrt(mx2.sum(axis=1))
    # ||y(lam)||_m lies between norm0 / (1 + lam max c) and norm0 / (1 + lam min c)
    lam = (norm0 / r - 1.0) / c.max()
    hi = (norm0 / r - 1.0) / c.min()
    for _ in range(_MAX_ITER):
        denom = 1.0 + lam[:, None] * c
        t = mx2 / denom**2
        s = t.sum(axis=1)
        norm = np.sqrt(s)
        if np.abs(norm - r).max() <= tol * r:
            return lam
        # psi' = (sum t c / denom) / norm^3
        dpsi = (t * c / denom).sum(axis=1) / (s * norm)
        new = lam + (1.0 / r - 1.0 / norm) / dpsi
        lam = np.minimum(np.maximum(new, lam), hi)
    raise GeometryError("projection multiplier did not converge")  # pragma: no cover


def _project_rows(X, A, tol):
    X = np.array(X, dtype=float, copy=True)
    sq = (A * X * X).sum(axis=1)
    out = sq > 1.0
    if not out.any():
        return X
    rows = X[out]
    lam = _secular_scale(rows, A, A, 1.0, tol)
    Y = rows / (1.0 + lam[:, None] * A)
    # land on the feasible side; the rescale moves y by at most tol
    norm = np.sqrt((A * Y * Y).sum(axis=1))
    Y = np.where((norm > 1.0)[:, None], Y / norm[:, None], Y)
    X[out] = Y
    return X


def project_onto_ellipsoid(x, E: Ellipsoid, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Euclidean projection onto the ellipsoid ``E``.

    Accepts a single vector of shape (d,) or a stack of vectors of shape
    (k, d); rows are projected independently. Points already inside are
    returned unchanged.
    """
    if not tol > 0:
        raise GeometryError("tol must be positive")
    x = _as_vector(x)
    E.metric.check_dim(x)
    if x.ndim == 1:
        return _project_rows(x[None, :], E.metric.entries, tol)[0]
    return _project_rows(x, E.metric.entries, tol)


def radial_clip(x, E: Ellipsoid) -> np.ndarray:
    """Rescale ``x`` toward the origin until ``||x||_A <= 1``.

    Not the Euclidean projection: for a non-spherical ellipsoid the result
    differs from :func:`project_onto_ellipsoid`, but it meets the same norm
    bound. Works row-wise on (k, d) input.
    """
    x = _as_vector(x)
    E.metric.check_dim(x)
    norm = np.sqrt(np.sum(E.metric.entries * x * x, axis=-1))
    factor = np.minimum(1.0, 1.0 / np.maximum(norm, np.finfo(float).tiny))
    return x * (factor[..., None] if x.ndim > 1 else factor)


def project_domain(x, X: Domain, H: DiagonalMetric | None = None, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Projection onto ``X`` in the norm ``||.||_H`` (Euclidean when H is None)."""
    x = _as_vector(x)
    if x.shape[-1] != X.dim:
        raise GeometryError(f"dimension mismatch: vector has {x.shape[-1]}, domain has {X.dim}")
    if X.kind is DomainKind.BOX:
        return np.clip(x, -X.radius, X.radius)
    if np.linalg.norm(x) <= X.radius:
        return x.copy()
    if H is None:
        return x * (X.radius / np.linalg.norm(x))
    H.check_dim(x)
    h = H.entries
    # y_j = H_j x_j / (H_j + lam) = x_j / (1 + lam / H_j)
    lam = _secular_scale(x[None, :], 1.0 / h, np.ones_like(h), X.radius, tol)[0]
    y = x / (1.0 + lam / h)
    norm = np.linalg.norm(y)
    if norm > X.radius:
        y *= X.radius / norm
    return y


def diameter(X: Domain, which: str = "l2", C: DiagonalMetric | None = None) -> float:
    """Diameter of ``X`` in the l2 norm, the l-infinity norm, or ``||.||_{C^-1}``.

    ``which`` is one of ``"l2"``, ``"linf"``, ``"inv_metric"`` (the last needs C).
    """
    R, d = X.radius, X.dim
    if which == "l2":
        return 2 * R * np.sqrt(d) if X.kind is DomainKind.BOX else 2 * R
    if which == "linf":
        return 2 * R
    if which == "inv_metric":
        if C is None:
            raise GeometryError("inv_metric diameter needs a metric C")
        if C.dim != d:
            raise GeometryError("metric and domain dimensions differ")
        inv = 1.0 / C.entries
        if X.kind is DomainKind.BOX:
            return 2 * R * float(np.sqrt(inv.sum()))
        return 2 * R * float(np.sqrt(inv.max()))
    raise GeometryError(f"unknown diameter kind {which!r}")
