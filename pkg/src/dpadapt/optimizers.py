"""Private adaptive optimizers (PASAN, PAGAN) and their baselines.

PASAN is projected SGD with the adaptive scalar stepsize
``alpha / sqrt(sum_i ||ghat_i||^2)``; PAGAN is diagonal AdaGrad. Both see
gradients that were clipped into the ellipsoid ``{g : ||g||_C <= B}`` and
perturbed with Gaussian noise whose covariance is shaped by the same ``C``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from dpadapt.geometry import (
    DEFAULT_TOL,
    DiagonalMetric,
    Domain,
    DomainKind,
    Ellipsoid,
    project_domain,
    project_onto_ellipsoid,
    radial_clip,
)
from dpadapt.privacy import NoiseSpec, PrivacyBudget, max_steps, noise_scale, sample_noise
from dpadapt.problems import ProblemSpec

ALGORITHMS = ("pasan", "pagan", "dpsgd_isotropic", "sgd", "adagrad")
CLIPPERS = ("projection", "radial", "coordinate")


class ConfigError(ValueError):
    pass


def privatize_gradient(per_example_grads, A: Ellipsoid, spec: NoiseSpec, rng, clipper: str = "projection"):
    """Clip each gradient into ``A``, average, then add ``scale * N(0, A^{-1})``."""
    G = np.atleast_2d(np.asarray(per_example_grads, dtype=float))
    if G.shape[0] == 0:
        raise ValueError("empty batch")
    A.metric.check_dim(G)
    if clipper == "projection":
        clipped = project_onto_ellipsoid(G, A)
    elif clipper == "radial":
        clipped = radial_clip(G, A)
    else:
        raise ValueError(f"unknown clipper {clipper!r}")
    return clipped.mean(axis=0) + sample_noise(spec, rng)


def split_epsilon(epsilon: float, lam) -> np.ndarray:
    """Per-coordinate budgets ``eps_j = eps * lam_j^{1/3} / sqrt(sum lam^{2/3})``.

    The split satisfies ``sum eps_j**2 = eps**2``.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("thresholds must be positive")
    return epsilon * np.cbrt(lam) / np.sqrt(np.sum(lam ** (2.0 / 3.0)))


def coordinate_wise_privatize(per_example_grads, lam, rho: float, epsilon_split, b: int, rng):
    """Clamp coordinate j of every gradient to ``[-lam_j, lam_j]``, average, and
    add Gaussian noise with standard deviation ``rho * lam_j / (b * eps_j)``."""
    G = np.atleast_2d(np.asarray(per_example_grads, dtype=float))
    lam = np.asarray(lam, dtype=float)
    eps = np.asarray(epsilon_split, dtype=float)
    if np.any(eps <= 0):
        raise ValueError("every coordinate needs a positive budget share")
    if np.any(lam <= 0):
        raise ValueError("thresholds must be positive")
    out = np.clip(G, -lam, lam).mean(axis=0)
    if rho > 0:
        out = out + (rho * lam / (b * eps)) * rng.standard_normal(lam.size)
    return out


@dataclass(frozen=True)
class PasanState:
    x: np.ndarray
    sq_accum: float = 0.0
    k: int = 0
    avg: np.ndarray | None = None

    @classmethod
    def start(cls, x0) -> "PasanState":
        x0 = np.asarray(x0, dtype=float)
        return cls(x0.copy(), 0.0, 0, np.zeros_like(x0))

    @property
    def stepsize_denominator(self) -> float:
        return math.sqrt(self.sq_accum)


@dataclass(frozen=True)
class PaganState:
    x: np.ndarray
    coord_accum: np.ndarray
    k: int = 0
    avg: np.ndarray | None = None

    @classmethod
    def start(cls, x0) -> "PaganState":
        x0 = np.asarray(x0, dtype=float)
        return cls(x0.copy(), np.zeros_like(x0), 0, np.zeros_like(x0))

    def H(self, alpha: float) -> np.ndarray:
        return np.sqrt(self.coord_accum) / alpha


def _running_mean(avg, x, k):
    return avg + (x - avg) / k


def pasan_step(state: PasanState, ghat, alpha: float, X: Domain) -> PasanState:
    """One PASAN update; the accumulator includes the current gradient.

    With an all-zero gradient history the stepsize is undefined and the
    step is taken as zero.
    """
    g = np.asarray(ghat, dtype=float)
    acc = state.sq_accum + float(g @ g)
    if acc > 0:
        x = project_domain(state.x - (alpha / math.sqrt(acc)) * g, X)
    else:
        x = project_domain(state.x, X)
    k = state.k + 1
    return PasanState(x, acc, k, _running_mean(state.avg, x, k))


def pagan_step(state: PaganState, ghat, alpha: float, X: Domain) -> PaganState:
    """One PAGAN update: refresh ``H = sqrt(accum) / alpha``, step by
    ``H^{-1} ghat``, project onto ``X`` in the ``H`` norm.

    Coordinates whose accumulator is still zero do not move.
    """
    g = np.asarray(ghat, dtype=float)
    acc = state.coord_accum + g * g
    root = np.sqrt(acc)
    pos = root > 0
    step = np.zeros_like(g)
    step[pos] = alpha * g[pos] / root[pos]
    y = state.x - step
    if X.kind is DomainKind.BOX:
        x = project_domain(y, X)
    else:
        H = root / alpha
        # a zero entry would make the H-norm degenerate; borrow the smallest live scale
        floor = H[pos].min() if pos.any() else 1.0
        x = project_domain(y, X, DiagonalMetric(np.where(pos, H, floor)))
    k = state.k + 1
    return PaganState(x, acc, k, _running_mean(state.avg, x, k))


@dataclass
class OptConfig:
    """Run configuration.

    ``alpha`` is the stepsize multiplier (for ``dpsgd_isotropic`` the stepsize
    is ``alpha / sqrt(k + 1)``). ``C`` defaults to the identity. Clipping
    uses the ellipsoid ``C / clip_B**2``; ``clip_B = inf`` disables clipping,
    and ``budget = None`` disables noise.
    """

    alpha: float
    steps: int
    batch: int
    C: DiagonalMetric | None = None
    clip_B: float = math.inf
    budget: PrivacyBudget | None = None
    clipper: str = "projection"
    domain: Domain | None = None
    seed: int | None = 0
    x0: np.ndarray | None = None
    c: float = 1.0
    coord_lambda: np.ndarray | None = None
    coord_rho: float | None = None
    record_grads: bool = False
    record_iterates: bool = False
    log_every: int = 1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.steps < 1 or self.batch < 1:
            raise ConfigError("steps and batch must be >= 1")
        if not self.clip_B > 0:
            raise ConfigError("clip_B must be positive")
        if self.clipper not in CLIPPERS:
            raise ConfigError(f"clipper must be one of {CLIPPERS}")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")


@dataclass
class Trace:
    """Per-step record of a run.

    ``loss[k]`` is ``f(x^{k+1}; S)`` after step k. ``grads`` (optional) holds
    the unclipped batch-mean gradient of every step.
    """

    algorithm: str
    steps: np.ndarray
    loss: np.ndarray
    grad_norm: np.ndarray
    clip_fraction: np.ndarray
    step_size: np.ndarray
    x_bar: np.ndarray
    x_final: np.ndarray
    loss_init: float
    loss_bar: float
    grads: np.ndarray | None = None
    iterates: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def rows(self):
        for k, loss in zip(self.steps, self.loss):
            yield int(k), float(loss)


def _metric(cfg: OptConfig, d: int) -> DiagonalMetric:
    if cfg.C is None:
        return DiagonalMetric.identity(d)
    if cfg.C.dim != d:
        raise ConfigError("metric dimension does not match the problem")
    return cfg.C


def run(algorithm: str, problem: ProblemSpec, cfg: OptConfig, rng: np.random.Generator | None = None) -> Trace:
    """Run ``algorithm`` for ``cfg.steps`` iterations and return its trace."""
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
    X = cfg.domain or problem.domain
    d, n, b = problem.d, problem.n, cfg.batch
    if X.dim != d:
        raise ConfigError("domain and problem dimensions differ")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    private = algorithm in ("pasan", "pagan", "dpsgd_isotropic")
    C = DiagonalMetric.identity(d) if algorithm == "dpsgd_isotropic" else _metric(cfg, d)
    budget = cfg.budget if private else None
    clip_B = cfg.clip_B if private else math.inf
    coordinate = private and cfg.clipper == "coordinate"

    scale = 0.0
    if budget is not None:
        scale = noise_scale(budget, b)
        if scale == 0:
            raise ConfigError("privacy budget gives zero noise; drop the budget for a non-private run")
        if math.isinf(clip_B) and not coordinate:
            raise ConfigError("noise calibration needs a finite clip level")
        if b <= n and cfg.steps > max_steps(n, b, cfg.c):
            warnings.warn(
                f"{cfg.steps} steps exceed the iteration budget {max_steps(n, b, cfg.c)} for n={n}, b={b}",
                stacklevel=2,
            )

    ellipsoid = None if math.isinf(clip_B) else Ellipsoid.from_clip(C, clip_B)
    noise = NoiseSpec(scale, ellipsoid.metric, b) if ellipsoid is not None else None

    if coordinate:
        if cfg.coord_lambda is None:
            raise ConfigError("coordinate clipping needs coord_lambda")
        lam = np.broadcast_to(np.asarray(cfg.coord_lambda, dtype=float), (d,))
        if budget is None:
            eps_split, rho = np.ones(d), 0.0
        else:
            eps_split = split_epsilon(budget.epsilon, lam)
            rho = cfg.coord_rho if cfg.coord_rho is not None else math.sqrt(math.log(1.0 / budget.delta))

    x0 = np.zeros(d) if cfg.x0 is None else np.asarray(cfg.x0, dtype=float)
    x0 = project_domain(x0, X)
    adagrad_like = algorithm in ("pagan", "adagrad")
    state = PaganState.start(x0) if adagrad_like else PasanState.start(x0)

    T = cfg.steps
    log_steps = [k for k in range(1, T + 1) if k % cfg.log_every == 0 or k == T]
    loss = np.empty(len(log_steps))
    grad_norm = np.empty(T)
    clip_frac = np.empty(T)
    step_size = np.empty(T)
    grads = np.empty((T, d)) if cfg.record_grads else None
    iterates = np.empty((T, d)) if cfg.record_iterates else None
    A_diag = None if ellipsoid is None else ellipsoid.metric.entries
    li = 0
    sgd_x = x0.copy()
    sgd_avg = np.zeros(d)

    for k in range(T):
        idx = rng.integers(0, n, size=b)
        _, G = problem.loss_and_subgrad(state.x if algorithm != "dpsgd_isotropic" else sgd_x, idx)
        if grads is not None:
            grads[k] = G.mean(axis=0)
        if coordinate:
            clip_frac[k] = float(np.mean(np.any(np.abs(G) > lam, axis=1)))
            ghat = coordinate_wise_privatize(G, lam, rho, eps_split, b, rng)
        elif ellipsoid is not None:
            clip_frac[k] = float(np.mean((A_diag * G * G).sum(axis=1) > 1.0))
            ghat = privatize_gradient(G, ellipsoid, noise, rng, cfg.clipper)
        else:
            clip_frac[k] = 0.0
            ghat = G.mean(axis=0)
        grad_norm[k] = float(np.linalg.norm(ghat))

        if algorithm == "dpsgd_isotropic":
            eta = cfg.alpha / math.sqrt(k + 1)
            sgd_x = project_domain(sgd_x - eta * ghat, X)
            sgd_avg += (sgd_x - sgd_avg) / (k + 1)
            x_now = sgd_x
            step_size[k] = eta
        elif adagrad_like:
            state = pagan_step(state, ghat, cfg.alpha, X)
            x_now = state.x
            root = np.sqrt(state.coord_accum)
            step_size[k] = float(np.mean(np.where(root > 0, cfg.alpha / np.where(root > 0, root, 1.0), 0.0)))
        else:
            state = pasan_step(state, ghat, cfg.alpha, X)
            x_now = state.x
            step_size[k] = cfg.alpha / state.stepsize_denominator if state.sq_accum > 0 else 0.0
        if iterates is not None:
            iterates[k] = x_now
        if li < len(log_steps) and log_steps[li] == k + 1:
            loss[li] = problem.loss(x_now)
            li += 1

    x_bar = sgd_avg if algorithm == "dpsgd_isotropic" else state.avg
    x_final = sgd_x if algorithm == "dpsgd_isotropic" else state.x
    return Trace(
        algorithm=algorithm,
        steps=np.asarray(log_steps),
        loss=loss,
        grad_norm=grad_norm,
        clip_fraction=clip_frac,
        step_size=step_size,
        x_bar=x_bar.copy(),
        x_final=x_final.copy(),
        loss_init=problem.loss(x0),
        loss_bar=problem.loss(x_bar),
        grads=grads,
        iterates=iterates,
        meta={"noise_scale": scale, "clip_B": clip_B, "tol": DEFAULT_TOL},
    )


def with_overrides(cfg: OptConfig, **kw) -> OptConfig:
    return replace(cfg, **kw)
