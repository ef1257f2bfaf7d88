"""Stepsize sweeps over seeded repetitions, with median/bootstrap summaries.

An experiment is described by one JSON document::

    {
      "problem": {"kind": "abs_regression", "n": 2000, "d": 50,
                  "sigma_exponent": 1.5, "tau": 0.01, "radius": 1.0, "seed": 0},
      "methods": [
        {"name": "pagan", "algorithm": "pagan", "metric": "pagan_optimal",
         "clip_B": {"quantile": 0.9}},
        {"name": "dpsgd", "algorithm": "dpsgd_isotropic", "clip_B": [0.5, 1.0]},
        {"name": "adagrad", "algorithm": "adagrad"}
      ],
      "epsilons": [0.1, 4.0], "delta": 1e-5,
      "stepsizes": [0.005, 0.01, 0.05, 0.1, 0.15, 0.2, 0.4, 0.5, 1.0],
      "batch": 50, "c": 1.0, "repetitions": 10, "seed": 0, "log_every": 1
    }

Non-private methods ignore the epsilon grid and are run once, with
``epsilon = inf`` in the result table.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from dpadapt.geometry import DiagonalMetric, Domain
from dpadapt.moments import (
    MomentEstimate,
    choose_B,
    choose_C,
    empirical_lipschitz,
    hat_C,
    lipschitz_witnesses,
    private_second_moment,
)
from dpadapt.optimizers import ALGORITHMS, ConfigError, OptConfig, run
from dpadapt.privacy import PrivacyBudget, max_steps
from dpadapt.problems import Dataset, ProblemSpec, abs_regression_problem, linear_problem, power_sigma

PRIVATE = ("pasan", "pagan", "dpsgd_isotropic")
TABLE_COLUMNS = ["method", "epsilon", "stepsize", "clip_B", "rep", "seed", "iteration", "loss"]


@dataclass
class MethodSpec:
    name: str
    algorithm: str
    metric: object = "identity"
    clip_B: object = (1.0,)
    clipper: str = "projection"
    estimate_epsilon: float | None = None
    # public bound on the largest coordinate scale; data are divided by it before estimation
    estimate_scale: float = 1.0
    r: float = 2.0

    @property
    def private(self) -> bool:
        return self.algorithm in PRIVATE


@dataclass
class ExperimentConfig:
    problem: dict
    methods: list[MethodSpec]
    epsilons: list[float]
    stepsizes: list[float]
    batch: int
    repetitions: int = 1
    delta: float = 1e-5
    steps: int | None = None
    c: float = 1.0
    seed: int = 0
    log_every: int = 1
    out: str | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            methods = [MethodSpec(**m) for m in raw["methods"]]
            cfg = cls(
                problem=dict(raw["problem"]),
                methods=methods,
                epsilons=[float(e) for e in raw.get("epsilons", [])],
                stepsizes=[float(s) for s in raw["stepsizes"]],
                batch=int(raw["batch"]),
                repetitions=int(raw.get("repetitions", 1)),
                delta=float(raw.get("delta", 1e-5)),
                steps=None if raw.get("steps") is None else int(raw["steps"]),
                c=float(raw.get("c", 1.0)),
                seed=int(raw.get("seed", 0)),
                log_every=int(raw.get("log_every", 1)),
                out=raw.get("out"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def validate(self) -> None:
        if not self.methods or not self.stepsizes:
            raise ConfigError("method and stepsize grids must be non-empty")
        if any(m.private for m in self.methods) and not self.epsilons:
            raise ConfigError("private methods need a non-empty epsilon grid")
        if any(not s > 0 for s in self.stepsizes) or any(not e > 0 for e in self.epsilons):
            raise ConfigError("stepsizes and epsilons must be positive")
        if self.repetitions < 1 or self.batch < 1:
            raise ConfigError("repetitions and batch must be >= 1")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        for m in self.methods:
            if m.algorithm not in ALGORITHMS:
                raise ConfigError(f"method {m.name}: unknown algorithm {m.algorithm!r}")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ConfigError("method names must be unique")


def build_problem(spec: dict) -> tuple[ProblemSpec, np.ndarray]:
    """Problem plus the per-coordinate feature scales used to build metrics."""
    kind = spec.get("kind", "abs_regression")
    radius = float(spec.get("radius", 1.0))
    if "data" in spec:
        data = Dataset.load(spec["data"])
        domain = Domain(spec.get("domain", "box"), radius, data.d)
        # scales read off the data itself (non-private preprocessing)
        sigma = np.maximum(data.features.std(axis=0), 1e-12)
        return ProblemSpec(kind, data, domain), sigma
    n, d = int(spec["n"]), int(spec["d"])
    if "sigma" in spec:
        sigma = np.asarray(spec["sigma"], dtype=float)
    else:
        sigma = power_sigma(d, float(spec.get("sigma_exponent", 1.5)))
    rng = np.random.default_rng(int(spec.get("seed", 0)))
    if kind == "abs_regression":
        prob = abs_regression_problem(n, d, sigma, float(spec.get("tau", 0.0)), rng, radius)
        if spec.get("domain", "box") != "box":
            prob = ProblemSpec(kind, prob.data, Domain(spec["domain"], radius, d))
        return prob, sigma
    if kind == "linear":
        return linear_problem(sigma, n, rng, Domain(spec.get("domain", "box"), radius, d)), sigma
    raise ConfigError(f"unknown problem kind {kind!r}")


def resolve_metric(method: MethodSpec, problem: ProblemSpec, sigma, delta: float, seed: int) -> DiagonalMetric:
    m = method.metric
    d = problem.d
    if m is None or m == "identity":
        return DiagonalMetric.identity(d)
    if m == "pagan_optimal":
        return choose_C("pagan", sigma)
    if m == "pasan_optimal":
        return choose_C("pasan", sigma)
    if m == "estimated":
        if method.estimate_epsilon is None:
            raise ConfigError(f"method {method.name}: metric 'estimated' needs estimate_epsilon")
        scale = float(method.estimate_scale)
        est = private_second_moment(problem.data.features / scale, method.r,
                                    PrivacyBudget(method.estimate_epsilon, delta),
                                    np.random.default_rng(_derive_seed(seed, method.name, "estimate")))
        return hat_C(MomentEstimate(est.sigma_hat * scale, est.r, est.source))
    if isinstance(m, (list, tuple)):
        return DiagonalMetric(np.asarray(m, dtype=float))
    raise ConfigError(f"method {method.name}: unknown metric {m!r}")


def resolve_clip(method: MethodSpec, problem: ProblemSpec, C: DiagonalMetric, eps: float, delta: float) -> list[float]:
    """Clip levels for a method: a number, a list, ``{"quantile": q}`` of the
    per-example ``||a_i||_C``, or ``"auto"`` (the bound-optimal B with
    ``p = log d`` and empirical moments)."""
    spec = method.clip_B
    if not method.private:
        return [math.inf]
    if isinstance(spec, (int, float)):
        return [float(spec)]
    if isinstance(spec, dict) and "quantile" in spec:
        w = lipschitz_witnesses(problem.data.features, C)
        return [float(np.quantile(w, float(spec["quantile"])))]
    if spec == "auto":
        p = max(1.0, math.log(problem.d))
        G = empirical_lipschitz(problem.data.features, C, 2 * p).value
        alg = "pasan" if method.algorithm != "pagan" else "pagan"
        return [choose_B(alg, C, p, G, problem.domain, problem.n, PrivacyBudget(eps, delta))]
    if isinstance(spec, (list, tuple)) and spec:
        return [float(b) for b in spec]
    raise ConfigError(f"method {method.name}: cannot interpret clip_B={spec!r}")


def _derive_seed(base: int, *parts) -> int:
    digest = hashlib.sha256("|".join([str(base), *map(str, parts)]).encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


@dataclass(frozen=True)
class Cell:
    method: str
    algorithm: str
    epsilon: float
    stepsize: float
    clip_B: float
    rep: int
    seed: int
    metric: np.ndarray
    clipper: str


_WORKER: dict = {}


def _init_worker(problem, cfg_kw):
    _WORKER["problem"] = problem
    _WORKER["cfg"] = cfg_kw


def _run_cell(cell: Cell) -> pd.DataFrame:
    problem: ProblemSpec = _WORKER["problem"]
    kw = _WORKER["cfg"]
    budget = PrivacyBudget(cell.epsilon, kw["delta"]) if math.isfinite(cell.epsilon) else None
    cfg = OptConfig(
        alpha=cell.stepsize, steps=kw["steps"], batch=kw["batch"], C=DiagonalMetric(cell.metric),
        clip_B=cell.clip_B, budget=budget, clipper=cell.clipper, seed=cell.seed, c=kw["c"],
        log_every=kw["log_every"],
    )
    tr = run(cell.algorithm, problem, cfg)
    k = len(tr.steps)
    return pd.DataFrame({
        "method": [cell.method] * k, "epsilon": cell.epsilon, "stepsize": cell.stepsize,
        "clip_B": cell.clip_B, "rep": cell.rep, "seed": cell.seed,
        "iteration": tr.steps, "loss": tr.loss,
    })


def plan(config: ExperimentConfig, problem: ProblemSpec, sigma) -> list[Cell]:
    cells = []
    for m in config.methods:
        C = resolve_metric(m, problem, sigma, config.delta, config.seed)
        eps_grid = config.epsilons if m.private else [math.inf]
        for eps in eps_grid:
            for B in resolve_clip(m, problem, C, eps, config.delta):
                for a in config.stepsizes:
                    for rep in range(config.repetitions):
                        seed = _derive_seed(config.seed, m.name, eps, a, rep)
                        cells.append(Cell(m.name, m.algorithm, eps, a, B, rep, seed, C.entries, m.clipper))
    return cells


@dataclass
class SweepResult:
    table: pd.DataFrame
    best: pd.DataFrame
    summary: pd.DataFrame


def sweep(config: ExperimentConfig, jobs: int = 1, problem: ProblemSpec | None = None) -> SweepResult:
    """Run every (method, epsilon, clip level, stepsize, repetition) cell."""
    sigma = None
    if problem is None:
        problem, sigma = build_problem(config.problem)
    if sigma is None:
        sigma = np.maximum(problem.data.features.std(axis=0), 1e-12)
    steps = config.steps or max_steps(problem.n, config.batch, config.c)
    cfg_kw = {"steps": steps, "batch": config.batch, "delta": config.delta, "c": config.c,
              "log_every": config.log_every}
    cells = plan(config, problem, sigma)
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(problem, cfg_kw)) as pool:
            parts = list(pool.map(_run_cell, cells, chunksize=max(1, len(cells) // (8 * jobs))))
    else:
        _init_worker(problem, cfg_kw)
        parts = [_run_cell(c) for c in cells]
    table = pd.concat(parts, ignore_index=True)[TABLE_COLUMNS]
    best = select_best(table)
    return SweepResult(table, best, summarize(table, best, seed=config.seed))


def final_losses(table: pd.DataFrame) -> pd.DataFrame:
    last = table.groupby(["method", "epsilon", "stepsize", "clip_B", "rep"])["iteration"].transform("max")
    return table[table["iteration"] == last]


def select_best(table: pd.DataFrame) -> pd.DataFrame:
    """Per (method, epsilon): the (stepsize, clip_B) whose median final loss
    over repetitions is smallest."""
    if table.empty:
        raise ValueError("empty result table")
    missing = set(TABLE_COLUMNS) - set(table.columns)
    if missing:
        raise ValueError(f"result table lacks columns {sorted(missing)}")
    fin = final_losses(table)
    med = fin.groupby(["method", "epsilon", "stepsize", "clip_B"], sort=True)["loss"].median().reset_index()
    idx = med.groupby(["method", "epsilon"])["loss"].idxmin()
    return med.loc[idx].rename(columns={"loss": "median_final_loss"}).reset_index(drop=True)


def bootstrap_median_band(values: np.ndarray, rng: np.random.Generator, n_boot: int = 1000):
    """Percentile-bootstrap 2.5/97.5 band of the median over axis 0.

    ``values`` is (R, k): R repetitions of k iterations.
    """
    R = values.shape[0]
    idx = rng.integers(0, R, size=(n_boot, R))
    meds = np.median(values[idx], axis=1)
    return np.percentile(meds, 2.5, axis=0), np.percentile(meds, 97.5, axis=0)


def summarize(table: pd.DataFrame, best: pd.DataFrame, seed: int = 0, n_boot: int = 1000) -> pd.DataFrame:
    out = []
    for row in best.itertuples(index=False):
        sel = table[(table["method"] == row.method) & (table["epsilon"] == row.epsilon)
                    & (table["stepsize"] == row.stepsize) & (table["clip_B"] == row.clip_B)]
        wide = sel.pivot(index="rep", columns="iteration", values="loss").sort_index()
        vals = wide.to_numpy()
        rng = np.random.default_rng(_derive_seed(seed, "bootstrap", row.method, row.epsilon))
        lo, hi = bootstrap_median_band(vals, rng, n_boot)
        out.append(pd.DataFrame({
            "method": row.method, "epsilon": row.epsilon, "stepsize": row.stepsize, "clip_B": row.clip_B,
            "iteration": wide.columns.to_numpy(), "median": np.median(vals, axis=0), "lo": lo, "hi": hi,
        }))
    return pd.concat(out, ignore_index=True)


def report(result, out_dir, seed: int = 0) -> dict:
    """Write one loss curve per (method, epsilon) and a final-loss table.

    ``result`` is a :class:`SweepResult` or a raw result table. Returns the
    written paths.
    """
    if isinstance(result, SweepResult):
        table, best, summary = result.table, result.best, result.summary
    else:
        table = result
        best = select_best(table)
        summary = summarize(table, best, seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curves = []
    for (method, eps), grp in summary.groupby(["method", "epsilon"], sort=True):
        path = out / f"curve_{method}_eps{eps:g}.csv"
        grp[["iteration", "median", "lo", "hi"]].to_csv(path, index=False)
        curves.append(str(path))
    final = summary.loc[summary.groupby(["method", "epsilon"])["iteration"].idxmax()].copy()
    final = final.rename(columns={"median": "median_final_loss", "lo": "ci_lo", "hi": "ci_hi"})
    final = final.drop(columns="iteration").sort_values(["epsilon", "median_final_loss"])
    final["rank"] = final.groupby("epsilon").cumcount() + 1
    final_path = out / "final.csv"
    final.to_csv(final_path, index=False)
    return {"curves": curves, "final": str(final_path)}


def seed_matched_wins(table: pd.DataFrame, best: pd.DataFrame, a: str, b: str, epsilon: float) -> tuple[int, int]:
    """Count repetitions where method ``a`` (at its best config) ends strictly
    below method ``b`` (at its best config). Returns (wins, total)."""
    fin = final_losses(table)

    def series(method):
        row = best[(best["method"] == method) & (best["epsilon"] == epsilon)].iloc[0]
        sel = fin[(fin["method"] == method) & (fin["epsilon"] == epsilon)
                  & (fin["stepsize"] == row.stepsize) & (fin["clip_B"] == row.clip_B)]
        return sel.set_index("rep")["loss"]

    sa, sb = series(a), series(b)
    common = sa.index.intersection(sb.index)
    return int((sa[common] < sb[common]).sum()), len(common)
