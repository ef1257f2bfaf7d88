import math
import warnings

import numpy as np
import pytest

from dpadapt.geometry import DiagonalMetric, Domain, Ellipsoid
from dpadapt.optimizers import (
    ConfigError,
    OptConfig,
    PaganState,
    PasanState,
    coordinate_wise_privatize,
    pagan_step,
    pasan_step,
    privatize_gradient,
    run,
    split_epsilon,
)
from dpadapt.privacy import NoiseSpec, PrivacyBudget, noise_scale
from dpadapt.problems import abs_regression_problem, power_sigma
from dpadapt.testkit import oracle_project


@pytest.fixture
def problem():
    return abs_regression_problem(400, 6, power_sigma(6), 0.01, np.random.default_rng(11))


def reference_adagrad(problem, alpha, steps, batch, seed):
    """Textbook diagonal AdaGrad on the box, written as a plain loop."""
    rng = np.random.default_rng(seed)
    R = problem.domain.radius
    x = np.zeros(problem.d)
    acc = np.zeros(problem.d)
    xs = []
    for _ in range(steps):
        idx = rng.integers(0, problem.n, size=batch)
        A, b = problem.data.features[idx], problem.data.targets[idx]
        g = (np.sign(A @ x - b)[:, None] * A).mean(axis=0)
        acc = acc + g * g
        for j in range(problem.d):
            if acc[j] > 0:
                x[j] = min(R, max(-R, x[j] - alpha * g[j] / math.sqrt(acc[j])))
        xs.append(x.copy())
    return np.array(xs)


def reference_adaptive_sgd(problem, alpha, steps, batch, seed):
    rng = np.random.default_rng(seed)
    R = problem.domain.radius
    x = np.zeros(problem.d)
    acc = 0.0
    xs = []
    for _ in range(steps):
        idx = rng.integers(0, problem.n, size=batch)
        A, b = problem.data.features[idx], problem.data.targets[idx]
        g = (np.sign(A @ x - b)[:, None] * A).mean(axis=0)
        acc += float(g @ g)
        if acc > 0:
            x = np.clip(x - alpha / math.sqrt(acc) * g, -R, R)
        xs.append(x.copy())
    return np.array(xs)


def reference_private_pasan(problem, alpha, steps, batch, seed, C, B, budget):
    """PASAN with the scalar oracle projection and explicit noise draws."""
    rng = np.random.default_rng(seed)
    E = Ellipsoid.from_clip(C, B)
    scale = math.sqrt(math.log(1 / budget.delta)) / (batch * budget.epsilon)
    std = scale / np.sqrt(E.metric.entries)
    x = np.zeros(problem.d)
    acc = 0.0
    xs = []
    for _ in range(steps):
        idx = rng.integers(0, problem.n, size=batch)
        A, b = problem.data.features[idx], problem.data.targets[idx]
        G = np.sign(A @ x - b)[:, None] * A
        g = np.mean([oracle_project(row, E) for row in G], axis=0) + std * rng.standard_normal(problem.d)
        acc += float(g @ g)
        x = np.clip(x - alpha / math.sqrt(acc) * g, -1.0, 1.0)
        xs.append(x.copy())
    return np.array(xs)


class TestPrivatize:
    def test_inside_no_noise(self, rng):
        G = rng.uniform(-0.1, 0.1, (4, 3))
        E = Ellipsoid(DiagonalMetric.identity(3))
        out = privatize_gradient(G, E, NoiseSpec(0.0, E.metric), rng)
        np.testing.assert_allclose(out, G.mean(axis=0), rtol=1e-15)

    def test_single_projection(self, rng):
        E = Ellipsoid(DiagonalMetric.identity(2))
        np.testing.assert_allclose(privatize_gradient([[2.0, 0.0]], E, NoiseSpec(0.0, E.metric), rng), [1.0, 0.0])

    def test_batch_against_oracle(self, rng):
        E = Ellipsoid(DiagonalMetric([1.0, 4.0]))
        G = rng.standard_normal((3, 2)) * 3
        out = privatize_gradient(G, E, NoiseSpec(0.0, E.metric), rng)
        np.testing.assert_allclose(out, np.mean([oracle_project(g, E) for g in G], axis=0), atol=1e-9)
        assert np.sqrt(np.sum(E.metric.entries * out**2)) <= 1 + 1e-10

    def test_radial(self, rng):
        E = Ellipsoid(DiagonalMetric([1.0, 4.0]))
        out = privatize_gradient([[2.0, 2.0]], E, NoiseSpec(0.0, E.metric), rng, clipper="radial")
        np.testing.assert_allclose(out, np.array([2.0, 2.0]) / math.sqrt(20))

    def test_errors(self, rng):
        E = Ellipsoid(DiagonalMetric.identity(2))
        with pytest.raises(ValueError):
            privatize_gradient(np.ones((2, 3)), E, NoiseSpec(0.0, E.metric), rng)
        with pytest.raises(ValueError):
            privatize_gradient(np.ones((2, 2)), E, NoiseSpec(0.0, E.metric), rng, clipper="nope")


class TestCoordinateWise:
    def test_plain_mean(self, rng):
        G = rng.standard_normal((5, 3))
        out = coordinate_wise_privatize(G, np.full(3, 1e6), 0.0, np.ones(3), 5, rng)
        np.testing.assert_allclose(out, G.mean(axis=0))

    def test_clamp(self, rng):
        np.testing.assert_array_equal(coordinate_wise_privatize([[5.0]], [1.0], 0.0, [1.0], 1, rng), [1.0])

    def test_split(self):
        eps = split_epsilon(1.0, [1.0, 8.0])
        np.testing.assert_allclose(eps, np.array([1.0, 2.0]) / math.sqrt(5))
        assert np.sum(eps**2) == pytest.approx(1.0)

    def test_noise_std(self):
        lam, eps = np.array([1.0, 2.0]), np.array([0.5, 1.0])
        draws = np.array([coordinate_wise_privatize(np.zeros((1, 2)), lam, 3.0, eps, 4, np.random.default_rng(s))
                          for s in range(20000)])
        np.testing.assert_allclose(draws.std(axis=0), 3.0 * lam / (4 * eps), rtol=0.03)

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            coordinate_wise_privatize([[1.0]], [1.0], 1.0, [0.0], 1, rng)
        with pytest.raises(ValueError):
            split_epsilon(1.0, [0.0, 1.0])


class TestSteps:
    def test_pasan_zero_gradient(self):
        X = Domain("box", 10.0, 2)
        s = pasan_step(PasanState.start([0.5, 0.5]), np.zeros(2), 1.0, X)
        np.testing.assert_array_equal(s.x, [0.5, 0.5])

    def test_pasan_arithmetic(self):
        X = Domain("box", 10.0, 2)
        s = pasan_step(PasanState.start([1.0, 1.0]), np.array([3.0, 4.0]), 1.0, X)
        np.testing.assert_allclose(s.x, [0.4, 0.2])
        assert s.sq_accum == 25.0

    def test_pagan_arithmetic(self):
        X = Domain("box", 10.0, 2)
        s = pagan_step(PaganState.start([1.0, 1.0]), np.array([3.0, 4.0]), 1.0, X)
        np.testing.assert_allclose(s.x, [0.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(s.H(1.0), [3.0, 4.0])

    def test_pagan_zero_gradient(self):
        X = Domain("box", 10.0, 2)
        s0 = pagan_step(PaganState.start([0.0, 0.0]), np.array([1.0, 0.0]), 1.0, X)
        s1 = pagan_step(s0, np.zeros(2), 1.0, X)
        np.testing.assert_array_equal(s1.x, s0.x)
        np.testing.assert_array_equal(s1.H(1.0), s0.H(1.0))

    def test_pagan_ball_projection_in_H(self):
        X = Domain("ball", 1.0, 2)
        s = pagan_step(PaganState.start([0.0, 0.0]), np.array([-1.0, -0.5]), 3.0, X)
        assert np.linalg.norm(s.x) <= 1.0 + 1e-10


class TestRun:
    def test_reduction_adagrad(self, problem):
        cfg = OptConfig(alpha=0.3, steps=50, batch=10, seed=4, record_iterates=True)
        tr = run("pagan", problem, cfg)
        np.testing.assert_allclose(tr.iterates, reference_adagrad(problem, 0.3, 50, 10, 4), atol=1e-12)
        np.testing.assert_array_equal(tr.iterates, run("adagrad", problem, cfg).iterates)

    def test_reduction_sgd(self, problem):
        cfg = OptConfig(alpha=0.3, steps=50, batch=10, seed=4, record_iterates=True)
        tr = run("pasan", problem, cfg)
        np.testing.assert_allclose(tr.iterates, reference_adaptive_sgd(problem, 0.3, 50, 10, 4), atol=1e-12)
        np.testing.assert_array_equal(tr.iterates, run("sgd", problem, cfg).iterates)

    def test_private_pasan_against_reference(self, problem):
        C, B, budget = DiagonalMetric(np.arange(1.0, 7.0)), 1.5, PrivacyBudget(2.0, 1e-5)
        cfg = OptConfig(alpha=0.2, steps=5, batch=8, C=C, clip_B=B, budget=budget, seed=9, record_iterates=True)
        tr = run("pasan", problem, cfg)
        ref = reference_private_pasan(problem, 0.2, 5, 8, 9, C, B, budget)
        np.testing.assert_allclose(tr.iterates, ref, atol=1e-9)

    def test_dpsgd_noise_is_isotropic(self, problem):
        budget = PrivacyBudget(1.0, 1e-5)
        cfg = OptConfig(alpha=0.1, steps=3, batch=10, C=DiagonalMetric(np.arange(1.0, 7.0)), clip_B=2.0,
                        budget=budget, seed=1)
        tr = run("dpsgd_isotropic", problem, cfg)
        assert tr.meta["noise_scale"] == pytest.approx(noise_scale(budget, 10))
        np.testing.assert_allclose(tr.step_size, 0.1 / np.sqrt([1.0, 2.0, 3.0]))

    @pytest.mark.parametrize("alg", ["pasan", "pagan", "dpsgd_isotropic"])
    def test_feasible_and_average(self, problem, alg):
        cfg = OptConfig(alpha=1.0, steps=40, batch=10, C=DiagonalMetric.identity(6), clip_B=1.0,
                        budget=PrivacyBudget(0.5, 1e-5), seed=3, record_iterates=True)
        tr = run(alg, problem, cfg)
        assert np.max(np.abs(tr.iterates)) <= 1.0 + 1e-12
        np.testing.assert_allclose(tr.x_bar, tr.iterates.mean(axis=0), atol=1e-12)
        np.testing.assert_array_equal(tr.x_final, tr.iterates[-1])

    def test_ball_domain_feasible(self, problem):
        cfg = OptConfig(alpha=2.0, steps=60, batch=10, clip_B=1.0, budget=PrivacyBudget(1.0, 1e-5),
                        domain=Domain("ball", 0.5, 6), seed=3, record_iterates=True)
        for alg in ("pasan", "pagan"):
            tr = run(alg, problem, cfg)
            assert np.max(np.linalg.norm(tr.iterates, axis=1)) <= 0.5 + 1e-9

    def test_accumulators_monotone(self, problem):
        cfg = OptConfig(alpha=0.5, steps=30, batch=10, clip_B=1.0, budget=PrivacyBudget(1.0, 1e-5), seed=2)
        for alg in ("pasan", "pagan"):
            tr = run(alg, problem, cfg)
            assert np.all(np.diff(tr.step_size) <= 1e-15)

    def test_deterministic(self, problem):
        cfg = OptConfig(alpha=0.5, steps=30, batch=10, clip_B=1.0, budget=PrivacyBudget(1.0, 1e-5), seed=2)
        a, b = run("pagan", problem, cfg), run("pagan", problem, cfg)
        np.testing.assert_array_equal(a.loss, b.loss)
        np.testing.assert_array_equal(a.x_bar, b.x_bar)

    def test_toy_problem_decreases(self):
        p = abs_regression_problem(200, 2, np.array([1.0, 0.5]), 0.0, np.random.default_rng(0))
        for alg in ("pasan", "pagan", "sgd", "adagrad"):
            tr = run(alg, p, OptConfig(alpha=1.0, steps=200, batch=10, seed=0))
            assert tr.loss[-1] <= tr.loss_init

    def test_trace_shape(self, problem):
        tr = run("pagan", problem, OptConfig(alpha=0.5, steps=25, batch=5, log_every=10))
        np.testing.assert_array_equal(tr.steps, [10, 20, 25])
        assert tr.grad_norm.shape == (25,) and tr.clip_fraction.shape == (25,)
        assert np.all((tr.clip_fraction >= 0) & (tr.clip_fraction <= 1))

    def test_clip_fraction(self, problem):
        tr = run("pasan", problem, OptConfig(alpha=0.5, steps=10, batch=20, clip_B=1e-6,
                                             budget=PrivacyBudget(1.0, 1e-5)))
        assert np.all(tr.clip_fraction > 0.9)

    def test_record_grads(self, problem):
        tr = run("adagrad", problem, OptConfig(alpha=0.5, steps=5, batch=5, record_grads=True))
        assert tr.grads.shape == (5, 6)

    def test_coordinate_clipper(self, problem):
        cfg = OptConfig(alpha=0.5, steps=20, batch=10, clipper="coordinate", coord_lambda=np.full(6, 0.5),
                        budget=PrivacyBudget(1.0, 1e-5), seed=0)
        tr = run("pagan", problem, cfg)
        assert np.all(np.isfinite(tr.loss))
        with pytest.raises(ConfigError):
            run("pagan", problem, OptConfig(alpha=0.5, steps=2, batch=5, clipper="coordinate",
                                            budget=PrivacyBudget(1.0, 1e-5)))

    def test_errors(self, problem):
        with pytest.raises(ConfigError):
            run("adam", problem, OptConfig(alpha=1.0, steps=1, batch=1))
        with pytest.raises(ConfigError):
            run("pasan", problem, OptConfig(alpha=1.0, steps=1, batch=1, budget=PrivacyBudget(1.0, 1e-5)))
        with pytest.raises(ConfigError):
            run("pasan", problem, OptConfig(alpha=1.0, steps=1, batch=1, C=DiagonalMetric.identity(3)))
        with pytest.raises(ConfigError):
            run("pasan", problem, OptConfig(alpha=1.0, steps=1, batch=1, domain=Domain("box", 1.0, 3)))
        with pytest.raises(ConfigError):
            run("pasan", problem, OptConfig(alpha=1.0, steps=1, batch=1, clip_B=1.0,
                                            budget=PrivacyBudget(math.inf, 1e-5)))
        for bad in ({"alpha": 0.0}, {"steps": 0}, {"clip_B": -1.0}, {"clipper": "x"}, {"log_every": 0}):
            kw = {"alpha": 1.0, "steps": 1, "batch": 1, **bad}
            with pytest.raises(ConfigError):
                OptConfig(**kw)

    def test_step_budget_warning(self, problem):
        cfg = OptConfig(alpha=1.0, steps=2000, batch=200, clip_B=1.0, budget=PrivacyBudget(1.0, 1e-5))
        with pytest.warns(UserWarning, match="iteration budget"):
            run("pasan", problem, cfg)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            run("pasan", problem, OptConfig(alpha=1.0, steps=4, batch=200, clip_B=1.0,
                                            budget=PrivacyBudget(1.0, 1e-5)))
