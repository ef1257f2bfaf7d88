"""Differentially private adaptive optimization: PASAN, PAGAN, and tooling."""

from dpadapt.geometry import (
    DiagonalMetric,
    Domain,
    DomainKind,
    Ellipsoid,
    GeometryError,
    diameter,
    mahalanobis_norm,
    project_domain,
    project_onto_ellipsoid,
    radial_clip,
)
from dpadapt.moments import (
    LipschitzStats,
    MomentEstimate,
    choose_B,
    choose_C,
    empirical_lipschitz,
    hat_C,
    private_second_moment,
    required_samples,
    subgaussian_bound,
)
from dpadapt.optimizers import ConfigError, OptConfig, Trace, pagan_step, pasan_step, privatize_gradient, run
from dpadapt.privacy import (
    AccountantError,
    AccountantLedger,
    NoiseSpec,
    PrivacyBudget,
    account,
    max_steps,
    noise_scale,
    sample_noise,
)
from dpadapt.problems import Dataset, ProblemSpec, abs_regression_problem, gen_abs_regression, linear_problem

__version__ = "0.1.0"
