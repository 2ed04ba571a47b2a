"""Statistics for counting experiments: limits, significance, coverage and fit tests."""

from .bayes import DivergentPosteriorError, posterior, upper_limit
from .combine import (
    Measurement,
    MeasurementSet,
    blind_offset,
    correlated_average,
    poisson_weight_bias,
    unblind,
    weighted_average,
)
from .core import (
    CountingModel,
    CountStatError,
    ModelError,
    Nuisance,
    Observation,
    PValueReport,
    log_likelihood,
    p_to_sigma,
    sigma_to_p,
)
from .coverage import coverage_scan, exact_coverage, generate_toy, systematics_compare
from .frequentist import (
    BeltTruncatedError,
    GaussianModel,
    IntervalResult,
    build_belt,
    classical_upper_limit,
    fc_interval,
    flip_flop_interval,
)
from .gof import BinnedData, TwoSample, chi2_binned, chi2_difference, effective_dof_scan, energy_test
from .io import __version__
from .profile import profile, profile_interval
from .significance import (
    cls,
    cls_counting,
    cls_upper_limit,
    combine_pvalues,
    median_sensitivity,
    punzi_sensitivity,
    pvalue_counting,
    pvalue_nuisance,
)
