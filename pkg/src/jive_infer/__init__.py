"""Jackknife instrumental-variable inference with many weak instruments.

Four objectives (SJIVE, HLIM, JIVE1, JIVE2), unrestricted and linearly
restricted estimation, distance, score and Wald tests with chi-bar-square
references and their modified versions with chi-square references,
Anderson-Rubin comparators and a Monte Carlo harness.
"""

__version__ = "0.1.0"

from .dataio import (
    IVDataset,
    LinearRestriction,
    Schema,
    load_dataset,
    load_restriction,
    save_dataset,
    validate_assumption1,
)
from .distributions import ChiBarSpec, chisq_sf, normal_sf, weighted_chisq_sf
from .errors import JiveInferError, NumericalError, UserInputError
from .estimators import estimate_restricted, estimate_unrestricted, objective
from .inference import (
    Family,
    Reference,
    TestReport,
    ar_test,
    full_vector_tests,
    linear_restriction_tests,
    test_full_vector,
    test_linear_restriction,
)
from .kernels import JackknifeKernel, Method, build_kernel, build_kernels
from .simulation import (
    DGP1Spec,
    DGP2Spec,
    RejectionTable,
    gen_dgp1,
    gen_dgp2,
    run_power_curve,
    run_size_experiment,
    run_table,
)
from .variance import VarianceMode, plugin_set, restriction_operators

__all__ = [
    "IVDataset", "LinearRestriction", "Schema", "load_dataset", "load_restriction",
    "save_dataset", "validate_assumption1", "ChiBarSpec", "chisq_sf", "normal_sf",
    "weighted_chisq_sf", "JiveInferError", "NumericalError", "UserInputError",
    "estimate_restricted", "estimate_unrestricted", "objective", "Family", "Reference",
    "TestReport", "ar_test", "full_vector_tests", "linear_restriction_tests",
    "test_full_vector", "test_linear_restriction", "JackknifeKernel", "Method",
    "build_kernel", "build_kernels", "DGP1Spec", "DGP2Spec", "RejectionTable",
    "gen_dgp1", "gen_dgp2", "run_power_curve", "run_size_experiment", "run_table",
    "VarianceMode", "plugin_set", "restriction_operators", "__version__",
]
