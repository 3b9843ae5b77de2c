"""Odds ratios from matched case-control data using only pool-aggregated covariates."""
from .cohort import Cohort, MatchedSet, Subject, read_cohort_csv, validate_cohort, write_cohort_csv
from .engine import ConditionalDesign, FitResult, fit, hessian, log_likelihood, lr_test, score
from .kernels import BACKEND as KERNEL_BACKEND
from .pooling import (
    PoolAssignment,
    PooledDesign,
    PoolPlan,
    aggregate,
    assign_pools,
    bootstrap_strata,
    plan_pools,
    repeat_pooling,
    unpooled_design,
)
from .terms import Log, Power, Product, Var, evaluate_term, parse_term_spec

__version__ = "0.1.0"
