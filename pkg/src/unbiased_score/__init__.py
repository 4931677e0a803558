"""Provably unbiased score estimation for partially observed diffusions.

The estimator couples conditional particle filters within and across
Euler-Maruyama discretization levels, detects exact meetings of the coupled
chains, and combines randomized multilevel debiasing with time-averaged
MCMC corrections. The resulting score estimates feed stochastic gradient
ascent and Langevin drivers for likelihood-based inference.
"""

from .drivers import (
    LearningSchedule,
    PriorSpec,
    constant_schedule,
    polyak_ruppert,
    power_schedule,
    sga_run,
    sgld_run,
)
from .estimators import (
    ChainRecord,
    EstimatorConfig,
    IterationCapError,
    LevelPMF,
    ScoreEstimate,
    build_level_pmf,
    burnin_from_pilot,
    estimate_increment,
    estimate_increment_l0,
    level_increments,
    pilot_stopping_times,
    replicate_scores,
    resolve_preset,
    run_coupled_chains,
    sample_levels,
    time_averaged_score,
    unbiased_score,
)
from .experiments import (
    EXPERIMENT_KINDS,
    ExperimentConfig,
    ingest,
    make_model,
    run_experiment,
    simulate_dataset,
)
from .functional import eval_score_functional
from .grid import (
    LevelPairGrid,
    TimeGrid,
    build_irregular_grid,
    build_level_pair,
    build_unit_grid,
)
from .kernels import (
    SweepOptions,
    ccpf2_sweep,
    ccpf4_sweep,
    cpf_sweep,
    mlcpf_sweep,
)
from .models import (
    ModelSpec,
    ObservationSet,
    ParamVector,
    from_constrained,
    gridcell_model,
    logistic_model,
    ou_model,
    to_constrained,
)
from .oracles import (
    LinearGaussianSSM,
    bruteforce_coupling4_pmf,
    kalman_loglik,
    kalman_score,
    ou_euler_ssm,
    ou_exact_ssm,
    simulate_smoother,
)
from .rng import SeedSpec, derive_stream

__version__ = "0.1.0"
