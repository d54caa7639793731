"""Hybrid particle Gaussian-mixture filtering for cislunar tracking.

Bootstraps angles-only orbit determination from a near-uninformative
uniform prior over the cislunar volume: MCMC-based mixture updates for the
first measurements, ensemble-Kalman mixture updates for the rest of the
pass.
"""

from .dynamics import (
    DegenerateStateError,
    Epoch,
    StepSizeUnderflowError,
    SynodicState,
    SystemParams,
    TopocentricState,
    cr3bp_accel,
    jacobi_constant,
    propagate,
    synodic_to_topocentric,
    topocentric_to_synodic,
)
from .gmm import (
    Gmm,
    ParticleEnsemble,
    UniformBox,
    box_contains,
    box_log_density,
    box_sample,
    cluster,
    entropy,
    fit_gaussian,
    log_pdf,
    sample,
)
from .harness import RunConfig, RunSummary, compare, load_config, run
from .hybrid import (
    HybridConfig,
    RunResult,
    TrackRecord,
    consistency,
    run_hybrid,
    run_pgm1_only,
)
from .observation import (
    Measurement,
    VisibilityPolicy,
    log_likelihood,
    measure,
    synthesize,
    visible,
)
from .pgm1 import Pgm1Config, enkf_component_update, pgm1_step
from .pgm2 import (
    GaussianPrior,
    McmcConfig,
    McmcEnsemble,
    ensemble_likelihood,
    metropolis_chain,
    pgm2_step,
    sample_component_posterior,
    target_log_density,
)
from .pgm_core import (
    FilterStepInput,
    ProcessNoise,
    propagate_ensemble,
    resample_posterior,
    update_weights,
)
from .scenario import (
    ScenarioConfig,
    ScenarioData,
    build_scenario,
    cluster_box_prior,
    default_nrho,
)

__version__ = "0.1.0"
