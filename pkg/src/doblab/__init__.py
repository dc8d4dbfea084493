"""doblab: a disturbance-observer laboratory for linear-Gaussian systems.

Estimators (SISE, KF-DOB in augmented and partitioned forms, NKF-DOB,
MKCKF-DOB, IMMKF-DOB), batch-estimator oracles, ground-truth scenario
generation, and a seeded Monte Carlo harness for bias-variance analysis.
"""

from .model import (
    AugmentedModel,
    GaussianBelief,
    LinearSystem,
    ModelError,
    augment,
    cholesky_factor,
)
from .estimators import (
    EstimationError,
    ImmState,
    MkcConfig,
    MkcStepResult,
    NkfDobState,
    PartitionedDobState,
    SiseState,
    gaussian_kernel,
    imm_dob_init,
    immkf_dob_step,
    kf_dob_init,
    kf_dob_partitioned_step,
    kf_dob_step,
    kf_step,
    mkc_loss,
    mkckf_dob_step,
    nkf_dob_init,
    nkf_dob_step,
    sise_init,
    sise_step,
)
from .oracles import (
    CovarianceTriple,
    ExtendedModel,
    batch_kf_estimate,
    bias_propagation,
    build_extended_model,
    convergence_index,
    covariance_triple_step,
    response_decomposition,
    steady_state_gain,
    steady_state_true_cov,
    true_cov_gap_closed_form,
)
from .scenario import (
    DEFAULT_D_STAR,
    DisturbanceProfile,
    Trajectory,
    default_disturbance_profile,
    default_tracking_system,
    sample_disturbance,
    simulate_truth,
    trajectory_to_csv,
)
from .harness import (
    EstimatorKind,
    FilterRun,
    ImmKfDob,
    KfDob,
    MkcKfDob,
    MonteCarloConfig,
    MonteCarloReport,
    NkfDob,
    Sise,
    identity_check,
    kf_dob_eta,
    performance_loss,
    run_eta_sweep,
    run_monte_carlo,
    run_single,
    trial_seed,
)

__version__ = "0.1.0"
