"""Rao-Blackwellized particle filtering and smoothing for conditionally
linear Gaussian state-space models."""

from .exceptions import (
    AllWeightsZero,
    ClgError,
    DegenerateWeights,
    DimensionMismatch,
    ModelInvalid,
    NonFiniteJacobian,
    NotPSD,
    QNotPD,
    RDegenerate,
    RNotPD,
    SigmaSingular,
    SingularCovariance,
    SingularInnovation,
)
from .gauss import (
    InfoPotential,
    MomentGaussian,
    chol_psd,
    fuse_info,
    lemma1_integrate,
    log_mvn_pdf,
    qr_upper,
)
from .models import (
    GaussianInitial,
    GeneralModel,
    HierarchicalModel,
    MixedModel,
    Trajectory,
    builtin_theta_model,
    builtin_turn_model,
    simulate,
    theta_of_z,
    trajectory_from_csv,
    trajectory_to_csv,
    turn_benchmark_trajectory,
    validate,
)
from .forward import (
    FilterOutput,
    ess,
    kf_meas_update,
    kf_time_update_hier,
    kf_time_update_mixed,
    rbpf_run,
    systematic_resample,
)
from .backward import (
    BackwardTrajectory,
    backward_messages,
    backward_simulate,
    bwd_init,
    bwd_meas_update,
    bwd_predict_hier,
    bwd_predict_mixed,
    bwd_weights,
    mcmc_backward_simulate,
    smooth_linear,
    smooth_trajectories,
    sqrt_bwd_meas_update,
    sqrt_bwd_predict_hier,
    sqrt_bwd_predict_mixed,
)
from .approx import (
    ArtificialPrior,
    Taylor1Scheme,
    UnscentedScheme,
    approx_dynamics,
    approx_measurement,
    approx_rbpf_rbps_run,
    taylor1_joint,
)
from .baselines import (
    constrained_rts,
    ffbs_run,
    rbffjbs_run,
    rbfs_run,
)
from .metrics import posterior_logdensity, rmse, unique_particles
from .bench import RunConfig, bench, run_smoother

__version__ = "0.1.0"
