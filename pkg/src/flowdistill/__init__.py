"""flowdistill: a desk-scale score-distillation laboratory.

Exact Gaussian-mixture noise oracles, deterministic flow-ODE sampling,
fixed-noise and mode-seeking distillation in 2D and on a differentiable
voxel scene, and the world-map view-noise function that ties distillation
updates to the deterministic sampler across camera views.
"""

from .distill import (
    AdamState,
    DistillConfig,
    adam_step,
    fsd_euler_step_2d,
    guided_residual,
    run_distill_2d,
    run_distill_3d,
    sds_residual_2d,
)
from .errors import (
    ConfigurationError,
    DomainError,
    FlowDistillError,
    NumericDegenerateError,
    OrderingError,
    SingularScoreError,
)
from .harness import EnsembleReport, RunConfig, ensemble_diversity, run_experiment
from .noise_field import (
    Camera,
    CameraSampler,
    WorldMapNoise,
    constant_noise_query,
    marginal_stats_probe,
    overlap_alignment_probe,
    r_plus,
    window_match_radius,
    world_map_query,
)
from .oracle import (
    UNCONDITIONAL,
    GuidanceSpec,
    MixtureOracle,
    epsilon_pred,
    guided_epsilon,
    x0_estimate,
)
from .prng import RandomStream
from .sampler import Trajectory, ddim_step, ddim_trajectory, pf_ode_rhs
from .scene import RenderOutput, VoxelScene, render, render_vjp
from .schedule import NoiseSchedule, TimestepPlan, alpha_sigma, anneal_t, ratio_derivative

__version__ = "0.1.0"
