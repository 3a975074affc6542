"""flowvel: forward velocity and dense depth from optic flow plus an accelerometer.

Monocular optic flow fixes only the ratio r = v/d at every pixel. A measured
forward acceleration breaks that scale ambiguity: pooled over receptive fields,

    v = a * (-r_bar) / (r2_bar - rdot_bar)

recovers the absolute forward speed, and d = v / r turns the ratio map into a
dense metric depth map. The package contains the estimation pipeline, a
synthetic rigid-scene simulator that serves as its test oracle, an evaluation
harness (error metrics, baselines, per-step timing), and a CLI with a replay
dataset format.
"""

from .geometry import CameraIntrinsics, AngleGrid, build_angle_grid, forward_flow_model
from .simulate import (
    TrajectorySpec,
    NoiseSpec,
    ScenePlan,
    SimFrame,
    simulate,
    simulate_list,
    rotational_flow,
)
from .frontend import (
    FlowField,
    RatioMap,
    StaggerConfig,
    StaggerBuffer,
    staggered_flow,
    derotate,
    apply_full_matched_filter,
    ratio_map,
)
from .fields import ReceptiveField, FieldBank, PooledStats, build_bank, pool
from .estimator import (
    ButterworthSpec,
    DerivativeConfig,
    EstimatorConfig,
    VelocityEstimate,
    StreamingButterworth,
    butterworth_filter,
    staggered_derivative,
    per_field_velocity,
    aggregate,
    finalize_velocity,
    VelocityPipeline,
)
from .depth import (
    DepthMap,
    TVRepairConfig,
    DEFAULT_TV_GAMMA,
    direct_depth,
    closed_form_depth,
    tv_repair,
    repaired_depth,
)
from .evaluate import (
    EstimatorRun,
    RunReport,
    DepthScore,
    integrate_accel_baseline,
    kalman_smoother_baseline,
    kalman_run,
    evaluate,
    evaluate_depth,
    run_estimator,
)
from .dataset import ReplayDataset, write_dataset, read_dataset, resample_imu
from .config import RunConfig

__version__ = "0.1.0"
