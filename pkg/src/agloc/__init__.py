"""Air-ground relative localization.

Estimates the 4-DoF transform between a ground vehicle's and an aerial
vehicle's world frames from exchanged keypoint/descriptor packets, using a
hashed-voxel depth lookup, an incremental descriptor database, and a
two-stage robust bundle adjustment. Ships with a synthetic scenario kit
that makes every stage verifiable against ground truth.
"""

from .geometry import (
    CameraIntrinsics,
    RelPose4,
    RigidTransform,
    RobustNorm,
    backproject_ray,
    compose,
    invert,
    project,
    robust_eval,
    transform_point,
    yaw_of,
)
from .voxel_map import RayCastConfig, VoxelMap
from .place_index import GlobalDescriptor, HnswIndex
from .association import (
    KeypointSet,
    MatchSet,
    PairFilterConfig,
    build_pair_candidates,
    estimate_pose_epnp,
    match_descriptors,
)
from .optimizer import (
    Landmark,
    SlidingWindow,
    SolverConfig,
    StageTwoProblem,
    eval_residual_eq2,
    eval_residual_eq5,
    stage1_refine,
    stage2_refine,
)
from .protocol import FramePacket, bandwidth, decode, encode
from .simkit import NoiseModel, Scenario, ScenarioConfig, generate
from .harness import MetricsReport, RunConfig, ablate, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "RelPose4", "RigidTransform", "RobustNorm",
    "backproject_ray", "compose", "invert", "project", "robust_eval",
    "transform_point", "yaw_of",
    "RayCastConfig", "VoxelMap",
    "GlobalDescriptor", "HnswIndex",
    "KeypointSet", "MatchSet", "PairFilterConfig", "build_pair_candidates",
    "estimate_pose_epnp", "match_descriptors",
    "Landmark", "SlidingWindow", "SolverConfig", "StageTwoProblem",
    "eval_residual_eq2", "eval_residual_eq5", "stage1_refine", "stage2_refine",
    "FramePacket", "bandwidth", "decode", "encode",
    "NoiseModel", "Scenario", "ScenarioConfig", "generate",
    "MetricsReport", "RunConfig", "ablate", "run_pipeline",
    "__version__",
]
