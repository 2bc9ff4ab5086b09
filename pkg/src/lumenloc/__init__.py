"""Absolute camera localization from scene-coordinate maps: robust PnP,
confidence-gated online training, retrieval, augmentation, losses, a
synthetic lumen simulator and trajectory metrics."""

from .confidence import ConfidencePolicy, ConfidenceState, FrameVerdict, Phase, SegmentLoop, observe, run_segment_loop
from .geometry import CameraIntrinsics, Pose, project, unproject
from .metrics import Trajectory, ate, confidence_filtered_ate, r_rpe, umeyama_align
from .pose_solver import LocalizationFailure, PoseEstimate, RansacConfig, ScenePointMap, estimate_pose, refine_pose, solve_p3p
from .retrieval import VirtualDatabase, best_subrange, build_virtual_buffer, retrieve

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "ConfidencePolicy",
    "ConfidenceState",
    "FrameVerdict",
    "LocalizationFailure",
    "Phase",
    "Pose",
    "PoseEstimate",
    "RansacConfig",
    "ScenePointMap",
    "SegmentLoop",
    "Trajectory",
    "VirtualDatabase",
    "ate",
    "best_subrange",
    "build_virtual_buffer",
    "confidence_filtered_ate",
    "estimate_pose",
    "observe",
    "project",
    "r_rpe",
    "refine_pose",
    "retrieve",
    "run_segment_loop",
    "solve_p3p",
    "umeyama_align",
    "unproject",
]
