"""posevalid: two-stream validation of 6-dof pose estimates on depth scenes."""

__version__ = "0.1.0"

from .geometry import (
    INVALID,
    TP_DIAMETER_FRACTION,
    VALID,
    GroundTruthSet,
    Mesh,
    ObjectModel,
    Pose,
    SymmetrySpec,
    build_model,
    identity_pose,
    label_detection,
    load_obj,
    pose_compose,
    pose_distance,
    pose_inverse,
    representatives,
    symmetry_group,
)

__all__ = [
    "GroundTruthSet", "INVALID", "Mesh", "ObjectModel", "Pose", "SymmetrySpec",
    "TP_DIAMETER_FRACTION", "VALID", "build_model", "identity_pose",
    "label_detection", "load_obj", "pose_compose", "pose_distance",
    "pose_inverse", "representatives", "symmetry_group", "__version__",
]
