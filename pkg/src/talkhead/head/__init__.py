from .assets import (DESCRIPTOR_ROLES, IBUG68_ROLES, HeadAssets, assets_equal, load_assets, make_mini_assets,
                     save_assets, validate_assets)
from .model import (POSE_DIM, AnimationSequence, FacialFrame, MeshOutput, PoseParams, animate, flame_forward,
                    flame_lbs, frames_forward, full_pose, lip_vertices, rodrigues, vertex_sequence)

__all__ = [
    "DESCRIPTOR_ROLES", "IBUG68_ROLES", "POSE_DIM", "AnimationSequence", "FacialFrame", "HeadAssets", "MeshOutput",
    "PoseParams", "animate", "assets_equal", "flame_forward", "flame_lbs", "frames_forward", "full_pose",
    "lip_vertices", "load_assets", "make_mini_assets", "rodrigues", "save_assets", "validate_assets",
    "vertex_sequence",
]
