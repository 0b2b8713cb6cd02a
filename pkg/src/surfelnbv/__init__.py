"""Active scene reconstruction with a 2D Gaussian surfel map, a coarse
occupancy grid and a confidence-aware next-best-view planner."""

from .camera import CameraIntrinsics, Pose
from .confidence import ObservationLog, confidence, confidence_count_only, low_confidence_rois, refresh_confidences
from .mission import Mission, MissionConfig, run
from .planner import CandidateViewpoint, PlannerConfig, astar, plan, select
from .scene import GroundTruthScene, RgbdFrame, builtin_room, load_scene, ray_cast, render_gt
from .splat_map import RenderedViews, SplatMap, Surfel, covariance, densify_mask, render, spawn
from .train import LossWeights, TrainConfig, gradients, loss, normal_from_depth, train_step
from .voxel_map import RoiVoxel, VoxelMap, VoxelState

__version__ = "0.1.0"
