"""trajrefine: temporal refinement of 3D box proposals over LiDAR point-cloud
sequences, with a synthetic scene simulator and a numpy autodiff training
core."""

from .geom import Box7, BoxKeypoints, Pose2D, box_keypoints, iou_3d, points_in_box, to_local, to_world
from .synth import Frame, JitterConfig, NoisyProposal, SceneConfig, TrackedObject, make_proposals, simulate_sequence
from .trajseq import PooledPoints, ProposalTrajectory, associate, build_trajectories, pool_points
from .encode import FrameEncoder, FrameFeatures, ProxyGrid, TimeOffset, make_proxy_grid
from .temporal import GroupSpec, IndexPE, Mixer3D, TemporalHierarchy, make_groups
from .head import Detection, DetectionHead, EvalReport, LossReport, compute_loss, evaluate
from .model import ModelConfig, TrajectoryRefiner, evaluate_model, train_model

__version__ = "0.1.0"
