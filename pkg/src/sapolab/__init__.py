"""Segment-aligned policy optimization on toy token MDPs."""
from .analysis import bias_bound_check, bootstrap_ci, grad_check, lift, lift_q_curve, spearman
from .config import RunConfig
from .credit import GaeParams, compute_segment_credit, group_relative_advantages, segment_gae
from .envs import EnvSpec, Trajectory, enumerate_trajectories, exact_state_value, make_env
from .learner import SegmentPolicyLearner
from .optim import ClipConfig, init_learner, train_step
from .policy import FeatureSpec, PolicyParams, init_policy
from .segmentation import Segmentation, Segmenter, SegStrategy, segment
from .value import LinearValueFunction, value_fit

__version__ = "0.1.0"

__all__ = [
    "ClipConfig", "EnvSpec", "FeatureSpec", "GaeParams", "LinearValueFunction", "PolicyParams",
    "RunConfig", "SegStrategy", "Segmentation", "Segmenter", "SegmentPolicyLearner", "Trajectory",
    "bias_bound_check", "bootstrap_ci", "compute_segment_credit", "enumerate_trajectories",
    "exact_state_value", "grad_check", "group_relative_advantages", "init_learner", "init_policy",
    "lift", "lift_q_curve", "make_env", "segment", "segment_gae", "spearman", "train_step", "value_fit",
]
