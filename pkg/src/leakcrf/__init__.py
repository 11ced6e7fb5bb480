"""Leak localization on water networks with a pairwise CRF and human-report fusion."""

from .crf import CrfModel, brute_force_infer, loss_augmented_infer, map_infer, node_marginals
from .features import FeatureMap, joint_feature, node_features
from .fusion import FusionConfig, HumanReport, ReportSimConfig, build_cliques, entropy, greedy_fuse, high_order_potential
from .harness import ExperimentConfig, hamming_score, run_experiment
from .hydrosim import LeakEvent, Scenario, ScenarioConfig, simulate, solve_steady_state
from .network import NodeRecord, PipeRecord, SensorLayout, WaterNetwork, generate_benchmark_network
from .ssvm import TrainingConfig, TrainingSample, structured_hinge_loss, train

__version__ = "0.1.0"

__all__ = [
    "CrfModel",
    "ExperimentConfig",
    "FeatureMap",
    "FusionConfig",
    "HumanReport",
    "LeakEvent",
    "NodeRecord",
    "PipeRecord",
    "ReportSimConfig",
    "Scenario",
    "ScenarioConfig",
    "SensorLayout",
    "TrainingConfig",
    "TrainingSample",
    "WaterNetwork",
    "brute_force_infer",
    "build_cliques",
    "entropy",
    "generate_benchmark_network",
    "greedy_fuse",
    "hamming_score",
    "high_order_potential",
    "joint_feature",
    "loss_augmented_infer",
    "map_infer",
    "node_features",
    "node_marginals",
    "run_experiment",
    "simulate",
    "solve_steady_state",
    "structured_hinge_loss",
    "train",
]
