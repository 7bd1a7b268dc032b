"""Synergy-weighted graph convolution for multi-behavior recommendation."""
from .data import (
    Affinity, InteractionDataset, InteractionRecord, SplitDataset, SyntheticConfig,
    generate_synthetic, load_interactions, load_split, preprocess, save_split, temporal_split,
)
from .evaluation import EvalReport, SynergyReport, evaluate, synergy_report
from .graph import (
    BehaviorGraph, EdgeWeightMap, assemble_weighted_adjacency, build_behavior_graph,
    degree_normalize, graphs_from_dataset,
)
from .model import SWGCN, forward, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, fit, gradient_check

__version__ = "0.1.0"
