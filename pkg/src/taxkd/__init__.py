"""Correct noisy taxonomic pseudo-labels of metagenomic contigs with teacher/student distillation."""

from __future__ import annotations

__version__ = "0.1.0"

from .distill import Checkpoint, DistillConfig, hier_loss, kd_loss, load_checkpoint, save_checkpoint, soften, train
from .features import FeatureMatrix, assemble_features, build_tnf_kernel, parse_fasta, tnf
from .inference import Prediction, decode, evaluate, metrics, predict, transitions
from .simgen import SimConfig, simulate
from .taxonomy import RankedPath, TaxTree, build_tree, leaf_probabilities, node_probabilities

__all__ = [
    "Checkpoint",
    "DistillConfig",
    "FeatureMatrix",
    "Prediction",
    "RankedPath",
    "SimConfig",
    "TaxTree",
    "assemble_features",
    "build_tnf_kernel",
    "build_tree",
    "decode",
    "evaluate",
    "hier_loss",
    "kd_loss",
    "leaf_probabilities",
    "load_checkpoint",
    "metrics",
    "node_probabilities",
    "parse_fasta",
    "predict",
    "save_checkpoint",
    "simulate",
    "soften",
    "tnf",
    "train",
    "transitions",
]
