"""Soft tree ensemble multiple instance learning.

Extremely randomized trees are fitted on bag labels copied to every instance,
compiled into differentiable three-layer networks, pooled with attention over
each bag and trained end to end.
"""
from .data import (Bag, FoldSplit, MILDataset, ReplicatedDataset, Standardization, kfold_split,
                   load_mil_csv, replicate_labels, save_mil_csv, standardize, synth_generate)
from .ert import CompleteTree, TreeEnsemble, complete_tree, fit_ert, hard_traverse, leaf_probability
from .gradients import GradReport, adam_step, backward, fd_check, sgd_step
from .model import (AttentionParams, BagPrediction, STEMILModel, attention_pool, bag_forward,
                    bag_loss, build_model, instance_embed, max_pool_reference, predict_label)
from .soft_tree import RoutingMatrix, SoftTreeParams, build_routing, convert_tree, soft_forward
from .training import CVResult, TrainConfig, cross_validate, train

__version__ = "0.1.0"
