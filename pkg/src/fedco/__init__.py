"""Federated online/offline model cooperation with an NTK theory verifier."""

from .numerics import (Tape, Tensor, backward, batch_norm, kl_divergence,
                       matmul, relu, sgd_step, softmax_cross_entropy,
                       sym_eig_min)
from .models import (MLPConfig, ModelOutput, ParamSet, clone_frozen, forward,
                     init_mlp, merge_params, predict_class, split_params)
from .datagen import (FederatedDataset, SampleStore, load_idx,
                      make_classification_store, make_feature_skew,
                      make_noise_skew, make_regression_clients,
                      partition_dirichlet, partition_pathological, save_idx)
from .cooperation import (ClassifierSet, FusionRule, adaptation_loss,
                          build_classifier_set, fuse_predictions,
                          inter_client_loss, mutual_learning_step)
from .federation import (ALGORITHMS, ClientState, RoundConfig, ServerState,
                         aggregate_mean, evaluate_client, init_run, run_round,
                         sample_clients)
from .theory import (GramEstimate, TheoryConfig, TwoLayerBNNet,
                     estimate_gram_von, estimate_gram_voff, forward_theory,
                     gram_time_t, gram_width_estimate, init_theory_net,
                     mse_loss, perp_projection, train_theory_trajectories,
                     verify_theorem1)
from .gradcheck import run_gradcheck
from .harness import ExperimentConfig, build_dataset, parse_config, run_experiment
from .reporting import RoundReport, emit_reports

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS", "ClassifierSet", "ClientState", "ExperimentConfig",
    "FederatedDataset", "FusionRule", "GramEstimate", "MLPConfig",
    "ModelOutput", "ParamSet", "RoundConfig", "RoundReport", "SampleStore",
    "ServerState", "Tape", "Tensor", "TheoryConfig", "TwoLayerBNNet",
    "adaptation_loss", "aggregate_mean", "backward", "batch_norm",
    "build_classifier_set", "build_dataset", "clone_frozen", "emit_reports",
    "estimate_gram_voff", "estimate_gram_von", "evaluate_client", "forward",
    "forward_theory", "fuse_predictions", "gram_time_t",
    "gram_width_estimate", "init_mlp", "init_run", "init_theory_net",
    "inter_client_loss", "kl_divergence", "load_idx",
    "make_classification_store", "make_feature_skew", "make_noise_skew",
    "make_regression_clients", "matmul", "merge_params", "mse_loss",
    "mutual_learning_step", "parse_config", "partition_dirichlet",
    "partition_pathological", "perp_projection", "predict_class", "relu",
    "run_experiment", "run_gradcheck", "run_round", "sample_clients",
    "save_idx", "sgd_step", "softmax_cross_entropy", "split_params",
    "sym_eig_min", "train_theory_trajectories", "verify_theorem1",
    "__version__",
]
