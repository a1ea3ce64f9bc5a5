"""Detect unusual inputs to softmax classifiers with the Fisher form."""

from .calib import ReferenceSet, RocCurve, histogram, rank_normalize, roc
from .metrics import (
    FisherSettings,
    MetricKind,
    ensemble_entropy,
    entropy,
    error_probability,
    fisher_direction,
    fisher_form,
    fisher_form_batch,
    fisher_form_fd,
    kl_divergence,
    mc_dropout_entropy,
    score_batch,
)
from .netcore import (
    DenseLayerSpec,
    DropoutConfig,
    NetworkSpec,
    entropy_gradient,
    forward,
    forward_dropout,
    load_model,
    perturb_params,
    save_model,
)
from .scenarios import Dataset, SplitSpec, invert_channel, load_csv, load_idx, noise_path, synth_blobs, threshold_split
from .train import EnsembleConfig, TrainConfig, evaluate_accuracy, train_classifier, train_ensemble

__version__ = "0.1.0"
