"""Certified detection of adversarial patches via top-k superficial-neuron pruning."""
from .errors import ConfigError, DataError, FormatError, NumericalError, PatchCertError, StateError
from .model import LayerGeom, LayerSpec, ModelSpec, backward, build_model, forward, predict
from .weights import load_tensor, load_weights, save_tensor, save_weights
from .sin import SINConfig, SINMask, backmap_region, compute_sin_mask, exclusion_set, pruned_forward
from .windows import Window, WindowPlan, filter_windows, generate_windows, merge_windows, plan_windows
from .certify import (Alert, Benign, CertifyResult, DefenseConfig, certify, certify_oracle,
                      detect, occluded_predict, recover)
from .attack import AttackConfig, apply_patch, evaluate_attack, optimize_patch
from .analysis import ClusterStats, mean_shift, sin_stats, stability_experiment
from .train import TrainConfig, train

__version__ = "0.1.0"
