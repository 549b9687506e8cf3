"""Feedback-prop inference over compact CNNs.

Thin re-export of the compiled extension. See `feedback` for the main entry
point: it refines interior activations (or residuals) against known labels
and returns updated scores for the unknown ones.
"""

from ._fbprop import (
    Model,
    average_precision,
    class_weights,
    feedback,
    load_model,
    load_model_arch,
    mean_ap,
    mix_seed,
    multiclass_accuracy,
    read_tensor,
    synth_dataset,
    train,
    weighted_bce,
    write_tensor,
)

__version__ = "0.1.0"

__all__ = [
    "Model",
    "average_precision",
    "class_weights",
    "feedback",
    "load_model",
    "load_model_arch",
    "mean_ap",
    "mix_seed",
    "multiclass_accuracy",
    "read_tensor",
    "synth_dataset",
    "train",
    "weighted_bce",
    "write_tensor",
]
