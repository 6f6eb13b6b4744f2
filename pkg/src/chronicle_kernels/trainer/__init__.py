"""Toy decoder training: model, reverse pass, optimizers loop and checks."""
from .model import (
    Batch,
    ModelConfig,
    ToyModel,
    batch_from_packing,
    gradient_check,
    gradient_check_failures,
    init_params,
    make_batch,
)
from .train import (
    DEFAULT_LR,
    OPTIMIZERS,
    Optimizer,
    VerificationError,
    VerificationReport,
    copy_task_batches,
    copy_task_sequences,
    steps_to_threshold,
    train,
    verify,
    warmup_scale,
)

__all__ = [
    "Batch", "ModelConfig", "ToyModel", "batch_from_packing", "gradient_check",
    "gradient_check_failures", "init_params", "make_batch", "DEFAULT_LR", "OPTIMIZERS",
    "Optimizer", "VerificationError", "VerificationReport", "copy_task_batches",
    "copy_task_sequences", "steps_to_threshold", "train", "verify", "warmup_scale",
]
