"""Desk-scale speech recognizer: conformer encoder, transformer decoder,
block-output ensembles, hybrid CTC-attention training, two-pass decoding."""

from .config import RunConfig, build_run_config
from .decoding import (
    Hypothesis,
    attention_rescore,
    character_error_rate,
    corpus_cer,
    ctc_greedy,
    ctc_prefix_beam_search,
    decode_utterance,
    edit_distance,
)
from .gradcheck import grad_check_model
from .losses import UnalignableError, ctc_loss, hybrid_loss, label_smoothed_ce
from .model import (
    ASRModel,
    BaseWSBO,
    ModelConfig,
    SEWSBO,
    ensemble_parameter_delta,
    toy_config,
)
from .tensor import ShapeError, Tensor, no_grad
from .training import (
    TrainConfig,
    TrainResult,
    average_checkpoints,
    lr_schedule,
    train_loop,
)

__version__ = "0.1.0"

__all__ = [
    "ASRModel", "BaseWSBO", "Hypothesis", "ModelConfig", "RunConfig",
    "SEWSBO", "ShapeError", "Tensor", "TrainConfig", "TrainResult",
    "UnalignableError", "attention_rescore", "average_checkpoints",
    "build_run_config", "character_error_rate", "corpus_cer", "ctc_greedy",
    "ctc_loss", "ctc_prefix_beam_search", "decode_utterance", "edit_distance",
    "ensemble_parameter_delta", "grad_check_model", "hybrid_loss",
    "label_smoothed_ce", "lr_schedule", "no_grad", "toy_config", "train_loop",
]
