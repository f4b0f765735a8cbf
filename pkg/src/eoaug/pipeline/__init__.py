"""Stage orchestration, generation, classifier training and evaluation."""

from .encoder import DualEncoder, EncoderSpec, TextVocab
from .evaluate import EvalReport, emit_report, format_accuracy, format_delta, topk_accuracy, zero_shot_eval
from .generate import generate_augmented_set
from .stages import OUTPUTS, STAGES, run_pipeline

__all__ = [
    "DualEncoder", "EncoderSpec", "TextVocab", "EvalReport", "emit_report", "format_accuracy", "format_delta",
    "topk_accuracy", "zero_shot_eval", "generate_augmented_set", "OUTPUTS", "STAGES", "run_pipeline",
]
