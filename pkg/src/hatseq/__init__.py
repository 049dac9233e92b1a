"""Hierarchical attention transformer for sequence-to-sequence generation."""

__version__ = "0.1.0"

from .tensor import Tensor, DropoutRng, no_grad
from .text import (
    PAD_ID, BOS_ID, EOS_ID, UNK_ID,
    Vocabulary, EncodedExample, Batch,
    build_vocab, segment_sentences, encode_document, encode_conversation,
    chunk_document, collate,
)
from .model import (
    HatConfig, EncoderOutput,
    init_parameters, count_parameters, parameter_breakdown,
    encode, decode_step, encoder_only_forward,
    save_checkpoint, load_checkpoint, plain_twin,
)
from .training import (
    OptimizerConfig, TrainState,
    label_smoothed_ce, lr_at, adam_step, train, mlm_pretrain,
)
from .generation import GenConfig, BeamHypothesis, beam_search, greedy_decode, generate
from .heatmap import AttentionTrace, Heatmap, aggregate, export_heatmap
from .metrics import rouge_n, rouge_l, corpus_bleu, build_report, EvalReport

__all__ = [
    "__version__",
    "Tensor", "DropoutRng", "no_grad",
    "PAD_ID", "BOS_ID", "EOS_ID", "UNK_ID",
    "Vocabulary", "EncodedExample", "Batch",
    "build_vocab", "segment_sentences", "encode_document", "encode_conversation",
    "chunk_document", "collate",
    "HatConfig", "EncoderOutput",
    "init_parameters", "count_parameters", "parameter_breakdown",
    "encode", "decode_step", "encoder_only_forward",
    "save_checkpoint", "load_checkpoint", "plain_twin",
    "OptimizerConfig", "TrainState",
    "label_smoothed_ce", "lr_at", "adam_step", "train", "mlm_pretrain",
    "GenConfig", "BeamHypothesis", "beam_search", "greedy_decode", "generate",
    "AttentionTrace", "Heatmap", "aggregate", "export_heatmap",
    "rouge_n", "rouge_l", "corpus_bleu", "build_report", "EvalReport",
]
