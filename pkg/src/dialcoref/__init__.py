"""Online coreference resolution for dialogue.

Consumes utterances one turn at a time, emits mentions and coreference links
for the newest turn immediately, and never revises past output. Ships five
trainable model variants, their losses, and the MUC/B-cubed/CEAF evaluation
stack.
"""

from .data import Dialogue, GenSpec, MentionAddress, Token, Utterance
from .ingest import (
    generate_synthetic,
    load_dialogues,
    parse_conll_skeleton,
    parse_dialogue_jsonl,
    write_dialogue_jsonl,
)
from .metrics import ScoreReport, avg_f1, b3, ceaf_phi4, mention_prf, muc
from .model import CorefModel, ModelConfig
from .online import (
    DecodeConfig,
    OnlineState,
    TurnResult,
    decode_dialogue,
    decode_turn,
    finalize_dialogue,
)
from .train import LossWeights, TrainConfig, train_document, train_online

__version__ = "0.1.0"

__all__ = [
    "CorefModel",
    "DecodeConfig",
    "Dialogue",
    "GenSpec",
    "LossWeights",
    "MentionAddress",
    "ModelConfig",
    "OnlineState",
    "ScoreReport",
    "Token",
    "TrainConfig",
    "TurnResult",
    "Utterance",
    "avg_f1",
    "b3",
    "ceaf_phi4",
    "decode_dialogue",
    "decode_turn",
    "finalize_dialogue",
    "generate_synthetic",
    "load_dialogues",
    "mention_prf",
    "muc",
    "parse_conll_skeleton",
    "parse_dialogue_jsonl",
    "train_document",
    "train_online",
    "write_dialogue_jsonl",
]
