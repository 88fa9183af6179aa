"""Windowed input assembly and the small trainable token encoder.

The input window for turn ``i`` covers utterances ``k..i`` where ``k`` is the
smallest start such that the raw utterance lengths sum to at most the token
budget. Each utterance is preceded by its speaker token (assigned by order of
first appearance in the dialogue) and a single ``[SEP]`` marks the start of
the newest utterance. The budget counts utterance tokens only; speaker tokens
and ``[SEP]`` ride on top.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Utterance
from .errors import CapacityError, ShapeError, ValidationError, WindowOverflowError

UNK_TOKEN = "[UNK]"
SEP_TOKEN = "[SEP]"

SPECIAL_SOURCE = (-1, -1)  # source-map marker for non-utterance positions


def speaker_token(index: int) -> str:
    """Surface form of the position-based speaker token, 1-based."""
    return f"[S{index}]"


@dataclass
class Vocab:
    tokens: list[str]
    max_speakers: int

    def __post_init__(self):
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ValidationError("vocabulary contains duplicate tokens")

    @classmethod
    def build(cls, dialogues, max_speakers: int = 16) -> "Vocab":
        specials = [UNK_TOKEN, SEP_TOKEN]
        specials += [speaker_token(i) for i in range(1, max_speakers + 1)]
        words = sorted(
            {
                tok.text
                for d in dialogues
                for utt in d.utterances
                for tok in utt.tokens
            }
            - set(specials)
        )
        return cls(specials + words, max_speakers)

    @property
    def n_specials(self) -> int:
        return 2 + self.max_speakers

    @property
    def unk_id(self) -> int:
        return 0

    @property
    def sep_id(self) -> int:
        return 1

    def speaker_id(self, index: int) -> int:
        if not 1 <= index <= self.max_speakers:
            raise CapacityError(
                f"speaker token {index} exceeds capacity {self.max_speakers}"
            )
        return 1 + index

    def id_of(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def __len__(self) -> int:
        return len(self.tokens)

    def save(self, fh) -> None:
        for t in self.tokens:
            fh.write(t + "\n")

    @classmethod
    def load(cls, fh) -> "Vocab":
        tokens = [line.rstrip("\n") for line in fh if line.strip()]
        if tokens[:2] != [UNK_TOKEN, SEP_TOKEN]:
            raise ValidationError("vocabulary file must start with the specials")
        n_speakers = 0
        while 2 + n_speakers < len(tokens) and tokens[2 + n_speakers] == speaker_token(
            n_speakers + 1
        ):
            n_speakers += 1
        return cls(tokens, n_speakers)


@dataclass
class WindowInput:
    ids: list[int]
    # per position: (utterance index, token index) or SPECIAL_SOURCE
    source_map: list[tuple[int, int]]
    start: int  # k, first utterance in the window
    turn: int  # i, the current utterance
    # positional layout: utterance block relative to the window start, and
    # offset within that block (speaker tokens / [SEP] ride at the front)
    block_rows: list[int] = None
    offset_rows: list[int] = None

    def __len__(self) -> int:
        return len(self.ids)

    def position_of(self, utterance: int, token: int) -> int:
        return self._positions[(utterance, token)]

    def covers(self, utterance: int) -> bool:
        return self.start <= utterance <= self.turn

    def __post_init__(self):
        self._positions = {
            src: pos for pos, src in enumerate(self.source_map)
            if src != SPECIAL_SOURCE
        }


def select_window_start(lengths: list[int], turn: int, cap: int) -> int:
    """Smallest ``k`` with ``sum(lengths[k..turn]) <= cap``; indices 0-based."""
    if lengths[turn] > cap:
        raise WindowOverflowError(
            f"utterance {turn} has {lengths[turn]} tokens, over the budget {cap}"
        )
    total = 0
    k = turn
    while k >= 0 and total + lengths[k] <= cap:
        total += lengths[k]
        k -= 1
    return k + 1


def build_speaker_map(utterances, max_speakers: int) -> dict[str, int]:
    """Speaker label -> 1-based token id index, by order of first appearance."""
    mapping: dict[str, int] = {}
    for utt in utterances:
        if utt.speaker not in mapping:
            mapping[utt.speaker] = len(mapping) + 1
            if mapping[utt.speaker] > max_speakers:
                raise CapacityError(
                    f"dialogue has more than {max_speakers} distinct speakers"
                )
    return mapping


def assemble_window(
    utterances: list[Utterance],
    start: int,
    turn: int,
    speaker_map: dict[str, int],
    vocab: Vocab,
    use_speaker_tokens: bool = True,
) -> WindowInput:
    """Lay out ``S_k u_k .. [SEP] S_i u_i`` and the position source map."""
    ids: list[int] = []
    source: list[tuple[int, int]] = []
    blocks: list[int] = []
    offsets: list[int] = []
    for u in range(start, turn + 1):
        offset = 0
        if u == turn:
            ids.append(vocab.sep_id)
            source.append(SPECIAL_SOURCE)
            blocks.append(u - start)
            offsets.append(offset)
            offset += 1
        if use_speaker_tokens:
            ids.append(vocab.speaker_id(speaker_map[utterances[u].speaker]))
            source.append(SPECIAL_SOURCE)
            blocks.append(u - start)
            offsets.append(offset)
            offset += 1
        for tok in utterances[u].tokens:
            ids.append(vocab.id_of(tok.text))
            source.append((u, tok.index))
            blocks.append(u - start)
            offsets.append(offset)
            offset += 1
    return WindowInput(ids, source, start, turn, blocks, offsets)


# ---------------------------------------------------------------------------
# Encoder parameters and forward pass
# ---------------------------------------------------------------------------

ENCODER_BLOCKS = ("word_emb", "pos_utt_emb", "pos_tok_emb", "enc_wq",
                  "enc_wk", "enc_wv", "enc_ff_w", "enc_ff_b")


def init_encoder_params(vocab_size: int, d_emb: int, d_out: int,
                        max_positions: int, rng) -> dict[str, np.ndarray]:
    def gauss(rows, cols, scale):
        return rng.normal(0.0, scale, size=(rows, cols))

    return {
        "word_emb": gauss(vocab_size, d_emb, 0.5),
        # factored positions: a token and its utterance's speaker token share
        # one utterance-row embedding, which makes speaker binding a plain
        # content match for the attention block
        "pos_utt_emb": gauss(max_positions, d_emb, 0.3),
        "pos_tok_emb": gauss(max_positions, d_emb, 0.1),
        "enc_wq": gauss(d_emb, d_emb, 1.0 / np.sqrt(d_emb)),
        "enc_wk": gauss(d_emb, d_emb, 1.0 / np.sqrt(d_emb)),
        "enc_wv": gauss(d_emb, d_emb, 1.0 / np.sqrt(d_emb)),
        "enc_ff_w": gauss(d_emb, d_out, 1.0 / np.sqrt(d_emb)),
        "enc_ff_b": np.zeros((1, d_out)),
    }


def encode(window: WindowInput, params: dict[str, ad.Node]) -> ad.Node:
    """Contextual token embeddings, one row per window position.

    word + factored position embeddings (utterance block + within-block
    offset) -> one scaled dot-product self-attention block with a residual
    connection -> tanh feed-forward to the output width.
    """
    n = len(window)
    table = params["pos_tok_emb"].value.shape[0]
    if max(window.offset_rows, default=0) >= table or (
        max(window.block_rows, default=0) >= params["pos_utt_emb"].value.shape[0]
    ):
        raise ShapeError(f"window layout exceeds position tables ({table} rows)")
    x = ad.add(
        ad.add(
            ad.select_rows(params["word_emb"], window.ids),
            ad.select_rows(params["pos_utt_emb"], window.block_rows),
        ),
        ad.select_rows(params["pos_tok_emb"], window.offset_rows),
    )
    d_emb = x.value.shape[1]
    q = ad.matmul(x, params["enc_wq"])
    k = ad.matmul(x, params["enc_wk"])
    v = ad.matmul(x, params["enc_wv"])
    att = ad.softmax_rows(ad.scalar_scale(ad.matmul(q, ad.transpose(k)),
                                          1.0 / np.sqrt(d_emb)))
    h = ad.add(x, ad.matmul(att, v))
    return ad.tanh(ad.affine(h, params["enc_ff_w"], params["enc_ff_b"]))
