"""The trainable coreference model behind a single turn/segment interface.

One forward code path serves decoding (values only) and training (the same
graph nodes feed the losses), so online inference and teacher-forced online
training cannot drift apart.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .data import MentionAddress, Utterance
from .encoder import (
    ENCODER_BLOCKS,
    Vocab,
    WindowInput,
    assemble_window,
    encode,
    init_encoder_params,
    select_window_start,
)
from .errors import ValidationError
from .online import (
    VARIANTS,
    CandidatePool,
    CarriedMention,
    DecodeConfig,
    build_candidate_pool,
)
from .scoring import (
    SCORING_BLOCKS,
    AntecedentRow,
    enumerate_spans,
    init_scoring_params,
    mention_scores,
    pairwise_scores,
    prune_top_spans,
    represent_spans,
    self_attend,
)

CHECKPOINT_KIND = "dialcoref-model"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    variant: str = "OR+SG+SA"
    d_emb: int = 16
    d: int = 16
    d_width: int = 4
    d_dist: int = 4
    window_cap: int = 384
    max_span_width: int = 6
    max_antecedents: int = 20
    top_span_ratio: float = 0.4
    max_speakers: int = 16
    use_speaker_tokens: bool = True
    dropout: float = 0.3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(
                f"variant must be one of {VARIANTS}, got {self.variant!r}"
            )

    @property
    def d_g(self) -> int:
        return 3 * self.d + self.d_width

    @property
    def max_positions(self) -> int:
        # a window holds at most window_cap utterances and an utterance block
        # at most window_cap tokens plus its speaker token and [SEP]
        return self.window_cap + 2

    @property
    def uses_candidate_attention(self) -> bool:
        return self.variant == "OR+SG+SA"

    @property
    def uses_speaker_grounding(self) -> bool:
        return self.variant in ("OR+SG", "OR+SG+SA")


@dataclass
class TurnScores:
    """Everything one decode/training step needs for the newest utterance.

    Graph nodes (``*_node`` fields) stay valid only while the tape that
    produced them is alive; decoding reads plain arrays instead.
    """

    window: WindowInput
    pool: CandidatePool
    candidates: list[MentionAddress]
    candidate_scores: np.ndarray
    rows: list[AntecedentRow]
    fresh_reps: dict[MentionAddress, tuple[np.ndarray, float]]
    all_spans: list[MentionAddress]
    span_scores_node: ad.Node | None = None
    pool_g_node: ad.Node | None = None


class CorefModel:
    def __init__(self, vocab: Vocab, config: ModelConfig,
                 params: dict[str, np.ndarray]):
        self.vocab = vocab
        self.config = config
        self.params: dict[str, ad.Node] = {
            name: ad.leaf(arr, name=name) for name, arr in sorted(params.items())
        }
        expected = set(ENCODER_BLOCKS) | set(SCORING_BLOCKS)
        if set(self.params) != expected:
            raise ValidationError(
                f"parameter blocks mismatch: {sorted(set(self.params) ^ expected)}"
            )

    # -- construction and persistence ----------------------------------

    @classmethod
    def fresh(cls, vocab: Vocab, config: ModelConfig, seed: int) -> "CorefModel":
        rng = np.random.default_rng(seed)
        params = init_encoder_params(
            len(vocab), config.d_emb, config.d, config.max_positions, rng
        )
        params.update(
            init_scoring_params(
                config.d, config.d_width, config.d_dist, config.max_span_width, rng
            )
        )
        return cls(vocab, config, params)

    @property
    def encoder_params(self) -> dict[str, ad.Node]:
        return {n: self.params[n] for n in ENCODER_BLOCKS}

    @property
    def task_params(self) -> dict[str, ad.Node]:
        return {n: self.params[n] for n in SCORING_BLOCKS}

    @property
    def decode_config(self) -> DecodeConfig:
        c = self.config
        return DecodeConfig(
            variant=c.variant,
            window_cap=c.window_cap,
            top_span_ratio=c.top_span_ratio,
            max_span_width=c.max_span_width,
            max_antecedents=c.max_antecedents,
            max_speakers=c.max_speakers,
        )

    def save(self, path: str) -> None:
        obj = {
            "kind": CHECKPOINT_KIND,
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "vocab": self.vocab.tokens,
            "params": ad.params_to_dict(self.params),
        }
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, sort_keys=True)

    @classmethod
    def load(cls, path: str, variant: str | None = None) -> "CorefModel":
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        if obj.get("kind") != CHECKPOINT_KIND:
            raise ValidationError(f"{path} is not a model checkpoint")
        if obj.get("format_version") != CHECKPOINT_VERSION:
            raise ValidationError(
                f"unsupported checkpoint version {obj.get('format_version')}"
            )
        config = ModelConfig(**obj["config"])
        if variant is not None:
            config.variant = variant
            config = ModelConfig(**asdict(config))
        vocab = Vocab(obj["vocab"], config.max_speakers)
        params = ad.params_from_dict(obj["params"])
        if params["word_emb"].shape != (len(vocab), config.d_emb):
            raise ValidationError(
                "checkpoint word embeddings do not match its vocabulary"
            )
        return cls(vocab, config, params)

    # -- forward computation --------------------------------------------

    def _dropout(self, node: ad.Node, train: bool, rng) -> ad.Node:
        rate = self.config.dropout
        if not train or rate <= 0.0:
            return node
        if rng is None:
            raise ValidationError("training with dropout needs an RNG")
        mask = (rng.random(node.value.shape) >= rate) / (1.0 - rate)
        return ad.elementwise_multiply(node, ad.constant(mask))

    def _pool_tensors(self, pool: CandidatePool, g: ad.Node, sm: ad.Node,
                      rep_index: dict[MentionAddress, int]
                      ) -> tuple[ad.Node, ad.Node]:
        """Pool representation/score matrices in pool order.

        In-window rows come from the freshly computed span matrix; frozen
        rows ride in as constants; one permutation puts them in pool order.
        """
        fresh_rows: list[int] = []
        frozen_reps: list[np.ndarray] = []
        frozen_scores: list[float] = []
        source: list[tuple[str, int]] = []
        for entry in pool.entries:
            if entry.carried and not entry.in_window:
                source.append(("frozen", len(frozen_reps)))
                frozen_reps.append(entry.frozen_rep)
                frozen_scores.append(entry.frozen_score)
            else:
                source.append(("fresh", len(fresh_rows)))
                fresh_rows.append(rep_index[entry.address])
        parts_g: list[ad.Node] = []
        parts_s: list[ad.Node] = []
        if fresh_rows:
            parts_g.append(ad.select_rows(g, fresh_rows))
            parts_s.append(ad.select_rows(sm, fresh_rows))
        if frozen_reps:
            parts_g.append(ad.constant(np.stack(frozen_reps)))
            parts_s.append(ad.constant(np.array(frozen_scores)[:, None]))
        stacked_g = ad.concat_rows(*parts_g)
        stacked_s = ad.concat_rows(*parts_s)
        n_fresh = len(fresh_rows)
        perm = [idx if kind == "fresh" else n_fresh + idx for kind, idx in source]
        return ad.select_rows(stacked_g, perm), ad.select_rows(stacked_s, perm)

    def score_turn(
        self,
        utterances: list[Utterance],
        turn: int,
        speaker_map: dict[str, int],
        carried: list[CarriedMention],
        train: bool = False,
        rng=None,
        candidates_override: list[MentionAddress] | None = None,
    ) -> TurnScores:
        """Window, candidate extraction, and antecedent scores for turn ``i``.

        ``candidates_override`` bypasses score-based pruning with a fixed
        candidate list; finite-difference gradient checks need it because
        pruning flips make the loss piecewise in the parameters.
        """
        cfg = self.config
        lengths = [len(u) for u in utterances[: turn + 1]]
        k = select_window_start(lengths, turn, cfg.window_cap)
        window = assemble_window(
            utterances, k, turn, speaker_map, self.vocab, cfg.use_speaker_tokens
        )
        with ad.ensure_tape():
            h = encode(window, self.params)
            spans = [
                (turn, s, e)
                for s, e in enumerate_spans(lengths[turn], cfg.max_span_width)
            ]
            carried = sorted(carried, key=lambda c: c.address)
            in_window_carried = [
                c.address for c in carried if window.covers(c.address[0])
            ]
            rep_addrs = spans + in_window_carried
            g = represent_spans(h, window, rep_addrs, self.params)
            g = self._dropout(g, train, rng)
            sm = mention_scores(g, self.params)
            sm_values = sm.value[:, 0]
            rep_index = {addr: i for i, addr in enumerate(rep_addrs)}

            if candidates_override is None:
                kept = prune_top_spans(
                    [(s, e) for _, s, e in spans],
                    sm_values[: len(spans)],
                    lengths[turn],
                    cfg.top_span_ratio,
                )
                candidates = [spans[i] for i in kept]
            else:
                candidates = list(candidates_override)
            speaker = utterances[turn].speaker
            pool = build_candidate_pool(
                carried, window, [(a, speaker) for a in candidates]
            )
            g_pool, sm_pool = self._pool_tensors(pool, g, sm, rep_index)
            g_ctx = (
                self_attend(g_pool, self.params)
                if cfg.uses_candidate_attention
                else g_pool
            )
            rows = pairwise_scores(
                pool.addresses, pool.carried_flags, g_ctx, sm_pool,
                self.params, cfg.max_antecedents,
            )
            fresh = {
                addr: (g.value[rep_index[addr]].copy(), float(sm_values[rep_index[addr]]))
                for addr in in_window_carried + candidates
            }
            return TurnScores(
                window=window,
                pool=pool,
                candidates=candidates,
                candidate_scores=np.array(
                    [sm_values[rep_index[a]] for a in candidates]
                ),
                rows=rows,
                fresh_reps=fresh,
                all_spans=spans,
                span_scores_node=ad.select_rows(sm, range(len(spans))),
                pool_g_node=g_pool,
            )

    def score_segment(
        self,
        utterances: list[Utterance],
        seg_start: int,
        seg_end: int,
        speaker_map: dict[str, int],
        train: bool = False,
        rng=None,
    ) -> TurnScores:
        """Whole-segment scoring: all utterances contribute candidates.

        Used for document-style training and non-online inference; the pool
        holds no carried mentions, so every candidate may link to any of its
        nearest predecessors anywhere in the segment.
        """
        cfg = self.config
        window = assemble_window(
            utterances, seg_start, seg_end, speaker_map, self.vocab,
            cfg.use_speaker_tokens,
        )
        with ad.ensure_tape():
            h = encode(window, self.params)
            spans = [
                (u, s, e)
                for u in range(seg_start, seg_end + 1)
                for s, e in enumerate_spans(len(utterances[u]), cfg.max_span_width)
            ]
            g = represent_spans(h, window, spans, self.params)
            g = self._dropout(g, train, rng)
            sm = mention_scores(g, self.params)
            sm_values = sm.value[:, 0]
            rep_index = {addr: i for i, addr in enumerate(spans)}

            candidates: list[MentionAddress] = []
            for u in range(seg_start, seg_end + 1):
                u_idx = [i for i, a in enumerate(spans) if a[0] == u]
                kept = prune_top_spans(
                    [(spans[i][1], spans[i][2]) for i in u_idx],
                    sm_values[u_idx],
                    len(utterances[u]),
                    cfg.top_span_ratio,
                )
                candidates.extend(spans[u_idx[i]] for i in kept)
            pool = build_candidate_pool(
                [], window, [(a, utterances[a[0]].speaker) for a in candidates]
            )
            g_pool, sm_pool = self._pool_tensors(pool, g, sm, rep_index)
            g_ctx = (
                self_attend(g_pool, self.params)
                if cfg.uses_candidate_attention
                else g_pool
            )
            rows = pairwise_scores(
                pool.addresses, pool.carried_flags, g_ctx, sm_pool,
                self.params, cfg.max_antecedents,
            )
            return TurnScores(
                window=window,
                pool=pool,
                candidates=candidates,
                candidate_scores=np.array(
                    [sm_values[rep_index[a]] for a in candidates]
                ),
                rows=rows,
                fresh_reps={},
                all_spans=spans,
                span_scores_node=ad.select_rows(sm, range(len(spans))),
                pool_g_node=g_pool,
            )
