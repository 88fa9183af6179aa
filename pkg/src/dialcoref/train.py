"""Losses, negative sampling, and the document/online training procedures.

Document mode (baseline and singleton-recovery variants) trains on whole
dialogues split into token-budget segments. Online mode trains turn by turn
with teacher forcing: the carried mention set is the gold mentions of the
window's earlier utterances, and losses cover only current-turn candidates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Dialogue, MentionAddress
from .encoder import ENCODER_BLOCKS, build_speaker_map, select_window_start
from .errors import NumericError, ValidationError
from .model import CorefModel, TurnScores
from .online import CandidatePool, CarriedMention, pack_segments
from .scoring import AntecedentRow, speaker_scores


@dataclass
class LossWeights:
    coref: float = 1.0
    mention: float = 0.1
    speaker: float = 0.1

    def __post_init__(self):
        if min(self.coref, self.mention, self.speaker) < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.coref == self.mention == self.speaker == 0:
            raise ValidationError("at least one loss weight must be positive")

    def for_variant(self, variant: str) -> "LossWeights":
        """The baseline drops the mention term; only SG variants keep speaker."""
        return LossWeights(
            self.coref,
            0.0 if variant == "BL" else self.mention,
            self.speaker if variant in ("OR+SG", "OR+SG+SA") else 0.0,
        )


@dataclass
class TrainConfig:
    epochs: int = 10
    lr_task: float = 1e-2
    lr_encoder: float = 1e-3
    grad_accumulation: int = 16
    seed: int = 0
    weights: LossWeights = None
    negative_sampling: bool = True  # off reproduces the SR- ablation

    def __post_init__(self):
        if self.weights is None:
            self.weights = LossWeights()
        # zero is allowed so a zero-step run can serve as a no-op baseline
        if self.lr_task < 0 or self.lr_encoder < 0:
            raise ValidationError("learning rates must be non-negative")
        if self.grad_accumulation < 1:
            raise ValidationError("grad_accumulation must be >= 1")


@dataclass
class MentionSample:
    positives: ad.Node | None
    negatives_all: ad.Node | None
    negatives_sampled: ad.Node | None


@dataclass
class SpeakerSample:
    positives: ad.Node | None
    negatives: ad.Node | None


def sample_negatives(positive_count: int, pool: list, rng) -> list:
    """Uniform subsample without replacement, size min(count, len(pool))."""
    take = min(positive_count, len(pool))
    if take == 0:
        return []
    picked = rng.choice(len(pool), size=take, replace=False)
    return [pool[i] for i in sorted(picked)]


def _bce(positives: ad.Node | None, negatives: ad.Node | None) -> ad.Node:
    """Mean binary cross-entropy on logits: positives -> 1, negatives -> 0."""
    parts = []
    if positives is not None:
        parts.append(ad.log(ad.sigmoid(positives)))
    if negatives is not None:
        parts.append(ad.log(ad.sigmoid(ad.negate(negatives))))
    if not parts:
        return ad.constant(np.zeros((1, 1)))
    return ad.negate(ad.mean(ad.concat_rows(*parts)))


def mention_loss(sample: MentionSample) -> tuple[ad.Node, bool]:
    """BCE over gold-mention scores vs sampled negative span scores."""
    degenerate = sample.positives is None and sample.negatives_sampled is None
    return _bce(sample.positives, sample.negatives_sampled), degenerate


def speaker_loss(sample: SpeakerSample) -> tuple[ad.Node, bool]:
    degenerate = sample.positives is None
    return _bce(sample.positives, sample.negatives), degenerate


def coref_loss(rows: list[AntecedentRow],
               gold_sets: list[set[int]]) -> ad.Node:
    """Marginal log-likelihood of the gold antecedents under row softmaxes.

    ``gold_sets[i]`` holds pool indices of row i's gold antecedents; an empty
    set means the dummy is correct. Contributions sum over candidates.
    """
    if len(rows) != len(gold_sets):
        raise ValidationError("one gold antecedent set per score row required")
    total = None
    for row, gold in zip(rows, gold_sets):
        indicator = np.zeros((1 + len(row.antecedents), 1))
        if gold:
            for j, ant in enumerate(row.antecedents):
                if ant in gold:
                    indicator[j + 1, 0] = 1.0
            if indicator.sum() == 0:  # gold antecedents all out of reach
                indicator[0, 0] = 1.0
        else:
            indicator[0, 0] = 1.0
        prob = ad.softmax_rows(row.scores)
        mass = ad.matmul(prob, ad.constant(indicator))
        term = ad.negate(ad.log(mass))
        total = term if total is None else ad.add(total, term)
    return total if total is not None else ad.constant(np.zeros((1, 1)))


def total_loss(l_coref: ad.Node, l_mention: ad.Node, l_speaker: ad.Node,
               weights: LossWeights) -> ad.Node:
    return ad.add(
        ad.add(
            ad.scalar_scale(l_coref, weights.coref),
            ad.scalar_scale(l_mention, weights.mention),
        ),
        ad.scalar_scale(l_speaker, weights.speaker),
    )


# ---------------------------------------------------------------------------
# Gold-label plumbing
# ---------------------------------------------------------------------------


def gold_cluster_map(dialogue: Dialogue) -> dict[MentionAddress, int]:
    return {
        addr: idx
        for idx, cluster in enumerate(dialogue.gold_clusters)
        for addr in cluster
    }


def gold_antecedent_sets(pool: CandidatePool, rows: list[AntecedentRow],
                         cluster_of: dict[MentionAddress, int]) -> list[set[int]]:
    golds = []
    for row in rows:
        x = pool.entries[row.pool_index].address
        x_cluster = cluster_of.get(x)
        if x_cluster is None:
            golds.append(set())
            continue
        golds.append(
            {
                ant
                for ant in row.antecedents
                if cluster_of.get(pool.entries[ant].address) == x_cluster
            }
        )
    return golds


def build_mention_sample(scores: TurnScores, gold_addrs: set[MentionAddress],
                         negative_sampling: bool, rng) -> MentionSample:
    """Positives: gold mentions in scope. Negatives: pruned non-gold spans."""
    span_index = {addr: i for i, addr in enumerate(scores.all_spans)}
    pos_idx = [i for i, addr in enumerate(scores.all_spans) if addr in gold_addrs]
    neg_idx = [span_index[a] for a in scores.candidates if a not in gold_addrs]
    positives = (
        ad.select_rows(scores.span_scores_node, pos_idx) if pos_idx else None
    )
    negatives_all = (
        ad.select_rows(scores.span_scores_node, neg_idx) if neg_idx else None
    )
    if negative_sampling:
        chosen = sample_negatives(len(pos_idx), neg_idx, rng)
    else:
        chosen = neg_idx
    sampled = (
        ad.select_rows(scores.span_scores_node, chosen) if chosen else None
    )
    return MentionSample(positives, negatives_all, sampled)


def build_speaker_sample(scores: TurnScores, model: CorefModel,
                         rng) -> SpeakerSample:
    """Candidate pairs from the pool, labelled by utterance speaker."""
    entries = scores.pool.entries
    pos_pairs, neg_pairs = [], []
    for i in range(len(entries)):
        for j in range(i + 1, len(entries)):
            if entries[i].speaker == entries[j].speaker:
                pos_pairs.append((i, j))
            else:
                neg_pairs.append((i, j))
    if pos_pairs:
        neg_pairs = sample_negatives(len(pos_pairs), neg_pairs, rng)
    pos = (
        speaker_scores(scores.pool_g_node, pos_pairs, model.params)
        if pos_pairs
        else None
    )
    neg = (
        speaker_scores(scores.pool_g_node, neg_pairs, model.params)
        if neg_pairs
        else None
    )
    return SpeakerSample(pos, neg)


# ---------------------------------------------------------------------------
# Optimization loop
# ---------------------------------------------------------------------------


class _Accumulator:
    """Plain gradient descent over two learning-rate groups, with deferred
    updates: gradients from several steps average into one parameter move."""

    def __init__(self, model: CorefModel, config: TrainConfig, log_fn=None):
        self.model = model
        self.config = config
        self.log_fn = log_fn
        self.pending = 0
        self.update_count = 0
        self.loss_sums = np.zeros(4)
        self.epoch = 0

    def step(self, tape: ad.Tape, loss: ad.Node, components: tuple):
        value = float(loss.value[0, 0])
        if not np.isfinite(value):
            raise NumericError(
                f"non-finite loss at epoch {self.epoch} "
                f"update {self.update_count}: {components}"
            )
        ad.backward(tape, loss)
        self.pending += 1
        self.loss_sums += np.array([*components, value])
        if self.pending >= self.config.grad_accumulation:
            self.flush()

    def flush(self):
        if self.pending == 0:
            return
        scale = 1.0 / self.pending
        for name, node in self.model.params.items():
            if node.grad is None:
                continue
            lr = (
                self.config.lr_encoder
                if name in ENCODER_BLOCKS
                else self.config.lr_task
            )
            node.value -= lr * scale * node.grad
        ad.zero_grads(self.model.params.values())
        means = self.loss_sums / self.pending
        self.update_count += 1
        if self.log_fn is not None:
            self.log_fn(
                {
                    "epoch": self.epoch,
                    "step": self.update_count,
                    "L_c": round(float(means[0]), 6),
                    "L_m": round(float(means[1]), 6),
                    "L_s": round(float(means[2]), 6),
                    "L": round(float(means[3]), 6),
                }
            )
        self.pending = 0
        self.loss_sums = np.zeros(4)


def _loss_components(model, scores, dialogue_clusters, gold_scope_addrs,
                     config, rng, speaker_rng):
    weights = config.weights.for_variant(model.config.variant)
    l_c = coref_loss(
        scores.rows, gold_antecedent_sets(scores.pool, scores.rows,
                                          dialogue_clusters)
    )
    if weights.mention > 0:
        l_m, _ = mention_loss(
            build_mention_sample(scores, gold_scope_addrs,
                                 config.negative_sampling, rng)
        )
    else:
        l_m = ad.constant(np.zeros((1, 1)))
    if weights.speaker > 0:
        # dedicated stream: enabling the speaker task must not shift the
        # draws that dropout and mention sampling consume
        l_s, _ = speaker_loss(build_speaker_sample(scores, model, speaker_rng))
    else:
        l_s = ad.constant(np.zeros((1, 1)))
    loss = total_loss(l_c, l_m, l_s, weights)
    comps = (float(l_c.value[0, 0]), float(l_m.value[0, 0]),
             float(l_s.value[0, 0]))
    return loss, comps


def train_document(dialogues: list[Dialogue], model: CorefModel,
                   config: TrainConfig, log_fn=None) -> CorefModel:
    """Non-online training over whole dialogues split into segments."""
    rng = np.random.default_rng(config.seed)
    speaker_rng = np.random.default_rng((config.seed, 1))
    acc = _Accumulator(model, config, log_fn)
    for epoch in range(config.epochs):
        acc.epoch = epoch
        for d_idx in rng.permutation(len(dialogues)):
            dialogue = dialogues[int(d_idx)]
            cluster_of = gold_cluster_map(dialogue)
            speaker_map = build_speaker_map(
                dialogue.utterances, model.config.max_speakers
            )
            lengths = [len(u) for u in dialogue.utterances]
            for seg_start, seg_end in pack_segments(lengths, model.config.window_cap):
                gold_scope = {
                    a
                    for a, _ in cluster_of.items()
                    if seg_start <= a[0] <= seg_end
                    and a[2] - a[1] + 1 <= model.config.max_span_width
                }
                with ad.Tape() as tape:
                    scores = model.score_segment(
                        dialogue.utterances, seg_start, seg_end, speaker_map,
                        train=True, rng=rng,
                    )
                    loss, comps = _loss_components(
                        model, scores, cluster_of, gold_scope, config, rng,
                        speaker_rng,
                    )
                acc.step(tape, loss, comps)
        acc.flush()
    return model


def teacher_carried(dialogue: Dialogue, cluster_of, turn: int,
                    window_start: int) -> list[CarriedMention]:
    """Gold mentions of utterances ``window_start..turn-1`` as the carried set."""
    out = []
    for addr, cid in sorted(cluster_of.items()):
        if window_start <= addr[0] < turn:
            out.append(
                CarriedMention(addr, dialogue.utterances[addr[0]].speaker, cid)
            )
    return out


def train_online(dialogues: list[Dialogue], model: CorefModel,
                 config: TrainConfig, log_fn=None) -> CorefModel:
    """Teacher-forced turn-by-turn training for the online variants."""
    rng = np.random.default_rng(config.seed)
    speaker_rng = np.random.default_rng((config.seed, 1))
    acc = _Accumulator(model, config, log_fn)
    cap = model.config.window_cap
    for epoch in range(config.epochs):
        acc.epoch = epoch
        for d_idx in rng.permutation(len(dialogues)):
            dialogue = dialogues[int(d_idx)]
            cluster_of = gold_cluster_map(dialogue)
            speaker_map = build_speaker_map(
                dialogue.utterances, model.config.max_speakers
            )
            lengths = [len(u) for u in dialogue.utterances]
            for turn in range(len(dialogue.utterances)):
                k = select_window_start(lengths[: turn + 1], turn, cap)
                carried = teacher_carried(dialogue, cluster_of, turn, k)
                gold_scope = {
                    a
                    for a in cluster_of
                    if a[0] == turn
                    and a[2] - a[1] + 1 <= model.config.max_span_width
                }
                with ad.Tape() as tape:
                    scores = model.score_turn(
                        dialogue.utterances[: turn + 1], turn, speaker_map,
                        carried, train=True, rng=rng,
                    )
                    loss, comps = _loss_components(
                        model, scores, cluster_of, gold_scope, config, rng,
                        speaker_rng,
                    )
                acc.step(tape, loss, comps)
        acc.flush()
    return model
