"""Turn-by-turn decoding: candidate pooling, linking, append-only clusters.

Every emitted mention keeps its first cluster forever; later turns may only
append new mentions to existing clusters or open new ones, so re-running a
dialogue prefix reproduces the already-emitted results exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dialogue, MentionAddress, Utterance
from .encoder import WindowInput, build_speaker_map
from .errors import ValidationError, WindowOverflowError

VARIANTS = ("BL", "SR", "OR", "OR+SG", "OR+SG+SA")


@dataclass
class DecodeConfig:
    variant: str = "OR+SG+SA"
    window_cap: int = 384
    top_span_ratio: float = 0.4
    max_span_width: int = 6
    max_antecedents: int = 20
    max_speakers: int = 16
    singleton_threshold: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(
                f"variant must be one of {VARIANTS}, got {self.variant!r}"
            )

    @property
    def keeps_singletons(self) -> bool:
        # All singleton-recovery descendants preserve positively scored
        # candidates; only the baseline drops unlinked ones.
        return self.variant != "BL"

    @property
    def uses_speaker_grounding(self) -> bool:
        return self.variant in ("OR+SG", "OR+SG+SA")

    @property
    def uses_candidate_attention(self) -> bool:
        return self.variant == "OR+SG+SA"

    @property
    def trains_online(self) -> bool:
        return self.variant in ("OR", "OR+SG", "OR+SG+SA")


@dataclass(frozen=True)
class CarriedMention:
    """An emitted mention offered as a link target for later turns."""

    address: MentionAddress
    speaker: str
    cluster_id: int
    rep: np.ndarray | None = None  # last computed representation (frozen)
    score: float | None = None  # mention score frozen alongside the rep


@dataclass
class PoolEntry:
    address: MentionAddress
    speaker: str
    carried: bool
    in_window: bool
    cluster_id: int | None = None
    candidate_index: int | None = None
    frozen_rep: np.ndarray | None = None
    frozen_score: float | None = None


@dataclass
class CandidatePool:
    """Carried mentions then current-turn candidates, in document order."""

    entries: list[PoolEntry]

    @property
    def addresses(self) -> list[MentionAddress]:
        return [e.address for e in self.entries]

    @property
    def carried_flags(self) -> list[bool]:
        return [e.carried for e in self.entries]

    def __len__(self):
        return len(self.entries)


def build_candidate_pool(state_or_carried, window: WindowInput,
                         candidates: list[tuple[MentionAddress, str]]) -> CandidatePool:
    """Assemble carried + current candidates for one turn.

    Carried mentions inside the window get recomputed representations; older
    ones ride along with their frozen representation. ``candidates`` pairs a
    current-turn address with its speaker.
    """
    if isinstance(state_or_carried, OnlineState):
        carried = state_or_carried.carried_mentions()
    else:
        carried = list(state_or_carried)
    entries = []
    seen: set[MentionAddress] = set()
    for c in sorted(carried, key=lambda m: m.address):
        if c.address in seen:
            raise ValidationError(f"duplicate carried mention {c.address}")
        seen.add(c.address)
        in_window = window.covers(c.address[0])
        if not in_window and c.rep is None:
            raise ValidationError(
                f"carried mention {c.address} is outside the window and has "
                "no frozen representation"
            )
        entries.append(
            PoolEntry(
                address=c.address,
                speaker=c.speaker,
                carried=True,
                in_window=in_window,
                cluster_id=c.cluster_id,
                frozen_rep=None if in_window else c.rep,
                frozen_score=None if in_window else c.score,
            )
        )
    for idx, (addr, speaker) in enumerate(candidates):
        if addr in seen:
            raise ValidationError(f"current candidate {addr} already emitted")
        seen.add(addr)
        entries.append(
            PoolEntry(addr, speaker, carried=False, in_window=True,
                      candidate_index=idx)
        )
    return CandidatePool(entries)


@dataclass
class MentionDecision:
    address: MentionAddress
    antecedent: MentionAddress | None
    cluster_id: int

    def to_dict(self) -> dict:
        return {
            "span": list(self.address),
            "cluster": self.cluster_id,
            "antecedent": list(self.antecedent) if self.antecedent else None,
        }


@dataclass
class TurnResult:
    turn: int
    mentions: list[MentionDecision]

    def to_dict(self) -> dict:
        return {"turn": self.turn, "mentions": [m.to_dict() for m in self.mentions]}


@dataclass
class OnlineState:
    """Append-only cluster store and emitted-mention record for one dialogue."""

    max_speakers: int = 16
    utterances: list[Utterance] = field(default_factory=list)
    clusters: list[list[MentionAddress]] = field(default_factory=list)
    emitted: dict[MentionAddress, int] = field(default_factory=dict)
    speaker_map: dict[str, int] = field(default_factory=dict)
    rep_store: dict[MentionAddress, tuple[np.ndarray, float]] = field(
        default_factory=dict
    )

    @property
    def turn(self) -> int:
        return len(self.utterances) - 1

    def add_utterance(self, utterance: Utterance) -> int:
        utterance.validate()
        self.utterances.append(utterance)
        if utterance.speaker not in self.speaker_map:
            self.speaker_map = build_speaker_map(self.utterances, self.max_speakers)
        return self.turn

    def speaker_of(self, addr: MentionAddress) -> str:
        return self.utterances[addr[0]].speaker

    def carried_mentions(self) -> list[CarriedMention]:
        out = []
        for addr in sorted(self.emitted):
            rep, score = self.rep_store[addr]
            out.append(
                CarriedMention(addr, self.speaker_of(addr), self.emitted[addr],
                               rep, score)
            )
        return out

    def apply(self, decisions: list[MentionDecision],
              fresh_reps: dict[MentionAddress, tuple[np.ndarray, float]]) -> None:
        """Record a turn's decisions; never touches prior assignments."""
        for d in decisions:
            if d.address in self.emitted:
                raise ValidationError(f"mention {d.address} was already emitted")
            if d.cluster_id == len(self.clusters):
                self.clusters.append([])
            self.clusters[d.cluster_id].append(d.address)
            self.emitted[d.address] = d.cluster_id
        for addr, (rep, score) in fresh_reps.items():
            if addr in self.emitted:
                self.rep_store[addr] = (np.array(rep, copy=True), float(score))


def link_candidates(pool: CandidatePool, rows, candidate_scores: np.ndarray,
                    keeps_singletons: bool, next_cluster_id: int,
                    singleton_threshold: float = 0.0) -> list[MentionDecision]:
    """Apply argmax linking over antecedent score rows.

    The dummy sits at column 0 with score exactly 0 and wins ties; among real
    antecedents the nearest one wins because rows are ordered nearest-first.
    A candidate joins its antecedent's cluster; unlinked candidates either
    open singleton clusters (when their mention score clears the threshold
    and ``keeps_singletons``) or are kept only if another candidate chose
    them.
    """
    link_of: dict[int, int | None] = {}
    referenced: set[int] = set()
    for row in rows:
        best = int(np.argmax(row.values))
        if best == 0:
            link_of[row.pool_index] = None
        else:
            target = row.antecedents[best - 1]
            link_of[row.pool_index] = target
            referenced.add(target)

    kept: set[int] = set()
    for row in rows:
        p = row.pool_index
        entry = pool.entries[p]
        score = candidate_scores[entry.candidate_index]
        if link_of[p] is not None or p in referenced:
            kept.add(p)
        elif keeps_singletons and score > singleton_threshold:
            kept.add(p)

    decisions: list[MentionDecision] = []
    cluster_of: dict[int, int] = {}
    for row in rows:
        p = row.pool_index
        if p not in kept:
            continue
        entry = pool.entries[p]
        target = link_of[p]
        if target is None:
            cluster = next_cluster_id
            next_cluster_id += 1
            antecedent = None
        else:
            t_entry = pool.entries[target]
            if t_entry.carried:
                cluster = t_entry.cluster_id
            else:
                cluster = cluster_of[target]
            antecedent = t_entry.address
        cluster_of[p] = cluster
        decisions.append(MentionDecision(entry.address, antecedent, cluster))
    return decisions


def decode_turn(state: OnlineState, utterance: Utterance, model,
                config: DecodeConfig) -> TurnResult:
    """Process one new utterance and append its decisions to the state."""
    turn = state.add_utterance(utterance)
    scores = model.score_turn(
        state.utterances, turn, state.speaker_map, state.carried_mentions()
    )
    decisions = link_candidates(
        scores.pool, scores.rows, scores.candidate_scores,
        config.keeps_singletons, next_cluster_id=len(state.clusters),
        singleton_threshold=config.singleton_threshold,
    )
    state.apply(decisions, scores.fresh_reps)
    return TurnResult(turn, decisions)


def finalize_dialogue(state: OnlineState) -> tuple[list[list[MentionAddress]],
                                                   list[MentionAddress]]:
    """Clusters of size >= 2 for scoring; leftover singletons reported apart."""
    scored = [list(c) for c in state.clusters if len(c) >= 2]
    singletons = [c[0] for c in state.clusters if len(c) == 1]
    return scored, singletons


def decode_dialogue(dialogue: Dialogue, model, config: DecodeConfig
                    ) -> tuple[OnlineState, list[TurnResult]]:
    state = OnlineState(max_speakers=config.max_speakers)
    results = [decode_turn(state, utt, model, config) for utt in dialogue.utterances]
    return state, results


# ---------------------------------------------------------------------------
# Non-online (whole-document) inference, for the online/offline contrast
# ---------------------------------------------------------------------------


def pack_segments(lengths: list[int], cap: int) -> list[tuple[int, int]]:
    """Greedy left-to-right packing of utterances into <=cap token segments."""
    segments = []
    start = 0
    total = 0
    for u, n in enumerate(lengths):
        if n > cap:
            raise WindowOverflowError(
                f"utterance {u} has {n} tokens, over the budget {cap}"
            )
        if total + n > cap and total > 0:
            segments.append((start, u - 1))
            start, total = u, 0
        total += n
    segments.append((start, len(lengths) - 1))
    return segments


def decode_document(dialogue: Dialogue, model, config: DecodeConfig
                    ) -> tuple[list[list[MentionAddress]], list[MentionAddress]]:
    """Decode whole segments at once instead of turn by turn."""
    speaker_map = build_speaker_map(dialogue.utterances, config.max_speakers)
    lengths = [len(u) for u in dialogue.utterances]
    clusters: list[list[MentionAddress]] = []
    for seg_start, seg_end in pack_segments(lengths, config.window_cap):
        scores = model.score_segment(
            dialogue.utterances, seg_start, seg_end, speaker_map
        )
        decisions = link_candidates(
            scores.pool, scores.rows, scores.candidate_scores,
            config.keeps_singletons, next_cluster_id=len(clusters),
            singleton_threshold=config.singleton_threshold,
        )
        for d in decisions:
            if d.cluster_id == len(clusters):
                clusters.append([])
            clusters[d.cluster_id].append(d.address)
    scored = [c for c in clusters if len(c) >= 2]
    singletons = [c[0] for c in clusters if len(c) == 1]
    return scored, singletons
