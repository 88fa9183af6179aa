"""Core dialogue data types and their validation.

A mention address is a ``(utterance, start, end)`` triple of 0-based indices
with ``start``/``end`` inclusive token positions inside a single utterance.
Cross-utterance spans are invalid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

from .errors import PluralLinkError, ValidationError

MentionAddress = tuple[int, int, int]


@dataclass(frozen=True)
class Token:
    text: str
    index: int

    def validate(self):
        if not self.text:
            raise ValidationError("token text must be non-empty")
        if any(ch.isspace() for ch in self.text):
            raise ValidationError(f"token text contains whitespace: {self.text!r}")
        if self.index < 0:
            raise ValidationError(f"token index must be >= 0, got {self.index}")


@dataclass(frozen=True)
class Utterance:
    speaker: str
    tokens: tuple[Token, ...]

    @classmethod
    def from_strings(cls, speaker: str, words: list[str]) -> "Utterance":
        return cls(speaker, tuple(Token(w, i) for i, w in enumerate(words)))

    @property
    def words(self) -> list[str]:
        return [t.text for t in self.tokens]

    def __len__(self) -> int:
        return len(self.tokens)

    def validate(self):
        if not self.speaker:
            raise ValidationError("utterance speaker must be non-empty")
        if not self.tokens:
            raise ValidationError("utterance must contain at least one token")
        for i, tok in enumerate(self.tokens):
            tok.validate()
            if tok.index != i:
                raise ValidationError(
                    f"token index {tok.index} does not match position {i}"
                )


@dataclass
class Dialogue:
    doc_id: str
    utterances: list[Utterance]
    gold_clusters: list[list[MentionAddress]] = field(default_factory=list)

    def validate(self, strict: bool = True) -> "Dialogue":
        """Check all invariants; returns self for chaining.

        With ``strict=False``, a mention address found in more than one
        cluster is dropped from the later cluster with a warning instead of
        raising :class:`PluralLinkError`.
        """
        for utt in self.utterances:
            utt.validate()
        seen: dict[MentionAddress, int] = {}
        cleaned: list[list[MentionAddress]] = []
        for ci, cluster in enumerate(self.gold_clusters):
            kept: list[MentionAddress] = []
            in_this: set[MentionAddress] = set()
            for addr in cluster:
                self._check_address(addr)
                if addr in in_this:
                    raise ValidationError(
                        f"doc {self.doc_id}: duplicate mention {addr} in one cluster"
                    )
                if addr in seen:
                    msg = (
                        f"doc {self.doc_id}: mention {addr} appears in clusters "
                        f"{seen[addr]} and {ci} (plural link)"
                    )
                    if strict:
                        raise PluralLinkError(msg)
                    warnings.warn(msg + "; dropping the later occurrence")
                    continue
                seen[addr] = ci
                in_this.add(addr)
                kept.append(addr)
            cleaned.append(kept)
        self.gold_clusters = [c for c in cleaned if c]
        return self

    def _check_address(self, addr: MentionAddress):
        u, s, e = addr
        if not 0 <= u < len(self.utterances):
            raise ValidationError(
                f"doc {self.doc_id}: utterance index out of range in mention {addr}"
            )
        n = len(self.utterances[u])
        if not (0 <= s <= e < n):
            raise ValidationError(
                f"doc {self.doc_id}: token span out of range in mention {addr} "
                f"(utterance has {n} tokens)"
            )

    def mention_text(self, addr: MentionAddress) -> str:
        u, s, e = addr
        return " ".join(t.text for t in self.utterances[u].tokens[s : e + 1])

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "utterances": [
                {"speaker": u.speaker, "tokens": u.words} for u in self.utterances
            ],
            "clusters": [[list(a) for a in c] for c in self.gold_clusters],
        }

    @classmethod
    def from_dict(cls, obj: dict, strict: bool = True) -> "Dialogue":
        try:
            doc_id = obj["doc_id"]
            raw_utts = obj["utterances"]
            raw_clusters = obj.get("clusters", [])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"missing dialogue field: {exc}") from exc
        if not isinstance(doc_id, str):
            raise ValidationError("doc_id must be a string")
        utterances = []
        for ru in raw_utts:
            try:
                speaker, tokens = ru["speaker"], ru["tokens"]
            except (KeyError, TypeError) as exc:
                raise ValidationError(
                    f"doc {doc_id}: malformed utterance object: {exc}"
                ) from exc
            if not isinstance(tokens, list) or not all(
                isinstance(t, str) for t in tokens
            ):
                raise ValidationError(f"doc {doc_id}: tokens must be a list of strings")
            utterances.append(Utterance.from_strings(speaker, tokens))
        clusters = []
        for rc in raw_clusters:
            cluster = []
            for ra in rc:
                if not (isinstance(ra, list) and len(ra) == 3):
                    raise ValidationError(
                        f"doc {doc_id}: mention address must be [u, s, e], got {ra!r}"
                    )
                cluster.append((int(ra[0]), int(ra[1]), int(ra[2])))
            clusters.append(cluster)
        return cls(doc_id, utterances, clusters).validate(strict=strict)


@dataclass
class GenSpec:
    """Parameters for the synthetic dialogue generator."""

    seed: int = 0
    num_dialogues: int = 10
    speakers_range: tuple[int, int] = (2, 3)
    utterances_range: tuple[int, int] = (4, 8)
    name_vocab_size: int = 40
    singleton_rate: float = 0.2
    first_person_rate: float = 0.1
    tokens_range: tuple[int, int] = (5, 12)
    mention_rate: float = 0.3
    # some corpora annotate singleton clusters, others leave them unlabeled
    annotate_singletons: bool = True

    def validate(self):
        for name in ("singleton_rate", "first_person_rate", "mention_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        for name in ("speakers_range", "utterances_range", "tokens_range"):
            lo, hi = getattr(self, name)
            if not (1 <= lo <= hi):
                raise ValidationError(f"{name} must be a non-empty range, got {(lo, hi)}")
        if self.num_dialogues < 1:
            raise ValidationError("num_dialogues must be >= 1")
        if self.name_vocab_size < 1:
            raise ValidationError("name_vocab_size must be >= 1")
        return self
