"""Dialogue readers, writer, and the synthetic dialogue generator.

Two input formats are supported:

* Dialogue JSONL, one object per line::

      {"doc_id": str,
       "utterances": [{"speaker": str, "tokens": [str, ...]}, ...],
       "clusters": [[[u, s, e], ...], ...]}

  with ``u`` a 0-based utterance index and ``s``/``e`` inclusive 0-based
  token indices.

* CoNLL-2012-style column files. Every ``#begin document`` block becomes one
  dialogue and every sentence one utterance. Only the document id, word,
  speaker, and final coreference columns are consumed.
"""

from __future__ import annotations

import io
import json
import re
import warnings
from itertools import product

import numpy as np

from .data import Dialogue, GenSpec, Utterance
from .errors import ParseError, ValidationError

# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------


def _iter_text_lines(stream):
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    elif isinstance(stream, str):
        stream = io.StringIO(stream)
    for raw in stream:
        if isinstance(raw, (bytes, bytearray)):
            raw = raw.decode("utf-8")
        yield raw


def parse_dialogue_jsonl(stream, strict: bool = True) -> list[Dialogue]:
    """Parse dialogue JSONL from a byte/text stream or a str/bytes blob."""
    dialogues = []
    for lineno, line in enumerate(_iter_text_lines(stream), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON: {exc.msg}", line=lineno) from exc
        dialogues.append(Dialogue.from_dict(obj, strict=strict))
    return dialogues


def dialogue_to_json(dialogue: Dialogue) -> str:
    return json.dumps(dialogue.to_dict(), ensure_ascii=False)


def write_dialogue_jsonl(dialogues, stream) -> None:
    for d in dialogues:
        stream.write(dialogue_to_json(d))
        stream.write("\n")


# ---------------------------------------------------------------------------
# CoNLL skeleton
# ---------------------------------------------------------------------------

_BEGIN_RE = re.compile(r"#begin document \(([^)]*)\)(?:;\s*part\s+(\d+))?")
_COREF_PART_RE = re.compile(r"^(\()?(\d+)(\))?$")

# CoNLL-2012 fixed columns: doc, part, word number, word, POS, parse, lemma,
# frameset, sense, speaker, NE, [args...], coref. 12 is the minimum width.
_MIN_COLUMNS = 12
_WORD_COL = 3
_SPEAKER_COL = 9


def parse_conll_skeleton(stream, strict: bool = True) -> list[Dialogue]:
    """Parse CoNLL-2012-style documents; each sentence becomes an utterance."""
    blocks = []  # (name, part, utterances, clusters)
    name = None
    part = None
    utterances: list[Utterance] = []
    clusters: dict[str, list] = {}
    open_spans: dict[str, list] = {}
    sent_words: list[str] = []
    sent_speakers: list[str] = []
    prev_speaker = None

    def close_sentence(lineno):
        nonlocal sent_words, sent_speakers, prev_speaker
        if not sent_words:
            return
        speaker = next((s for s in sent_speakers if s and s != "-"), None)
        if speaker is None:
            # Sentence without speaker metadata: carry the previous one forward.
            if prev_speaker is None:
                speaker = "unknown"
                warnings.warn(
                    f"line {lineno}: sentence has no speaker and none precedes it"
                )
            else:
                speaker = prev_speaker
                warnings.warn(f"line {lineno}: missing speaker, carried forward")
        prev_speaker = speaker
        utterances.append(Utterance.from_strings(speaker, sent_words))
        sent_words = []
        sent_speakers = []

    def close_document(lineno):
        nonlocal name, part, utterances, clusters, open_spans, prev_speaker
        close_sentence(lineno)
        if any(open_spans.values()):
            ids = sorted(k for k, v in open_spans.items() if v)
            raise ParseError(
                f"unbalanced coreference parentheses for cluster ids {ids}",
                line=lineno,
            )
        blocks.append((name, part, utterances, clusters))
        name = part = None
        utterances = []
        clusters = {}
        open_spans = {}
        prev_speaker = None

    lineno = 0
    for lineno, line in enumerate(_iter_text_lines(stream), start=1):
        line = line.rstrip("\n")
        if line.startswith("#begin document"):
            m = _BEGIN_RE.match(line)
            if not m:
                raise ParseError("malformed #begin document line", line=lineno)
            name, part = m.group(1), m.group(2)
            continue
        if line.startswith("#end document"):
            close_document(lineno)
            continue
        if line.startswith("#"):
            continue
        if not line.strip():
            close_sentence(lineno)
            continue
        if name is None:
            raise ParseError("token line outside #begin/#end document", line=lineno)
        cols = line.split()
        if len(cols) < _MIN_COLUMNS:
            raise ParseError(
                f"expected at least {_MIN_COLUMNS} columns (missing speaker "
                f"column?), got {len(cols)}",
                line=lineno,
            )
        word = cols[_WORD_COL]
        sent_words.append(word)
        sent_speakers.append(cols[_SPEAKER_COL])
        tok_idx = len(sent_words) - 1
        sent_idx = len(utterances)
        coref = cols[-1]
        if coref != "-":
            for piece in coref.split("|"):
                m = _COREF_PART_RE.match(piece)
                if not m:
                    raise ParseError(f"bad coreference field {coref!r}", line=lineno)
                opened, cid, closed = m.group(1), m.group(2), m.group(3)
                if not opened and not closed:
                    raise ParseError(f"bad coreference field {coref!r}", line=lineno)
                if opened:
                    open_spans.setdefault(cid, []).append((sent_idx, tok_idx))
                if closed:
                    stack = open_spans.get(cid)
                    if not stack:
                        raise ParseError(
                            f"closing an unopened mention for cluster {cid}",
                            line=lineno,
                        )
                    start_sent, start_tok = stack.pop()
                    if start_sent != sent_idx:
                        raise ParseError(
                            f"mention for cluster {cid} crosses a sentence boundary",
                            line=lineno,
                        )
                    addr = (sent_idx, start_tok, tok_idx)
                    mentions = clusters.setdefault(cid, [])
                    if addr in mentions:
                        warnings.warn(
                            f"line {lineno}: duplicate mention {addr} for cluster "
                            f"{cid}, ignored"
                        )
                    else:
                        mentions.append(addr)

    if name is not None:
        raise ParseError("missing #end document", line=lineno)

    # Suffix the part number only when one document name spans several parts.
    names = [b[0] for b in blocks]
    dialogues = []
    for block_name, block_part, utts, gold in blocks:
        doc_id = block_name
        if names.count(block_name) > 1 and block_part is not None:
            doc_id = f"{block_name}#part{int(block_part)}"
        clusters_list = [sorted(ms) for _, ms in sorted(gold.items())]
        dialogues.append(
            Dialogue(doc_id, utts, clusters_list).validate(strict=strict)
        )
    return dialogues


# ---------------------------------------------------------------------------
# Synthetic dialogues
# ---------------------------------------------------------------------------

FIRST_PERSON_FORMS = ("I", "me", "my")

_FILLERS = (
    "so well then yes no okay right really maybe later again saw met told "
    "asked liked called waved greeted thanked visited helped found left came "
    "the a and but um oh hm there here today soon"
).split()

_ONSETS = "b d f g k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()

_SPEAKER_LABELS = [chr(ord("A") + i) for i in range(26)]

def _name_for_index(i: int) -> str:
    """Deterministic infinite name enumeration: Ba, Be, .., Baba, Babe, .."""
    syllables = list(s + v for s, v in product(_ONSETS, _VOWELS))
    base = len(syllables)
    n_syll, span, offset = 1, base, 0
    while i >= offset + span:
        offset += span
        n_syll += 1
        span *= base
    j = i - offset
    parts = []
    for _ in range(n_syll):
        parts.append(syllables[j % base])
        j //= base
    return "".join(reversed(parts)).capitalize()


def generate_synthetic(spec: GenSpec) -> list[Dialogue]:
    """Generate dialogues with rule-derived gold coreference.

    Gold construction rules:

    * occurrences of the same entity-name string corefer dialogue-wide, and
      every recurring name is placed at least twice;
    * first-person pronoun tokens corefer with the other first-person
      pronouns of the same speaker;
    * a ``singleton_rate`` fraction of name mentions use a unique name and
      form a size-1 cluster (emitted in gold only when
      ``annotate_singletons`` is set).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    recurring_vocab = [_name_for_index(i) for i in range(spec.name_vocab_size)]
    unique_counter = spec.name_vocab_size  # unique names never collide

    dialogues = []
    for d_idx in range(spec.num_dialogues):
        n_speakers = int(rng.integers(spec.speakers_range[0], spec.speakers_range[1] + 1))
        if n_speakers > len(_SPEAKER_LABELS):
            raise ValidationError("generator supports at most 26 speakers")
        speakers = _SPEAKER_LABELS[:n_speakers]
        n_utts = int(rng.integers(spec.utterances_range[0], spec.utterances_range[1] + 1))

        # Lay out token slots first; names get assigned afterwards so that
        # every recurring entity is guaranteed at least two occurrences.
        grid: list[list[str | None]] = []
        utt_speakers: list[str] = []
        name_slots: list[tuple[int, int]] = []
        pronoun_slots: list[tuple[int, int]] = []
        for u in range(n_utts):
            if u < n_speakers:
                utt_speakers.append(speakers[u])  # everyone gets a turn
            else:
                utt_speakers.append(speakers[int(rng.integers(0, n_speakers))])
            n_tok = int(rng.integers(spec.tokens_range[0], spec.tokens_range[1] + 1))
            row: list[str | None] = []
            for t in range(n_tok):
                if rng.random() < spec.mention_rate:
                    if rng.random() < spec.first_person_rate:
                        pronoun_slots.append((u, t))
                        row.append(FIRST_PERSON_FORMS[int(rng.integers(0, 3))])
                    else:
                        name_slots.append((u, t))
                        row.append(None)
                else:
                    row.append(_FILLERS[int(rng.integers(0, len(_FILLERS)))])
            grid.append(row)

        singleton_slots = [s for s in name_slots if rng.random() < spec.singleton_rate]
        recurring_slots = [s for s in name_slots if s not in singleton_slots]
        if len(recurring_slots) < 2:
            # Cannot honor the two-occurrence guarantee; demote to filler.
            for u, t in recurring_slots:
                grid[u][t] = _FILLERS[int(rng.integers(0, len(_FILLERS)))]
            recurring_slots = []

        entity_of_slot: dict[tuple[int, int], str] = {}
        if recurring_slots:
            n_entities = int(rng.integers(1, len(recurring_slots) // 2 + 1))
            entities = [
                recurring_vocab[i]
                for i in rng.choice(len(recurring_vocab), size=n_entities, replace=False)
            ]
            order = [recurring_slots[i] for i in rng.permutation(len(recurring_slots))]
            for rank, slot in enumerate(order):
                if rank < 2 * n_entities:
                    entity_of_slot[slot] = entities[rank % n_entities]
                else:
                    entity_of_slot[slot] = entities[int(rng.integers(0, n_entities))]
            for (u, t), name in entity_of_slot.items():
                grid[u][t] = name
        for u, t in singleton_slots:
            grid[u][t] = _name_for_index(unique_counter)
            unique_counter += 1

        assert all(w is not None for row in grid for w in row)
        utterances = [
            Utterance.from_strings(utt_speakers[u], row)
            for u, row in enumerate(grid)
        ]

        clusters: list[list] = []
        by_entity: dict[str, list] = {}
        for (u, t), name in sorted(entity_of_slot.items()):
            by_entity.setdefault(name, []).append((u, t, t))
        clusters.extend(ms for _, ms in sorted(by_entity.items()))
        for u, t in singleton_slots:
            clusters.append([(u, t, t)])
        by_speaker: dict[str, list] = {}
        for u, t in pronoun_slots:
            by_speaker.setdefault(utt_speakers[u], []).append((u, t, t))
        clusters.extend(ms for _, ms in sorted(by_speaker.items()))

        if not spec.annotate_singletons:
            clusters = [c for c in clusters if len(c) > 1]

        dialogues.append(
            Dialogue(f"synth-{spec.seed}-{d_idx:04d}", utterances, clusters).validate()
        )
    return dialogues


def load_dialogues(path: str, strict: bool = True) -> list[Dialogue]:
    """Read ``.jsonl`` or ``.conll`` by extension."""
    lower = path.lower()
    with open(path, "rb") as fh:
        if lower.endswith(".jsonl"):
            return parse_dialogue_jsonl(fh, strict=strict)
        if lower.endswith(".conll"):
            return parse_conll_skeleton(fh, strict=strict)
    raise ValidationError(f"unrecognized data extension (want .jsonl/.conll): {path}")
