import io
import json

import pytest

from dialcoref.data import Dialogue, GenSpec, Utterance
from dialcoref.errors import ParseError, PluralLinkError, ValidationError
from dialcoref.ingest import (
    FIRST_PERSON_FORMS,
    dialogue_to_json,
    generate_synthetic,
    parse_conll_skeleton,
    parse_dialogue_jsonl,
    write_dialogue_jsonl,
)

MINIMAL = '{"doc_id":"d1","utterances":[{"speaker":"A","tokens":["Hi"]}],"clusters":[]}'


class TestJsonl:
    def test_minimal_line(self):
        (d,) = parse_dialogue_jsonl(MINIMAL)
        assert d.doc_id == "d1"
        assert len(d.utterances) == 1
        assert d.utterances[0].words == ["Hi"]
        assert d.gold_clusters == []

    def test_round_trip_identity(self):
        dialogues = generate_synthetic(GenSpec(seed=5, num_dialogues=6))
        buf = io.StringIO()
        write_dialogue_jsonl(dialogues, buf)
        back = parse_dialogue_jsonl(buf.getvalue())
        assert [d.to_dict() for d in back] == [d.to_dict() for d in dialogues]

    def test_round_trip_from_bytes(self):
        (d,) = parse_dialogue_jsonl(MINIMAL.encode("utf-8"))
        assert parse_dialogue_jsonl(dialogue_to_json(d))[0].to_dict() == d.to_dict()

    def test_malformed_json_reports_line(self):
        with pytest.raises(ParseError, match="line 2"):
            parse_dialogue_jsonl(MINIMAL + "\n{oops\n")

    def test_out_of_range_token(self):
        bad = json.dumps(
            {
                "doc_id": "d9",
                "utterances": [{"speaker": "A", "tokens": ["a", "b"]}],
                "clusters": [[[0, 0, 5]]],
            }
        )
        with pytest.raises(ValidationError, match="d9"):
            parse_dialogue_jsonl(bad)

    def test_out_of_range_utterance(self):
        bad = json.dumps(
            {
                "doc_id": "d9",
                "utterances": [{"speaker": "A", "tokens": ["a"]}],
                "clusters": [[[3, 0, 0]]],
            }
        )
        with pytest.raises(ValidationError):
            parse_dialogue_jsonl(bad)

    def test_plural_link_rejected(self):
        bad = json.dumps(
            {
                "doc_id": "d2",
                "utterances": [{"speaker": "A", "tokens": ["a", "b"]}],
                "clusters": [[[0, 0, 0]], [[0, 0, 0]]],
            }
        )
        with pytest.raises(PluralLinkError):
            parse_dialogue_jsonl(bad)

    def test_plural_link_dropped_when_not_strict(self):
        bad = json.dumps(
            {
                "doc_id": "d2",
                "utterances": [{"speaker": "A", "tokens": ["a", "b"]}],
                "clusters": [[[0, 0, 0], [0, 1, 1]], [[0, 0, 0]]],
            }
        )
        with pytest.warns(UserWarning, match="plural link"):
            (d,) = parse_dialogue_jsonl(bad, strict=False)
        assert d.gold_clusters == [[(0, 0, 0), (0, 1, 1)]]

    def test_duplicate_in_one_cluster(self):
        bad = json.dumps(
            {
                "doc_id": "d3",
                "utterances": [{"speaker": "A", "tokens": ["a"]}],
                "clusters": [[[0, 0, 0], [0, 0, 0]]],
            }
        )
        with pytest.raises(ValidationError, match="duplicate"):
            parse_dialogue_jsonl(bad)

    def test_whitespace_token_rejected(self):
        bad = json.dumps(
            {"doc_id": "d", "utterances": [{"speaker": "A", "tokens": ["a b"]}]}
        )
        with pytest.raises(ValidationError, match="whitespace"):
            parse_dialogue_jsonl(bad)

    def test_empty_speaker_rejected(self):
        bad = json.dumps(
            {"doc_id": "d", "utterances": [{"speaker": "", "tokens": ["a"]}]}
        )
        with pytest.raises(ValidationError):
            parse_dialogue_jsonl(bad)


def conll_doc(lines, name="doc1", part="000"):
    cols = "{name} {part} {num} {word} PX PB LM FS WS {speaker} NE {coref}"
    body = []
    for num, (word, speaker, coref) in enumerate(lines):
        if word is None:
            body.append("")
        else:
            body.append(
                cols.format(
                    name=name, part=part, num=num, word=word, speaker=speaker,
                    coref=coref,
                )
            )
    return (
        f"#begin document ({name}); part {part}\n"
        + "\n".join(body)
        + "\n#end document\n"
    )


class TestConll:
    def test_multi_token_mention(self):
        # hand parse: ( opens at token 0, ) closes at token 2 -> span (0,0,2)
        text = conll_doc(
            [("New", "spkA", "(3"), ("York", "spkA", "-"), ("City", "spkA", "3)")]
        )
        (d,) = parse_conll_skeleton(text)
        assert d.gold_clusters == [[(0, 0, 2)]]
        assert d.utterances[0].speaker == "spkA"

    def test_single_token_mention(self):
        text = conll_doc([("Alice", "spkA", "(3)")])
        (d,) = parse_conll_skeleton(text)
        assert d.gold_clusters == [[(0, 0, 0)]]

    def test_no_coref_marks(self):
        text = conll_doc([("hello", "spkA", "-"), ("there", "spkA", "-")])
        (d,) = parse_conll_skeleton(text)
        assert d.gold_clusters == []

    def test_sentences_become_utterances(self):
        text = conll_doc(
            [
                ("Alice", "spkA", "(1)"),
                (None, None, None),
                ("she", "spkB", "(1)"),
            ]
        )
        (d,) = parse_conll_skeleton(text)
        assert len(d.utterances) == 2
        assert [u.speaker for u in d.utterances] == ["spkA", "spkB"]
        assert d.gold_clusters == [[(0, 0, 0), (1, 0, 0)]]

    def test_nested_and_crossing_ids(self):
        text = conll_doc(
            [("a", "s", "(3|(5"), ("b", "s", "5)"), ("c", "s", "3)")]
        )
        (d,) = parse_conll_skeleton(text)
        assert sorted(d.gold_clusters) == [[(0, 0, 1)], [(0, 0, 2)]]

    def test_unbalanced_parens(self):
        text = conll_doc([("a", "s", "(3"), ("b", "s", "-")])
        with pytest.raises(ParseError, match="unbalanced"):
            parse_conll_skeleton(text)

    def test_close_without_open(self):
        text = conll_doc([("a", "s", "3)")])
        with pytest.raises(ParseError, match="unopened"):
            parse_conll_skeleton(text)

    def test_missing_speaker_column(self):
        text = (
            "#begin document (x); part 000\n"
            "x 0 0 word -\n"
            "#end document\n"
        )
        with pytest.raises(ParseError, match="column"):
            parse_conll_skeleton(text)

    def test_speaker_carried_forward(self):
        text = conll_doc(
            [("hi", "spkA", "-"), (None, None, None), ("there", "-", "-")]
        )
        with pytest.warns(UserWarning, match="carried forward"):
            (d,) = parse_conll_skeleton(text)
        assert [u.speaker for u in d.utterances] == ["spkA", "spkA"]

    def test_part_suffix_only_when_needed(self):
        text = conll_doc([("a", "s", "-")], name="doc", part="000") + conll_doc(
            [("b", "s", "-")], name="doc", part="001"
        )
        docs = parse_conll_skeleton(text)
        assert [d.doc_id for d in docs] == ["doc#part0", "doc#part1"]
        (single,) = parse_conll_skeleton(conll_doc([("a", "s", "-")]))
        assert single.doc_id == "doc1"


class TestGenerator:
    def test_deterministic(self):
        spec = GenSpec(seed=9, num_dialogues=5)
        a = [d.to_dict() for d in generate_synthetic(spec)]
        b = [d.to_dict() for d in generate_synthetic(GenSpec(seed=9, num_dialogues=5))]
        assert a == b

    def test_different_seeds_differ(self):
        a = [d.to_dict() for d in generate_synthetic(GenSpec(seed=1, num_dialogues=5))]
        b = [d.to_dict() for d in generate_synthetic(GenSpec(seed=2, num_dialogues=5))]
        assert a != b

    def test_no_pronouns_no_singletons_forces_pairs(self):
        spec = GenSpec(
            seed=4, num_dialogues=10, first_person_rate=0.0, singleton_rate=0.0
        )
        for d in generate_synthetic(spec):
            for cluster in d.gold_clusters:
                assert len(cluster) >= 2
                names = {d.mention_text(a) for a in cluster}
                assert len(names) == 1

    def test_pronoun_clusters_grouped_by_speaker(self):
        spec = GenSpec(seed=7, num_dialogues=8, first_person_rate=0.6)
        for d in generate_synthetic(spec):
            expected = {}
            for u, utt in enumerate(d.utterances):
                for t, w in enumerate(utt.words):
                    if w in FIRST_PERSON_FORMS:
                        expected.setdefault(utt.speaker, set()).add((u, t, t))
            got = [
                set(c)
                for c in d.gold_clusters
                if d.mention_text(c[0]) in FIRST_PERSON_FORMS
            ]
            assert sorted(map(sorted, got)) == sorted(
                map(sorted, expected.values())
            )

    def test_clusters_partition_mentions(self):
        for d in generate_synthetic(GenSpec(seed=3, num_dialogues=12)):
            seen = set()
            for cluster in d.gold_clusters:
                for addr in cluster:
                    assert addr not in seen
                    seen.add(addr)

    def test_name_clusters_share_surface(self):
        for d in generate_synthetic(GenSpec(seed=8, num_dialogues=8)):
            for cluster in d.gold_clusters:
                texts = {d.mention_text(a) for a in cluster}
                if texts & set(FIRST_PERSON_FORMS):
                    assert texts <= set(FIRST_PERSON_FORMS)
                else:
                    assert len(texts) == 1

    def test_drop_singleton_flag(self):
        spec = GenSpec(
            seed=6, num_dialogues=8, singleton_rate=0.5, annotate_singletons=False
        )
        for d in generate_synthetic(spec):
            assert all(len(c) >= 2 for c in d.gold_clusters)

    def test_annotated_singletons_present(self):
        spec = GenSpec(seed=6, num_dialogues=8, singleton_rate=0.5)
        dialogues = generate_synthetic(spec)
        assert any(len(c) == 1 for d in dialogues for c in d.gold_clusters)

    def test_invalid_rates_rejected(self):
        with pytest.raises(ValidationError):
            GenSpec(singleton_rate=1.5).validate()
        with pytest.raises(ValidationError):
            GenSpec(speakers_range=(3, 2)).validate()


def test_utterance_validation():
    with pytest.raises(ValidationError):
        Utterance.from_strings("A", []).validate()
    Utterance.from_strings("A", ["ok"]).validate()


def test_dialogue_mention_text():
    d = Dialogue("x", [Utterance.from_strings("A", ["New", "York"])], [])
    assert d.mention_text((0, 0, 1)) == "New York"
