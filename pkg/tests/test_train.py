import math

import numpy as np
import pytest

from dialcoref import autodiff as ad
from dialcoref.data import GenSpec
from dialcoref.encoder import Vocab, build_speaker_map, select_window_start
from dialcoref.errors import ValidationError
from dialcoref.ingest import generate_synthetic
from dialcoref.model import CorefModel, ModelConfig
from dialcoref.scoring import AntecedentRow
from dialcoref.train import (
    LossWeights,
    MentionSample,
    SpeakerSample,
    TrainConfig,
    build_mention_sample,
    build_speaker_sample,
    coref_loss,
    gold_antecedent_sets,
    gold_cluster_map,
    mention_loss,
    sample_negatives,
    speaker_loss,
    teacher_carried,
    total_loss,
    train_document,
    train_online,
)

LN2 = math.log(2.0)


def row(scores, antecedents, pool_index=0):
    return AntecedentRow(pool_index, antecedents,
                         ad.constant(np.array([scores], dtype=float)))


def scalar(node):
    return float(node.value[0, 0])


class TestCorefLoss:
    def test_dummy_only_non_anaphoric_is_zero(self):
        with ad.Tape():
            loss = coref_loss([row([0.0], [])], [set()])
        assert scalar(loss) == 0.0

    def test_symmetric_two_way_softmax(self):
        with ad.Tape():
            loss = coref_loss([row([0.0, 0.0], [5])], [{5}])
        assert abs(scalar(loss) - LN2) < 1e-12

    def test_matches_bruteforce_normalizer(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            n_ant = int(rng.integers(1, 6))
            scores = rng.normal(size=n_ant + 1)
            scores[0] = 0.0
            ants = list(range(10, 10 + n_ant))
            gold = {a for a in ants if rng.random() < 0.4}
            with ad.Tape():
                loss = coref_loss([row(scores.tolist(), ants)], [gold])
            # independent direct summation of the softmax normalizer
            exp = np.exp(scores - scores.max())
            probs = exp / exp.sum()
            if gold:
                mass = sum(probs[i + 1] for i, a in enumerate(ants) if a in gold)
            else:
                mass = probs[0]
            assert abs(scalar(loss) + math.log(mass)) < 1e-9

    def test_sums_over_candidates(self):
        with ad.Tape():
            loss = coref_loss(
                [row([0.0, 0.0], [1]), row([0.0, 0.0], [2], pool_index=1)],
                [{1}, {2}],
            )
        assert abs(scalar(loss) - 2 * LN2) < 1e-12

    def test_unreachable_gold_falls_back_to_dummy(self):
        with ad.Tape():
            loss = coref_loss([row([0.0, 100.0], [7])], [set()])
        assert scalar(loss) > 10  # dummy got almost no mass

    def test_arity_checked(self):
        with pytest.raises(ValidationError):
            with ad.Tape():
                coref_loss([row([0.0], [])], [])


class TestMentionLoss:
    def test_zero_scores_give_ln2(self):
        with ad.Tape():
            sample = MentionSample(
                ad.constant(np.zeros((1, 1))), None, ad.constant(np.zeros((1, 1)))
            )
            loss, degenerate = mention_loss(sample)
        assert abs(scalar(loss) - LN2) < 1e-12
        assert not degenerate

    def test_saturation_limit(self):
        with ad.Tape():
            sample = MentionSample(
                ad.constant(np.full((3, 1), 50.0)), None,
                ad.constant(np.full((3, 1), -50.0)),
            )
            loss, _ = mention_loss(sample)
        assert scalar(loss) < 1e-8

    def test_matches_elementwise_bce(self):
        rng = np.random.default_rng(1)
        pos = rng.normal(size=(4, 1))
        neg = rng.normal(size=(3, 1))
        with ad.Tape():
            loss, _ = mention_loss(
                MentionSample(ad.constant(pos), None, ad.constant(neg))
            )
        sig = lambda v: 1.0 / (1.0 + np.exp(-v))
        expect = -(np.log(sig(pos)).sum() + np.log(1 - sig(neg)).sum()) / 7
        assert abs(scalar(loss) - expect) < 1e-10

    def test_empty_sets_flagged_zero(self):
        with ad.Tape():
            loss, degenerate = mention_loss(MentionSample(None, None, None))
        assert scalar(loss) == 0.0 and degenerate


class TestSpeakerLoss:
    def test_zero_scores_both_sides(self):
        with ad.Tape():
            loss, _ = speaker_loss(
                SpeakerSample(ad.constant(np.zeros((2, 1))),
                              ad.constant(np.zeros((2, 1))))
            )
        assert abs(scalar(loss) - LN2) < 1e-12

    def test_no_positive_pairs_flagged(self):
        with ad.Tape():
            loss, degenerate = speaker_loss(
                SpeakerSample(None, ad.constant(np.zeros((3, 1))))
            )
        assert degenerate
        assert abs(scalar(loss) - LN2) < 1e-12


class TestTotalLoss:
    def c(self, v):
        return ad.constant(np.full((1, 1), float(v)))

    def test_weighted_sum(self):
        with ad.Tape():
            total = total_loss(self.c(2), self.c(1), self.c(3), LossWeights())
        assert abs(scalar(total) - 2.4) < 1e-12

    def test_bl_drops_mention_term(self):
        weights = LossWeights().for_variant("BL")
        assert weights.mention == 0.0 and weights.speaker == 0.0
        with ad.Tape():
            total = total_loss(self.c(2), self.c(9), self.c(9), weights)
        assert abs(scalar(total) - 2.0) < 1e-12

    def test_sg_only_for_sg_variants(self):
        assert LossWeights().for_variant("OR").speaker == 0.0
        assert LossWeights().for_variant("OR+SG").speaker == 0.1
        assert LossWeights().for_variant("OR+SG+SA").speaker == 0.1

    def test_all_zero_components(self):
        with ad.Tape():
            total = total_loss(self.c(0), self.c(0), self.c(0), LossWeights())
        assert scalar(total) == 0.0

    def test_weights_validated(self):
        with pytest.raises(ValidationError):
            LossWeights(-1.0, 0.1, 0.1)
        with pytest.raises(ValidationError):
            LossWeights(0.0, 0.0, 0.0)


class TestSampleNegatives:
    def test_exact_size(self):
        rng = np.random.default_rng(0)
        assert len(sample_negatives(5, list(range(100)), rng)) == 5

    def test_small_pool_taken_whole(self):
        rng = np.random.default_rng(0)
        assert sorted(sample_negatives(5, [1, 2, 3], rng)) == [1, 2, 3]

    def test_zero_positives(self):
        rng = np.random.default_rng(0)
        assert sample_negatives(0, [1, 2, 3], rng) == []

    def test_deterministic_per_seed(self):
        a = sample_negatives(4, list(range(50)), np.random.default_rng(7))
        b = sample_negatives(4, list(range(50)), np.random.default_rng(7))
        assert a == b

    def test_balance_invariant(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            p = int(rng.integers(0, 10))
            pool = list(range(int(rng.integers(p, p + 30))))
            got = sample_negatives(p, pool, rng)
            assert abs(p - len(got)) <= (0 if len(pool) >= p else p - len(pool))
            assert len(set(got)) == len(got)


def tiny_setup(variant="SR", n_dialogues=6, dropout=0.0, **genkw):
    spec = GenSpec(seed=4, num_dialogues=n_dialogues, utterances_range=(3, 5),
                   tokens_range=(4, 8), **genkw)
    dialogues = generate_synthetic(spec)
    config = ModelConfig(variant=variant, window_cap=32, d_emb=8, d=6,
                         dropout=dropout)
    vocab = Vocab.build(dialogues, config.max_speakers)
    model = CorefModel.fresh(vocab, config, seed=1)
    return dialogues, model


class TestSampleBuilders:
    def test_mention_sample_scope_is_current_turn_only(self):
        dialogues, model = tiny_setup()
        d = dialogues[0]
        smap = build_speaker_map(d.utterances, 16)
        cluster_of = gold_cluster_map(d)
        turn = 1
        gold_scope = {a for a in cluster_of if a[0] == turn}
        with ad.Tape():
            scores = model.score_turn(d.utterances[: turn + 1], turn, smap, [])
            sample = build_mention_sample(scores, gold_scope, True,
                                          np.random.default_rng(0))
        assert all(a[0] == turn for a in scores.all_spans)
        if sample.positives is not None:
            assert sample.positives.value.shape[0] == len(
                [a for a in gold_scope if a in set(scores.all_spans)]
            )

    def test_full_negative_set_when_sampling_off(self):
        dialogues, model = tiny_setup()
        d = dialogues[0]
        smap = build_speaker_map(d.utterances, 16)
        with ad.Tape():
            scores = model.score_turn(d.utterances[:1], 0, smap, [])
            gold = set()
            sample = build_mention_sample(scores, gold, False,
                                          np.random.default_rng(0))
            if sample.negatives_all is not None:
                assert (sample.negatives_sampled.value.shape
                        == sample.negatives_all.value.shape)

    def test_speaker_sample_balanced(self):
        dialogues, model = tiny_setup(variant="OR+SG")
        d = dialogues[0]
        smap = build_speaker_map(d.utterances, 16)
        cluster_of = gold_cluster_map(d)
        turn = len(d.utterances) - 1
        lengths = [len(u) for u in d.utterances]
        k = select_window_start(lengths, turn, model.config.window_cap)
        carried = teacher_carried(d, cluster_of, turn, k)
        with ad.Tape():
            scores = model.score_turn(d.utterances, turn, smap, carried)
            sample = build_speaker_sample(scores, model,
                                          np.random.default_rng(0))
            if sample.positives is not None and sample.negatives is not None:
                n_pos = sample.positives.value.shape[0]
                n_neg = sample.negatives.value.shape[0]
                assert n_neg <= n_pos


class TestTeacherForcing:
    def test_carried_equals_gold_in_window(self):
        dialogues, _ = tiny_setup()
        d = dialogues[0]
        cluster_of = gold_cluster_map(d)
        lengths = [len(u) for u in d.utterances]
        for turn in range(len(d.utterances)):
            k = select_window_start(lengths[: turn + 1], turn, 32)
            carried = teacher_carried(d, cluster_of, turn, k)
            expect = sorted(a for a in cluster_of if k <= a[0] < turn)
            assert [c.address for c in carried] == expect
            for c in carried:
                assert c.cluster_id == cluster_of[c.address]


class TestTrainingLoops:
    def test_zero_learning_rate_keeps_parameters(self):
        dialogues, model = tiny_setup(n_dialogues=1)
        before = {n: p.value.copy() for n, p in model.params.items()}
        config = TrainConfig(epochs=1, lr_task=0.0, lr_encoder=0.0, seed=0,
                             grad_accumulation=1)
        train_document(dialogues, model, config)
        for name, node in model.params.items():
            assert np.array_equal(node.value, before[name]), name

    def test_document_training_decreases_loss(self):
        dialogues, model = tiny_setup(n_dialogues=8)
        logs = []
        config = TrainConfig(epochs=4, lr_task=2e-2, lr_encoder=2e-3, seed=0,
                             grad_accumulation=1,
                             weights=LossWeights(1.0, 2.0, 0.1))
        train_document(dialogues, model, config, log_fn=logs.append)
        first = np.mean([r["L"] for r in logs[:5]])
        last = np.mean([r["L"] for r in logs[-5:]])
        assert last < first

    def test_deterministic_checkpoints(self, tmp_path):
        for run in ("a", "b"):
            dialogues, model = tiny_setup(n_dialogues=4)
            config = TrainConfig(epochs=2, seed=5, grad_accumulation=1)
            train_document(dialogues, model, config)
            model.save(str(tmp_path / f"{run}.ckpt"))
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_mention_classification_beats_chance_within_five_epochs(self):
        # singleton supervision lets the mention head separate gold spans
        dialogues, model = tiny_setup(n_dialogues=20, singleton_rate=0.3)
        config = TrainConfig(epochs=5, lr_task=3e-2, lr_encoder=3e-3, seed=0,
                             grad_accumulation=1,
                             weights=LossWeights(1.0, 5.0, 0.1))
        train_document(dialogues, model, config)
        hits = total = 0
        for d in dialogues[:8]:
            gold = set(gold_cluster_map(d))
            smap = build_speaker_map(d.utterances, 16)
            for turn in range(len(d.utterances)):
                with ad.Tape():
                    scores = model.score_turn(d.utterances[: turn + 1], turn,
                                              smap, [])
                    values = scores.span_scores_node.value[:, 0]
                for i, addr in enumerate(scores.all_spans):
                    total += 1
                    hits += int((values[i] > 0) == (addr in gold))
        accuracy = hits / total
        assert accuracy > 0.6, f"accuracy {accuracy:.3f} not above chance"

    def test_online_accumulation_update_count(self):
        dialogues, model = tiny_setup(variant="OR", n_dialogues=4)
        logs = []
        config = TrainConfig(epochs=1, seed=0, grad_accumulation=16)
        train_online(dialogues, model, config, log_fn=logs.append)
        turn_steps = sum(len(d.utterances) for d in dialogues)
        assert len(logs) == math.ceil(turn_steps / 16)

    def test_online_accumulation_of_one(self):
        dialogues, model = tiny_setup(variant="OR", n_dialogues=2)
        logs = []
        config = TrainConfig(epochs=1, seed=0, grad_accumulation=1)
        train_online(dialogues, model, config, log_fn=logs.append)
        assert len(logs) == sum(len(d.utterances) for d in dialogues)

    def test_warm_start_bit_equal(self, tmp_path):
        dialogues, model = tiny_setup(n_dialogues=3)
        config = TrainConfig(epochs=1, seed=2, grad_accumulation=1)
        train_document(dialogues, model, config)
        path = tmp_path / "sr.ckpt"
        model.save(str(path))
        warm = CorefModel.load(str(path), variant="OR")
        for name, node in model.params.items():
            assert np.array_equal(warm.params[name].value, node.value)

    def test_online_deterministic(self, tmp_path):
        for run in ("a", "b"):
            dialogues, model = tiny_setup(variant="OR+SG+SA", n_dialogues=3,
                                          dropout=0.3)
            config = TrainConfig(epochs=2, seed=9, grad_accumulation=4)
            train_online(dialogues, model, config, log_fn=None)
            model.save(str(tmp_path / f"{run}.ckpt"))
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_log_record_keys(self):
        dialogues, model = tiny_setup(n_dialogues=2)
        logs = []
        config = TrainConfig(epochs=1, seed=0, grad_accumulation=1)
        train_document(dialogues, model, config, log_fn=logs.append)
        assert logs
        assert set(logs[0]) == {"epoch", "step", "L_c", "L_m", "L_s", "L"}


class TestGoldAntecedents:
    def test_same_cluster_antecedents_found(self):
        dialogues, model = tiny_setup(first_person_rate=0.0, singleton_rate=0.0)
        d = dialogues[0]
        cluster_of = gold_cluster_map(d)
        smap = build_speaker_map(d.utterances, 16)
        turn = len(d.utterances) - 1
        lengths = [len(u) for u in d.utterances]
        k = select_window_start(lengths, turn, model.config.window_cap)
        carried = teacher_carried(d, cluster_of, turn, k)
        with ad.Tape():
            scores = model.score_turn(d.utterances, turn, smap, carried)
        golds = gold_antecedent_sets(scores.pool, scores.rows, cluster_of)
        for row_obj, gold in zip(scores.rows, golds):
            x = scores.pool.entries[row_obj.pool_index].address
            for ant in gold:
                y = scores.pool.entries[ant].address
                assert cluster_of[x] == cluster_of[y]


class TestGradientOfTotalLoss:
    def test_full_composite_passes_finite_differences(self):
        # the complete weighted loss over one real turn, every block checked;
        # moderate random attention weights keep the candidate softmax away
        # from saturation, where near-zero gradients drown in FD roundoff
        dialogues, model = tiny_setup(variant="OR+SG+SA", n_dialogues=2)
        rng = np.random.default_rng(42)
        d_g = model.config.d_g
        for name in ("sa_wq", "sa_wk", "sa_wv"):
            model.params[name] = ad.leaf(
                rng.normal(0.0, 0.3 / np.sqrt(d_g), size=(d_g, d_g)), name
            )
        d = dialogues[0]
        cluster_of = gold_cluster_map(d)
        smap = build_speaker_map(d.utterances, 16)
        turn = 1
        lengths = [len(u) for u in d.utterances[: turn + 1]]
        k = select_window_start(lengths, turn, model.config.window_cap)
        carried = teacher_carried(d, cluster_of, turn, k)
        gold_scope = {a for a in cluster_of if a[0] == turn}
        with ad.Tape():
            fixed = model.score_turn(d.utterances[: turn + 1], turn, smap,
                                     carried).candidates

        def builder(params):
            scores = model.score_turn(d.utterances[: turn + 1], turn, smap,
                                      carried, candidates_override=fixed)
            l_c = coref_loss(
                scores.rows,
                gold_antecedent_sets(scores.pool, scores.rows, cluster_of),
            )
            l_m, _ = mention_loss(
                build_mention_sample(scores, gold_scope, True,
                                     np.random.default_rng(3))
            )
            l_s, _ = speaker_loss(
                build_speaker_sample(scores, model, np.random.default_rng(3))
            )
            return total_loss(l_c, l_m, l_s, LossWeights())

        report = ad.grad_check(builder, model.params, step=1e-5,
                               tolerance=1e-4)
        assert report.ok, str(report)
