"""Command-line surface: gen, train, eval, stream, score.

Config precedence is flags > ``--config`` file (key=value lines) > built-in
defaults. Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .data import GenSpec, Utterance
from .encoder import Vocab
from .errors import DialcorefError
from .ingest import generate_synthetic, load_dialogues, write_dialogue_jsonl
from .metrics import evaluate_documents
from .model import CorefModel, ModelConfig
from .online import (
    VARIANTS,
    OnlineState,
    decode_document,
    decode_turn,
    finalize_dialogue,
)
from .report import format_table, write_report
from .train import LossWeights, TrainConfig, train_document, train_online

DEFAULTS = {
    "seed": 0,
    "window_cap": 384,
    "max_span_width": 6,
    "max_antecedents": 20,
    "top_span_ratio": 0.4,
    "max_speakers": 16,
    "d_emb": 16,
    "d": 16,
    "dropout": 0.3,
    "epochs": 10,
    "lr_task": 1e-2,
    "lr_encoder": 1e-3,
    "accumulation": None,  # 16 for online variants, 1 for document training
    "alpha_c": 1.0,
    "alpha_m": 0.1,
    "alpha_s": 0.1,
    "speaker_tokens": True,
    "negative_sampling": True,
}


class UsageError(Exception):
    pass


def _parse_config_file(path: str) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, raw = line.split("=", 1)
            key, raw = key.strip(), raw.strip()
            if raw.lower() in ("true", "false"):
                values[key] = raw.lower() == "true"
            else:
                try:
                    values[key] = int(raw)
                except ValueError:
                    try:
                        values[key] = float(raw)
                    except ValueError:
                        values[key] = raw
    return values


def _resolve(args, key: str):
    """flags > config file > DEFAULTS."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if getattr(args, "_file_config", None) and key in args._file_config:
        return args._file_config[key]
    return DEFAULTS.get(key)


def _parse_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(p) for p in text.split(":"))
    except ValueError as exc:
        raise UsageError(f"expected LO:HI range, got {text!r}") from exc
    return lo, hi


def _require_file(path: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"no such file: {path}")
    return path


def _open_output(path: str):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return open(path, "w", encoding="utf-8")


def _model_config(args, variant: str) -> ModelConfig:
    return ModelConfig(
        variant=variant,
        d_emb=_resolve(args, "d_emb"),
        d=_resolve(args, "d"),
        window_cap=_resolve(args, "window_cap"),
        max_span_width=_resolve(args, "max_span_width"),
        max_antecedents=_resolve(args, "max_antecedents"),
        top_span_ratio=_resolve(args, "top_span_ratio"),
        max_speakers=_resolve(args, "max_speakers"),
        use_speaker_tokens=_resolve(args, "speaker_tokens"),
        dropout=_resolve(args, "dropout"),
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = GenSpec(
        seed=_resolve(args, "seed"),
        num_dialogues=args.dialogues,
        speakers_range=_parse_range(args.speakers),
        utterances_range=_parse_range(args.utterances),
        name_vocab_size=args.name_vocab,
        singleton_rate=args.singleton_rate,
        first_person_rate=args.first_person_rate,
        tokens_range=_parse_range(args.tokens),
        mention_rate=args.mention_rate,
        annotate_singletons=not args.drop_singleton_clusters,
    )
    dialogues = generate_synthetic(spec)
    with _open_output(args.out) as fh:
        write_dialogue_jsonl(dialogues, fh)
    print(f"wrote {len(dialogues)} dialogues to {args.out}")
    return 0


def cmd_train(args) -> int:
    _require_file(args.data)
    dialogues = load_dialogues(args.data, strict=args.plural_links == "reject")
    variant = args.variant
    if args.init:
        _require_file(args.init)
        model = CorefModel.load(args.init, variant=variant)
    else:
        config = _model_config(args, variant)
        vocab = Vocab.build(dialogues, config.max_speakers)
        model = CorefModel.fresh(vocab, config, _resolve(args, "seed"))

    online = model.config.variant in ("OR", "OR+SG", "OR+SG+SA")
    accumulation = _resolve(args, "accumulation")
    if accumulation is None:
        accumulation = 16 if online else 1
    train_config = TrainConfig(
        epochs=_resolve(args, "epochs"),
        lr_task=_resolve(args, "lr_task"),
        lr_encoder=_resolve(args, "lr_encoder"),
        grad_accumulation=accumulation,
        seed=_resolve(args, "seed"),
        weights=LossWeights(
            _resolve(args, "alpha_c"),
            _resolve(args, "alpha_m"),
            _resolve(args, "alpha_s"),
        ),
        negative_sampling=_resolve(args, "negative_sampling"),
    )

    log_fh = _open_output(args.log) if args.log else sys.stdout

    def log_fn(record: dict):
        log_fh.write(" ".join(f"{k}={v}" for k, v in record.items()) + "\n")

    try:
        trainer = train_online if online else train_document
        trainer(dialogues, model, train_config, log_fn=log_fn)
    finally:
        if args.log:
            log_fh.close()
    model.save(args.out)
    print(f"wrote checkpoint to {args.out}")
    return 0


def _pred_clusters(dialogue, model, mode: str, trace_fh=None):
    if mode == "non-online":
        scored, _ = decode_document(dialogue, model, model.decode_config)
        return scored
    state = OnlineState(max_speakers=model.config.max_speakers)
    for utt in dialogue.utterances:
        result = decode_turn(state, utt, model, model.decode_config)
        if trace_fh is not None:
            trace_fh.write(json.dumps(result.to_dict(), ensure_ascii=False) + "\n")
    scored, _ = finalize_dialogue(state)
    return scored


def cmd_eval(args) -> int:
    _require_file(args.model)
    _require_file(args.data)
    model = CorefModel.load(args.model)
    dialogues = load_dialogues(args.data, strict=args.plural_links == "reject")
    gold_by_doc, pred_by_doc = {}, {}
    trace_fh = _open_output(args.trace) if args.trace else None
    try:
        for dialogue in dialogues:
            gold = dialogue.gold_clusters
            if args.gold_singletons == "exclude":
                gold = [c for c in gold if len(c) >= 2]
            gold_by_doc[dialogue.doc_id] = [frozenset(c) for c in gold]
            pred = _pred_clusters(dialogue, model, args.mode, trace_fh)
            pred_by_doc[dialogue.doc_id] = [frozenset(c) for c in pred]
    finally:
        if trace_fh is not None:
            trace_fh.close()
    report = evaluate_documents(gold_by_doc, pred_by_doc)
    print(format_table(report))
    if args.report:
        paths = write_report(report, args.report)
        print("report files: " + " ".join(sorted(paths.values())))
    return 0


def cmd_stream(args) -> int:
    _require_file(args.model)
    model = CorefModel.load(args.model)
    state = OnlineState(max_speakers=model.config.max_speakers)
    out = sys.stdout
    for line in sys.stdin:
        if not line.strip():
            state = OnlineState(max_speakers=model.config.max_speakers)
            continue
        try:
            obj = json.loads(line)
            utt = Utterance.from_strings(obj["speaker"], obj["tokens"])
            result = decode_turn(state, utt, model, model.decode_config)
        except (DialcorefError, KeyError, TypeError, ValueError) as exc:
            out.write(json.dumps({"error": str(exc)}, ensure_ascii=False) + "\n")
            out.flush()
            continue
        out.write(json.dumps(result.to_dict(), ensure_ascii=False) + "\n")
        out.flush()
    return 0


def _read_clusterings(path: str) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            clusters = [
                frozenset(tuple(a) for a in cluster)
                for cluster in obj.get("clusters", [])
            ]
            out[obj["doc_id"]] = clusters
    return out


def cmd_score(args) -> int:
    _require_file(args.gold)
    _require_file(args.pred)
    gold = _read_clusterings(args.gold)
    pred = _read_clusterings(args.pred)
    if args.filter_singletons in ("gold", "both"):
        gold = {d: [c for c in cs if len(c) >= 2] for d, cs in gold.items()}
    if args.filter_singletons in ("pred", "both"):
        pred = {d: [c for c in cs if len(c) >= 2] for d, cs in pred.items()}
    report = evaluate_documents(gold, pred)
    print(format_table(report))
    if args.report:
        paths = write_report(report, args.report)
        print("report files: " + " ".join(sorted(paths.values())))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, help="RNG seed (default 0)")
    p.add_argument("--window-cap", dest="window_cap", type=int,
                   help="max utterance tokens per window (default 384)")
    p.add_argument("--max-span-width", dest="max_span_width", type=int,
                   help="max mention width in tokens (default 6)")
    p.add_argument("--max-antecedents", dest="max_antecedents", type=int,
                   help="antecedent candidates per mention (default 20)")
    p.add_argument("--top-span-ratio", dest="top_span_ratio", type=float,
                   help="kept span ratio per utterance (default 0.4)")
    p.add_argument("--max-speakers", dest="max_speakers", type=int,
                   help="speaker token capacity (default 16)")
    p.add_argument("--d-emb", dest="d_emb", type=int,
                   help="token embedding width (default 16)")
    p.add_argument("--d", dest="d", type=int,
                   help="encoder output width (default 16)")
    p.add_argument("--dropout", type=float,
                   help="dropout on span representations (default 0.3)")
    p.add_argument("--no-speaker-tokens", dest="speaker_tokens",
                   action="store_const", const=False,
                   help="drop speaker tokens from the input window")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dialcoref",
        description="Online coreference resolution for dialogue.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic dialogues")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--dialogues", type=int, default=10)
    p.add_argument("--speakers", default="2:3", help="LO:HI speakers per dialogue")
    p.add_argument("--utterances", default="4:8", help="LO:HI utterances")
    p.add_argument("--tokens", default="5:12", help="LO:HI tokens per utterance")
    p.add_argument("--name-vocab", dest="name_vocab", type=int, default=40)
    p.add_argument("--singleton-rate", dest="singleton_rate", type=float,
                   default=0.2)
    p.add_argument("--first-person-rate", dest="first_person_rate", type=float,
                   default=0.1)
    p.add_argument("--mention-rate", dest="mention_rate", type=float, default=0.3)
    p.add_argument("--drop-singleton-clusters", action="store_true",
                   help="leave singleton clusters out of the gold annotation")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model variant")
    p.add_argument("--variant", required=True, choices=VARIANTS)
    p.add_argument("--data", required=True, help=".jsonl or .conll training set")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--init", help="warm-start checkpoint (architecture and "
                   "vocabulary come from it)")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--log", help="training log path (default: stdout)")
    p.add_argument("--plural-links", dest="plural_links",
                   choices=("reject", "drop"), default="reject",
                   help="mentions in two clusters: fail or drop with warning")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr-task", dest="lr_task", type=float)
    p.add_argument("--lr-encoder", dest="lr_encoder", type=float)
    p.add_argument("--accumulation", type=int,
                   help="gradient accumulation steps (default 16 online, 1 "
                   "document)")
    p.add_argument("--alpha-c", dest="alpha_c", type=float)
    p.add_argument("--alpha-m", dest="alpha_m", type=float)
    p.add_argument("--alpha-s", dest="alpha_s", type=float)
    p.add_argument("--no-negative-sampling", dest="negative_sampling",
                   action="store_const", const=False,
                   help="use the full negative set in the mention loss")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="decode a dataset and score it")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("online", "non-online"), default="online")
    p.add_argument("--report", help="write PREFIX.json/.tsv/.png report files")
    p.add_argument("--trace", help="write per-turn decode trace JSONL")
    p.add_argument("--gold-singletons", dest="gold_singletons",
                   choices=("exclude", "include"), default="exclude")
    p.add_argument("--plural-links", dest="plural_links",
                   choices=("reject", "drop"), default="reject",
                   help="mentions in two clusters: fail or drop with warning")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stream", help="decode JSON utterances from stdin")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("score", help="score two clustering JSONL files")
    p.add_argument("gold")
    p.add_argument("pred")
    p.add_argument("--report", help="write PREFIX.json/.tsv/.png report files")
    p.add_argument("--filter-singletons", dest="filter_singletons",
                   choices=("none", "gold", "pred", "both"), default="none")
    p.set_defaults(func=cmd_score)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args._file_config = (
            _parse_config_file(_require_file(args.config))
            if getattr(args, "config", None)
            else {}
        )
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DialcorefError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
