"""Command-line front end: dataset synthesis, vocabulary building, the
three training steps, caption and scene-graph evaluation, inference,
gradient verification, and report rendering.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 numerical failure. Results go to stdout as JSON; progress and the fully
resolved configuration go to stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import data as D
from . import metrics as M
from .model import ReFormer, ReFormerConfig
from .report import read_training_log, write_training_report
from .training import (
    NanGradientError,
    TrainingScheduleError,
    TrainPlan,
    run_step1_sgg,
    run_step2_caption,
    run_step3_scst,
)
from .verification import run_gradient_suite

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _eprint(*args):
    print(*args, file=sys.stderr)


def _emit(payload):
    print(json.dumps(payload))


def _print_config(config_dict):
    _eprint("resolved config: " + json.dumps(config_dict, sort_keys=True))


def _load_model(path):
    params, config_dict = D.load_checkpoint(path)
    config = ReFormerConfig.from_dict(config_dict)
    model = ReFormer(config, seed=0)
    model.load_state(params)
    return model


def _save_model(model, path):
    D.save_checkpoint(model.state_dict(), model.config.to_dict(), path)


def _vocab_from_model(model, override_path=None):
    if override_path:
        vocab = D.Vocabulary.load(override_path)
    elif model.config.caption_words:
        vocab = D.Vocabulary(model.config.caption_words)
    else:
        raise D.DatasetError(
            "checkpoint carries no caption vocabulary; pass --vocab"
        )
    if len(vocab) != model.config.caption_vocab_size:
        raise D.DatasetError(
            f"vocabulary size {len(vocab)} does not match checkpoint "
            f"config ({model.config.caption_vocab_size})"
        )
    return vocab


def _captions_from_file(path):
    """Caption corpus from a dataset JSONL or a plain text file."""
    with open(path) as f:
        first = f.readline().strip()
    if first.startswith("{"):
        records = D.load_dataset(path)
        return [c for r in records for c in r.captions]
    with open(path) as f:
        return [line.strip() for line in f if line.strip()]


def _sibling_vocab(data_path, name):
    candidate = os.path.join(os.path.dirname(os.path.abspath(data_path)), name)
    if os.path.exists(candidate):
        with open(candidate) as f:
            return json.load(f)["words"]
    return None


def _dataset_class_counts(records):
    n_obj = 1 + max((r.label_id for rec in records for r in rec.regions), default=0)
    n_pred = 1 + max(
        (p for rec in records for _, p, _ in rec.triplets), default=1
    )
    return n_obj, n_pred


def _resolve_sgg_config(args, records):
    """defaults < --config file < flags; data fills the structural gaps."""
    resolved = {}
    if args.config:
        with open(args.config) as f:
            resolved.update(json.load(f))
    d_vis = records[0].regions[0].feature.shape[0]
    resolved.setdefault("d_vis", int(d_vis))
    object_words = _sibling_vocab(args.data, "objects.json")
    predicate_words = _sibling_vocab(args.data, "predicates.json")
    n_obj, n_pred = _dataset_class_counts(records)
    if object_words:
        resolved.setdefault("object_names", object_words)
        resolved.setdefault("n_object_classes", len(object_words))
    else:
        resolved.setdefault("n_object_classes", n_obj)
    if predicate_words:
        resolved.setdefault("predicate_names", predicate_words)
        resolved.setdefault("n_predicates", len(predicate_words))
    else:
        resolved.setdefault("n_predicates", n_pred)
    if "caption_words" not in resolved:
        vocab = (
            D.Vocabulary.load(args.vocab)
            if args.vocab
            else D.build_vocab(
                [c for r in records for c in r.captions], min_count=args.min_count
            )
        )
        resolved["caption_words"] = vocab.words
    resolved["caption_vocab_size"] = len(resolved["caption_words"])
    return ReFormerConfig.from_dict(resolved)


def _add_train_flags(p, epochs):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--log", default=None, help="training log JSONL path")


def build_parser():
    parser = _Parser(prog="reformer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic toy dataset")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--images", type=int, required=True)
    p.add_argument("--objects", type=int, required=True)
    p.add_argument("--predicates", type=int, required=True)
    p.add_argument("--regions", default="3:6", help="min:max regions per image")
    p.add_argument("--d-vis", type=int, default=64)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("vocab", help="build a caption vocabulary")
    p.add_argument("--captions", required=True, help="dataset JSONL or text file")
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-sgg", help="step (i): scene-graph pre-training")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="config JSON overlay")
    p.add_argument("--vocab", default=None, help="caption vocabulary JSON")
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_train_flags(p, epochs=30)

    p = sub.add_parser("train-caption", help="step (ii): combined-objective training")
    p.add_argument("--data", required=True)
    p.add_argument("--init", default=None, help="step-(i) checkpoint")
    p.add_argument("--config", default=None, help="config JSON (cold start only)")
    p.add_argument("--vocab", default=None)
    p.add_argument("--lambda", dest="lambda_", type=float, default=None)
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--no-relation-loss", action="store_true")
    p.add_argument("--word-vectors", default=None,
                   help="pretrained word-vector text file (cold start only)")
    p.add_argument("--out", required=True)
    _add_train_flags(p, epochs=60)

    p = sub.add_parser("train-scst", help="step (iii): self-critical fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--init", required=True, help="step-(ii) checkpoint")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--log", default=None)

    p = sub.add_parser("eval-caption", help="corpus caption metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--beam", type=int, default=0, help="0 = greedy")

    p = sub.add_parser("eval-sgg", help="scene-graph recall evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", required=True, choices=["predcls", "sgcls", "sgdet"])
    p.add_argument("--k", default="20,50,100")
    p.add_argument("--proposals", default=None, help="proposal regions JSONL (sgdet)")

    p = sub.add_parser("infer", help="caption + scene graph for one image record")
    p.add_argument("--record", required=True, help="JSONL line or file path")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--top-k", type=int, default=10)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("report", help="render training-log figures and CSV")
    p.add_argument("--log", required=True)
    p.add_argument("--out-dir", required=True)
    return parser


def cmd_synth(args):
    lo, _, hi = args.regions.partition(":")
    synth = D.synth_generate(
        seed=args.seed,
        n_images=args.images,
        n_object_classes=args.objects,
        n_predicates=args.predicates,
        regions_per_image=(int(lo), int(hi or lo)),
        d_vis=args.d_vis,
    )
    os.makedirs(args.out, exist_ok=True)
    data_path = os.path.join(args.out, "dataset.jsonl")
    D.save_dataset(synth.records, data_path)
    with open(os.path.join(args.out, "objects.json"), "w") as f:
        json.dump({"words": synth.object_vocab.names}, f)
    with open(os.path.join(args.out, "predicates.json"), "w") as f:
        json.dump({"words": synth.predicate_vocab.names}, f)
    _emit(
        {
            "dataset": data_path,
            "images": len(synth.records),
            "objects": len(synth.object_vocab),
            "predicates": len(synth.predicate_vocab),
        }
    )
    return EXIT_OK


def cmd_vocab(args):
    vocab = D.build_vocab(_captions_from_file(args.captions), args.min_count)
    vocab.save(args.out)
    _emit({"vocab": args.out, "size": len(vocab)})
    return EXIT_OK


def cmd_train_sgg(args):
    records = D.load_dataset(args.data)
    config = _resolve_sgg_config(args, records)
    _print_config(config.to_dict())
    model = ReFormer(config, seed=args.seed)
    plan = TrainPlan(
        epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
        log_path=args.log,
    )
    result = run_step1_sgg(model, records, plan)
    _save_model(model, args.out)
    _emit(
        {
            "checkpoint": args.out,
            "epochs": result.epochs_run,
            "final_loss": result.rows[-1]["loss_total"] if result.rows else None,
            "predicate_accuracy": result.final_metrics["predicate_accuracy"],
        }
    )
    return EXIT_OK


def cmd_train_caption(args):
    records = D.load_dataset(args.data)
    if args.init:
        model = _load_model(args.init)
    else:
        sgg_args = argparse.Namespace(
            config=args.config, data=args.data, vocab=args.vocab, min_count=1
        )
        config = _resolve_sgg_config(sgg_args, records)
        word_vectors = None
        if args.word_vectors:
            vocab = D.Vocabulary(config.caption_words)
            word_vectors = D.word_vectors_for_vocab(
                D.load_word_vectors(args.word_vectors), vocab
            )
        model = ReFormer(config, seed=args.seed, word_vectors=word_vectors)
    if args.lambda_ is not None:
        model.config.lambda_ = args.lambda_
    if args.freeze_encoder:
        model.config.freeze_encoder_in_caption = True
    if args.no_relation_loss:
        model.config.use_relation_loss = False
    model.config.validate()
    _print_config(model.config.to_dict())
    vocab = _vocab_from_model(model, args.vocab)
    plan = TrainPlan(
        epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
        log_path=args.log,
    )
    result = run_step2_caption(model, records, vocab, plan)
    _save_model(model, args.out)
    _emit(
        {
            "checkpoint": args.out,
            "epochs": result.epochs_run,
            "final_loss": result.rows[-1]["loss_total"] if result.rows else None,
            "token_accuracy": result.final_metrics["token_accuracy"],
        }
    )
    return EXIT_OK


def cmd_train_scst(args):
    records = D.load_dataset(args.data)
    model = _load_model(args.init)
    _print_config(model.config.to_dict())
    vocab = _vocab_from_model(model)
    plan = TrainPlan(
        batch_size=args.batch_size, seed=args.seed, log_path=args.log,
        scst_iterations=args.iterations, fixed_lr=args.lr,
    )
    result = run_step3_scst(model, records, vocab, plan)
    _save_model(model, args.out)
    _emit(
        {
            "checkpoint": args.out,
            "iterations": result.epochs_run,
            "final_loss": result.rows[-1]["loss_total"] if result.rows else None,
        }
    )
    return EXIT_OK


def cmd_eval_caption(args):
    records = D.load_dataset(args.data)
    model = _load_model(args.ckpt)
    _print_config(model.config.to_dict())
    vocab = _vocab_from_model(model, args.vocab)
    mode = "beam" if args.beam > 0 else "greedy"
    scores = M.evaluate_captions(
        model, records, vocab, mode=mode, beam_size=max(args.beam, 1)
    )
    _emit(scores)
    return EXIT_OK


def cmd_eval_sgg(args):
    records = D.load_dataset(args.data)
    model = _load_model(args.ckpt)
    _print_config(model.config.to_dict())
    ks = [int(v) for v in args.k.split(",") if v]
    proposals = None
    if args.mode == "sgdet":
        if not args.proposals:
            raise D.DatasetError(
                "sgdet evaluates detected regions: pass --proposals with a "
                "JSONL of proposal records (boxes + features per image_id)"
            )
        proposals = {r.image_id: r for r in D.load_dataset(args.proposals)}
    rows = M.evaluate_sgg(model, records, args.mode, ks, proposals)
    _emit(rows)
    return EXIT_OK


def cmd_infer(args):
    if os.path.exists(args.record):
        with open(args.record) as f:
            line = f.readline().strip()
        where = f"{args.record}:1"
    else:
        line, where = args.record, "<arg>"
    record = D.record_from_json_line(line, where)
    model = _load_model(args.ckpt)
    _print_config(model.config.to_dict())
    vocab = _vocab_from_model(model, args.vocab)
    tokens = model.embed_regions(
        None,
        record.feature_matrix(),
        [r.box for r in record.regions],
        [r.label_id for r in record.regions],
        record.width,
        record.height,
    )
    enc = model.encode(None, tokens)
    mode = "beam" if args.beam > 1 else "greedy"
    caption = model.generate_caption(enc, mode=mode, beam_size=args.beam)
    _, predictions = model.generate_scene_graph(
        enc,
        [r.box for r in record.regions],
        record.width,
        record.height,
        labels=[r.label_id for r in record.regions],
        top_k=args.top_k,
    )
    names = model.config.object_names
    preds = model.config.predicate_names

    def describe(p):
        if names and preds:
            return (
                f"{names[record.regions[p.subject_index].label_id]} "
                f"{preds[p.predicate_id]} "
                f"{names[record.regions[p.object_index].label_id]}"
            )
        return None

    _emit(
        {
            "caption": D.detokenize(caption.ids, vocab),
            "triplets": [
                {
                    "subject": p.subject_index,
                    "predicate": p.predicate_id,
                    "object": p.object_index,
                    "score": p.score,
                    "text": describe(p),
                }
                for p in predictions
            ],
        }
    )
    return EXIT_OK


def cmd_gradcheck(args):
    results = run_gradient_suite(
        n_configs=args.configs, tolerance=args.tol, seed=args.seed
    )
    failures = [r.name for r in results if not r.passed]
    _emit(
        {
            "checks": len(results),
            "max_rel_err": max(r.max_rel_err for r in results),
            "tolerance": args.tol,
            "failures": failures,
        }
    )
    return EXIT_OK if not failures else EXIT_NUMERIC


def cmd_report(args):
    rows = read_training_log(args.log)
    paths = write_training_report(rows, args.out_dir)
    _emit(paths)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "vocab": cmd_vocab,
    "train-sgg": cmd_train_sgg,
    "train-caption": cmd_train_caption,
    "train-scst": cmd_train_scst,
    "eval-caption": cmd_eval_caption,
    "eval-sgg": cmd_eval_sgg,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _eprint(f"usage error: {exc}")
        return EXIT_USAGE
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
    _eprint(f"{args.command}: " + json.dumps(resolved, default=str))
    try:
        return COMMANDS[args.command](args)
    except NanGradientError as exc:
        _eprint(f"numerical failure: {exc}")
        return EXIT_NUMERIC
    except (D.DatasetError, D.CheckpointError, TrainingScheduleError) as exc:
        _eprint(f"error: {exc}")
        return EXIT_DATA
    except (FileNotFoundError, ValueError, KeyError, IndexError) as exc:
        _eprint(f"error: {exc}")
        return EXIT_DATA


def entry():
    sys.exit(main())
