"""Command-line front end: ``dstnoise <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import corpus as corpus_mod
from .evaluation import (
    attention_export,
    change_turn_accuracy,
    evaluation_report,
    momentum_analysis,
    noise_probe,
    save_json,
    write_per_turn_csv,
    write_probe_csv,
)
from .inference import read_predictions, rollout_corpus, turn_context, write_predictions
from .ontology import Ontology, load_ontology, save_ontology
from .training import MODES, TrainConfig, load_checkpoint, train

log = logging.getLogger("dstnoise")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _load_config(path: str | None) -> tuple[dict, dict]:
    """(TrainConfig fields, data section) from a JSON experiment file."""
    if path is None:
        return {}, {}
    with open(path) as f:
        raw = json.load(f)
    data = raw.pop("data", {})
    return raw, data


def _train_config(args, base: dict) -> TrainConfig:
    overrides = {
        "mode": args.mode,
        "noise_threshold": args.noise_threshold,
        "temperature": args.temperature,
        "seed": args.seed,
        "epochs": args.epochs,
        "checkpoint_dir": args.checkpoint_dir,
    }
    fields = dict(base)
    fields.update({k: v for k, v in overrides.items() if v is not None})
    if args.allow_none_noise:
        fields["allow_none_noise"] = True
    return TrainConfig.from_json(fields)


def _data_path(args, data: dict, key: str, required=True):
    value = getattr(args, key, None) or data.get(key)
    if value is None and required:
        raise SystemExit(f"error: no {key} path given (flag --{key} or config data.{key})")
    return value


def _load_split(args, data, key, ontology):
    path = _data_path(args, data, key, required=key == "train")
    if path is None:
        return None
    return corpus_mod.load_corpus(path, ontology, data.get("events") or getattr(args, "events", None))


def _ontology_from_records(path: str) -> Ontology:
    slots: dict[str, list[str]] = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            for state in (rec["pred"], rec["gold"]):
                for slot, value in state.items():
                    values = slots.setdefault(slot, [])
                    if value not in values:
                        values.append(value)
    return Ontology(slots)


# --- commands ---------------------------------------------------------------------


def cmd_generate_corpus(args) -> int:
    cfg = corpus_mod.SyntheticConfig(
        n_dialogues=args.n_dialogues, n_slots=args.n_slots, values_per_slot=args.values_per_slot,
        min_turns=args.min_turns, max_turns=args.max_turns, p_new_slot=args.p_new_slot,
        p_change=args.p_change, seed=args.seed,
    )
    ontology, dialogues = corpus_mod.generate_synthetic_corpus(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_ontology(ontology, out / "ontology.json")
    corpus_mod.save_corpus(dialogues, out / "corpus.json", out / "events.json")
    parts = corpus_mod.split_corpus(dialogues, args.split, args.seed)
    for name, part in zip(("train", "validation", "test"), parts):
        corpus_mod.save_corpus(part, out / f"{name}.json")
    print(json.dumps({"dialogues": len(dialogues), "split": [len(p) for p in parts], "out": str(out)}))
    return 0


def cmd_train(args) -> int:
    base, data = _load_config(args.config)
    config = _train_config(args, base)
    ontology = load_ontology(_data_path(args, data, "ontology"))
    train_set = _load_split(args, data, "train", ontology)
    valid_set = _load_split(args, data, "validation", ontology)
    if config.checkpoint_dir is None:
        config = replace(config, checkpoint_dir="checkpoints")
    ckpt = train(config, train_set, ontology, valid_set)
    report = {
        "config": config.to_json(),
        "best_epoch": ckpt.best_epoch,
        "best_valid_joint": ckpt.best_valid_joint,
        "history": ckpt.history,
    }
    save_json(report, Path(config.checkpoint_dir) / "train_report.json")
    print(json.dumps({k: report[k] for k in ("best_epoch", "best_valid_joint")}))
    return 0


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.pred:
        ontology = load_ontology(args.ontology) if args.ontology else _ontology_from_records(args.pred)
        records = read_predictions(args.pred, ontology)
        dialogues = None
    else:
        if not (args.checkpoint and args.corpus):
            raise SystemExit("error: evaluate needs --pred, or --checkpoint with --corpus")
        ckpt = load_checkpoint(args.checkpoint)
        dialogues = corpus_mod.load_corpus(args.corpus, ckpt.ontology, args.events)
        records = rollout_corpus(ckpt.model, dialogues, oracle_prev_state=args.oracle_prev_state)
        write_predictions(records, out / "predictions.jsonl")
    report = evaluation_report(records)
    if dialogues is not None and any(d.events for d in dialogues):
        try:
            report["change_turn_joint"] = change_turn_accuracy(records, dialogues)
        except ValueError:
            pass
    save_json(report, out / "report.json")
    write_per_turn_csv(report["per_turn"], out / "per_turn.csv")
    print(json.dumps(report))
    return 0


def cmd_analyze_momentum(args) -> int:
    ontology = load_ontology(args.ontology) if args.ontology else _ontology_from_records(args.pred)
    report = asdict(momentum_analysis(read_predictions(args.pred, ontology)))
    if args.out:
        save_json(report, args.out)
    print(json.dumps(report))
    return 0


def cmd_probe_noise(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dialogues = corpus_mod.load_corpus(args.corpus, ckpt.ontology)
    rows = noise_probe(ckpt.model, dialogues, args.ratios, seed=args.seed)
    write_probe_csv(rows, args.out)
    print(json.dumps(rows))
    return 0


def cmd_visualize_attention(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dialogues = corpus_mod.load_corpus(args.corpus, ckpt.ontology)
    by_id = {d.id: d for d in dialogues}
    if args.dialogue_id not in by_id:
        raise SystemExit(f"error: no dialogue {args.dialogue_id!r}")
    if args.slot not in ckpt.ontology:
        raise SystemExit(f"error: unknown slot {args.slot!r}")
    dialogue = by_id[args.dialogue_id]
    if not 1 <= args.turn <= len(dialogue.turns):
        raise SystemExit(f"error: turn must be in 1..{len(dialogue.turns)}")
    records = rollout_corpus(ckpt.model, [dialogue], oracle_prev_state=args.oracle_prev_state)
    t = args.turn - 1
    prev = ckpt.ontology.empty_state() if t == 0 else (
        dialogue.turns[t - 1].gold_state if args.oracle_prev_state else records[t - 1].predicted_state
    )
    export = attention_export(ckpt.model, turn_context(ckpt.model, dialogue, t, prev), args.slot)
    export["predicted"] = records[t].predicted_state[args.slot]
    export["gold"] = dialogue.turns[t].gold_state[args.slot]
    save_json(export, args.out)
    print(json.dumps({"out": args.out, "tokens": len(export["tokens"])}))
    return 0


def cmd_sweep_noise_threshold(args) -> int:
    base, data = _load_config(args.config)
    ontology = load_ontology(_data_path(args, data, "ontology"))
    train_set = _load_split(args, data, "train", ontology)
    valid_set = _load_split(args, data, "validation", ontology)
    if not valid_set:
        raise SystemExit("error: sweep-noise-threshold needs a validation corpus")
    rows = []
    for p in args.thresholds:
        config = replace(_train_config(args, base), noise_threshold=p, checkpoint_dir=None)
        ckpt = train(config, train_set, ontology, valid_set)
        rows.append({"noise_threshold": p, "valid_joint": ckpt.best_valid_joint, "best_epoch": ckpt.best_epoch})
        log.info("p=%s valid_joint=%s", p, ckpt.best_valid_joint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_json(rows, out / "sweep.json")
    with open(out / "sweep.csv", "w") as f:
        f.write("noise_threshold,valid_joint\n")
        for r in rows:
            f.write(f"{r['noise_threshold']},{r['valid_joint']}\n")
    print(json.dumps(rows))
    return 0


def _add_train_flags(p):
    p.add_argument("--config", help="JSON experiment file (TrainConfig keys plus optional 'data')")
    p.add_argument("--mode", choices=sorted(MODES))
    p.add_argument("--noise-threshold", type=float)
    p.add_argument("--allow-none-noise", action="store_true", help="let noise deactivate slots")
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--checkpoint-dir")
    p.add_argument("--ontology")
    p.add_argument("--train")
    p.add_argument("--validation")
    p.add_argument("--events")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dstnoise", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-corpus", help="write a synthetic corpus and its splits")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-dialogues", type=int, default=400)
    p.add_argument("--n-slots", type=int, default=5)
    p.add_argument("--values-per-slot", type=int, default=6)
    p.add_argument("--min-turns", type=int, default=3)
    p.add_argument("--max-turns", type=int, default=6)
    p.add_argument("--p-new-slot", type=float, default=0.7)
    p.add_argument("--p-change", type=float, default=0.4)
    p.add_argument("--split", type=_floats, default=[0.75, 0.125, 0.125])
    p.set_defaults(func=cmd_generate_corpus)

    p = sub.add_parser("train", help="train a tracker")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics from predictions or a checkpoint rollout")
    p.add_argument("--pred", help="predictions JSONL")
    p.add_argument("--ontology")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--events")
    p.add_argument("--oracle-prev-state", action="store_true", help="feed gold previous states")
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze-momentum", help="state-momentum error counts")
    p.add_argument("--pred", required=True)
    p.add_argument("--ontology")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze_momentum)

    p = sub.add_parser("probe-noise", help="accuracy and representation drift under noised oracle states")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--ratios", type=_floats, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="probe.csv")
    p.set_defaults(func=cmd_probe_noise)

    p = sub.add_parser("visualize-attention", help="export per-token attention scores for one slot")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--dialogue-id", required=True)
    p.add_argument("--turn", type=int, required=True, help="1-based turn index")
    p.add_argument("--slot", required=True)
    p.add_argument("--oracle-prev-state", action="store_true")
    p.add_argument("--out", default="attention.json")
    p.set_defaults(func=cmd_visualize_attention)

    p = sub.add_parser("sweep-noise-threshold", help="train at several noise thresholds")
    _add_train_flags(p)
    p.add_argument("--thresholds", type=_floats, default=[0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    p.add_argument("--out", default="sweep")
    p.set_defaults(func=cmd_sweep_noise_threshold)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
