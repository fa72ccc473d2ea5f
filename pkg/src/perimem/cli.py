"""Command-line entry point: data synthesis, training, evaluation, serving.

Commands: synth, build-dataset, train, eval, gradcheck, serve-sim, expand,
export-attention, sweep-capacity. Every command takes --config pointing at a
JSON file whose keys are flag names (dashes or underscores); explicit flags
win over config values. All outputs are plain JSON/JSONL/CSV for external
plotting. Set PERIMEM_LOG=INFO (or DEBUG) for progress logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import data as dat
from . import trainer
from .baseline import BASELINE_FORMAT, SumPoolModel
from .data import BehaviorEvent, Vocabulary
from .errors import DataFormatError, PerimemError
from .model import CHECKPOINT_FORMAT, ModelConfig, ResponseModel, expand_model
from .store import MemoryStore
from .validation import feature_counts, infer_vocab_sizes

log = logging.getLogger("perimem")

# Layer structures from the published benchmark configurations, plus two
# desk-scale presets: "synthetic" for the planted-dependency generator and
# "small" sized so a full finite-difference sweep stays cheap.
PRESETS = {
    "amazon": {"periods": (1, 2, 4), "slot_dim": 32},
    "taobao": {"periods": (1, 2, 4, 12), "slot_dim": 32},
    "xlong": {"periods": (1, 2, 4, 8, 16, 32), "slot_dim": 32},
    "synthetic": {
        "periods": (1, 2, 4),
        "slot_dim": 32,
        "embed_dim": 16,
        "energy_hidden": 64,
        "mlp_hidden": (200, 80),
        "gate_bias_spans": (8.0, 64.0, 64.0),
        "learning_rate": 1e-3,
        "cov_weight": 1e-4,
        "l2_weight": 1e-5,
        "batch_size": 32,
        "epochs": 10,
        "users": 1000,
        "seq_len": 100,
        "items": 10,
        "cats": 10,
        "targets_per_user": 10,
    },
    "small": {
        "periods": (1, 2, 4),
        "slot_dim": 8,
        "embed_dim": 8,
        "energy_hidden": 16,
        "mlp_hidden": (32, 16),
        "learning_rate": 1e-3,
        "cov_weight": 1e-3,
        "l2_weight": 1e-4,
        "batch_size": 4,
        "epochs": 2,
        "users": 4,
        "seq_len": 16,
        "items": 20,
        "cats": 5,
    },
}

SWEEP_LADDER = (1, 2, 4, 8, 16, 32)


def _int_tuple(value) -> tuple[int, ...]:
    """Accept '1,2,4', [1,2,4], or (1,2,4)."""
    if isinstance(value, str):
        parts = [p for p in value.replace(" ", "").split(",") if p]
        return tuple(int(p) for p in parts)
    return tuple(int(v) for v in value)


def _float_tuple(value) -> tuple[float, ...]:
    if isinstance(value, str):
        parts = [p for p in value.replace(" ", "").split(",") if p]
        return tuple(float(p) for p in parts)
    return tuple(float(v) for v in value)


def _preset(name: str) -> dict:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]


def _setting(args, key: str, fallback=None):
    """Flag if given, else the preset's value, else the fallback."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    preset = _preset(args.preset)
    return preset.get(key, fallback)


def _write_json(payload: dict, path: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path:
        with open(path, "w", encoding="utf-8") as fp:
            fp.write(text + "\n")
    else:
        print(text)


def _load_model(path):
    """Open either checkpoint flavor by peeking at the format header."""
    try:
        with np.load(path, allow_pickle=False) as bundle:
            meta = json.loads(str(bundle["meta"]))
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: not a readable checkpoint ({exc})") from None
    fmt = meta.get("format")
    if fmt == CHECKPOINT_FORMAT:
        return ResponseModel.load(path)
    if fmt == BASELINE_FORMAT:
        return SumPoolModel.load(path)
    raise DataFormatError(f"{path}: unknown checkpoint format {fmt!r}")


def _generate(args):
    users = int(_setting(args, "users", 1000))
    seq_len = int(_setting(args, "seq_len", 100))
    items = int(_setting(args, "items", 60))
    cats = int(_setting(args, "cats", 12))
    targets = int(_setting(args, "targets_per_user", 1))
    return dat.generate_synthetic(
        users, seq_len, items, cats, seed=args.seed, targets_per_user=targets
    )


# -- commands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    samples, vocab = _generate(args)
    dat.save_samples(samples, args.out)
    log.info("synth: wrote %d samples to %s", len(samples), args.out)
    if args.events_out:
        dat.save_events(dat.synthetic_event_log(samples), vocab, args.events_out)
    if args.vocab_out:
        vocab.save(args.vocab_out)
    return 0


def cmd_build_dataset(args) -> int:
    sequences, vocab = dat.load_events(args.events)
    first, rest = dat.build_dataset(
        sequences, cut_time=float("inf"), neg_ratio=args.neg_ratio, seed=args.seed
    )
    samples = first + rest
    cut = args.cut_time
    if cut is None:
        cut = dat.cut_time_for_fraction(samples, args.train_frac)
    train, test = dat.split_by_time(samples, cut)
    dat.save_samples(train, args.train_out)
    dat.save_samples(test, args.test_out)
    if args.vocab_out:
        vocab.save(args.vocab_out)
    log.info(
        "build-dataset: %d train / %d test (cut=%s)", len(train), len(test), cut
    )
    return 0


def _model_config(args, samples, held_out) -> ModelConfig:
    pool = samples if held_out is None else samples + held_out
    sizes = infer_vocab_sizes(pool)
    if args.vocab:
        sizes = Vocabulary.load(args.vocab).sizes()
    spans = _setting(args, "gate_bias_spans")
    return ModelConfig(
        vocab_sizes=sizes,
        periods=_int_tuple(_setting(args, "periods", (1, 2, 4))),
        slot_dim=int(_setting(args, "slot_dim", 32)),
        embed_dim=int(_setting(args, "embed_dim", 16)),
        energy_hidden=int(_setting(args, "energy_hidden", 64)),
        mlp_hidden=_int_tuple(_setting(args, "mlp_hidden", (200, 80))),
        gate_bias_spans=None if spans is None else _float_tuple(spans),
        seed=args.seed,
        **feature_counts(pool),
    )


def _train_config(args) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        learning_rate=float(_setting(args, "learning_rate", 1e-3)),
        cov_weight=float(_setting(args, "cov_weight", 1e-4)),
        l2_weight=float(_setting(args, "l2_weight", 1e-5)),
        batch_size=int(_setting(args, "batch_size", 128)),
        epochs=int(_setting(args, "epochs", 5)),
        seed=args.seed,
    )


def cmd_train(args) -> int:
    train_samples = dat.load_samples(args.train)
    test_samples = dat.load_samples(args.test) if args.test else None
    config = _model_config(args, train_samples, test_samples)
    vocab = Vocabulary.load(args.vocab) if args.vocab else None
    if args.arch == "sum":
        model = SumPoolModel.init(config, vocab=vocab)
    else:
        model = ResponseModel.init(config, vocab=vocab)
    result = trainer.fit_model(model, train_samples, _train_config(args), test_samples)
    model.save(args.out)
    if args.curve:
        trainer.write_learning_curve(args.curve, result.curve_rows)
    for s in result.epoch_summaries:
        log.info(
            "epoch %d: train_loss=%.5f test_logloss=%s test_auc=%s",
            s.epoch, s.mean_train_loss, s.test_logloss, s.test_auc,
        )
    summary = {
        "model": args.out,
        "arch": args.arch,
        "n_train": len(train_samples),
        "epochs": [s.mean_train_loss for s in result.epoch_summaries],
        "best_epoch": result.best_epoch,
        "fingerprint": model.fingerprint(),
    }
    if test_samples:
        summary["test"] = trainer.evaluate_model(model, test_samples)
    _write_json(summary, args.summary_out)
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    samples = dat.load_samples(args.data)
    _write_json(trainer.evaluate_model(model, samples), args.out)
    return 0


def cmd_gradcheck(args) -> int:
    samples, _ = _generate(args)
    model = ResponseModel.init(_model_config(args, samples, None))
    report = trainer.grad_check_model(
        model,
        samples,
        cov_weight=float(_setting(args, "cov_weight", 1e-3)),
        l2_weight=float(_setting(args, "l2_weight", 1e-4)),
        tolerance=args.tolerance,
    )
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


def _decode_id(vocab, field, value):
    if isinstance(value, str):
        if vocab is None:
            raise DataFormatError(
                f"trace uses string {field} ids but the checkpoint has no vocabulary"
            )
        return vocab.encode(field, value)
    return int(value)


def _trace_event(vocab, rec) -> BehaviorEvent:
    return BehaviorEvent(
        item=_decode_id(vocab, "item", rec["item"]),
        cat=_decode_id(vocab, "cat", rec["cat"]),
        ts=int(rec.get("ts", 0)),
        side=tuple(_decode_id(vocab, "side", s) for s in rec.get("side", [])),
    )


def cmd_serve_sim(args) -> int:
    model = _load_model(args.model)
    if isinstance(model, SumPoolModel):
        raise DataFormatError("serve-sim requires a memory-model checkpoint")
    vocab = model.vocab
    if args.store_in:
        store = MemoryStore.load(args.store_in, model)
    else:
        store = MemoryStore.for_model(model)
    n_in = n_out = 0
    with open(args.trace, "r", encoding="utf-8") as trace, open(
        args.out, "w", encoding="utf-8"
    ) as out:
        for lineno, line in enumerate(trace, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{args.trace}:{lineno}: {exc.msg}") from None
            op = rec.get("op")
            user = str(rec.get("user"))
            if op == "ingest":
                uside = tuple(
                    _decode_id(vocab, "uside", v) for v in rec.get("uside", [])
                )
                store.ingest(user, _trace_event(vocab, rec), model, user_side=uside)
                n_in += 1
            elif op == "query":
                ctx = tuple(_decode_id(vocab, "ctx", v) for v in rec.get("ctx", []))
                prob, weights = store.query(user, _trace_event(vocab, rec), ctx, model)
                out.write(
                    json.dumps(
                        {"user": user, "prob": prob, "weights": list(weights)},
                        separators=(",", ":"),
                    )
                    + "\n"
                )
                n_out += 1
            else:
                raise DataFormatError(
                    f"{args.trace}:{lineno}: op must be 'ingest' or 'query', got {op!r}"
                )
    if args.store_out:
        store.save(args.store_out)
    log.info("serve-sim: %d ingests, %d queries", n_in, n_out)
    return 0


def cmd_expand(args) -> int:
    model = _load_model(args.model)
    if isinstance(model, SumPoolModel):
        raise DataFormatError("expand requires a memory-model checkpoint")
    grown = expand_model(model, args.period, seed=args.seed)
    grown.save(args.out)
    if args.store_in:
        store = MemoryStore.load(args.store_in, model)
        store.expanded(grown).save(args.store_out or args.store_in)
    log.info(
        "expand: periods %s -> %s", model.schedule.periods, grown.schedule.periods
    )
    return 0


def cmd_export_attention(args) -> int:
    model = _load_model(args.model)
    if isinstance(model, SumPoolModel):
        raise DataFormatError("export-attention requires a memory-model checkpoint")
    samples = dat.load_samples(args.data)
    weights = model.attention_weights_samples(samples)
    vocab = model.vocab
    with open(args.out, "w", encoding="utf-8") as fp:
        for s, w in zip(samples, weights):
            item = s.target.item
            rec = {
                "user": s.sequence.user_id,
                "target_item": vocab.decode("item", item) if vocab else item,
                "weights": list(w),
            }
            fp.write(json.dumps(rec, separators=(",", ":")) + "\n")
    return 0


def cmd_sweep_capacity(args) -> int:
    train_samples = dat.load_samples(args.train)
    test_samples = dat.load_samples(args.test)
    depths = sorted(set(_int_tuple(args.depths)))
    if not depths or depths[0] < 1 or depths[-1] > len(SWEEP_LADDER):
        raise ValueError(f"depths must lie in 1..{len(SWEEP_LADDER)}, got {depths}")
    rows = []
    for depth in depths:
        periods = SWEEP_LADDER[:depth]
        setattr(args, "periods", ",".join(map(str, periods)))
        config = _model_config(args, train_samples, test_samples)
        model = ResponseModel.init(config)
        trainer.fit_model(model, train_samples, _train_config(args), test_samples)
        report = trainer.evaluate_model(model, test_samples)
        rows.append((depth, "x".join(map(str, periods)), report["auc"], report["logloss"]))
        log.info("sweep: depth=%d auc=%.4f", depth, report["auc"])
    with open(args.out, "w", encoding="utf-8") as fp:
        fp.write("depth,periods,auc,logloss\n")
        for depth, periods, auc, logloss in rows:
            fp.write(f"{depth},{periods},{auc!r},{logloss!r}\n")
    return 0


# -- argument plumbing ------------------------------------------------------------


def _load_config_file(argv: list[str]) -> dict:
    """Pre-scan argv for --config so file values can become parser defaults."""
    path = None
    for i, token in enumerate(argv):
        if token == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif token.startswith("--config="):
            path = token.split("=", 1)[1]
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fp:
        try:
            raw = json.load(fp)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise DataFormatError(f"{path}: config must be a JSON object")
    return {key.replace("-", "_"): value for key, value in raw.items()}


def _add_common(sub, *, preset=True):
    sub.add_argument("--config", help="JSON config file; explicit flags win")
    sub.add_argument("--seed", type=int, default=0)
    if preset:
        sub.add_argument("--preset", default="synthetic", choices=sorted(PRESETS))


def _add_synth_knobs(sub):
    sub.add_argument("--users", type=int)
    sub.add_argument("--seq-len", type=int)
    sub.add_argument("--items", type=int)
    sub.add_argument("--cats", type=int)
    sub.add_argument("--targets-per-user", type=int)


def _add_model_knobs(sub):
    sub.add_argument("--periods", help="comma-separated update periods, e.g. 1,2,4")
    sub.add_argument("--slot-dim", type=int)
    sub.add_argument("--embed-dim", type=int)
    sub.add_argument("--energy-hidden", type=int)
    sub.add_argument("--mlp-hidden", help="comma-separated widths, e.g. 200,80")
    sub.add_argument(
        "--gate-bias-spans",
        help="comma-separated per-layer update-gate bias spans, e.g. 8,64,64",
    )
    sub.add_argument("--vocab", help="vocabulary JSON; fixes table sizes")


def _add_train_knobs(sub):
    sub.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    sub.add_argument("--cov-weight", type=float)
    sub.add_argument("--l2-weight", type=float)
    sub.add_argument("--batch-size", type=int)
    sub.add_argument("--epochs", type=int)


def build_parser(config: dict | None = None) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="perimem",
        description="Periodic-memory user response model: data, training, serving.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, **kwargs):
        sub = commands.add_parser(name, **kwargs)
        sub.set_defaults(fn=fn)
        return sub

    sub = command("synth", cmd_synth, help="generate a planted-dependency dataset")
    _add_common(sub)
    _add_synth_knobs(sub)
    sub.add_argument("--out", required=True, help="samples JSONL")
    sub.add_argument("--events-out", help="also write the raw event log JSONL")
    sub.add_argument("--vocab-out", help="also write the vocabulary JSON")

    sub = command("build-dataset", cmd_build_dataset,
                  help="event log JSONL -> labeled train/test samples")
    _add_common(sub, preset=False)
    sub.add_argument("--events", required=True)
    sub.add_argument("--train-out", required=True)
    sub.add_argument("--test-out", required=True)
    sub.add_argument("--vocab-out")
    sub.add_argument("--neg-ratio", type=float, default=0.5)
    sub.add_argument("--train-frac", type=float, default=0.7)
    sub.add_argument("--cut-time", type=float, help="explicit split time instead of --train-frac")

    sub = command("train", cmd_train, help="fit a model on a samples file")
    _add_common(sub)
    _add_model_knobs(sub)
    _add_train_knobs(sub)
    sub.add_argument("--train", required=True, help="training samples JSONL")
    sub.add_argument("--test", help="held-out samples JSONL")
    sub.add_argument("--arch", choices=("memory", "sum"), default="memory")
    sub.add_argument("--out", required=True, help="checkpoint path (.npz)")
    sub.add_argument("--curve", help="learning-curve CSV path")
    sub.add_argument("--summary-out", help="write the run summary JSON here instead of stdout")

    sub = command("eval", cmd_eval, help="metrics report for a checkpoint on a samples file")
    _add_common(sub, preset=False)
    sub.add_argument("--model", required=True)
    sub.add_argument("--data", required=True)
    sub.add_argument("--out", help="metrics JSON path (default: stdout)")

    sub = command("gradcheck", cmd_gradcheck,
                  help="compare analytic gradients against finite differences")
    _add_common(sub)
    _add_synth_knobs(sub)
    _add_model_knobs(sub)
    sub.add_argument("--cov-weight", type=float)
    sub.add_argument("--l2-weight", type=float)
    sub.add_argument("--tolerance", type=float, default=1e-4)
    sub.set_defaults(preset="small")

    sub = command("serve-sim", cmd_serve_sim,
                  help="replay an ingest/query trace through the online store")
    _add_common(sub, preset=False)
    sub.add_argument("--model", required=True)
    sub.add_argument("--trace", required=True, help="JSONL ops: ingest/query")
    sub.add_argument("--out", required=True, help="predictions JSONL")
    sub.add_argument("--store-in", help="resume from a saved store")
    sub.add_argument("--store-out", help="persist the store afterwards")

    sub = command("expand", cmd_expand, help="append a slower memory layer")
    _add_common(sub, preset=False)
    sub.add_argument("--model", required=True)
    sub.add_argument("--period", type=int, required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--store-in", help="store to expand alongside the model")
    sub.add_argument("--store-out", help="where to write the expanded store")

    sub = command("export-attention", cmd_export_attention,
                  help="per-sample attention weights as JSONL")
    _add_common(sub, preset=False)
    sub.add_argument("--model", required=True)
    sub.add_argument("--data", required=True)
    sub.add_argument("--out", required=True)

    sub = command("sweep-capacity", cmd_sweep_capacity,
                  help="train at several memory depths, emit AUC-vs-depth CSV")
    _add_common(sub)
    _add_model_knobs(sub)
    _add_train_knobs(sub)
    sub.add_argument("--train", required=True)
    sub.add_argument("--test", required=True)
    sub.add_argument("--depths", default="1,2,3", help="comma-separated layer counts")
    sub.add_argument("--out", required=True)

    if config:
        for action in commands.choices.values():
            known = {a.dest for a in action._actions}
            action.set_defaults(**{k: v for k, v in config.items() if k in known})
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(
        level=os.environ.get("PERIMEM_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = _load_config_file(argv)
        args = build_parser(config).parse_args(argv)
        return args.fn(args)
    except PerimemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
