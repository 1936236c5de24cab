"""Command-line surface: gen, train, eval, interpret, compare.

Exit codes: 0 success, 1 usage error (bad flags, missing input paths),
2 runtime failure (corrupt files, divergence, shape errors). Every run is
deterministic given its config and seed; no output embeds timestamps, so
identical invocations produce byte-identical artifacts.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import data as sd
from . import relevancy as rv
from . import report as rp
from . import training as tr
from .model import BaselineModel, ModelConfig, ProposedModel, load_checkpoint, \
    save_checkpoint

__all__ = ["main", "build_parser", "UsageError"]


class UsageError(Exception):
    """Raised for command-line misuse instead of argparse's sys.exit."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="speechlens",
        description="Two-level bi-modal speech classifier with "
                    "attention-relevancy interpretation.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="{gen,train,eval,interpret,compare}")

    gen = sub.add_parser("gen", help="generate a synthetic corpus directory")
    gen.add_argument("--config", help="corpus config JSON path")
    gen.add_argument("--out", required=True, help="corpus output directory")
    gen.add_argument("--seed", type=int, help="override the config seed")
    gen.set_defaults(func=_cmd_gen)

    train = sub.add_parser("train", help="train one architecture on a corpus")
    train.add_argument("--arch", choices=("proposed", "baseline"),
                       required=True)
    train.add_argument("--data", required=True, help="corpus directory")
    train.add_argument("--config",
                       help="JSON with optional 'model' and 'train' sections")
    train.add_argument("--out", required=True, help="output directory")
    train.add_argument("--seed", type=int, help="override the training seed")
    train.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True, help="corpus directory")
    ev.add_argument("--split", choices=("train", "test"), default="test")
    ev.add_argument("--out", help="directory for eval.json (optional)")
    ev.set_defaults(func=_cmd_eval)

    itp = sub.add_parser(
        "interpret", help="rank sentences and render token/patch relevancy")
    itp.add_argument("--checkpoint", required=True)
    itp.add_argument("--data", required=True, help="corpus directory")
    itp.add_argument("--split", choices=("train", "test"), default="test")
    itp.add_argument("--sample-id", required=True,
                     help="participant id or integer index within the split")
    itp.add_argument("--top-k", type=int, default=2,
                     help="sentences to interpret in depth (default 2)")
    itp.add_argument("--out", required=True, help="output directory")
    itp.set_defaults(func=_cmd_interpret)

    cmp_ = sub.add_parser(
        "compare", help="train and evaluate both architectures side by side")
    cmp_.add_argument("--data", required=True, help="corpus directory")
    cmp_.add_argument("--config",
                      help="JSON with optional 'model' and 'train' sections")
    cmp_.add_argument("--out", required=True, help="output directory")
    cmp_.add_argument("--seed", type=int, help="override the training seed")
    cmp_.set_defaults(func=_cmd_compare)
    return parser


# ----- helpers -----------------------------------------------------------------


def _read_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_json(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")


def _resolve_configs(config_path, seed, corpus_cfg):
    """Model/train configs merged with corpus-imposed dimensions."""
    conf = _read_json(config_path) if config_path else {}
    model_conf = dict(conf.get("model", {}))
    model_conf["vocab_size"] = corpus_cfg.vocab_size
    model_conf["d_patch"] = corpus_cfg.d_patch
    needed_patches = corpus_cfg.patch_grid[0] * corpus_cfg.patch_grid[1]
    for fld, needed in (("max_patches", needed_patches),
                        ("max_tokens", corpus_cfg.tokens_per_sentence[1]),
                        ("max_sentences", corpus_cfg.sentences_per_speech[1])):
        model_conf[fld] = max(model_conf.get(fld, needed), needed)
    train_conf = dict(conf.get("train", {}))
    if seed is not None:
        train_conf["seed"] = seed
    return ModelConfig(**model_conf), tr.TrainConfig(**train_conf)


def _train_one(arch: str, train_samples, mc: ModelConfig, tc: tr.TrainConfig):
    """Returns (model, training log records)."""
    records = []
    rng = np.random.default_rng(tc.seed)
    if arch == "proposed":
        model = ProposedModel(mc, rng)
        tr.train_proposed(model, train_samples, tc, log_sink=records.append)
    else:
        model = BaselineModel(mc, rng)
        tr.train_baseline(model, train_samples, tc, log_sink=records.append)
    return model, records


def _metric_line(name: str, report: tr.EvalReport) -> str:
    return (f"{name}: precision={report.precision:.3f} "
            f"recall={report.recall:.3f} f1={report.f1:.3f}")


def _pick_sample(samples, sample_id: str):
    for s in samples:
        if s.participant_id == sample_id:
            return s
    try:
        index = int(sample_id)
    except ValueError:
        raise ValueError(f"no sample named {sample_id!r} in this split") from None
    if not 0 <= index < len(samples):
        raise ValueError(
            f"sample index {index} outside 0..{len(samples) - 1}")
    return samples[index]


# ----- commands ---------------------------------------------------------------


def _cmd_gen(args) -> int:
    conf = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        conf["seed"] = args.seed
    cfg = sd.CorpusConfig(**conf)
    train, test, key = sd.generate_corpus(cfg)
    sd.save_corpus(args.out, train, test, key, cfg)
    print(f"wrote {len(train)} train and {len(test)} test samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    train_samples, test_samples, _, corpus_cfg = sd.load_corpus(args.data)
    mc, tc = _resolve_configs(args.config, args.seed, corpus_cfg)
    model, records = _train_one(args.arch, train_samples, mc, tc)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, f"{args.arch}.ckpt")
    save_checkpoint(ckpt, model)
    _write_jsonl(os.path.join(args.out, f"train_log_{args.arch}.jsonl"), records)
    _write_json(os.path.join(args.out, "train_config.json"),
                {"arch": args.arch, "model": mc.to_dict(),
                 "train": tc.to_dict(), "corpus": corpus_cfg.to_dict()})
    final_epoch = records[-1]["epoch"] if records else 0
    losses = [r["loss"] for r in records if r["epoch"] == final_epoch]
    mean_loss = sum(losses) / len(losses) if losses else float("nan")
    print(f"saved {ckpt} (final-epoch mean loss {mean_loss:.4f})")
    return 0


def _cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    train_samples, test_samples, _, _ = sd.load_corpus(args.data)
    samples = test_samples if args.split == "test" else train_samples
    report = tr.evaluate(model, samples)
    print(_metric_line(model.arch, report))
    print(f"counts: tp={report.tp} fp={report.fp} tn={report.tn} "
          f"fn={report.fn} accuracy={report.accuracy:.3f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "eval.json"),
                    {"arch": model.arch, "split": args.split,
                     "report": report.to_dict()})
    return 0


def _cmd_interpret(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    if model.arch != "proposed":
        raise ValueError(
            "interpretation needs a 'proposed' checkpoint; "
            f"this one is {model.arch!r}")
    train_samples, test_samples, _, corpus_cfg = sd.load_corpus(args.data)
    samples = test_samples if args.split == "test" else train_samples
    sample = _pick_sample(samples, args.sample_id)
    sample = tr.truncate_sample(sample, model.cfg.max_sentences)
    result = rv.hierarchical_interpret(
        model, sample, top_k=args.top_k,
        patch_grid=corpus_cfg.patch_grid,
        checkpoint_id=os.path.basename(args.checkpoint))
    os.makedirs(args.out, exist_ok=True)
    rv.dump_interpretation(result,
                           os.path.join(args.out, "interpretation.json"))
    svg_paths = rp.render_heatmap(result, sample, args.out)
    print(f"sample {sample.participant_id}: "
          f"selected sentences {result.selection_indices()}")
    print(f"wrote interpretation.json and {len(svg_paths)} SVG files "
          f"to {args.out}")
    return 0


def _cmd_compare(args) -> int:
    train_samples, test_samples, _, corpus_cfg = sd.load_corpus(args.data)
    mc, tc = _resolve_configs(args.config, args.seed, corpus_cfg)
    os.makedirs(args.out, exist_ok=True)
    reports, histories = {}, {}
    for arch in ("proposed", "baseline"):
        model, records = _train_one(arch, train_samples, mc, tc)
        save_checkpoint(os.path.join(args.out, f"{arch}.ckpt"), model)
        _write_jsonl(os.path.join(args.out, f"train_log_{arch}.jsonl"), records)
        reports[arch] = tr.evaluate(model, test_samples, tc.max_sentences)
        histories[arch] = records
    _write_json(os.path.join(args.out, "report.json"), {
        "model": mc.to_dict(), "train": tc.to_dict(),
        "corpus": corpus_cfg.to_dict(),
        "reports": {arch: r.to_dict() for arch, r in reports.items()},
    })
    rp.write_metrics_csv(os.path.join(args.out, "metrics.csv"), reports)
    rp.write_predictions_csv(os.path.join(args.out, "predictions.csv"),
                             reports)
    rp.metric_comparison_figure(reports, os.path.join(args.out, "metrics.png"))
    rp.loss_curve_figure(histories, os.path.join(args.out, "loss_curves.png"))
    for arch in ("proposed", "baseline"):
        print(_metric_line(arch, reports[arch]))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"speechlens: {exc}", file=sys.stderr)
        print("run 'speechlens --help' for usage", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"speechlens: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"speechlens: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
