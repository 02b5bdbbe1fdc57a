"""Command-line surface tying the modules into reproducible pipelines.

Subcommands: make-toy-data, build-index, associate, pretrain, eval-ppl,
finetune. Settings merge three layers with fixed precedence: flags beat
a key=value config file (--config), which beats built-in defaults. Every
command takes --seed; anything random flows from it. Exit codes: 0 ok,
1 runtime failure, 2 usage error.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict
from typing import Dict, Optional

import numpy as np

from .associate import (AssociationCache, associate_keyword_baseline,
                        associate_object, associate_scene, build_caption_index,
                        build_synset_index, load_caption_corpus,
                        load_noun_lexicon, load_synsets)
from .embeddings import load_word_vectors
from .finetune import finetune, load_task_file
from .index import ImageFeatureStore, load_index, save_index
from .model import CrossModalModel, ModelConfig, load_checkpoint, save_checkpoint
from .toydata import ToySpec, generate_grounded_corpus
from .train import (STRATEGY_NAMES, Corpora, Strategy, TrainConfig,
                    evaluate_perplexity, pretrain, strategy_visual_mode,
                    write_metrics_csv)
from .vocab import Vocab


class UsageError(Exception):
    """Bad invocation: wrong flags, missing files, unknown config keys."""


# Every tunable consumed by pretrain/eval-ppl/finetune, with type and default.
# A config file may set exactly these; flags of the same name win.
CONFIG_KEYS: Dict[str, tuple] = {
    "seed": (int, 0),
    "threads": (int, None),
    "k": (int, 16),
    "kappa": (int, 8),
    "batch_size": (int, 32),
    "lr": (float, 1e-4),
    "max_epochs": (int, 4),
    "max_steps": (int, None),
    "mix_ratio": (float, 0.5),
    "eval_every": (int, 100),
    "patience": (int, 3),
    "val_fraction": (float, 0.1),
    "runs": (int, 8),
    "d": (int, 128),
    "d_v": (int, 64),
    "n_layers_text": (int, 2),
    "n_layers_cross": (int, 2),
    "n_heads": (int, 4),
    "max_len": (int, 64),
    "k_max": (int, 16),
    "n_regions": (int, 1),
    "mask_rate": (float, 0.15),
    "p_norm": (float, 2.0),
    "l1_coeff": (float, 1e-4),
}

_CONFIG_HELP = "config keys: " + ", ".join(
    f"{k}={d!r}" for k, (_t, d) in CONFIG_KEYS.items())


class RunConfig:
    """Merged view of defaults, config-file pairs, and flag overrides."""

    def __init__(self, args: argparse.Namespace):
        self.values = {k: d for k, (_t, d) in CONFIG_KEYS.items()}
        path = getattr(args, "config", None)
        if path:
            self.values.update(_parse_config_file(path))
        for key in CONFIG_KEYS:
            flag = getattr(args, key, None)
            if flag is not None:
                self.values[key] = flag

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key)


def _parse_config_file(path) -> Dict[str, object]:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise UsageError(f"{path}:{n}: unknown config key {key!r}")
            typ = CONFIG_KEYS[key][0]
            try:
                out[key] = None if value.lower() == "none" else typ(value)
            except ValueError:
                raise UsageError(f"{path}:{n}: {key} expects {typ.__name__}, got {value!r}")
    return out


def _require(path, what: str):
    if path is None:
        raise UsageError(f"missing required {what}")
    if not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")
    return path


# -- corpora assembly ---------------------------------------------------------


def _load_corpora(args, cfg: RunConfig, mode: str, need_text: bool) -> Corpora:
    vocab = Vocab.load(_require(args.vocab, "--vocab file"))
    co = Corpora(vocab=vocab)
    if args.corpus:
        with open(_require(args.corpus, "--corpus file"), encoding="utf-8") as fh:
            co.text_only = [line.rstrip("\n") for line in fh if line.strip()]
    if args.captions:
        corpus = load_caption_corpus(_require(args.captions, "--captions file"))
        co.caption_corpus = corpus
        co.paired = list(corpus.items())
    if args.features:
        co.store = ImageFeatureStore(_require(args.features, "--features file"))
    if args.vectors:
        co.table = load_word_vectors(_require(args.vectors, "--vectors file"))
    if getattr(args, "nouns", None):
        co.lexicon = load_noun_lexicon(_require(args.nouns, "--nouns file"))
    if mode == "scene" and co.caption_corpus is not None and co.table is not None:
        offsets = co.store.offsets if co.store is not None else None
        co.caption_index = build_caption_index(co.caption_corpus, co.table, offsets)
    if mode == "object" and getattr(args, "synsets", None):
        synsets = load_synsets(_require(args.synsets, "--synsets file"))
        offsets = co.store.offsets if co.store is not None else None
        co.synset_index = build_synset_index(synsets, co.table, offsets) \
            if co.table is not None else None
    if need_text and not co.text_only and not co.paired:
        raise UsageError("no training text: pass --corpus and/or --captions")
    return co


# -- subcommands --------------------------------------------------------------


def cmd_make_toy_data(args) -> int:
    spec = ToySpec(vocab_size=args.vocab_size, n_concepts=args.n_concepts,
                   n_examples=args.n_examples, d_w=args.d_w, d_v=args.d_v,
                   grounding_strength=args.grounding_strength, seed=args.seed,
                   n_regions=args.n_regions,
                   n_fillers_per_caption=args.n_fillers_per_caption)
    paths = generate_grounded_corpus(spec, args.out)
    for field_name, value in sorted(asdict(paths).items()):
        print(f"{field_name}\t{value}")
    return 0


def cmd_build_index(args) -> int:
    table = load_word_vectors(_require(args.vectors, "--vectors file"))
    offsets = None
    if args.features:
        offsets = ImageFeatureStore(_require(args.features, "--features file")).offsets
    if args.kind == "caption":
        corpus = load_caption_corpus(_require(args.input, "--input file"))
        if not corpus:
            raise ValueError("no entries in caption file")
        index = build_caption_index(corpus, table, offsets)
    else:
        synsets = load_synsets(_require(args.input, "--input file"))
        if not synsets:
            raise ValueError("no entries in synset file")
        index = build_synset_index(synsets, table, offsets)
    save_index(index, args.out)
    print(f"indexed {len(index.items)} keys ({index.skipped} degenerate skipped) -> {args.out}")
    return 0


def cmd_associate(args) -> int:
    table = load_word_vectors(_require(args.vectors, "--vectors file"))
    index = lexicon = captions = None
    if args.strategy in ("scene", "object"):
        index = load_index(_require(args.index, "--index file"))
    if args.strategy == "object":
        lexicon = load_noun_lexicon(_require(args.nouns, "--nouns file"))
    if args.strategy == "keyword":
        captions = load_caption_corpus(_require(args.captions, "--captions file"))
    if args.queries == "-":
        lines = [line.rstrip("\n") for line in sys.stdin]
    else:
        with open(_require(args.queries, "--queries file"), encoding="utf-8") as fh:
            lines = [line.rstrip("\n") for line in fh]

    out = open(args.out, "w", encoding="utf-8") if args.out != "-" else sys.stdout
    try:
        for query in lines:
            record = {"query": query, "strategy": args.strategy, "items": []}
            try:
                if args.strategy == "scene":
                    assoc = associate_scene(query, index, table, args.k,
                                            threads=args.threads)
                elif args.strategy == "object":
                    assoc = associate_object(query, index, table, lexicon, args.k,
                                             min(args.kappa, args.k),
                                             seed=args.seed, threads=args.threads)
                else:
                    assoc = associate_keyword_baseline(query, captions, args.k,
                                                       table=table)
                if assoc.is_empty:
                    record["reason"] = "degenerate query: no usable tokens"
                else:
                    record["items"] = [
                        {"id": it.image_id, "rank": it.rank,
                         "similarity": float(it.similarity)}
                        for it in assoc.items]
            except ValueError as exc:
                record["reason"] = str(exc)
            out.write(json.dumps(record, sort_keys=True) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _model_config(cfg: RunConfig, vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, d=cfg.d, d_v=cfg.d_v,
                       n_layers_text=cfg.n_layers_text,
                       n_layers_cross=cfg.n_layers_cross, n_heads=cfg.n_heads,
                       max_len=cfg.max_len, k_max=cfg.k_max,
                       n_regions=cfg.n_regions, mask_rate=cfg.mask_rate,
                       p_norm=cfg.p_norm, l1_coeff=cfg.l1_coeff)


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(batch_size=cfg.batch_size, lr=cfg.lr,
                       max_epochs=cfg.max_epochs, max_steps=cfg.max_steps,
                       seed=cfg.seed, mix_ratio=cfg.mix_ratio,
                       eval_every=cfg.eval_every, patience=cfg.patience,
                       val_fraction=cfg.val_fraction, kappa=cfg.kappa)


def cmd_pretrain(args) -> int:
    cfg = RunConfig(args)
    strategy = Strategy(args.strategy, k=cfg.k)
    mode = strategy_visual_mode(strategy.name)
    corpora = _load_corpora(args, cfg, mode, need_text=True)
    model = CrossModalModel(_model_config(cfg, len(corpora.vocab)), seed=cfg.seed)
    cache = AssociationCache()
    model, metrics = pretrain(strategy, corpora, model, _train_config(cfg),
                              cache=cache, threads=cfg.threads)
    save_checkpoint(model, args.out_model)
    if args.metrics:
        write_metrics_csv(metrics, args.metrics)
    vals = [row for row in metrics if row[1] == "val"]
    if vals:
        step, _split, metric, value = vals[-1]
        print(f"{strategy.name}\tstep {step}\t{metric} {value!r}")
    print(f"saved {args.out_model}")
    return 0


def cmd_eval_ppl(args) -> int:
    cfg = RunConfig(args)
    model = load_checkpoint(_require(args.model, "--model file"))
    strategy = Strategy(args.strategy, k=cfg.k)
    mode = strategy_visual_mode(strategy.name)
    corpora = _load_corpora(args, cfg, mode, need_text=False)
    if mode == "paired":
        examples = corpora.paired
    else:
        examples = corpora.text_only or [text for _id, text in corpora.paired]
    if not examples:
        raise UsageError("no evaluation text: pass --corpus or --captions")
    cache = AssociationCache()
    ppl = evaluate_perplexity(model, examples, corpora.vocab, seed=cfg.seed,
                              mode=mode, corpora=corpora, k=cfg.k, kappa=cfg.kappa,
                              batch_size=cfg.batch_size, cache=cache,
                              threads=cfg.threads)
    print(f"{strategy.name}\t{ppl!r}")
    return 0


def cmd_finetune(args) -> int:
    cfg = RunConfig(args)
    model = load_checkpoint(_require(args.model, "--model file"))
    task = load_task_file(_require(args.task, "--task file"))
    eval_examples = None
    if args.eval_task:
        eval_examples = load_task_file(_require(args.eval_task, "--eval-task file")).examples
    strategy = Strategy(args.strategy, k=cfg.k)
    mode = strategy_visual_mode(strategy.name)
    corpora = _load_corpora(args, cfg, mode, need_text=False)
    cache = AssociationCache()
    report = finetune(model, task, strategy, _train_config(cfg), corpora=corpora,
                      eval_examples=eval_examples, n_runs=cfg.runs, cache=cache,
                      threads=cfg.threads)
    blob = json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n"
    with open(args.out_report, "w", encoding="utf-8") as fh:
        fh.write(blob)
    print(f"{strategy.name}\t{task.metric}\tmedian {report.median!r}")
    print(f"saved {args.out_report}")
    return 0


# -- parser -------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; flags override it")
    for key, (typ, _default) in CONFIG_KEYS.items():
        flag = "--" + key.replace("_", "-")
        p.add_argument(flag, type=typ, default=None, dest=key)


def _add_corpora_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--corpus", help="text-only corpus, one example per line")
    p.add_argument("--captions", help="image_id<TAB>caption TSV")
    p.add_argument("--features", help="binary region-feature store")
    p.add_argument("--vectors", help="word-vector file")
    p.add_argument("--synsets", help="synset TSV for object association")
    p.add_argument("--nouns", help="noun lexicon for object association")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groundlm",
        description="Grounded language-model pretraining strategies on desk-scale corpora.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-data", help="generate a synthetic grounded corpus bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-size", type=int, default=200)
    p.add_argument("--n-concepts", type=int, default=96)
    p.add_argument("--n-examples", type=int, default=2000)
    p.add_argument("--d-w", type=int, default=64)
    p.add_argument("--d-v", type=int, default=64)
    p.add_argument("--grounding-strength", type=float, default=1.0)
    p.add_argument("--n-regions", type=int, default=1)
    p.add_argument("--n-fillers-per-caption", type=int, default=3)
    p.set_defaults(func=cmd_make_toy_data)

    p = sub.add_parser("build-index", help="build and save an image-key index")
    p.add_argument("--kind", choices=("caption", "synset"), required=True)
    p.add_argument("--input", required=True, help="caption or synset TSV")
    p.add_argument("--vectors", required=True, help="word-vector file")
    p.add_argument("--features", help="feature store, wires payload offsets")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("associate", help="retrieve images for query lines as JSON")
    p.add_argument("--strategy", choices=("scene", "object", "keyword"), required=True)
    p.add_argument("--queries", default="-", help="query file, - for stdin")
    p.add_argument("--index", help="VIDX file (scene/object)")
    p.add_argument("--vectors", required=True)
    p.add_argument("--nouns", help="noun lexicon (object)")
    p.add_argument("--captions", help="caption TSV (keyword)")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--kappa", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default="-", help="output path, - for stdout")
    p.set_defaults(func=cmd_associate)

    for name, func, extra in (
            ("pretrain", cmd_pretrain, "train one strategy, save checkpoint + metrics"),
            ("eval-ppl", cmd_eval_ppl, "masked-LM perplexity of a checkpoint"),
            ("finetune", cmd_finetune, "8-run downstream probe from a checkpoint")):
        p = sub.add_parser(name, help=extra, epilog=_CONFIG_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--strategy", choices=STRATEGY_NAMES, required=True)
        _add_corpora_flags(p)
        _add_config_flags(p)
        if name == "pretrain":
            p.add_argument("--out-model", required=True)
            p.add_argument("--metrics", help="write step,split,metric,value CSV here")
        else:
            p.add_argument("--model", required=True, help="checkpoint file")
        if name == "finetune":
            p.add_argument("--task", required=True, help="task TSV with metric header")
            p.add_argument("--eval-task", help="held-out task TSV; default splits --task")
            p.add_argument("--out-report", required=True, help="JSON report path")
        p.set_defaults(func=func)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
