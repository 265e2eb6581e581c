"""Command-line entry point: ``kgicl <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from typing import Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dataset import Dataset, load_dataset
from .evaluation import evaluate, export_prompt_similarity
from .kg import parse_relation
from .model import KGICLModel, Query
from .prompts import (CACHE_FILE, DEFAULT_FACT_CAP, VARIANTS, PromptCache, load_prompt_caches,
                      save_prompt_caches)
from .synthetic import make_synthetic_kg
from .training import TrainConfig, finetune, pretrain, prepare

log = logging.getLogger("kgicl")


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


# RunConfig: TrainConfig fields plus an optional output directory
RUN_CONFIG_KEYS = {f.name for f in fields(TrainConfig)} | {"output_dir"}


def load_run_config(path: str) -> tuple[TrainConfig, Optional[str]]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise CLIError("config must be a JSON object")
    unknown = sorted(set(doc) - RUN_CONFIG_KEYS)
    if unknown:
        raise CLIError(f"unknown config keys: {', '.join(unknown)}")
    base = os.path.dirname(os.path.abspath(path))
    out_dir = doc.pop("output_dir", None)
    if "sources" in doc:
        doc["sources"] = [s if os.path.isabs(s) else os.path.join(base, s) for s in doc["sources"]]
    cfg = TrainConfig(**doc)
    if cfg.prompt_variant not in VARIANTS:
        raise CLIError(f"prompt_variant must be one of {VARIANTS}")
    return cfg, out_dir


def train_config_of(ckpt: Checkpoint) -> TrainConfig:
    saved = ckpt.meta.get("train", {})
    return TrainConfig(**{k: v for k, v in saved.items() if k in TrainConfig.__dataclass_fields__})


def eval_caches(data: Dataset, cfg: TrainConfig, cache_path: Optional[str] = None) -> dict[str, PromptCache]:
    path = cache_path or os.path.join(data.path, CACHE_FILE)
    if os.path.isfile(path):
        caches = load_prompt_caches(path)
        name = "inference_graph" if data.inductive else "train"
        c = caches.get(name)
        if c is not None and c.matches(cfg.k, cfg.shots, cfg.seed, cfg.prompt_variant, cfg.fact_cap):
            log.info("reusing prompt cache %s", path)
            return caches
        log.info("prompt cache %s does not match run settings; rebuilding in memory", path)
    return {}


def cmd_preprocess(args) -> int:
    data = load_dataset(args.data)
    graphs = {"train_graph": data.train_kg, "inference_graph": data.eval_kg} if data.inductive \
        else {"train": data.train_kg}
    caches = {name: PromptCache.build(kg, args.k, args.shots, args.seed, args.variant, args.cap)
              for name, kg in graphs.items()}
    out = args.out or args.data
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, CACHE_FILE)
    save_prompt_caches(caches, path)
    log.info("wrote prompt cache %s (seed %d)", path, args.seed)
    return 0


def cmd_pretrain(args) -> int:
    cfg, out_dir = load_run_config(args.config)
    out = args.out or out_dir
    if not out:
        raise CLIError("pretrain needs --out or output_dir in the config")
    log.info("pretrain seed %d sources %s", cfg.seed, cfg.sources)
    ckpt, history = pretrain(cfg)
    save_checkpoint(ckpt, out)
    log.info("saved checkpoint %s (best epoch %s)", out, history.get("best_epoch"))
    return 0


def cmd_finetune(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    new, _ = finetune(ckpt, data, args.epochs, train_config_of(ckpt))
    save_checkpoint(new, args.out)
    return 0


def _eval_setup(args):
    ckpt = load_checkpoint(args.checkpoint)
    cfg = train_config_of(ckpt)
    if getattr(args, "shots", None):
        cfg.shots = args.shots
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    data = load_dataset(args.data)
    prep = prepare(data, cfg, eval_caches(data, cfg, getattr(args, "cache", None)))
    return KGICLModel(ckpt.config, ckpt.params), cfg, data, prep


def cmd_eval(args) -> int:
    model, cfg, data, prep = _eval_setup(args)
    rep = evaluate(model, data.eval_kg, data.eval_vocab, prep.eval_cache, data.split(args.split),
                   data.filters, data.name, args.split, cfg.batch_size, cfg.seed)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write(rep.records_csv())
    agg_path = args.aggregate or os.path.splitext(args.out)[0] + "_aggregate.csv"
    with open(agg_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(rep.aggregate_csv())
    agg = rep.aggregates()[data.name]
    print(f"{data.name}\tmrr={agg['mrr']:.4f}\thits10={agg['hits10']:.4f}\tqueries={agg['num_queries']}"
          f"\tunrankable={rep.unrankable.get(data.name, 0)}")
    return 0


def cmd_predict(args) -> int:
    model, cfg, data, prep = _eval_setup(args)
    vocab, kg = data.eval_vocab, data.eval_kg
    s = vocab.entity(args.head)
    q = parse_relation(vocab, args.relation)
    if not prep.eval_cache.has(q):
        raise CLIError(f"relation {args.relation!r} has no facts in the message graph")
    from .autodiff.tape import Tape
    scores, _ = model.score(Tape(), kg, [Query(s, q)], prep.eval_cache.prompts,
                            rng=np.random.default_rng(cfg.seed))
    row = scores.data[0]
    order = np.argsort(-row, kind="stable")[:max(args.topk, 0)]
    for e in order:
        print(f"{vocab.entities[e]}\t{row[e]:.6f}")
    return 0


def cmd_gen_synth(args) -> int:
    make_synthetic_kg(args.out, args.entities, args.noise, args.seed)
    return 0


def cmd_export_prompt_sim(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = train_config_of(ckpt)
    model = KGICLModel(ckpt.config, ckpt.params)
    sides = []
    for path in (args.data_a, args.data_b):
        data = load_dataset(path)
        prep = prepare(data, cfg, eval_caches(data, cfg))
        sides.append((data.eval_kg, data.eval_vocab, prep.eval_cache))
    text = export_prompt_similarity(model, sides[0], sides[1], args.relations_a, args.relations_b)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kgicl", description="In-context KG reasoning: preprocess, train, evaluate.")
    p.add_argument("--threads", type=int, default=None,
                   help="numeric threads (default: $KGICL_THREADS or all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("preprocess", help="build the prompt cache for a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--shots", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--variant", choices=VARIANTS, default="neighbor_and_path")
    s.add_argument("--cap", type=int, default=DEFAULT_FACT_CAP)
    s.add_argument("--out", default=None, help="output dir (default: the data dir)")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("pretrain", help="pre-train on the source datasets of a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int, default=5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="filtered MRR / Hits@10 over both query directions")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("valid", "test"), default="test")
    s.add_argument("--out", required=True, help="per-query report CSV")
    s.add_argument("--aggregate", default=None, help="aggregate CSV (default: <out>_aggregate.csv)")
    s.add_argument("--shots", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--cache", default=None, help="prompt cache file (default: <data>/prompt_cache.json)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="print the top-K answers of one query")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--head", required=True)
    s.add_argument("--relation", required=True, help="relation name; suffix ^-1 for the inverse")
    s.add_argument("--topk", type=int, default=10)
    s.add_argument("--shots", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gen-synth", help="write a synthetic composition-rule dataset")
    s.add_argument("--entities", type=int, default=20)
    s.add_argument("--noise", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_synth)

    s = sub.add_parser("export-prompt-sim", help="cosine similarities between prompt representations")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data-a", required=True)
    s.add_argument("--data-b", required=True)
    s.add_argument("--relations-a", nargs="*", default=None)
    s.add_argument("--relations-b", nargs="*", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_prompt_sim)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CLIError as e:
        print(json.dumps({"error": "usage", "message": str(e)}), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    threads = args.threads or int(os.environ.get("KGICL_THREADS", "0") or 0) or None
    try:
        if threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(threads):
                return args.func(args)
        return args.func(args)
    except Exception as e:  # one machine-parsable line per failure
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
