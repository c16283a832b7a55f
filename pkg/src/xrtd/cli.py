"""Command-line entry points: synth, pretrain, eval, gradcheck.

All randomness flows from the single config seed. Every command writes a
fully merged copy of its configuration into the output directory, and exits
nonzero with a single-line machine-parseable error on contract violations.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from typing import Dict, List

import numpy as np

from . import align, corpus as corpus_mod, trainer
from .corpus import (Corpus, CorpusStats, LanguageSpec, ToyGrammar,
                     gold_alignment, synth_corpus, save_corpus_files,
                     transform_sentence)
from .gradcheck import check_joint_gradients
from .model import ModelConfig, init_model_pair
from .objectives import wrap_mono
from .trainer import OptimConfig, RunSettings, load_checkpoint, train

DEFAULT_CONFIG: Dict = {
    "seed": 0,
    "model": {
        "hidden_size": 64,
        "num_heads": 4,
        "gen_layers": 2,
        "disc_layers": 6,
        "ffn_size": 128,
        "max_rel_distance": 4,
        "init_range": 0.02,
        "share_embeddings": True,
    },
    "optim": {
        "lr_peak": 4e-3,
        "warmup_steps": 100,
        "total_steps": 2000,
        "adam_betas": [0.9, 0.98],
        "adam_eps": 1e-6,
        "grad_clip": 2.0,
        "weight_decay": 0.01,
        "lam": 50.0,
    },
    "data": {
        "languages": [
            {"lang": "en", "kind": "base", "seed": 0},
            {"lang": "pv", "kind": "permuted", "seed": 1},
        ],
        "n_sentences": 300,
        "token_budget": 512,
        "mask_ratio": 0.3,
        "alpha": 0.7,
        "checkpoint_every": 1000,
    },
    "eval": {
        "n_pairs": 300,
        "ot_eps": 0.1,
        "ot_iters": 200,
    },
}


class ConfigError(ValueError):
    pass


def _merge(defaults: Dict, overrides: Dict, path: str = "") -> Dict:
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict) and key != "languages":
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            merged[key] = _merge(defaults[key], value, where)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(path: str | None) -> Dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    with open(path) as fh:
        overrides = json.load(fh)
    return _merge(DEFAULT_CONFIG, overrides)


def _write_config_copy(config: Dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.json"), "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)


def _specs(config: Dict) -> List[LanguageSpec]:
    return [LanguageSpec(**entry) for entry in config["data"]["languages"]]


def _build_corpus(config: Dict, seed_offset: int = 0,
                  n_sentences: int | None = None) -> Corpus:
    rng = np.random.default_rng(config["seed"] + seed_offset)
    n = n_sentences if n_sentences is not None else config["data"]["n_sentences"]
    return synth_corpus(_specs(config), n, rng)


def _model_pair(config: Dict, vocab_size: int):
    m = config["model"]
    gen_cfg = ModelConfig(num_layers=m["gen_layers"], hidden_size=m["hidden_size"],
                          num_heads=m["num_heads"], ffn_size=m["ffn_size"],
                          vocab_size=vocab_size,
                          max_rel_distance=m["max_rel_distance"],
                          init_range=m["init_range"], role="generator")
    disc_cfg = ModelConfig(num_layers=m["disc_layers"], hidden_size=m["hidden_size"],
                           num_heads=m["num_heads"], ffn_size=m["ffn_size"],
                           vocab_size=vocab_size,
                           max_rel_distance=m["max_rel_distance"],
                           init_range=m["init_range"], role="discriminator")
    return init_model_pair(gen_cfg, disc_cfg, seed=config["seed"],
                           share_embeddings=m["share_embeddings"])


def cmd_synth(args) -> int:
    config = load_config(args.config)
    _write_config_copy(config, args.out)
    corpus = _build_corpus(config)
    written = save_corpus_files(corpus, args.out)
    for path in written:
        print(path)
    return 0


def cmd_pretrain(args) -> int:
    config = load_config(args.config)
    _write_config_copy(config, args.out)
    data = config["data"]
    optim_cfg = OptimConfig(
        lr_peak=config["optim"]["lr_peak"],
        warmup_steps=config["optim"]["warmup_steps"],
        total_steps=config["optim"]["total_steps"],
        adam_betas=tuple(config["optim"]["adam_betas"]),
        adam_eps=config["optim"]["adam_eps"],
        grad_clip=config["optim"]["grad_clip"],
        weight_decay=config["optim"]["weight_decay"],
        lam=config["optim"]["lam"])
    settings = RunSettings(token_budget=data["token_budget"],
                           mask_ratio=data["mask_ratio"],
                           use_trtd=not args.no_trtd,
                           checkpoint_every=data["checkpoint_every"],
                           alpha=data["alpha"])
    corpus = _build_corpus(config)
    if args.resume:
        models, optimizer, rng, step, _ = load_checkpoint(args.resume)
        result = train(models, corpus, optim_cfg, args.out,
                       seed=config["seed"], settings=settings,
                       resume=(optimizer, rng, step))
    else:
        models = _model_pair(config, len(corpus.vocab))
        result = train(models, corpus, optim_cfg, args.out,
                       seed=config["seed"], settings=settings)
    print(result.final_checkpoint)
    print(result.metrics_path)
    return 0


def _heldout_pairs(config: Dict, corpus: Corpus, lang: str,
                   n_pairs: int, seed_offset: int = 7777):
    """Fresh parallel sentences (never batched for training) for one language."""
    rng = np.random.default_rng(config["seed"] + seed_offset)
    grammar = ToyGrammar()
    spec = next(s for s in corpus.specs if s.lang == lang)
    pairs = []
    for _ in range(n_pairs):
        base = grammar.sample_sentence(rng)
        pairs.append((corpus.vocab.encode(base),
                      corpus.vocab.encode(transform_sentence(base, spec, grammar))))
    return pairs, spec


def cmd_eval(args) -> int:
    config = load_config(args.config)
    _write_config_copy(config, args.out)
    models, _, _, _, _ = load_checkpoint(args.checkpoint)
    corpus = _build_corpus(config)
    disc = models.discriminator
    n_pairs = config["eval"]["n_pairs"]
    ot_kwargs = {"eps": config["eval"]["ot_eps"],
                 "iters": config["eval"]["ot_iters"]}

    retrieval_rows, sweep_rows, aer_rows = [], [], []
    for spec in corpus.specs:
        if spec.kind == "base":
            continue
        pairs, _ = _heldout_pairs(config, corpus, spec.lang, n_pairs)
        src = [wrap_mono(e) for e, _ in pairs]
        tgt = [wrap_mono(f) for _, f in pairs]
        # per-layer accuracy averaged over both retrieval directions
        sweep_fwd = align.layer_sweep_retrieval(disc, src, tgt)
        sweep_bwd = align.layer_sweep_retrieval(disc, tgt, src)
        sweep = [(layer, (a + b) / 2)
                 for (layer, a), (_, b) in zip(sweep_fwd, sweep_bwd)]
        best_layer = max(sweep, key=lambda r: r[1])[0]
        for layer, acc in sweep:
            sweep_rows.append((spec.lang, layer, acc))
        fwd, _ = align.retrieve_acc1(
            align.RetrievalTask(src, tgt, best_layer, "en->xx"), disc)
        bwd, _ = align.retrieve_acc1(
            align.RetrievalTask(tgt, src, best_layer, "xx->en"), disc)
        retrieval_rows.append((spec.lang, "en->xx", best_layer, fwd))
        retrieval_rows.append((spec.lang, "xx->en", best_layer, bwd))

        gold = [(set(gold_alignment(spec, len(e))),) * 2 for e, _ in pairs[:50]]
        wrapped = [(wrap_mono(e), wrap_mono(f)) for e, f in pairs[:50]]
        aer_sweep = align.layer_sweep_aer(disc, wrapped, gold, **ot_kwargs)
        for layer, score in aer_sweep:
            aer_rows.append((spec.lang, layer, score))

    with open(os.path.join(args.out, "retrieval.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["language", "direction", "layer", "accuracy_at_1"])
        writer.writerows(retrieval_rows)
    with open(os.path.join(args.out, "layer_sweep_retrieval.csv"), "w",
              newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["language", "layer", "accuracy_at_1"])
        writer.writerows(sweep_rows)
    with open(os.path.join(args.out, "layer_sweep_aer.csv"), "w",
              newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["language", "layer", "aer"])
        writer.writerows(aer_rows)
    for row in retrieval_rows:
        print("retrieval", *row)
    return 0


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for i in range(args.configs):
        err = check_joint_gradients(args.seed + i)
        print(f"config {i}: max_rel_err={err:.3e}")
        worst = max(worst, err)
    print(f"overall max_rel_err={worst:.3e}")
    return 0 if worst < args.tolerance else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xrtd",
        description="Cross-lingual replaced-token-detection pretraining "
                    "on synthetic toy languages.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic corpus files")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pretrain", help="run joint pretraining")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True)
    p.add_argument("--no-trtd", action="store_true",
                   help="drop the translation-pair loss terms")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("eval", help="retrieval/alignment evaluation")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--configs", type=int, default=5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # single-line machine-parseable failure
        code = type(exc).__name__
        message = str(exc).replace("\n", " ")
        print(f'error code={code} msg="{message}"', file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
