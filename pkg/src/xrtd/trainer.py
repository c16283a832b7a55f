"""Joint generator/discriminator training loop.

One Adam optimizer updates both sub-models; each step consumes one
monolingual batch and one translation-pair batch so every step sees all four
loss terms. Checkpoints capture parameters, optimizer moments, and the rng
state, so a resumed run reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from . import serialize
from .corpus import Corpus, CorpusStats, language_sampling_probs
from .model import ModelConfig, ModelPair, ModelParams, init_model_pair
from .objectives import build_masked_batch, joint_loss, wrap_mono, wrap_pair
from .tensor import Tensor, backward, zero_grads

METRICS_COLUMNS = ["step", "loss_mlm", "loss_tlm", "loss_mrtd", "loss_trtd",
                   "disc_accuracy", "lr", "loss_total"]


class DivergenceError(RuntimeError):
    """Raised when the total loss stays above 10x its initial value."""


@dataclass
class OptimConfig:
    lr_peak: float = 5e-4
    warmup_steps: int = 100
    total_steps: int = 2000
    adam_betas: Tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-6
    grad_clip: float = 2.0
    weight_decay: float = 0.01
    lam: float = 50.0
    decay_gate_params: bool = False

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        for name in ("lr_peak", "adam_eps", "grad_clip", "lam"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def lr_at(step: int, config: OptimConfig) -> float:
    """Linear ramp to lr_peak over warmup, then linear decay to 0."""
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    if step <= config.warmup_steps:
        if config.warmup_steps == 0:
            return config.lr_peak
        return config.lr_peak * step / config.warmup_steps
    span = config.total_steps - config.warmup_steps
    return config.lr_peak * (config.total_steps - step) / span


def _decays(name: str, decay_gate_tables: bool) -> bool:
    """Decoupled weight decay applies to weight matrices only."""
    base = name.split(".")[-1]
    if base in ("mlm_bias", "rtd_b", "b", "g", "bq", "bk", "bv", "bo",
                "b1", "b2", "gate_w"):
        return False
    if ".ln" in name or "final_ln" in name:
        return False
    if not decay_gate_tables and base in ("d_table", "gate_u", "gate_v"):
        return False
    return True


class Adam:
    """Adam with bias correction, global-norm clipping, decoupled decay.

    Update: p -= lr * m_hat / (sqrt(v_hat) + eps), with clipping applied to
    the concatenated gradient before the moment updates and decay applied
    directly to eligible parameters.
    """

    def __init__(self, params: Dict[str, Tensor], config: OptimConfig):
        self.params = dict(params)
        self.config = config
        self.t = 0
        self.m = {k: np.zeros_like(p.data, dtype=np.float64)
                  for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data, dtype=np.float64)
                  for k, p in self.params.items()}

    def step(self, lr: float) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        cfg = self.config
        grads: Dict[str, np.ndarray] = {}
        sq_sum = 0.0
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise RuntimeError(f"non-finite gradient in parameter {name!r}")
            g = g.astype(np.float64)
            grads[name] = g
            sq_sum += float((g * g).sum())
        norm = math.sqrt(sq_sum)
        scale = cfg.grad_clip / norm if norm > cfg.grad_clip else 1.0
        self.t += 1
        b1, b2 = cfg.adam_betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name] * scale
            if cfg.weight_decay > 0 and _decays(name, cfg.decay_gate_params):
                p.data = (p.data - lr * cfg.weight_decay * p.data).astype(p.data.dtype)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + cfg.adam_eps)
            p.data = (p.data - update).astype(p.data.dtype)
        return norm

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out["m/" + name] = self.m[name]
            out["v/" + name] = self.v[name]
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], t: int) -> None:
        for name in self.params:
            self.m[name] = arrays["m/" + name].copy()
            self.v[name] = arrays["v/" + name].copy()
        self.t = t


@dataclass
class RunSettings:
    token_budget: int = 512
    mask_ratio: float = 0.15
    use_trtd: bool = True
    checkpoint_every: int = 1000
    alpha: float = 0.7
    sample_mode: str = "sample"


def _mono_pools(corpus: Corpus) -> Dict[str, List[List[int]]]:
    return {lang: [wrap_mono(ids) for ids in seqs]
            for lang, seqs in corpus.mono.items()}


def _pair_pools(corpus: Corpus) -> Dict[str, List[Tuple[List[int], int]]]:
    return {lang: [wrap_pair(e, f) for e, f in pairs]
            for lang, pairs in corpus.parallel.items()}


def _draw(pools: Dict[str, list], probs: np.ndarray, langs: List[str],
          budget: int, rng: np.random.Generator):
    """Fill one batch: language per p_j, sequence uniform within language."""
    items, languages, used = [], [], 0
    while True:
        lang = langs[rng.choice(len(langs), p=probs)]
        pool = pools[lang]
        item = pool[rng.integers(len(pool))]
        size = len(item[0]) if isinstance(item, tuple) else len(item)
        if items and used + size > budget:
            return items, languages
        items.append(item)
        languages.append(lang)
        used += size
        if used >= budget:
            return items, languages


def draw_mono_batch(pools, probs, langs, budget, rng, mask_ratio):
    seqs, languages = _draw(pools, probs, langs, budget, rng)
    return build_masked_batch(seqs, languages, mask_ratio, rng)


def draw_pair_batch(pools, probs, langs, budget, rng, mask_ratio):
    items, languages = _draw(pools, probs, langs, budget, rng)
    seqs = [ids for ids, _ in items]
    bounds = [b for _, b in items]
    return build_masked_batch(seqs, languages, mask_ratio, rng, boundaries=bounds)


def save_checkpoint(path: str, models: ModelPair, optimizer: Adam,
                    rng: np.random.Generator, step: int, meta: dict) -> None:
    """Checkpoint directory: config.json, params.bin, optim.bin, rng.json."""
    os.makedirs(path, exist_ok=True)
    config = {
        "generator": models.generator.config.to_dict(),
        "discriminator": models.discriminator.config.to_dict(),
        "share_embeddings": models.share_embeddings,
        "optim": asdict(optimizer.config),
        "step": step,
        "meta": meta,
    }
    with open(os.path.join(path, "config.json"), "w") as fh:
        json.dump(config, fh, indent=2)
    named = models.all_parameters()
    serialize.save_arrays(os.path.join(path, "params.bin"),
                          {k: t.data for k, t in named.items()})
    serialize.save_arrays(os.path.join(path, "optim.bin"),
                          optimizer.state_arrays())
    with open(os.path.join(path, "rng.json"), "w") as fh:
        json.dump(rng.bit_generator.state, fh)


def load_checkpoint(path: str):
    """Returns (models, optimizer, rng, step, meta)."""
    with open(os.path.join(path, "config.json")) as fh:
        config = json.load(fh)
    gen_cfg = ModelConfig(**config["generator"])
    disc_cfg = ModelConfig(**config["discriminator"])
    models = init_model_pair(gen_cfg, disc_cfg, seed=0,
                             share_embeddings=config["share_embeddings"])
    named = models.all_parameters()
    arrays = serialize.load_arrays(os.path.join(path, "params.bin"))
    for name, t in named.items():
        t.data = arrays[name].astype(t.data.dtype)
    optim_cfg = OptimConfig(**{**config["optim"],
                               "adam_betas": tuple(config["optim"]["adam_betas"])})
    optimizer = Adam(named, optim_cfg)
    optimizer.load_state_arrays(
        serialize.load_arrays(os.path.join(path, "optim.bin")), config["step"])
    rng = np.random.default_rng()
    with open(os.path.join(path, "rng.json")) as fh:
        rng.bit_generator.state = json.load(fh)
    return models, optimizer, rng, config["step"], config.get("meta", {})


@dataclass
class TrainResult:
    final_checkpoint: str
    metrics_path: str
    history: List[dict]


def train(models: ModelPair, corpus: Corpus, optim_cfg: OptimConfig,
          out_dir: str, seed: int = 0, settings: RunSettings | None = None,
          resume: Tuple[Adam, np.random.Generator, int] | None = None) -> TrainResult:
    """Run the joint loop for optim_cfg.total_steps, logging metrics per step."""
    settings = settings or RunSettings()
    os.makedirs(out_dir, exist_ok=True)
    named = models.all_parameters()
    if resume is not None:
        optimizer, rng, start_step = resume
    else:
        optimizer, rng, start_step = Adam(named, optim_cfg), \
            np.random.default_rng(seed), 0

    mono_pools = _mono_pools(corpus)
    mono_stats = CorpusStats({l: len(p) for l, p in mono_pools.items()},
                             settings.alpha)
    mono_probs = language_sampling_probs(mono_stats)
    mono_langs = list(mono_stats.counts)
    pair_pools = _pair_pools(corpus)
    pair_probs = pair_langs = None
    if settings.use_trtd:
        pair_stats = CorpusStats({l: len(p) for l, p in pair_pools.items()},
                                 settings.alpha)
        pair_probs = language_sampling_probs(pair_stats)
        pair_langs = list(pair_stats.counts)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    history: List[dict] = []
    initial_total = None
    diverged_streak = 0
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for step in range(start_step, optim_cfg.total_steps):
            mono_batch = draw_mono_batch(mono_pools, mono_probs, mono_langs,
                                         settings.token_budget, rng,
                                         settings.mask_ratio)
            pair_batch = None
            if settings.use_trtd:
                pair_batch = draw_pair_batch(pair_pools, pair_probs, pair_langs,
                                             settings.token_budget, rng,
                                             settings.mask_ratio)
            total, report = joint_loss(mono_batch, pair_batch, models,
                                       optim_cfg.lam, rng,
                                       mode=settings.sample_mode,
                                       use_trtd=settings.use_trtd)
            zero_grads(named.values())
            backward(total)
            lr = lr_at(step + 1, optim_cfg)
            optimizer.step(lr)

            row = {"step": step, "loss_mlm": report["mlm"],
                   "loss_tlm": report["tlm"], "loss_mrtd": report["mrtd"],
                   "loss_trtd": report["trtd"],
                   "disc_accuracy": report["disc_accuracy"], "lr": lr,
                   "loss_total": report["total"]}
            writer.writerow([row[c] for c in METRICS_COLUMNS])
            history.append(row)

            if initial_total is None:
                initial_total = report["total"]
            diverged_streak = diverged_streak + 1 \
                if report["total"] > 10 * initial_total else 0
            if diverged_streak >= 50:
                raise DivergenceError(
                    f"loss above 10x initial for 50 steps at step {step}: "
                    f"total={report['total']:.3f} initial={initial_total:.3f}")

            if settings.checkpoint_every and \
                    (step + 1) % settings.checkpoint_every == 0 and \
                    (step + 1) < optim_cfg.total_steps:
                save_checkpoint(os.path.join(out_dir, f"ckpt_{step + 1}"),
                                models, optimizer, rng, step + 1,
                                {"settings": asdict(settings), "seed": seed})

    final = os.path.join(out_dir, "ckpt_final")
    save_checkpoint(final, models, optimizer, rng, optim_cfg.total_steps,
                    {"settings": asdict(settings), "seed": seed})
    return TrainResult(final, metrics_path, history)


def heldout_disc_accuracy(models: ModelPair, corpus: Corpus, seed: int,
                          n_batches: int = 10, token_budget: int = 512,
                          mask_ratio: float = 0.15, alpha: float = 0.7,
                          use_trtd: bool = True) -> float:
    """Replaced-token detection accuracy on batches drawn from `corpus`."""
    rng = np.random.default_rng(seed)
    mono_pools = _mono_pools(corpus)
    stats = CorpusStats({l: len(p) for l, p in mono_pools.items()}, alpha)
    probs = language_sampling_probs(stats)
    langs = list(stats.counts)
    pair_pools = _pair_pools(corpus) if use_trtd else None
    if use_trtd:
        pair_stats = CorpusStats({l: len(p) for l, p in pair_pools.items()}, alpha)
        pair_probs = language_sampling_probs(pair_stats)
        pair_langs = list(pair_stats.counts)
    correct = total = 0
    for _ in range(n_batches):
        mono = draw_mono_batch(mono_pools, probs, langs, token_budget, rng,
                               mask_ratio)
        pair = None
        if use_trtd:
            pair = draw_pair_batch(pair_pools, pair_probs, pair_langs,
                                   token_budget, rng, mask_ratio)
        _, report = joint_loss(mono, pair, models, 1.0, rng,
                               use_trtd=use_trtd)
        # weight each batch by one; accuracy already position-weighted inside
        correct += report["disc_accuracy"]
        total += 1
    return correct / total
