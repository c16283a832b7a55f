"""Central finite-difference verification of analytic gradients.

Corruption sampling is frozen before checking: the discriminator terms are
evaluated on fixed corrupted batches, matching the stop-gradient semantics
of the analytic graph (no gradient flows through the sampling step).
"""

from __future__ import annotations

from typing import Callable, Dict, Tuple

import numpy as np

from .model import ModelConfig, ModelPair, init_model_pair
from .objectives import (CorruptedBatch, MaskedBatch, build_masked_batch,
                         discriminator_loss_rtd, generator_loss_mlm,
                         generator_loss_tlm, sample_corruption, wrap_mono,
                         wrap_pair)
from .tensor import Tensor, backward, using_dtype, zero_grads


def finite_difference_check(loss_fn: Callable[[], Tensor],
                            params: Dict[str, Tensor], step: float = 1e-5,
                            coords_per_param: int | None = 8,
                            seed: int = 0) -> Tuple[float, Dict[str, float]]:
    """Max relative error between analytic and central-difference gradients.

    `loss_fn` rebuilds the scalar loss from the current parameter values.
    For large tensors only `coords_per_param` coordinates are probed (small
    tensors, including all gate parameters, are probed fully).
    """
    rng = np.random.default_rng(seed)
    zero_grads(params.values())
    loss0 = loss_fn()
    backward(loss0)
    analytic = {k: (p.grad.copy() if p.grad is not None else
                    np.zeros_like(p.data)) for k, p in params.items()}
    # central differences cannot resolve below roundoff on the loss itself;
    # differences inside this band (e.g. exactly-zero gradients) are noise
    eps = np.finfo(np.float64).eps
    atol = 32 * eps * max(1.0, abs(loss0.item())) / step
    worst = 0.0
    per_param: Dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        size = flat.size
        if coords_per_param is None or size <= coords_per_param:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=coords_per_param, replace=False)
        err = 0.0
        for c in coords:
            keep = flat[c]
            flat[c] = keep + step
            up = loss_fn().item()
            flat[c] = keep - step
            down = loss_fn().item()
            flat[c] = keep
            numeric = (up - down) / (2 * step)
            a = float(analytic[name].reshape(-1)[c])
            if abs(a - numeric) <= atol:
                continue
            err = max(err, abs(a - numeric) / max(abs(a), abs(numeric), 1e-6))
        per_param[name] = err
        worst = max(worst, err)
    return worst, per_param


def _random_batches(vocab_size: int, rng: np.random.Generator,
                    mask_ratio: float = 0.3):
    def sentence():
        return [int(rng.integers(5, vocab_size))
                for _ in range(int(rng.integers(4, 8)))]

    mono = build_masked_batch(
        [wrap_mono(sentence()) for _ in range(2)], ["a", "b"], mask_ratio, rng)
    pairs = [wrap_pair(sentence(), sentence()) for _ in range(2)]
    pair = build_masked_batch([p[0] for p in pairs], ["b", "b"], mask_ratio,
                              rng, boundaries=[p[1] for p in pairs])
    return mono, pair


def frozen_joint_loss(mono: MaskedBatch, pair: MaskedBatch,
                      corrupt_mono: CorruptedBatch,
                      corrupt_pair: CorruptedBatch,
                      models: ModelPair, lam: float) -> Tensor:
    loss_mlm, _ = generator_loss_mlm(mono, models.generator)
    loss_tlm, _ = generator_loss_tlm(pair, models.generator)
    loss_mrtd, _, _ = discriminator_loss_rtd(corrupt_mono, models.discriminator)
    loss_trtd, _, _ = discriminator_loss_rtd(corrupt_pair, models.discriminator)
    return loss_mlm + loss_tlm + lam * (loss_mrtd + loss_trtd)


def check_joint_gradients(seed: int, coords_per_param: int | None = 6,
                          step: float = 1e-5) -> float:
    """Finite-difference check of the full joint loss on one random tiny model."""
    with using_dtype(np.float64):
        rng = np.random.default_rng(seed)
        vocab = int(rng.integers(10, 16))
        heads = int(rng.choice([1, 2]))
        d = heads * int(rng.choice([3, 4]))
        # init_range well above training scale: at 0.02 the gate gradients
        # fall below float64 finite-difference resolution
        gen_cfg = ModelConfig(num_layers=1, hidden_size=d, num_heads=heads,
                              ffn_size=int(rng.integers(4, 9)),
                              vocab_size=vocab, max_rel_distance=3,
                              init_range=0.4, role="generator")
        disc_cfg = ModelConfig(num_layers=2, hidden_size=d, num_heads=heads,
                               ffn_size=gen_cfg.ffn_size, vocab_size=vocab,
                               max_rel_distance=3, init_range=0.4,
                               role="discriminator")
        models = init_model_pair(gen_cfg, disc_cfg, seed=seed + 1)
        mono, pair = _random_batches(vocab, rng)
        _, mono_logits = generator_loss_mlm(mono, models.generator)
        _, pair_logits = generator_loss_tlm(pair, models.generator)
        corrupt_mono = sample_corruption(mono, mono_logits, rng)
        corrupt_pair = sample_corruption(pair, pair_logits, rng)

        def loss_fn():
            return frozen_joint_loss(mono, pair, corrupt_mono, corrupt_pair,
                                     models, lam=2.0)

        worst, _ = finite_difference_check(loss_fn, models.all_parameters(),
                                           step=step,
                                           coords_per_param=coords_per_param,
                                           seed=seed)
        return worst
