"""Masked/corrupted batch construction and the four pretraining losses.

Losses: masked language modeling (MLM) and its translation-pair variant (TLM)
for the generator; replaced token detection over single sentences (MRTD) and
concatenated translation pairs (TRTD) for the discriminator. The joint loss
is MLM + TLM + lambda * (MRTD + TRTD).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import IO, List, Sequence, Tuple

import numpy as np

from .model import ModelPair, ModelParams, encode, mlm_logits, rtd_logits
from .tensor import (Tensor, binary_cross_entropy_with_logits, gather_rows,
                     softmax_cross_entropy)

PAD, MASK, BOS, EOS, SEP = 0, 1, 2, 3, 4
SPECIAL_IDS = frozenset({PAD, MASK, BOS, EOS, SEP})


def wrap_mono(ids: Sequence[int]) -> List[int]:
    return [BOS, *ids, EOS]


def wrap_pair(e_ids: Sequence[int], f_ids: Sequence[int]) -> Tuple[List[int], int]:
    """Concatenate a translation pair into one input; returns (ids, boundary).

    Layout: BOS e EOS SEP f EOS. `boundary` indexes the first token of f.
    """
    ids = [BOS, *e_ids, EOS, SEP, *f_ids, EOS]
    return ids, len(e_ids) + 3


@dataclass
class MaskedBatch:
    original: np.ndarray                 # [B, n] int64, PAD-padded
    masked: np.ndarray                   # [B, n], mask positions -> MASK
    mask_positions: List[np.ndarray]     # sorted positions per sequence
    languages: List[str]
    segment_boundary: List[int] | None = None   # pairs only

    @property
    def pad_mask(self) -> np.ndarray:
        return self.original != PAD

    @property
    def eligible(self) -> np.ndarray:
        """Positions that are real, maskable content tokens."""
        mask = self.pad_mask.copy()
        for special in (MASK, BOS, EOS, SEP):
            mask &= self.original != special
        return mask


@dataclass
class CorruptedBatch:
    original: np.ndarray
    corrupt: np.ndarray
    labels: np.ndarray                   # [B, n], 1 = replaced
    provenance: List[Tuple[int, int, int]]   # (sequence, position, sampled id)
    languages: List[str]
    mask_positions: List[np.ndarray]

    @property
    def pad_mask(self) -> np.ndarray:
        return self.original != PAD

    @property
    def eligible(self) -> np.ndarray:
        mask = self.pad_mask.copy()
        for special in (MASK, BOS, EOS, SEP):
            mask &= self.original != special
        return mask


def select_mask_positions(ids: Sequence[int], mask_ratio: float,
                          rng: np.random.Generator,
                          lo: int = 0, hi: int | None = None) -> np.ndarray:
    """Uniform sample of positions to mask, never touching special tokens.

    `lo`/`hi` optionally restrict eligibility to a half-open span (used for
    the two segments of a translation pair).
    """
    hi = len(ids) if hi is None else hi
    eligible = np.array([p for p in range(lo, hi) if ids[p] not in SPECIAL_IDS],
                        dtype=np.int64)
    if eligible.size == 0:
        raise ValueError("no maskable positions in sequence")
    count = max(1, int(round(mask_ratio * eligible.size)))
    picked = rng.choice(eligible, size=count, replace=False)
    return np.sort(picked)


def build_masked_batch(seqs: List[List[int]], languages: List[str],
                       mask_ratio: float, rng: np.random.Generator,
                       boundaries: List[int] | None = None) -> MaskedBatch:
    """Pad sequences and select mask positions, per segment for pairs."""
    width = max(len(s) for s in seqs)
    original = np.full((len(seqs), width), PAD, dtype=np.int64)
    positions = []
    for b, seq in enumerate(seqs):
        original[b, :len(seq)] = seq
        if boundaries is None:
            positions.append(select_mask_positions(seq, mask_ratio, rng))
        else:
            m_e = select_mask_positions(seq, mask_ratio, rng, 0, boundaries[b])
            m_f = select_mask_positions(seq, mask_ratio, rng, boundaries[b])
            positions.append(np.concatenate([m_e, m_f]))
    masked = original.copy()
    for b, pos in enumerate(positions):
        masked[b, pos] = MASK
    return MaskedBatch(original, masked, positions, list(languages),
                       None if boundaries is None else list(boundaries))


def _mask_index(batch: MaskedBatch) -> Tuple[np.ndarray, np.ndarray]:
    b_idx = np.concatenate([np.full(len(p), b, dtype=np.int64)
                            for b, p in enumerate(batch.mask_positions)])
    p_idx = np.concatenate(batch.mask_positions).astype(np.int64)
    return b_idx, p_idx


def _generator_loss(batch: MaskedBatch, generator: ModelParams):
    states = encode(batch.masked, generator, pad_mask=batch.pad_mask)
    b_idx, p_idx = _mask_index(batch)
    rows = gather_rows(states[-1], b_idx, p_idx)
    logits = mlm_logits(rows, generator)
    targets = batch.original[b_idx, p_idx]
    loss = softmax_cross_entropy(logits, targets, reduction="sum")
    return loss, logits.data.copy(), targets


def generator_loss_mlm(batch: MaskedBatch, generator: ModelParams):
    """Summed negative log-likelihood at masked positions of single sentences.

    Returns (loss, logits) where logits are detached [num_masked, V] rows in
    batch order, retained for corruption sampling.
    """
    if batch.segment_boundary is not None:
        raise ValueError("MLM loss expects a monolingual batch")
    loss, logits, _ = _generator_loss(batch, generator)
    return loss, logits


def generator_loss_tlm(batch: MaskedBatch, generator: ModelParams):
    """MLM over a concatenated translation pair, masked in both segments."""
    if batch.segment_boundary is None:
        raise ValueError("TLM loss requires segment boundaries")
    loss, logits, _ = _generator_loss(batch, generator)
    return loss, logits


def sample_corruption(batch: MaskedBatch, generator_logits: np.ndarray,
                      rng: np.random.Generator,
                      mode: str = "sample") -> CorruptedBatch:
    """Replace masked positions with generator samples (stop-gradient).

    `generator_logits` holds one row per masked position in batch order. A
    sampled token equal to the original is labeled original.
    """
    if mode not in ("sample", "argmax"):
        raise ValueError(f"unknown corruption mode {mode!r}")
    b_idx, p_idx = _mask_index(batch)
    if generator_logits.shape[0] != b_idx.size:
        raise ValueError("logit rows do not cover all masked positions")
    if mode == "argmax":
        sampled = generator_logits.argmax(axis=1)
    else:
        # Gumbel-max: exact categorical sample from each softmax row
        noise = rng.gumbel(size=generator_logits.shape)
        sampled = (generator_logits.astype(np.float64) + noise).argmax(axis=1)
    corrupt = batch.original.copy()
    corrupt[b_idx, p_idx] = sampled
    labels = np.zeros_like(batch.original)
    labels[b_idx, p_idx] = (sampled != batch.original[b_idx, p_idx]).astype(np.int64)
    provenance = [(int(b), int(p), int(s)) for b, p, s in zip(b_idx, p_idx, sampled)]
    return CorruptedBatch(batch.original, corrupt, labels, provenance,
                          list(batch.languages),
                          [p.copy() for p in batch.mask_positions])


def discriminator_loss_rtd(corrupt: CorruptedBatch, discriminator: ModelParams,
                           include_special: bool = False):
    """Binary replaced-vs-original cross-entropy over all content positions.

    Special and pad positions are excluded by default (`include_special`
    restores the literal every-position sum). Returns (loss, accuracy, count).
    """
    states = encode(corrupt.corrupt, discriminator, pad_mask=corrupt.pad_mask)
    scored = corrupt.pad_mask if include_special else corrupt.eligible
    b_idx, p_idx = np.nonzero(scored)
    rows = gather_rows(states[-1], b_idx, p_idx)
    logits = rtd_logits(rows, discriminator)
    labels = corrupt.labels[b_idx, p_idx].astype(np.float64)
    loss = binary_cross_entropy_with_logits(logits, labels)
    predictions = (logits.data > 0).astype(np.int64)
    accuracy = float((predictions == corrupt.labels[b_idx, p_idx]).mean())
    return loss, accuracy, int(b_idx.size)


def joint_loss(mono: MaskedBatch, pair: MaskedBatch | None, models: ModelPair,
               lam: float, rng: np.random.Generator, mode: str = "sample",
               use_trtd: bool = True, include_special: bool = False):
    """Four-term joint objective; returns (total loss, report dict).

    With `use_trtd=False`, the translation-pair terms (TLM and TRTD) are
    dropped, leaving monolingual MLM + lambda * MRTD.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    loss_mlm, gen_logits = generator_loss_mlm(mono, models.generator)
    mono_corrupt = sample_corruption(mono, gen_logits, rng, mode)
    loss_mrtd, acc_m, n_m = discriminator_loss_rtd(
        mono_corrupt, models.discriminator, include_special)
    n_masked_mono = sum(len(p) for p in mono.mask_positions)

    report = {
        "mlm": loss_mlm.item(), "mrtd": loss_mrtd.item(),
        "mlm_per_token": loss_mlm.item() / max(1, n_masked_mono),
        "mrtd_per_token": loss_mrtd.item() / max(1, n_m),
    }
    total = loss_mlm + lam * loss_mrtd

    if use_trtd:
        if pair is None:
            raise ValueError("pair batch required unless use_trtd=False")
        loss_tlm, pair_logits = generator_loss_tlm(pair, models.generator)
        pair_corrupt = sample_corruption(pair, pair_logits, rng, mode)
        loss_trtd, acc_t, n_t = discriminator_loss_rtd(
            pair_corrupt, models.discriminator, include_special)
        n_masked_pair = sum(len(p) for p in pair.mask_positions)
        total = total + loss_tlm + lam * loss_trtd
        report.update({
            "tlm": loss_tlm.item(), "trtd": loss_trtd.item(),
            "tlm_per_token": loss_tlm.item() / max(1, n_masked_pair),
            "trtd_per_token": loss_trtd.item() / max(1, n_t),
            "disc_accuracy": (acc_m * n_m + acc_t * n_t) / max(1, n_m + n_t),
        })
    else:
        report.update({"tlm": 0.0, "trtd": 0.0, "tlm_per_token": 0.0,
                       "trtd_per_token": 0.0, "disc_accuracy": acc_m})
    report["total"] = total.item()
    return total, report


def dump_batch(masked: MaskedBatch, corrupt: CorruptedBatch, fh: IO[str]) -> None:
    """Write one tab-separated record per sequence for golden-file tests.

    Columns: language, original ids, masked ids, corrupt ids, labels
    (space-separated integers, padding included).
    """
    for b in range(masked.original.shape[0]):
        fields = [masked.languages[b]] + [
            " ".join(str(int(x)) for x in row)
            for row in (masked.original[b], masked.masked[b],
                        corrupt.corrupt[b], corrupt.labels[b])]
        fh.write("\t".join(fields) + "\n")
