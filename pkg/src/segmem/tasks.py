"""Synthetic recall tasks and evaluation.

MQAR: interleaved key-value pairs at the start of the sequence, filler,
then queries; the model must emit each queried key's bound value at the
query position.  Keys are drawn without replacement from the low half of
the vocabulary, values (with replacement) from the high half, filler is
token 0.

Passkey NIAH: a random-filler haystack with one [marker, payload] needle
spliced at a seed-determined uniform position and a marker query at the
end; the model must emit the payload at the final position.

Generators are pure functions of (config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import infer
from .config import RunConfig
from .segmentation import SegmentPlan, boundaries


@dataclass(frozen=True)
class Batch:
    """One evaluation/training batch with answer supervision."""

    tokens: np.ndarray  # (B, L) int64
    positions: np.ndarray  # (B, n_answers) answer positions
    targets: np.ndarray  # (B, n_answers) expected tokens
    source_pos: np.ndarray  # (B, n_answers) where the answer was written


def mqar_split(vocab: int) -> tuple[int, int]:
    """Key ids are 1..n_keys, value ids n_keys+1..vocab-1, filler is 0."""
    n_keys = vocab // 2
    n_values = vocab - 1 - n_keys
    return n_keys, n_values


def gen_mqar(cfg: RunConfig, seed: int, batch: int) -> Batch:
    task = cfg.task
    L = task.length
    n_pairs = task.pairs
    n_queries = task.queries or n_pairs
    if 2 * n_pairs + n_queries > L:
        raise ValueError(
            f"{n_pairs} pairs + {n_queries} queries exceed sequence length {L}"
        )
    n_keys, n_values = mqar_split(cfg.model.vocab)
    if n_pairs > n_keys or n_queries > n_pairs:
        raise ValueError(
            f"need {n_pairs} distinct keys / {n_queries} queries, "
            f"vocabulary provides {n_keys}"
        )
    rng = np.random.default_rng(seed)
    tokens = np.zeros((batch, L), dtype=np.int64)
    positions = np.empty((batch, n_queries), dtype=np.int64)
    targets = np.empty((batch, n_queries), dtype=np.int64)
    source = np.empty((batch, n_queries), dtype=np.int64)
    q_start = L - n_queries
    for b in range(batch):
        keys = 1 + rng.permutation(n_keys)[:n_pairs]
        values = 1 + n_keys + rng.integers(0, n_values, size=n_pairs)
        tokens[b, 0 : 2 * n_pairs : 2] = keys
        tokens[b, 1 : 2 * n_pairs + 1 : 2] = values
        queried = rng.permutation(n_pairs)[:n_queries]
        tokens[b, q_start:] = keys[queried]
        positions[b] = np.arange(q_start, L)
        targets[b] = values[queried]
        source[b] = 2 * queried + 1
    return Batch(tokens, positions, targets, source)


def gen_niah(cfg: RunConfig, seed: int, batch: int, length: int | None = None) -> Batch:
    task = cfg.task
    L = length or task.length
    vocab = cfg.model.vocab
    marker = 1
    n_payload = task.payloads
    filler_lo = 2 + n_payload
    if filler_lo >= vocab:
        raise ValueError(f"vocab {vocab} too small for {n_payload} payload tokens")
    if L < 4:
        raise ValueError(f"sequence length {L} cannot hold needle plus query")
    rng = np.random.default_rng(seed)
    tokens = rng.integers(filler_lo, vocab, size=(batch, L)).astype(np.int64)
    pos = rng.integers(0, L - 2, size=batch)  # needle occupies pos, pos+1
    payload = 2 + rng.integers(0, n_payload, size=batch)
    rows = np.arange(batch)
    tokens[rows, pos] = marker
    tokens[rows, pos + 1] = payload
    tokens[:, L - 1] = marker
    return Batch(
        tokens,
        positions=np.full((batch, 1), L - 1, dtype=np.int64),
        targets=payload[:, None].astype(np.int64),
        source_pos=(pos + 1)[:, None].astype(np.int64),
    )


def gen_batch(cfg: RunConfig, seed: int, batch: int, length: int | None = None) -> Batch:
    if cfg.task.kind == "mqar":
        return gen_mqar(cfg, seed, batch)
    if cfg.task.kind == "niah":
        return gen_niah(cfg, seed, batch, length)
    raise ValueError(f"no generator for task kind {cfg.task.kind!r}")


@dataclass
class EvalReport:
    accuracy: float
    total: int
    correct: int
    by_segment: dict[int, tuple[int, int]]  # segment index -> (correct, total)

    def segment_accuracy(self, idx: int) -> float:
        c, n = self.by_segment[idx]
        return c / n


def evaluate(params, batch: Batch, plan: SegmentPlan) -> EvalReport:
    """Exact-match accuracy at the answer positions, split by the segment
    that held the answer's source token."""
    preds = infer.predictions_at(batch.tokens, batch.positions, params, plan)
    hits = preds == batch.targets
    ends = np.asarray(boundaries(plan))
    seg_of = np.searchsorted(ends, batch.source_pos + 1)  # 0-based segment
    by_segment: dict[int, tuple[int, int]] = {}
    for s in np.unique(seg_of):
        mask = seg_of == s
        by_segment[int(s) + 1] = (int(hits[mask].sum()), int(mask.sum()))
    return EvalReport(
        accuracy=float(hits.mean()),
        total=int(hits.size),
        correct=int(hits.sum()),
        by_segment=by_segment,
    )
