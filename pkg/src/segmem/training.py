"""Outer-loop training: AdamW with cosine schedule and gradient clipping.

Deterministic by construction: batch seeds derive from the run seed and
step index, batches are single tensors (one reduction order), and the
optimizer walks leaves in a fixed order.  Any NaN/Inf during the forward
or backward pass aborts the run with a diagnostic.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig, echo_config, layer_spec, plan_for
from .model import ModelParams, build_model, loss_all_positions, loss_at_positions
from .tasks import Batch, evaluate, gen_batch
from .tensor import Tape, backprop


class TrainingDiverged(RuntimeError):
    pass


def cosine_lr(step: int, total: int, base: float, warmup: int, floor_frac: float = 0.05) -> float:
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    if total <= warmup:
        return base
    frac = (step - warmup) / max(1, total - warmup)
    floor = base * floor_frac
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * min(1.0, frac)))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float((np.asarray(g, dtype=np.float64) ** 2).sum())
    return math.sqrt(total)


class AdamW:
    """Decoupled-weight-decay Adam over named parameter leaves."""

    def __init__(self, leaves: dict[str, T.Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.leaves = leaves
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros(t.shape) for name, t in leaves.items()}
        self.v = {name: np.zeros(t.shape) for name, t in leaves.items()}

    def step(self, grads: dict[str, np.ndarray], lr_now: float | None = None) -> None:
        lr = self.lr if lr_now is None else lr_now
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name in sorted(self.leaves):
            p = self.leaves[name]
            g = np.asarray(grads[name], dtype=np.float64)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            new = np.asarray(p.data, dtype=np.float64) - lr * update
            # decay matrices only; norms, biases and gates stay undecayed
            if self.weight_decay and p.ndim >= 2:
                new -= lr * self.weight_decay * np.asarray(p.data, dtype=np.float64)
            p.data = new.astype(p.data.dtype)


@dataclass
class TrainReport:
    seed: int
    steps: int
    losses: list[float] = field(default_factory=list)
    eval_history: list[tuple[int, float]] = field(default_factory=list)
    final_accuracy: float = float("nan")
    wall_seconds: float = 0.0
    config_echo: str = ""


def _step_seed(run_seed: int, step: int) -> int:
    return (run_seed * 1_000_003 + step * 7_919 + 12_345) % (2**63 - 1)


def eval_seed(run_seed: int) -> int:
    return (run_seed * 1_000_003 + 999_331) % (2**63 - 1)


def _lm_batch(cfg: RunConfig, seed: int, corpus: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(seed)
    L = cfg.task.length + 1
    starts = rng.integers(0, len(corpus) - L, size=cfg.training.batch)
    return np.stack([corpus[s : s + L] for s in starts]).astype(np.int64)


def train_run(cfg: RunConfig, quiet: bool = True,
              log=None) -> tuple[TrainReport, ModelParams]:
    """Run one seeded training job; returns the report and final params."""
    tr = cfg.training
    spec = layer_spec(cfg)
    plan = plan_for(cfg, cfg.task.length)
    params = build_model(cfg.model.vocab, cfg.model.blocks, spec, cfg.seed,
                         tied=cfg.model.tied_head)
    leaves = dict(params.leaves())
    opt = AdamW(leaves, tr.lr, tr.beta1, tr.beta2, weight_decay=tr.weight_decay)
    report = TrainReport(seed=cfg.seed, steps=tr.steps, config_echo=echo_config(cfg))
    corpus = None
    if cfg.task.kind == "lm":
        with open(cfg.task.text, "rb") as f:
            corpus = np.frombuffer(f.read(), dtype=np.uint8)
    eval_batch = None
    if cfg.task.kind in ("mqar", "niah"):
        eval_batch = gen_batch(cfg, eval_seed(cfg.seed), tr.eval_batch)

    t0 = time.time()
    for step in range(tr.steps):
        lr_now = (cosine_lr(step, tr.steps, tr.lr, tr.warmup)
                  if tr.schedule == "cosine" else tr.lr)
        try:
            with Tape() as tape:
                for t in leaves.values():
                    tape.watch(t)
                if cfg.task.kind == "lm":
                    ids = _lm_batch(cfg, _step_seed(cfg.seed, step), corpus)
                    lm_plan = plan_for(cfg, cfg.task.length)
                    loss = loss_all_positions(ids, params, lm_plan)
                else:
                    batch = gen_batch(cfg, _step_seed(cfg.seed, step), tr.batch)
                    loss = loss_at_positions(
                        batch.tokens, batch.positions, batch.targets, params, plan
                    )
            loss_val = loss.item()
        except T.NumericalError as e:
            raise TrainingDiverged(
                f"NaN/Inf at step {step} (seed {cfg.seed}): {e}"
            ) from e
        if not math.isfinite(loss_val):
            raise TrainingDiverged(f"loss {loss_val} at step {step} (seed {cfg.seed})")
        grads = backprop(tape, loss)
        named = {name: grads[t.id].data for name, t in leaves.items()}
        if tr.clip > 0:
            norm = global_norm(named)
            if norm > tr.clip:
                s = tr.clip / norm
                named = {k: g * s for k, g in named.items()}
        opt.step(named, lr_now)
        report.losses.append(loss_val)
        if log is not None:
            log({"kind": "train_step", "step": step, "loss": loss_val, "lr": lr_now})
        if eval_batch is not None and tr.eval_every > 0 and (
            (step + 1) % tr.eval_every == 0 or step + 1 == tr.steps
        ):
            acc = evaluate(params, eval_batch, plan).accuracy
            report.eval_history.append((step + 1, acc))
            if log is not None:
                log({"kind": "eval", "step": step + 1, "accuracy": acc})
            if not quiet:
                print(f"step {step + 1:5d}  loss {loss_val:.4f}  acc {acc:.3f}")
        elif not quiet and (step + 1) % 20 == 0:
            print(f"step {step + 1:5d}  loss {loss_val:.4f}")
    if eval_batch is not None:
        report.final_accuracy = evaluate(params, eval_batch, plan).accuracy
    report.wall_seconds = time.time() - t0
    return report, params
