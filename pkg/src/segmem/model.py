"""Sequence model assembly around the cached-memory layer.

Each block projects the input stream into keys/values/queries/connectors
and per-token inner hyperparameters, walks the memory cache over the
sequence, aggregates retrievals per the configured variant, then applies a
post-layer residual + layer norm and a 2-layer GELU feed-forward with its
own residual.  Token embedding and an (untied by default) output head wrap
a stack of blocks.

Everything here runs on the tape, so outer-loop training differentiates
through the whole unrolled recurrence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cache as C
from . import tensor as T
from .instrument import FlopCounter
from .memory import InnerHyperparams, MemoryArch, MemoryModule, retrieve
from .segmentation import SegmentPlan, constant_plan, logarithmic_plan
from .tensor import Tensor

VARIANTS = ("none", "residual", "grm", "soup", "ssc", "loglinear++", "postmc")

# When set, linear `la` layers run as one fused scan op (numba-backed)
# instead of per-token cache primitives.  Both lanes compute the same
# function and the tests compare them; the modular lane remains the
# reference implementation.
FUSED_LA = True
_FUSED_MAX_SEGMENT = 256


class fused_disabled:
    """Context manager forcing the modular per-token lane."""

    def __enter__(self):
        global FUSED_LA
        self._saved = FUSED_LA
        FUSED_LA = False
        return self

    def __exit__(self, *exc):
        global FUSED_LA
        FUSED_LA = self._saved
        return False

# which inner-hyperparameter columns each memory kind consumes
_HP_COLS = {"eta": 0, "alpha": 1, "beta": 2, "swla_beta": 3, "swla_lambda": 4}
_HP_USED = {
    "la": (),
    "valueless": (),
    "swla": ("alpha", "swla_beta", "swla_lambda"),
    "dla": ("eta",),
    "titans": ("eta", "alpha", "beta"),
}


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one block's memory layer."""

    d: int
    memory_kind: str = "la"
    arch_kind: str = "linear"
    variant: str = "grm"
    mode: str = "checkpoint"
    k_top: int = 2
    pooling: str | None = None  # default: sum for ssc, mean otherwise
    u_source: str = "proj"  # 'proj' (x W_u) or 'query' (u = q)
    query_gate: bool = False  # retrieve with sigmoid(x W_q) instead of x W_q
    token_shift: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "loglinear++" and self.mode != "checkpoint":
            raise ValueError("loglinear++ requires checkpoint mode")

    @property
    def effective_pooling(self) -> str:
        if self.pooling is not None:
            return self.pooling
        return "sum" if self.variant == "ssc" else "mean"

    def arch(self) -> MemoryArch:
        return MemoryArch(self.arch_kind, self.d)

    def plan_for(self, length: int, chunk: int) -> SegmentPlan:
        if self.variant == "loglinear++":
            return logarithmic_plan(length)
        return constant_plan(length, chunk)


class BlockParams:
    """Trainable leaves of one block."""

    def __init__(self, spec: LayerSpec, rng: np.random.Generator):
        d = spec.d
        s = 1.0 / np.sqrt(d)
        self.spec = spec
        self.w_k = T.tensor(rng.normal(0.0, s, size=(d, d)))
        self.w_v = T.tensor(rng.normal(0.0, s, size=(d, d)))
        self.w_q = T.tensor(rng.normal(0.0, s, size=(d, d)))
        self.w_u = T.tensor(rng.normal(0.0, s, size=(d, d)))
        self.w_hp = T.tensor(np.zeros((d, 5)))
        self.ln_g = T.tensor(np.ones(d))
        self.ln_b = T.tensor(np.zeros(d))
        self.ff1 = T.tensor(rng.normal(0.0, s, size=(d, 4 * d)))
        self.ff2 = T.tensor(rng.normal(0.0, 1.0 / np.sqrt(4 * d), size=(4 * d, d)))
        # start as an even mix so the adjacent-token channel carries signal
        self.shift_mu = T.tensor(np.full(d, 0.5)) if spec.token_shift else None
        arch = spec.arch()
        if arch.kind == "linear":
            self.m0 = None
        else:
            self.m0 = tuple(
                T.tensor(rng.normal(0.0, 0.02, size=shape))
                for shape in arch.param_shapes()
            )

    def leaves(self):
        for name in ("w_k", "w_v", "w_q", "w_u", "w_hp", "ln_g", "ln_b", "ff1", "ff2"):
            yield name, getattr(self, name)
        if self.shift_mu is not None:
            yield "shift_mu", self.shift_mu
        if self.m0 is not None:
            for j, p in enumerate(self.m0):
                yield f"m0.{j}", p


class ModelParams:
    """Embedding table, block stack, output head."""

    def __init__(self, vocab: int, d: int, blocks: list[BlockParams],
                 rng: np.random.Generator, tied: bool = False):
        self.vocab = vocab
        self.d = d
        self.emb = T.tensor(rng.normal(0.0, 1.0, size=(vocab, d)))
        self.blocks = blocks
        self.tied = tied
        self.head = None if tied else T.tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, vocab)))

    def head_matrix(self) -> Tensor:
        return T.transpose(self.emb) if self.tied else self.head

    def leaves(self):
        yield "emb", self.emb
        if not self.tied:
            yield "head", self.head
        for i, b in enumerate(self.blocks):
            for name, t in b.leaves():
                yield f"block{i}.{name}", t


def build_model(vocab: int, n_blocks: int, spec: LayerSpec, seed: int,
                tied: bool = False) -> ModelParams:
    rng = np.random.default_rng(seed)
    blocks = [BlockParams(spec, rng) for _ in range(n_blocks)]
    return ModelParams(vocab, spec.d, blocks, rng, tied=tied)


def project(x: Tensor, block: BlockParams):
    """Per-token projections k, v, q, u plus squashed inner hyperparameters."""
    vec = x.ndim == 1
    xx = T.reshape(x, (1, x.shape[0])) if vec else x
    k = T.matmul(xx, block.w_k)
    v = T.matmul(xx, block.w_v)
    q = T.matmul(xx, block.w_q)
    u = T.matmul(xx, block.w_u)
    hp_raw = T.matmul(xx, block.w_hp)
    cols = {}
    for name, j in _HP_COLS.items():
        col = T.narrow(hp_raw, -1, j, 1)
        cols[name] = T.softplus(col) if name == "eta" else T.sigmoid(col)
    hp = InnerHyperparams(**cols)
    if vec:
        k, v, q, u = (T.reshape(t, (t.shape[-1],)) for t in (k, v, q, u))
    return k, v, q, u, hp


def _squashed_hp_sequence(X: Tensor, block: BlockParams, kind: str):
    """Squash the needed hyperparameter columns over the whole sequence."""
    used = _HP_USED[kind]
    if not used:
        return None
    raw = T.matmul(X, block.w_hp)
    out = {}
    for name in used:
        col = T.narrow(raw, -1, _HP_COLS[name], 1)
        out[name] = T.softplus(col) if name == "eta" else T.sigmoid(col)
    return out


def _hp_at(hp_seq, t: int) -> InnerHyperparams:
    if hp_seq is None:
        return InnerHyperparams()
    return InnerHyperparams(
        **{name: T.row_at(col, t, -2) for name, col in hp_seq.items()}
    )


def _token_shift(X: Tensor, mu: Tensor) -> Tensor:
    """x_t <- x_t + mu * (x_{t-1} - x_t), with a zero row before the start."""
    L = X.shape[-2]
    zero = T.zeros(X.shape[:-2] + (1, X.shape[-1]))
    prev = T.concat([zero, T.narrow(X, -2, 0, L - 1)], -2)
    return T.add(X, T.mul(mu, T.sub(prev, X)))


def mc_layer_forward(
    X: Tensor,
    block: BlockParams,
    plan: SegmentPlan,
    counter: FlopCounter | None = None,
    routing_freeze: C.RoutingFreeze | None = None,
) -> Tensor:
    """The memory layer alone: project, advance, aggregate, per token."""
    spec = block.spec
    batch = X.shape[0] if X.ndim == 3 else None
    L = X.shape[-2]
    if plan.total != L:
        raise T.ShapeError(f"plan covers {plan.total} tokens, sequence has {L}")
    if spec.token_shift:
        X = _token_shift(X, block.shift_mu)
    K = T.matmul(X, block.w_k)
    V = T.matmul(X, block.w_v)
    Q = T.matmul(X, block.w_q)
    variant = spec.variant
    need_u = variant in ("grm", "soup", "ssc", "loglinear++")
    U = None
    if need_u and spec.u_source == "proj":
        U = T.matmul(X, block.w_u)

    from . import fused

    if (
        FUSED_LA
        and fused.supports(spec)
        and routing_freeze is None
        and max(plan.lengths) <= _FUSED_MAX_SEGMENT
    ):
        return fused.fused_la_layer(
            K, V, Q, U if U is not None else Q, plan, spec.mode,
            spec.effective_pooling == "mean", variant, spec.k_top,
            counter=counter,
        )

    hp_seq = _squashed_hp_sequence(X, block, spec.memory_kind)
    module = MemoryModule(spec.memory_kind, spec.arch())

    if variant == "none":
        from .memory import initial_state

        state = initial_state(module.arch, block.m0, batch=batch,
                              with_momentum=module.needs_momentum)
        prev_kv = None
        ys = []
        for t in range(L):
            k = T.row_at(K, t, -2)
            v = T.row_at(V, t, -2)
            q = T.row_at(Q, t, -2)
            if spec.query_gate:
                q = T.sigmoid(q)
            state = module.step(state, k, v, _hp_at(hp_seq, t),
                                prev_kv=prev_kv if module.uses_window else None)
            prev_kv = (k, v)
            if counter is not None:
                counter.count_update(module.kind, module.arch)
                counter.count_retrieval(1, module.arch)
            y = retrieve(state, q)
            ys.append(T.reshape(y, y.shape[:-1] + (1, y.shape[-1])))
        return T.concat(ys, -2)

    mc = C.MemoryCache(
        module,
        plan,
        spec.mode,
        init_params=block.m0,
        pooling=spec.effective_pooling,
        batch=batch,
        counter=counter,
        routing_freeze=routing_freeze,
    )
    ys = []
    for t in range(L):
        k = T.row_at(K, t, -2)
        v = T.row_at(V, t, -2)
        q = T.row_at(Q, t, -2)
        if spec.query_gate:
            q = T.sigmoid(q)
        mc.advance(k, v, _hp_at(hp_seq, t))
        if need_u:
            u = T.row_at(U, t, -2) if spec.u_source == "proj" else q
        if variant == "residual":
            y = C.aggregate_residual(mc, q)
        elif variant in ("grm", "loglinear++"):
            y = C.aggregate_grm(mc, q, C.gate_weights(mc, u))
        elif variant == "soup":
            y = C.aggregate_soup(mc, q, C.gate_weights(mc, u))
        elif variant == "ssc":
            y = C.aggregate_ssc(mc, q, u, spec.k_top)
        else:  # postmc
            y = C.post_training_mc(mc, q)
        ys.append(T.reshape(y, y.shape[:-1] + (1, y.shape[-1])))
    return T.concat(ys, -2)


def block_forward(
    X: Tensor,
    block: BlockParams,
    plan: SegmentPlan,
    counter: FlopCounter | None = None,
    routing_freeze: C.RoutingFreeze | None = None,
) -> Tensor:
    """Memory layer, then residual + layer norm, then gated feed-forward."""
    Y = mc_layer_forward(X, block, plan, counter, routing_freeze)
    H = T.layer_norm(T.add(X, Y))
    H = T.add(T.mul(H, block.ln_g), block.ln_b)
    F = T.matmul(T.gelu(T.matmul(H, block.ff1)), block.ff2)
    return T.add(H, F)


def model_hidden(
    ids: np.ndarray,
    params: ModelParams,
    plan: SegmentPlan,
    counter: FlopCounter | None = None,
    routing_freeze: C.RoutingFreeze | None = None,
) -> Tensor:
    ids = np.asarray(ids)
    H = T.gather_rows(params.emb, ids)
    for b in params.blocks:
        H = block_forward(H, b, plan, counter, routing_freeze)
    return H


def model_forward(
    ids: np.ndarray,
    params: ModelParams,
    plan: SegmentPlan,
    counter: FlopCounter | None = None,
    routing_freeze: C.RoutingFreeze | None = None,
) -> Tensor:
    """Token ids -> logits, causal by construction."""
    H = model_hidden(ids, params, plan, counter, routing_freeze)
    return T.matmul(H, params.head_matrix())


def loss_at_positions(
    ids: np.ndarray,
    positions: np.ndarray,
    targets: np.ndarray,
    params: ModelParams,
    plan: SegmentPlan,
    routing_freeze: C.RoutingFreeze | None = None,
) -> Tensor:
    """Mean cross-entropy of the logits at the given answer positions."""
    H = model_hidden(ids, params, plan, routing_freeze=routing_freeze)
    Hsel = T.gather_axis(H, np.asarray(positions))
    logits = T.matmul(Hsel, params.head_matrix())
    lp = T.log_softmax(logits)
    tgt = np.asarray(targets)[..., None]
    picked = T.take_along_last(lp, tgt)
    return T.scale(T.mean_all(picked), -1.0)


def loss_all_positions(
    ids: np.ndarray,
    params: ModelParams,
    plan: SegmentPlan,
) -> Tensor:
    """Next-token cross-entropy over every position (toy LM objective)."""
    ids = np.asarray(ids)
    H = model_hidden(ids[:, :-1], params, plan)
    logits = T.matmul(H, params.head_matrix())
    lp = T.log_softmax(logits)
    picked = T.take_along_last(lp, ids[:, 1:][..., None])
    return T.scale(T.mean_all(picked), -1.0)
