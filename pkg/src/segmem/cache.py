"""The memory cache: boundary snapshots plus the aggregation strategies.

A ``MemoryCache`` walks one sequence under a segment plan.  Each
``advance`` applies the memory update rule to the online state and, when
the token closes a segment, appends an immutable snapshot entry.  In
checkpoint mode the online state keeps running; in independent-compressor
mode it resets to the shared initial state.

Aggregation reads the cache through the *retrieval view* set by the most
recent ``advance``: the post-update online state plus the entries of all
strictly earlier segments.  (On a boundary token the fresh snapshot is the
online state itself and is not double counted.)

Strategies:

* ``aggregate_residual`` -- unweighted sum of all retrievals.  Note that in
  checkpoint mode with an additive memory each snapshot already contains
  its predecessors, so this literal sum weights early segments more than
  once; that is the formula as defined, not a bug.  Independent mode is the
  clean setting (there the sum provably collapses to one fixed memory for
  linear modules).
* ``aggregate_grm`` -- gamma-weighted sum, gamma from the connector score
  of u against pooled segment summaries, softmax-normalized.
* ``aggregate_soup`` -- gamma-weighted parameter-space average retrieved
  once (identical to GRM for linear memories, distinct for MLPs).
* ``aggregate_ssc`` -- top-k router over cached entries; softmax over the
  selected scores plus the online score only, so unselected branches get
  exactly zero weight and zero gradient.
* ``post_training_mc`` -- unweighted parameter average of cached + online
  states, for inference-time use on pretrained models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .instrument import FlopCounter
from .memory import MemoryModule, MemoryState, initial_state, retrieve
from .segmentation import SegmentPlan, boundaries, logarithmic_plan, logarithmic_restep
from .tensor import Tensor


@dataclass(frozen=True)
class CacheEntry:
    """Snapshot of one completed segment."""

    state: MemoryState
    key_sum: Tensor
    length: int
    span: tuple[int, int]  # (start, end], 0-based token offsets
    index: int  # 1-based segment index

    def summary(self, pooling: str) -> Tensor:
        if pooling == "mean":
            return T.scale(self.key_sum, 1.0 / self.length)
        if pooling == "sum":
            return self.key_sum
        raise ValueError(f"unknown pooling {pooling!r}")


@dataclass
class GateWeights:
    """Softmaxed gamma over [cached segments..., online segment]."""

    gamma: Tensor
    raw: Tensor

    @property
    def num(self) -> int:
        return self.gamma.shape[-1]


@dataclass(frozen=True)
class RouterSelection:
    """Top-k choice over cached segments; indices are 1-based."""

    selected: np.ndarray
    scores: Tensor


class RoutingFreeze:
    """Replays top-k selections recorded on a previous forward pass.

    Used by finite-difference checks: a parameter nudge must not flip the
    routing, or the loss is not differentiable at that point.
    """

    def __init__(self):
        self.selections: list[np.ndarray] = []
        self._cursor = 0

    def rewind(self):
        self._cursor = 0

    def next(self, scores_data: np.ndarray, k: int) -> np.ndarray:
        if self._cursor < len(self.selections):
            idx = self.selections[self._cursor]
        else:
            idx = np.argsort(-scores_data, axis=-1, kind="stable")[..., :k]
            idx = np.ascontiguousarray(idx.astype(np.int64))
            self.selections.append(idx)
        self._cursor += 1
        return idx


def pooled_summary(keys: Tensor, strategy: str) -> Tensor:
    """Pool a segment's key vectors (rows of `keys`) into one vector."""
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise T.ShapeError(f"pooled_summary needs a nonempty (n, d) block, got {keys.shape}")
    n, d = keys.shape
    ones = T.tensor(np.ones((1, n)))
    total = T.reshape(T.matmul(ones, keys), (d,))
    if strategy == "sum":
        return total
    if strategy == "mean":
        return T.scale(total, 1.0 / n)
    raise ValueError(f"unknown pooling {strategy!r}")


class MemoryCache:
    """One sequence trace: online memory plus boundary snapshots."""

    def __init__(
        self,
        module: MemoryModule,
        plan: SegmentPlan,
        mode: str,
        init_params: tuple[Tensor, ...] | None = None,
        pooling: str = "mean",
        batch: int | None = None,
        counter: FlopCounter | None = None,
        routing_freeze: RoutingFreeze | None = None,
    ):
        if mode not in ("checkpoint", "independent"):
            raise ValueError(f"unknown cache mode {mode!r}")
        self.module = module
        self.plan = plan
        self.mode = mode
        self.init_params = init_params
        self.pooling = pooling
        self.batch = batch
        self.counter = counter
        self.routing_freeze = routing_freeze
        self.bounds = boundaries(plan)
        self.entries: list[CacheEntry] = []
        self.online = self._fresh_state()
        self.t = 0
        self._seg = 0
        self._seg_start = 0
        self._seg_key_sum: Tensor | None = None
        self._seg_len = 0
        self._prev_kv = None
        # retrieval view, set by advance()
        self._view_entries: tuple[CacheEntry, ...] = ()
        self._view_state: MemoryState | None = None
        self._view_key_sum: Tensor | None = None
        self._view_len = 0
        self._stacks: dict = {}
        self._stack_version = -1

    def _fresh_state(self) -> MemoryState:
        return initial_state(
            self.module.arch,
            self.init_params,
            batch=self.batch,
            with_momentum=self.module.needs_momentum,
        )

    @property
    def arch(self):
        return self.module.arch

    def advance(self, k: Tensor, v: Tensor, hp=None) -> None:
        """Consume one token: update online state, snapshot on boundary."""
        if self.t >= self.plan.total:
            raise IndexError(
                f"token index {self.t} beyond segment plan of length {self.plan.total}"
            )
        prev = self._prev_kv if self.module.uses_window else None
        self.online = self.module.step(self.online, k, v, hp, prev_kv=prev)
        self._prev_kv = (k, v)
        self._seg_key_sum = k if self._seg_key_sum is None else T.add(self._seg_key_sum, k)
        self._seg_len += 1
        if self.counter is not None:
            self.counter.count_update(self.module.kind, self.module.arch)
        # retrieval view for this token: online state + strictly earlier segments
        self._view_entries = tuple(self.entries)
        self._view_state = self.online
        self._view_key_sum = self._seg_key_sum
        self._view_len = self._seg_len
        self.t += 1
        if self.t == self.bounds[self._seg]:
            self.entries.append(
                CacheEntry(
                    state=self.online,
                    key_sum=self._seg_key_sum,
                    length=self._seg_len,
                    span=(self._seg_start, self.t),
                    index=self._seg + 1,
                )
            )
            self._seg += 1
            self._seg_start = self.t
            self._seg_key_sum = None
            self._seg_len = 0
            self._prev_kv = None
            if self.mode == "independent":
                self.online = self._fresh_state()

    # -- retrieval view ---------------------------------------------------

    def view_entries(self) -> tuple[CacheEntry, ...]:
        return self._view_entries

    def view_state(self) -> MemoryState:
        if self._view_state is None:
            raise RuntimeError("no token advanced yet")
        return self._view_state

    def view_online_summary(self, pooling: str | None = None) -> Tensor:
        pooling = pooling or self.pooling
        if self._view_key_sum is None:
            raise RuntimeError("no token advanced yet")
        if pooling == "mean":
            return T.scale(self._view_key_sum, 1.0 / self._view_len)
        return self._view_key_sum

    # -- stacked caches (rebuilt when the entry list changes) --------------

    def _stack(self, kind: str, pooling: str | None = None):
        version = len(self._view_entries)
        if self._stack_version != version:
            self._stacks.clear()
            self._stack_version = version
        key = (kind, pooling)
        hit = self._stacks.get(key)
        if hit is not None:
            return hit
        entries = self._view_entries
        if kind == "summaries":
            rows = [e.summary(pooling) for e in entries]
            out = _stack_rows(rows, self.batch)
        elif kind == "flat_params":
            out = tuple(
                _stack_rows([e.state.params[j] for e in entries], self.batch)
                for j in range(self.arch.num_params)
            )
        else:  # pragma: no cover
            raise KeyError(kind)
        self._stacks[key] = out
        return out


def _stack_rows(rows: list[Tensor], batch: int | None) -> Tensor:
    """[(d,), ...] -> (n, d)   or   [(B, d), ...] -> (B, n, d).

    Higher-rank rows are flattened to vectors first.
    """
    shaped = []
    for r in rows:
        if batch is None:
            flat = int(np.prod(r.shape)) if r.ndim else 1
            shaped.append(T.reshape(r, (1, flat)))
        else:
            flat = int(np.prod(r.shape[1:])) if r.ndim > 1 else 1
            shaped.append(T.reshape(r, (r.shape[0], 1, flat)))
    return T.concat(shaped, 0 if batch is None else 1)


def _unstack_shape(batch: int | None, n: int, shape: tuple[int, ...]):
    return ((n,) + shape) if batch is None else ((batch, n) + shape)


def _stacked_retrievals(cache, stacked_flat: tuple[Tensor, ...], n: int, q: Tensor) -> Tensor:
    """Retrieve from n stacked states at once -> (n, d) or (B, n, d)."""
    arch = cache.arch
    batch = cache.batch
    shapes = arch.param_shapes()
    params = [
        T.reshape(f, _unstack_shape(batch, n, s)) for f, s in zip(stacked_flat, shapes)
    ]
    if arch.kind == "linear":
        return T.matvec(params[0], q)
    if arch.kind == "vector":
        qq = T.reshape(q, (1, arch.d) if batch is None else (batch, 1, arch.d))
        return T.mul(params[0], qq)
    w1s, w2s = params
    hact = T.gelu(T.matvec(w2s, q))
    y = T.matvec(w1s, hact)
    qq = T.reshape(q, (1, arch.d) if batch is None else (batch, 1, arch.d))
    return T.add(qq, y)


def _weighted_rows(gamma: Tensor, rows: Tensor, batch: int | None, d: int) -> Tensor:
    """gamma (n,) x rows (n, d) -> (d,);  batched (B,n) x (B,n,d) -> (B,d)."""
    n = rows.shape[-2]
    if batch is None:
        g = T.reshape(gamma, (1, n))
        return T.reshape(T.matmul(g, rows), (d,))
    g = T.reshape(gamma, (batch, 1, n))
    return T.reshape(T.matmul(g, rows), (batch, d))


def _append_online_row(rows: Tensor | None, online: Tensor, batch: int | None) -> Tensor:
    d = online.shape[-1]
    on = T.reshape(online, (1, d) if batch is None else (batch, 1, d))
    if rows is None:
        return on
    return T.concat([rows, on], 0 if batch is None else 1)


def gate_weights(cache, u: Tensor, include_online: bool = True) -> GateWeights:
    """Connector scores of u against every segment summary, softmaxed.

    Order is [cached 1..s-1, online]; the online segment is summarized by
    the keys seen so far in the open segment.
    """
    entries = cache.view_entries()
    parts = []
    if entries:
        summaries = cache._stack("summaries", cache.pooling)
        parts.append(T.matvec(summaries, u))
    if include_online:
        on = T.dot(u, cache.view_online_summary())
        parts.append(T.reshape(on, (1,) if cache.batch is None else (cache.batch, 1)))
    if not parts:
        raise RuntimeError("gate_weights with no cached entries and no online term")
    raw = parts[0] if len(parts) == 1 else T.concat(parts, -1 if cache.batch is None else 1)
    return GateWeights(T.softmax(raw), raw)


def aggregate_residual(cache, q: Tensor) -> Tensor:
    """Unweighted sum of retrievals from online plus all cached states."""
    entries = cache.view_entries()
    r_on = retrieve(cache.view_state(), q)
    if cache.counter is not None:
        cache.counter.count_retrieval(len(entries) + 1, cache.arch)
    if not entries:
        return r_on
    n = len(entries)
    d = q.shape[-1]
    rows = _stacked_retrievals(cache, cache._stack("flat_params"), n, q)
    ones = T.tensor(np.ones((1, n) if cache.batch is None else (1, 1, n)))
    total = T.matmul(ones, rows)
    total = T.reshape(total, (d,) if cache.batch is None else (cache.batch, d))
    return T.add(r_on, total)


def aggregate_grm(cache, q: Tensor, gamma: GateWeights) -> Tensor:
    """Gamma-weighted sum of retrievals (cached entries first, online last)."""
    entries = cache.view_entries()
    if gamma.num != len(entries) + 1:
        raise T.ShapeError(
            f"gate length {gamma.num} != cached {len(entries)} + online"
        )
    r_on = retrieve(cache.view_state(), q)
    if cache.counter is not None:
        cache.counter.count_retrieval(len(entries) + 1, cache.arch)
    if not entries:
        g = T.reshape(gamma.gamma, () if cache.batch is None else (cache.batch, 1))
        return T.mul(r_on, g)
    rows = _stacked_retrievals(cache, cache._stack("flat_params"), len(entries), q)
    rows = _append_online_row(rows, r_on, cache.batch)
    return _weighted_rows(gamma.gamma, rows, cache.batch, q.shape[-1])


def aggregate_soup(cache, q: Tensor, gamma: GateWeights) -> Tensor:
    """Gamma-weighted parameter average of all states, then one retrieval."""
    entries = cache.view_entries()
    if gamma.num != len(entries) + 1:
        raise T.ShapeError(
            f"gate length {gamma.num} != cached {len(entries)} + online"
        )
    state = cache.view_state()
    for e in entries:
        if e.state.arch != state.arch:
            raise T.ShapeError("memory soup requires one shared arch")
    if cache.counter is not None:
        cache.counter.count_retrieval(len(entries) + 1, cache.arch)
    if not entries:
        g = T.reshape(gamma.gamma, () if cache.batch is None else (cache.batch, 1))
        souped = tuple(_scale_like(p, g) for p in state.params)
        return retrieve(MemoryState(souped, state.arch), q)
    flat = cache._stack("flat_params")
    shapes = state.arch.param_shapes()
    souped = []
    for f, p_on, shape in zip(flat, state.params, shapes):
        rows = _append_online_row(f, _flatten_to_vec(p_on, cache.batch), cache.batch)
        w = _weighted_rows(gamma.gamma, rows, cache.batch, rows.shape[-1])
        full = shape if cache.batch is None else (cache.batch,) + shape
        souped.append(T.reshape(w, full))
    return retrieve(MemoryState(tuple(souped), state.arch), q)


def _scale_like(p: Tensor, g: Tensor) -> Tensor:
    if g.ndim == 0:
        return T.mul(p, g)
    want = (g.shape[0],) + (1,) * (p.ndim - 1)
    return T.mul(p, T.reshape(g, want))


def _flatten_to_vec(p: Tensor, batch: int | None) -> Tensor:
    if batch is None:
        return T.reshape(p, (int(np.prod(p.shape)),))
    return T.reshape(p, (batch, int(np.prod(p.shape[1:]))))


def route_topk(cache, u: Tensor, k: int) -> RouterSelection:
    """Pick the k cached segments most relevant to u (1-based indices).

    Ties break toward the smaller segment index; k larger than the number
    of cached entries selects all of them.
    """
    entries = cache.view_entries()
    if not entries or k == 0:
        scores = T.zeros((0,) if cache.batch is None else (cache.batch, 0))
        sel = np.zeros((0,) if cache.batch is None else (cache.batch, 0), dtype=np.int64)
        return RouterSelection(sel, scores)
    summaries = cache._stack("summaries", cache.pooling)
    scores = T.matvec(summaries, u)
    kk = min(k, len(entries))
    with T.suspend_tape():
        idx = np.argsort(-scores.data, axis=-1, kind="stable")[..., :kk]
    first = np.array([e.index for e in entries], dtype=np.int64)
    return RouterSelection(first[idx], scores)


def aggregate_ssc(cache, q: Tensor, u: Tensor, k: int) -> Tensor:
    """Sparse selective retrieval: online memory plus top-k cached entries.

    Gamma is a softmax over the selected scores and the online score only;
    only the selected snapshots are materialized into the compute path.
    """
    entries = cache.view_entries()
    d = q.shape[-1]
    on_score = T.dot(u, cache.view_online_summary())
    on_score = T.reshape(on_score, (1,) if cache.batch is None else (cache.batch, 1))
    r_on = retrieve(cache.view_state(), q)
    if not entries or k == 0:
        if cache.counter is not None:
            cache.counter.count_retrieval(1, cache.arch)
        g = T.softmax(on_score)
        g = T.reshape(g, () if cache.batch is None else (cache.batch, 1))
        return T.mul(r_on, g)
    kk = min(k, len(entries))
    summaries = cache._stack("summaries", cache.pooling)
    scores = T.matvec(summaries, u)
    if cache.routing_freeze is not None:
        idx = cache.routing_freeze.next(np.asarray(scores.data, dtype=np.float64), kk)
    else:
        idx = T.topk_indices(scores, kk)
    sel_scores = T.take_along_last(scores, idx)
    raw = T.concat([sel_scores, on_score], -1 if cache.batch is None else 1)
    gamma = T.softmax(raw)
    flat = cache._stack("flat_params")
    gathered = tuple(T.gather_axis(f, idx) for f in flat)
    rows = _stacked_retrievals(cache, gathered, kk, q)
    rows = _append_online_row(rows, r_on, cache.batch)
    if cache.counter is not None:
        cache.counter.count_retrieval(kk + 1, cache.arch)
    return _weighted_rows(gamma, rows, cache.batch, d)


def post_training_mc(cache, q: Tensor) -> Tensor:
    """Retrieve from the unweighted parameter average of cached + online."""
    entries = cache.view_entries()
    state = cache.view_state()
    n = len(entries) + 1
    if cache.counter is not None:
        cache.counter.count_retrieval(n, cache.arch)
    averaged = []
    for j, p_on in enumerate(state.params):
        acc = p_on
        for e in entries:
            acc = T.add(acc, e.state.params[j])
        averaged.append(T.scale(acc, 1.0 / n))
    return retrieve(MemoryState(tuple(averaged), state.arch), q)


class StreamingLogCache:
    """Decode-time cache under a logarithmic plan that grows with L.

    Checkpoint mode only: boundary snapshots of one continuing memory are
    retired when the Fenwick carry merges their spans (the merged span's
    state is the checkpoint at its right boundary, cached as the stream
    reaches it).
    """

    def __init__(self, module: MemoryModule, init_params=None, batch=None,
                 pooling: str = "mean", counter: FlopCounter | None = None):
        self.module = module
        self.init_params = init_params
        self.batch = batch
        self.pooling = pooling
        self.counter = counter
        self.routing_freeze = None
        self.online = initial_state(
            module.arch, init_params, batch=batch,
            with_momentum=module.needs_momentum,
        )
        self.entries: list[CacheEntry] = []
        self.t = 0
        self.plan: SegmentPlan | None = None
        self._prev_kv = None
        self._stacks: dict = {}
        self._stack_version = -1

    @property
    def arch(self):
        return self.module.arch

    def advance(self, k: Tensor, v: Tensor, hp=None) -> None:
        prev = self._prev_kv if self.module.uses_window else None
        self.online = self.module.step(self.online, k, v, hp, prev_kv=prev)
        self._prev_kv = (k, v)
        if self.counter is not None:
            self.counter.count_update(self.module.kind, self.module.arch)
        self.t += 1
        if self.plan is None:
            self.plan = logarithmic_plan(1)
            retired = ()
        else:
            step = logarithmic_restep(self.plan, self.t)
            self.plan = step.plan
            retired = step.retired
        # Fenwick carry: retired boundaries are a suffix of the entry list.
        merged_len = 1
        merged_keys = k
        while self.entries and self.entries[-1].span[1] in retired:
            old = self.entries.pop()
            merged_len += old.length
            merged_keys = T.add(merged_keys, old.key_sum)
        self.entries.append(
            CacheEntry(
                state=self.online,
                key_sum=merged_keys,
                length=merged_len,
                span=(self.t - merged_len, self.t),
                index=len(self.entries) + 1,
            )
        )

    # The newest entry is the online state; earlier entries are the cache.
    def view_entries(self) -> tuple[CacheEntry, ...]:
        return tuple(self.entries[:-1])

    def view_state(self) -> MemoryState:
        return self.online

    def view_online_summary(self, pooling: str | None = None) -> Tensor:
        pooling = pooling or self.pooling
        last = self.entries[-1]
        return last.summary(pooling)

    def _stack(self, kind: str, pooling: str | None = None):
        version = (len(self.entries), self.t)
        if self._stack_version != version:
            self._stacks.clear()
            self._stack_version = version
        key = (kind, pooling)
        hit = self._stacks.get(key)
        if hit is not None:
            return hit
        entries = self.view_entries()
        if kind == "summaries":
            out = _stack_rows([e.summary(pooling) for e in entries], self.batch)
        else:
            out = tuple(
                _stack_rows([_flatten(e.state.params[j]) for e in entries], self.batch)
                for j in range(self.arch.num_params)
            )
        self._stacks[key] = out
        return out
