"""Fused scan for linear-matrix memories: one tape op per block.

The modular path in :mod:`segmem.cache` records ~20 small primitives per
token, which dominates training time.  For the linear ``la`` memory every
variant's whole-sequence scan has a closed-form reverse pass, so this
module implements the layer as a single recorded op with numba forward and
backward kernels (plain-numpy fallbacks included, selected like the other
kernels).  The test suite checks both directions against the modular tape
path; either lane computes the same function.

Backward notes: cached snapshots and segment key sums are stashed by the
forward; per-segment online states are recomputed inside the reverse scan
from the stashed segment-start state, in forward order, so they match the
forward values exactly.  Snapshot gradients re-enter the running memory
gradient at their boundary (checkpoint mode) or replace it (independent
mode, where the reset cuts the path).
"""

from __future__ import annotations

import numpy as np

from . import backend
from . import tensor as T
from .segmentation import SegmentPlan, boundaries

# variant codes shared by forward and backward kernels
NONE, RESIDUAL, GRM, SSC = 4, 0, 1, 2
_CODES = {"none": NONE, "residual": RESIDUAL, "grm": GRM, "soup": GRM, "ssc": SSC}


def _topk_desc(scores, k):
    n = scores.shape[0]
    out = np.empty(k, dtype=np.int64)
    taken = np.zeros(n, dtype=np.bool_)
    for j in range(k):
        best = -1
        best_val = -np.inf
        for i in range(n):
            if not taken[i] and scores[i] > best_val:
                best = i
                best_val = scores[i]
        taken[best] = True
        out[j] = best
    return out


def _forward(K, V, Q, U, ends, starts, independent, mean_pool, variant, k_top):
    """One batch element.  Returns Y plus the stashes backward needs."""
    L, d = K.shape
    S = ends.shape[0]
    Y = np.zeros((L, d))
    cached = np.zeros((S, d, d))
    keysums = np.zeros((S, d))
    M = np.zeros((d, d))
    ks = np.zeros(d)
    r = np.empty(S + 1)
    seg = 0
    for t in range(L):
        kt = K[t]
        M += V[t].reshape(d, 1) * kt.reshape(1, d)
        ks += kt
        q = Q[t]
        n = seg  # completed segments visible at this token
        n_on = t - starts[seg] + 1
        if variant == NONE or n == 0 or (variant == SSC and k_top == 0):
            # gated variants: softmax over the single online score is 1
            y = M @ q
        elif variant == RESIDUAL:
            y = M @ q
            for i in range(n):
                y += cached[i] @ q
        elif variant == GRM:
            u = U[t]
            for i in range(n):
                r[i] = u @ keysums[i]
                if mean_pool:
                    r[i] /= ends[i] - starts[i]
            r[n] = u @ ks
            if mean_pool:
                r[n] /= n_on
            m = r[0]
            for i in range(1, n + 1):
                if r[i] > m:
                    m = r[i]
            tot = 0.0
            for i in range(n + 1):
                r[i] = np.exp(r[i] - m)
                tot += r[i]
            y = (r[n] / tot) * (M @ q)
            for i in range(n):
                y += (r[i] / tot) * (cached[i] @ q)
        else:  # SSC
            u = U[t]
            kk = k_top if k_top < n else n
            for i in range(n):
                r[i] = u @ keysums[i]
                if mean_pool:
                    r[i] /= ends[i] - starts[i]
            sel = _topk_desc(r[:n], kk)
            g = np.empty(kk + 1)
            for j in range(kk):
                g[j] = r[sel[j]]
            g[kk] = u @ ks
            if mean_pool:
                g[kk] /= n_on
            m = g[0]
            for j in range(1, kk + 1):
                if g[j] > m:
                    m = g[j]
            tot = 0.0
            for j in range(kk + 1):
                g[j] = np.exp(g[j] - m)
                tot += g[j]
            y = (g[kk] / tot) * (M @ q)
            for j in range(kk):
                y += (g[j] / tot) * (cached[sel[j]] @ q)
        Y[t] = y
        if t + 1 == ends[seg]:
            cached[seg] = M
            keysums[seg] = ks
            seg += 1
            ks = np.zeros(d)
            if independent:
                M = np.zeros((d, d))
    return Y, cached, keysums


def _backward(K, V, Q, U, ends, starts, independent, mean_pool, variant, k_top,
              cached, keysums, dY):
    """Reverse scan producing dK, dV, dQ, dU for one batch element."""
    L, d = K.shape
    S = ends.shape[0]
    dK = np.zeros((L, d))
    dV = np.zeros((L, d))
    dQ = np.zeros((L, d))
    dU = np.zeros((L, d))
    dCached = np.zeros((S, d, d))
    dKS = np.zeros((S, d))
    dM = np.zeros((d, d))
    max_len = 0
    for s in range(S):
        if ends[s] - starts[s] > max_len:
            max_len = ends[s] - starts[s]
    Mbuf = np.zeros((max_len, d, d))
    ksbuf = np.zeros((max_len, d))
    for s in range(S - 1, -1, -1):
        start = starts[s]
        length = ends[s] - start
        n = s
        # recompute the online trajectory of this segment, forward order
        if independent or s == 0:
            M = np.zeros((d, d))
        else:
            M = cached[s - 1].copy()
        ks = np.zeros(d)
        for j in range(length):
            t = start + j
            M = M + V[t].reshape(d, 1) * K[t].reshape(1, d)
            ks = ks + K[t]
            Mbuf[j] = M
            ksbuf[j] = ks
        # snapshot gradient joins (checkpoint) or replaces (independent)
        if independent:
            dM = dCached[s].copy()
        else:
            dM += dCached[s]
        dks_run = np.zeros(d)
        r = np.empty(S + 1)
        c = np.empty(S + 1)
        dgam = np.empty(S + 1)
        for j in range(length - 1, -1, -1):
            t = start + j
            gy = dY[t]
            q = Q[t]
            Mt = Mbuf[j]
            c_on = 1.0 / (j + 1) if mean_pool else 1.0
            outer_gq = gy.reshape(d, 1) * q.reshape(1, d)
            if variant == NONE or n == 0 or (variant == SSC and k_top == 0):
                dQ[t] += gy @ Mt
                dM += outer_gq
            elif variant == RESIDUAL:
                dq = gy @ Mt
                for i in range(n):
                    dq += gy @ cached[i]
                    dCached[i] += outer_gq
                dQ[t] += dq
                dM += outer_gq
            elif variant == GRM:
                u = U[t]
                for i in range(n):
                    c[i] = 1.0 / (ends[i] - starts[i]) if mean_pool else 1.0
                    r[i] = (u @ keysums[i]) * c[i]
                c[n] = c_on
                r[n] = (u @ ksbuf[j]) * c_on
                m = r[0]
                for i in range(1, n + 1):
                    if r[i] > m:
                        m = r[i]
                tot = 0.0
                for i in range(n + 1):
                    r[i] = np.exp(r[i] - m)
                    tot += r[i]
                for i in range(n + 1):
                    r[i] /= tot  # r now holds gamma
                dq = r[n] * (gy @ Mt)
                dgam[n] = (Mt @ q) @ gy
                for i in range(n):
                    dq += r[i] * (gy @ cached[i])
                    dgam[i] = (cached[i] @ q) @ gy
                    dCached[i] += r[i] * outer_gq
                dQ[t] += dq
                dM += r[n] * outer_gq
                inner = 0.0
                for i in range(n + 1):
                    inner += r[i] * dgam[i]
                du = np.zeros(d)
                for i in range(n):
                    dr = r[i] * (dgam[i] - inner)
                    du += (dr * c[i]) * keysums[i]
                    dKS[i] += (dr * c[i]) * u
                dr_on = r[n] * (dgam[n] - inner)
                du += (dr_on * c_on) * ksbuf[j]
                dks_run += (dr_on * c_on) * u
                dU[t] += du
            else:  # SSC
                u = U[t]
                kk = k_top if k_top < n else n
                for i in range(n):
                    c[i] = 1.0 / (ends[i] - starts[i]) if mean_pool else 1.0
                    r[i] = (u @ keysums[i]) * c[i]
                sel = _topk_desc(r[:n], kk)
                g = np.empty(kk + 1)
                for jj in range(kk):
                    g[jj] = r[sel[jj]]
                g[kk] = (u @ ksbuf[j]) * c_on
                m = g[0]
                for jj in range(1, kk + 1):
                    if g[jj] > m:
                        m = g[jj]
                tot = 0.0
                for jj in range(kk + 1):
                    g[jj] = np.exp(g[jj] - m)
                    tot += g[jj]
                for jj in range(kk + 1):
                    g[jj] /= tot
                dq = g[kk] * (gy @ Mt)
                dgam[kk] = (Mt @ q) @ gy
                for jj in range(kk):
                    i = sel[jj]
                    dq += g[jj] * (gy @ cached[i])
                    dgam[jj] = (cached[i] @ q) @ gy
                    dCached[i] += g[jj] * outer_gq
                dQ[t] += dq
                dM += g[kk] * outer_gq
                inner = 0.0
                for jj in range(kk + 1):
                    inner += g[jj] * dgam[jj]
                du = np.zeros(d)
                for jj in range(kk):
                    i = sel[jj]
                    dr = g[jj] * (dgam[jj] - inner)
                    du += (dr * c[i]) * keysums[i]
                    dKS[i] += (dr * c[i]) * u
                dr_on = g[kk] * (dgam[kk] - inner)
                du += (dr_on * c_on) * ksbuf[j]
                dks_run += (dr_on * c_on) * u
                dU[t] += du
            # memory update rule: M_t = M_{t-1} + v_t k_t^T
            dV[t] += dM @ K[t]
            dK[t] += V[t] @ dM
            dK[t] += dks_run + dKS[s]
    return dK, dV, dQ, dU


if backend.NUMBA_AVAILABLE:
    import types

    from numba import njit

    def _rebind(fn, **repl):
        glb = dict(fn.__globals__)
        glb.update(repl)
        return types.FunctionType(fn.__code__, glb, fn.__name__, fn.__defaults__)

    _topk_j = njit(cache=True)(_topk_desc)
    _forward_nb = njit(_rebind(_forward, _topk_desc=_topk_j))
    _backward_nb = njit(_rebind(_backward, _topk_desc=_topk_j))
else:  # pragma: no cover
    _forward_nb = _forward
    _backward_nb = _backward


def _impls():
    if backend.current_backend() == "numba":
        return _forward_nb, _backward_nb
    return _forward, _backward


def supports(spec) -> bool:
    return (
        spec.memory_kind == "la"
        and spec.arch_kind == "linear"
        and not spec.query_gate
        and spec.variant in _CODES
    )


def fused_la_layer(
    Kt: T.Tensor,
    Vt: T.Tensor,
    Qt: T.Tensor,
    Ut: T.Tensor,
    plan: SegmentPlan,
    mode: str,
    mean_pool: bool,
    variant: str,
    k_top: int,
    counter=None,
) -> T.Tensor:
    """Whole-sequence memory layer as one recorded primitive."""
    fwd, bwd = _impls()
    code = _CODES[variant]
    if code == NONE:
        # pure RNN: one continuous memory, the plan plays no role
        ends = np.array([plan.total], dtype=np.int64)
        independent = False
    else:
        ends = np.asarray(boundaries(plan), dtype=np.int64)
        independent = mode == "independent"
    starts = np.concatenate([[0], ends[:-1]]).astype(np.int64)
    batched = Kt.ndim == 3
    Ks, Vs, Qs, Us = (
        np.ascontiguousarray(np.asarray(t.data, dtype=np.float64))
        for t in (Kt, Vt, Qt, Ut)
    )
    if not batched:
        Ks, Vs, Qs, Us = (a[None] for a in (Ks, Vs, Qs, Us))
    B, L, d = Ks.shape
    Y = np.empty((B, L, d))
    stash = []
    for b in range(B):
        Y[b], cached, keysums = fwd(
            Ks[b], Vs[b], Qs[b], Us[b], ends, starts,
            independent, mean_pool, code, int(k_top),
        )
        stash.append((cached, keysums))
    if counter is not None:
        _count(counter, plan, d, code, int(k_top))
    out_arr = Y if batched else Y[0]

    def vjp(g):
        gb = g if batched else g[None]
        dK = np.empty_like(Ks)
        dV = np.empty_like(Ks)
        dQ = np.empty_like(Ks)
        dU = np.empty_like(Ks)
        for b in range(B):
            cached, keysums = stash[b]
            dK[b], dV[b], dQ[b], dU[b] = bwd(
                Ks[b], Vs[b], Qs[b], Us[b], ends, starts,
                independent, mean_pool, code, int(k_top),
                cached, keysums, np.ascontiguousarray(gb[b]),
            )
        if not batched:
            return [
                (Kt.id, dK[0]), (Vt.id, dV[0]), (Qt.id, dQ[0]), (Ut.id, dU[0])
            ]
        return [(Kt.id, dK), (Vt.id, dV), (Qt.id, dQ), (Ut.id, dU)]

    aux = (
        tuple(int(e) for e in ends), independent, mean_pool, code, int(k_top), batched
    )
    return T._emit("fused_la_layer", (Kt, Vt, Qt, Ut), out_arr, aux, vjp)


def _raw_fused(args, aux):
    ends_t, independent, mean_pool, code, k_top, batched = aux
    ends = np.asarray(ends_t, dtype=np.int64)
    starts = np.concatenate([[0], ends[:-1]]).astype(np.int64)
    fwd, _ = _impls()
    Ks, Vs, Qs, Us = (np.ascontiguousarray(a, dtype=np.float64) for a in args)
    if not batched:
        Ks, Vs, Qs, Us = (a[None] for a in (Ks, Vs, Qs, Us))
    B, L, d = Ks.shape
    Y = np.empty((B, L, d))
    for b in range(B):
        Y[b] = fwd(Ks[b], Vs[b], Qs[b], Us[b], ends, starts,
                   independent, mean_pool, code, k_top)[0]
    return Y if batched else Y[0]


T._RAW["fused_la_layer"] = _raw_fused


def _count(counter, plan: SegmentPlan, d: int, code: int, k_top: int) -> None:
    from .instrument import retrieval_cost, update_cost
    from .memory import MemoryArch

    arch = MemoryArch("linear", d)
    seg = 0
    ends = boundaries(plan)
    for t in range(plan.total):
        n = seg
        if code == NONE:
            touched = 1
        elif code == SSC:
            touched = min(k_top, n) + 1
        else:
            touched = n + 1
        counter.count_update("la", arch)
        counter.count_retrieval(touched, arch)
        if t + 1 == ends[seg]:
            seg += 1


def warmup():
    d = 4
    A = np.zeros((2, 6, d))
    from .model import LayerSpec  # noqa: F401  (import order guard)

    for variant in ("none", "residual", "grm", "ssc"):
        Kt = T.tensor(A)
        with T.Tape() as tape:
            tape.watch(Kt)
            from .segmentation import constant_plan

            out = fused_la_layer(
                Kt, T.tensor(A), T.tensor(A), T.tensor(A),
                constant_plan(6, 2), "checkpoint", True, variant, 1,
            )
            loss = T.mean_all(out)
        T.backprop(tape, loss)
