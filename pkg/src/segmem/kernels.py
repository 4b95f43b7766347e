"""Hot per-token scan kernels for linear-matrix memories.

These drive evaluation and the throughput benchmark, where no gradients
are needed.  Each kernel is written as an explicit loop over one sequence;
the module compiles a numba version of every kernel at import and keeps
the plain-numpy version alongside, dispatching on the backend selected via
``SEGMEM_BACKEND`` (see :mod:`segmem.backend`).  ``numpy_impl`` /
``numba_impl`` stay callable directly so the benchmark can compare them.
"""

from __future__ import annotations

import numpy as np

from . import backend

VARIANT_CODES = {"residual": 0, "grm": 1, "soup": 1, "ssc": 2, "postmc": 3}


def _la_plain_scan(K, V, Q):
    """Plain linear attention: M += v k^T, y = M q."""
    L, d = K.shape
    Y = np.zeros((L, d))
    M = np.zeros((d, d))
    for t in range(L):
        M += V[t].reshape(d, 1) * K[t].reshape(1, d)
        Y[t] = M @ Q[t]
    return Y


def _softmax_inplace(x):
    m = x[0]
    for i in range(1, x.shape[0]):
        if x[i] > m:
            m = x[i]
    s = 0.0
    for i in range(x.shape[0]):
        x[i] = np.exp(x[i] - m)
        s += x[i]
    for i in range(x.shape[0]):
        x[i] /= s
    return x


def _topk_desc(scores, k):
    """Indices of k largest scores; ties prefer the smaller index."""
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


def _la_mc_scan(K, V, Q, U, ends, independent, mean_pool, variant, k_top):
    """Linear-memory cache scan covering residual/grm(=soup)/ssc/postmc.

    ends: 1-based boundary indices of the segment plan.
    """
    L, d = K.shape
    n_seg = ends.shape[0]
    Y = np.zeros((L, d))
    M = np.zeros((d, d))
    cached = np.zeros((n_seg, d, d))
    summaries = np.zeros((n_seg, d))
    w_sum = np.zeros((d, d))
    seg_key = np.zeros(d)
    n_cached = 0
    seg = 0
    seg_len = 0
    for t in range(L):
        M += V[t].reshape(d, 1) * K[t].reshape(1, d)
        seg_key += K[t]
        seg_len += 1
        q = Q[t]
        if variant == 0:  # residual sum
            y = M @ q
            for s in range(n_cached):
                y += cached[s] @ q
        elif variant == 1:  # gated residual (== soup for linear memory)
            if n_cached == 0:
                y = M @ q
            else:
                u = U[t]
                scores = np.empty(n_cached + 1)
                for s in range(n_cached):
                    scores[s] = u @ summaries[s]
                on = u @ seg_key
                if mean_pool:
                    on /= seg_len
                scores[n_cached] = on
                g = _softmax_inplace(scores)
                y = g[n_cached] * (M @ q)
                for s in range(n_cached):
                    y += g[s] * (cached[s] @ q)
        elif variant == 2:  # sparse selective (top-k + online)
            if n_cached == 0 or k_top == 0:
                y = M @ q
            else:
                u = U[t]
                kk = k_top if k_top < n_cached else n_cached
                scores = np.empty(n_cached)
                for s in range(n_cached):
                    scores[s] = u @ summaries[s]
                sel = _topk_desc(scores, kk)
                gg = np.empty(kk + 1)
                for j in range(kk):
                    gg[j] = scores[sel[j]]
                on = u @ seg_key
                if mean_pool:
                    on /= seg_len
                gg[kk] = on
                g = _softmax_inplace(gg)
                y = g[kk] * (M @ q)
                for j in range(kk):
                    y += g[j] * (cached[sel[j]] @ q)
        else:  # moving average of cached states plus online
            y = ((w_sum + M) / (n_cached + 1.0)) @ q
        Y[t] = y
        if t + 1 == ends[seg]:
            cached[n_cached] = M
            if mean_pool:
                summaries[n_cached] = seg_key / seg_len
            else:
                summaries[n_cached] = seg_key
            w_sum += M
            n_cached += 1
            seg += 1
            seg_key = np.zeros(d)
            seg_len = 0
            if independent:
                M = np.zeros((d, d))
    return Y


def _attention_scan(K, V, Q):
    """Dense causal softmax attention (the quadratic reference point)."""
    L, d = K.shape
    Y = np.zeros((L, d))
    for t in range(L):
        s = K[: t + 1] @ Q[t]
        m = s[0]
        for i in range(1, t + 1):
            if s[i] > m:
                m = s[i]
        w = np.exp(s - m)
        w /= w.sum()
        Y[t] = w @ V[: t + 1]
    return Y


class _Impls:
    def __init__(self, la_plain_scan, la_mc_scan, attention_scan):
        self.la_plain_scan = la_plain_scan
        self.la_mc_scan = la_mc_scan
        self.attention_scan = attention_scan


numpy_impl = _Impls(_la_plain_scan, _la_mc_scan, _attention_scan)

if backend.NUMBA_AVAILABLE:
    import types

    from numba import njit

    def _rebind(fn, **replacements):
        # jitted scans must call the jitted helpers, not the plain ones
        glb = dict(fn.__globals__)
        glb.update(replacements)
        return types.FunctionType(fn.__code__, glb, fn.__name__, fn.__defaults__)

    _jit = njit(cache=True)
    _softmax_j = _jit(_softmax_inplace)
    _topk_j = _jit(_topk_desc)
    numba_impl = _Impls(
        _jit(_la_plain_scan),
        njit(_rebind(_la_mc_scan, _softmax_inplace=_softmax_j, _topk_desc=_topk_j)),
        njit(_rebind(_attention_scan, _softmax_inplace=_softmax_j)),
    )
else:  # pragma: no cover
    numba_impl = numpy_impl


def _impl():
    return numba_impl if backend.current_backend() == "numba" else numpy_impl


def la_plain_scan(K, V, Q):
    return _impl().la_plain_scan(
        np.ascontiguousarray(K, dtype=np.float64),
        np.ascontiguousarray(V, dtype=np.float64),
        np.ascontiguousarray(Q, dtype=np.float64),
    )


def la_mc_scan(K, V, Q, U, ends, independent, mean_pool, variant, k_top=0):
    code = VARIANT_CODES[variant] if isinstance(variant, str) else int(variant)
    return _impl().la_mc_scan(
        np.ascontiguousarray(K, dtype=np.float64),
        np.ascontiguousarray(V, dtype=np.float64),
        np.ascontiguousarray(Q, dtype=np.float64),
        np.ascontiguousarray(U, dtype=np.float64),
        np.asarray(ends, dtype=np.int64),
        bool(independent),
        bool(mean_pool),
        code,
        int(k_top),
    )


def attention_scan(K, V, Q):
    return _impl().attention_scan(
        np.ascontiguousarray(K, dtype=np.float64),
        np.ascontiguousarray(V, dtype=np.float64),
        np.ascontiguousarray(Q, dtype=np.float64),
    )


def warmup():
    """Trigger jit compilation outside timed regions."""
    d = 4
    K = np.zeros((3, d))
    la_plain_scan(K, K, K)
    la_mc_scan(K, K, K, K, np.array([2, 3]), False, True, "grm", 2)
    la_mc_scan(K, K, K, K, np.array([2, 3]), True, False, "ssc", 1)
    la_mc_scan(K, K, K, K, np.array([2, 3]), False, True, "residual")
    la_mc_scan(K, K, K, K, np.array([2, 3]), False, True, "postmc")
    attention_scan(K, K, K)
