"""Fast tape-free forward paths for evaluation and benchmarking.

The linear-memory model configurations (the ones trained at any length)
run through the scan kernels in :mod:`segmem.kernels`; everything around
the memory layer is vectorized numpy.  Configurations the kernels do not
cover (MLP memories, gated-query constructions, gate-projected
hyperparameters) fall back to the tape engine with recording suspended.

``fast_hidden`` is checked against the taped ``model_hidden`` in the test
suite; they compute the same function.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from . import tensor as T
from .model import ModelParams, model_hidden
from .segmentation import SegmentPlan, boundaries
from .tensor import suspend_tape

_LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


class FastPathUnavailable(Exception):
    pass


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * (x * x * x))))


def _layer_norm(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + _LN_EPS)


def _check_supported(block) -> None:
    spec = block.spec
    if spec.memory_kind != "la" or spec.arch_kind != "linear":
        raise FastPathUnavailable(f"no kernel for memory kind {spec.memory_kind!r}")
    if spec.query_gate:
        raise FastPathUnavailable("gated-query construction not kernelized")
    if spec.variant == "loglinear++":
        raise FastPathUnavailable("streaming log plan not kernelized")


def fast_mem_layer(X: np.ndarray, block, plan: SegmentPlan) -> np.ndarray:
    """Memory layer over a (B, L, d) float array via the scan kernels."""
    _check_supported(block)
    spec = block.spec
    if spec.token_shift:
        prev = np.concatenate([np.zeros_like(X[:, :1]), X[:, :-1]], axis=1)
        mu = block.shift_mu.data
        X = X + mu * (prev - X)
    K = X @ block.w_k.data
    V = X @ block.w_v.data
    Q = X @ block.w_q.data
    variant = spec.variant
    if variant in ("grm", "soup", "ssc"):
        U = Q if spec.u_source == "query" else X @ block.w_u.data
    else:
        U = Q
    B, L, d = X.shape
    Y = np.empty_like(X)
    if variant == "none":
        for b in range(B):
            Y[b] = kernels.la_plain_scan(K[b], V[b], Q[b])
        return Y
    ends = np.asarray(boundaries(plan), dtype=np.int64)
    independent = spec.mode == "independent"
    mean_pool = spec.effective_pooling == "mean"
    for b in range(B):
        Y[b] = kernels.la_mc_scan(
            K[b], V[b], Q[b], U[b], ends, independent, mean_pool,
            variant, spec.k_top,
        )
    return Y


def fast_block(X: np.ndarray, block, plan: SegmentPlan) -> np.ndarray:
    Y = fast_mem_layer(X, block, plan)
    H = _layer_norm(X + Y)
    H = H * block.ln_g.data + block.ln_b.data
    return H + _gelu(H @ block.ff1.data) @ block.ff2.data


def fast_hidden(ids: np.ndarray, params: ModelParams, plan: SegmentPlan) -> np.ndarray:
    ids = np.asarray(ids)
    H = params.emb.data[ids].astype(np.float64)
    for block in params.blocks:
        H = fast_block(H, block, plan)
    return H


def _head(params: ModelParams) -> np.ndarray:
    return params.emb.data.T if params.tied else params.head.data


def hidden(ids: np.ndarray, params: ModelParams, plan: SegmentPlan) -> np.ndarray:
    """Fast path when the kernels cover the config, taped math otherwise."""
    try:
        return fast_hidden(ids, params, plan)
    except FastPathUnavailable:
        with suspend_tape():
            return np.asarray(model_hidden(ids, params, plan).data, dtype=np.float64)


def logits_at(ids: np.ndarray, positions: np.ndarray,
              params: ModelParams, plan: SegmentPlan) -> np.ndarray:
    H = hidden(ids, params, plan)
    sel = np.take_along_axis(H, np.asarray(positions)[:, :, None], axis=1)
    return sel @ _head(params)


def predictions_at(ids, positions, params, plan) -> np.ndarray:
    return logits_at(ids, positions, params, plan).argmax(axis=-1)
