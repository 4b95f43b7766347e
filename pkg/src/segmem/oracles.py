"""Brute-force reference implementations and the equivalence suite.

Everything here is deliberately plain numpy written as literal loops; no
code is shared with the cache/model modules beyond elementary array
arithmetic.  The suite replays every identity the design rests on:

* the residual sum over independent linear compressors collapses to one
  fixed memory;
* gated-residual and parameter-soup aggregation coincide for linear
  memories and provably differ for MLP memories;
* the single-token value-less construction reproduces gated softmax
  attention;
* a one-segment plan reduces every variant to its base memory module;
* the window/momentum recurrences match token-by-token unrollings.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715

TOL_ALGEBRAIC = 1e-9
TOL_SOFTMAX_PATH = 1e-6
TOL_GRADIENT = 1e-4


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x ** 3)))


def oracle_fixed_linear_memory(kv_pairs, queries):
    """Plain running-sum linear attention: M_t = M_{t-1} + v k^T, y = M q."""
    d = kv_pairs[0][0].shape[0]
    M = np.zeros((d, d))
    out = []
    for (k, v), q in zip(kv_pairs, queries):
        M = M + np.outer(v, k)
        out.append(M @ q)
    return np.asarray(out)


def oracle_gated_softmax_attention(X, W_K, W_Q, W_U, b_K):
    """Direct double-loop gated softmax attention.

    y_t = (sum_i softmax_i(u_t . k_i) v'_i) * sigmoid(x_t W_Q), with
    v'_i = b_K + x_i W_K and the softmax over all i <= t.
    """
    L = X.shape[0]
    K = X @ W_K
    U = X @ W_U
    gate = 1.0 / (1.0 + np.exp(-(X @ W_Q)))
    out = []
    for t in range(L):
        scores = np.array([U[t] @ K[i] for i in range(t + 1)])
        w = np.exp(scores - scores.max())
        w = w / w.sum()
        mix = np.zeros_like(X[0])
        for i in range(t + 1):
            mix = mix + w[i] * (b_K + K[i])
        out.append(mix * gate[t])
    return np.asarray(out)


def _mlp_forward(params, x):
    w1, w2 = params
    return x + w1 @ _gelu(w2 @ x)


def _mlp_grad_dot(params, k, v):
    # L = -<M(k), v> for M(x) = x + W1 gelu(W2 x)
    w1, w2 = params
    hpre = w2 @ k
    hact = _gelu(hpre)
    g1 = -np.outer(v, hact)
    dh = -(w1.T @ v)
    t = np.tanh(_GELU_C * (hpre + _GELU_A * hpre ** 3))
    gp = 0.5 * (1.0 + t) + 0.5 * hpre * (1.0 - t * t) * _GELU_C * (
        1.0 + 3.0 * _GELU_A * hpre ** 2
    )
    g2 = np.outer(dh * gp, k)
    return g1, g2


def _mlp_grad_l2(params, k, v):
    # L = ||M(k) - v||^2
    w1, w2 = params
    hpre = w2 @ k
    hact = _gelu(hpre)
    r = k + w1 @ hact - v
    g1 = 2.0 * np.outer(r, hact)
    dh = 2.0 * (w1.T @ r)
    t = np.tanh(_GELU_C * (hpre + _GELU_A * hpre ** 3))
    gp = 0.5 * (1.0 + t) + 0.5 * hpre * (1.0 - t * t) * _GELU_C * (
        1.0 + 3.0 * _GELU_A * hpre ** 2
    )
    g2 = np.outer(dh * gp, k)
    return g1, g2


def oracle_unrolled_recurrence(kind, arch_kind, d, kv_trace, hp_trace, init=None):
    """Token-by-token scalar-loop evaluation of one memory recurrence.

    Returns the list of parameter tuples after every step.  hp_trace is a
    list of dicts with the scalars each rule reads (eta, alpha, beta,
    swla_beta, swla_lambda).
    """
    states = []
    if arch_kind == "linear":
        params = [np.zeros((d, d))] if init is None else [init[0].copy()]
    else:
        params = [p.copy() for p in init]
    if kind == "titans":
        momentum = [np.zeros_like(p) for p in params]
    prev_k = prev_v = None
    for step, (k, v) in enumerate(kv_trace):
        hp = hp_trace[step] if hp_trace else {}
        if kind == "la":
            params = [params[0] + np.outer(v, k)]
        elif kind == "swla":
            if prev_k is None:
                pk = np.zeros_like(k)
                pv = np.zeros_like(v)
            else:
                pk, pv = prev_k, prev_v
            params = [
                hp["alpha"] * params[0]
                + hp["swla_beta"] * np.outer(pv, pk)
                + hp["swla_lambda"] * np.outer(v, k)
            ]
            prev_k, prev_v = k, v
        elif kind == "dla":
            if arch_kind == "linear":
                grads = [-np.outer(v, k)]
            else:
                grads = _mlp_grad_dot(params, k, v)
            params = [p - hp.get("eta", 1.0) * g for p, g in zip(params, grads)]
        elif kind == "titans":
            if arch_kind == "linear":
                grads = [2.0 * np.outer(params[0] @ k - v, k)]
            else:
                grads = _mlp_grad_l2(params, k, v)
            momentum = [
                hp["beta"] * s - hp["eta"] * g for s, g in zip(momentum, grads)
            ]
            params = [hp["alpha"] * p + s for p, s in zip(params, momentum)]
        else:
            raise ValueError(f"unknown kind {kind!r}")
        states.append(tuple(p.copy() for p in params))
    return states


@dataclass
class CheckResult:
    name: str
    max_dev: float
    tol: float
    passed: bool
    detail: str = ""


@dataclass
class OracleReport:
    seed: int
    checks: list[CheckResult] = field(default_factory=list)
    runtime_seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name, max_dev, tol, detail=""):
        self.checks.append(CheckResult(name, float(max_dev), tol, max_dev < tol, detail))

    def add_flag(self, name, ok, detail=""):
        self.checks.append(CheckResult(name, 0.0 if ok else float("inf"),
                                       float("inf") if ok else 0.0, ok, detail))

    def lines(self):
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            yield f"[{status}] {c.name}: max dev {c.max_dev:.3e} (tol {c.tol:.0e}) {c.detail}"


def _check_collapse(report, rng, cases=20):
    from . import tensor as T
    from .cache import MemoryCache, aggregate_residual
    from .memory import MemoryArch, MemoryModule
    from .segmentation import constant_plan

    worst = 0.0
    for _ in range(cases):
        d = int(rng.integers(4, 16))
        L = int(rng.integers(16, 64))
        C = int(rng.integers(2, 16))
        K = rng.normal(size=(L, d))
        V = rng.normal(size=(L, d))
        Q = rng.normal(size=(L, d))
        ref = oracle_fixed_linear_memory(list(zip(K, V)), list(Q))
        cache = MemoryCache(
            MemoryModule("la", MemoryArch("linear", d)), constant_plan(L, C),
            "independent",
        )
        for t in range(L):
            cache.advance(T.tensor(K[t]), T.tensor(V[t]))
            y = aggregate_residual(cache, T.tensor(Q[t]))
            worst = max(worst, float(np.abs(y.data - ref[t]).max()))
    report.add("linear residual independent == fixed memory", worst, TOL_ALGEBRAIC)


def _check_grm_soup(report, rng, cases=10):
    from . import tensor as T
    from .cache import MemoryCache, aggregate_grm, aggregate_soup, gate_weights
    from .memory import MemoryArch, MemoryModule
    from .segmentation import constant_plan

    worst = 0.0
    for _ in range(cases):
        d = int(rng.integers(4, 12))
        L = int(rng.integers(12, 40))
        C = int(rng.integers(2, 10))
        K, V, Q, U = (rng.normal(size=(L, d)) for _ in range(4))
        cache = MemoryCache(
            MemoryModule("la", MemoryArch("linear", d)), constant_plan(L, C),
            "checkpoint",
        )
        for t in range(L):
            cache.advance(T.tensor(K[t]), T.tensor(V[t]))
            gw = gate_weights(cache, T.tensor(U[t]))
            y1 = aggregate_grm(cache, T.tensor(Q[t]), gw)
            y2 = aggregate_soup(cache, T.tensor(Q[t]), gw)
            worst = max(worst, float(np.abs(y1.data - y2.data).max()))
    report.add("grm == soup for linear memory", worst, TOL_ALGEBRAIC)

    # MLP witness: souping parameters is not ensembling outputs
    d, L, C = 6, 12, 3
    spec_dev = 0.0
    K, V, Q, U = (rng.normal(size=(L, d)) for _ in range(4))
    from .cache import MemoryCache as MC
    from .memory import initial_state

    arch = MemoryArch("mlp", d)
    init = tuple(
        T.tensor(rng.normal(0, 0.5, size=s)) for s in arch.param_shapes()
    )
    cache = MC(MemoryModule("dla", arch), constant_plan(L, C), "independent",
               init_params=init)
    from .memory import InnerHyperparams

    hp = InnerHyperparams(eta=T.tensor(0.5))
    for t in range(L):
        cache.advance(T.tensor(K[t]), T.tensor(V[t]), hp)
        gw = gate_weights(cache, T.tensor(U[t]))
        y1 = aggregate_grm(cache, T.tensor(Q[t]), gw)
        y2 = aggregate_soup(cache, T.tensor(Q[t]), gw)
        spec_dev = max(spec_dev, float(np.abs(y1.data - y2.data).max()))
    report.add_flag(
        "grm != soup for mlp memory (witness)", spec_dev > 1e-3,
        f"witness gap {spec_dev:.3e}",
    )


def _check_attention_recovery(report, rng, seeds=5, d=8, L=16):
    from .model import LayerSpec, BlockParams, mc_layer_forward
    from . import tensor as T
    from .segmentation import constant_plan

    worst = 0.0
    for _ in range(seeds):
        spec = LayerSpec(
            d=d, memory_kind="valueless", arch_kind="vector", variant="grm",
            mode="independent", pooling="mean", u_source="proj", query_gate=True,
        )
        block = BlockParams(spec, rng)
        X = rng.normal(size=(L, d))
        Y = mc_layer_forward(T.tensor(X), block, constant_plan(L, 1))
        ref = oracle_gated_softmax_attention(
            X, block.w_k.data, block.w_q.data, block.w_u.data, block.m0[0].data
        )
        worst = max(worst, float(np.abs(Y.data - ref).max()))
    report.add(
        "single-token value-less caching == gated softmax attention",
        worst, TOL_SOFTMAX_PATH,
    )


def _check_pure_rnn_limit(report, rng, d=6, L=10):
    from . import tensor as T
    from .model import LayerSpec, BlockParams, mc_layer_forward, fused_disabled
    from .segmentation import constant_plan

    kinds = [("la", "linear"), ("swla", "linear"), ("dla", "mlp"), ("titans", "mlp")]
    ok = True
    detail = []
    with fused_disabled():
        for kind, arch in kinds:
            X = rng.normal(size=(L, d))
            base_spec = LayerSpec(d=d, memory_kind=kind, arch_kind=arch, variant="none")
            base_block = BlockParams(base_spec, np.random.default_rng(11))
            base = mc_layer_forward(T.tensor(X), base_block, constant_plan(L, L))
            for variant in ("residual", "grm", "soup", "ssc", "postmc"):
                spec = LayerSpec(d=d, memory_kind=kind, arch_kind=arch, variant=variant)
                block = BlockParams(spec, np.random.default_rng(11))
                out = mc_layer_forward(T.tensor(X), block, constant_plan(L, L))
                if not np.array_equal(out.data, base.data):
                    ok = False
                    detail.append(f"{kind}/{variant}")
    report.add_flag(
        "one-segment plan is bitwise the base module (4 kinds x 5 variants)",
        ok, "mismatch: " + ",".join(detail) if detail else "",
    )


def _check_unrolled(report, rng, d=5, steps=12):
    from . import tensor as T
    from .memory import (InnerHyperparams, MemoryArch, MemoryModule, MemoryState,
                         initial_state)

    kv = [(rng.normal(size=d), rng.normal(size=d)) for _ in range(steps)]
    hps = [
        {
            "eta": float(rng.uniform(0.1, 0.9)),
            "alpha": float(rng.uniform(0.5, 1.0)),
            "beta": float(rng.uniform(0.0, 0.9)),
            "swla_beta": float(rng.uniform(0.0, 1.0)),
            "swla_lambda": float(rng.uniform(0.0, 1.0)),
        }
        for _ in range(steps)
    ]
    arch_l = MemoryArch("linear", d)
    arch_m = MemoryArch("mlp", d)
    init_m = tuple(T.tensor(rng.normal(0, 0.4, size=s)) for s in arch_m.param_shapes())

    worst = 0.0
    for kind, arch, init in (
        ("la", arch_l, None),
        ("swla", arch_l, None),
        ("dla", arch_l, None),
        ("dla", arch_m, init_m),
        ("titans", arch_l, None),
        ("titans", arch_m, init_m),
    ):
        module = MemoryModule(kind, arch)
        state = initial_state(arch, init, with_momentum=module.needs_momentum)
        prev = None
        module_states = []
        for (k, v), hp in zip(kv, hps):
            hpt = InnerHyperparams(**{n: T.tensor(val) for n, val in hp.items()})
            state = module.step(state, T.tensor(k), T.tensor(v), hpt, prev_kv=prev)
            prev = (T.tensor(k), T.tensor(v))
            module_states.append(tuple(np.asarray(p.data) for p in state.params))
        ref = oracle_unrolled_recurrence(
            kind, arch.kind, d, kv, hps,
            init=None if init is None else tuple(p.data for p in init),
        )
        for got, want in zip(module_states, ref):
            for gp, wp in zip(got, want):
                worst = max(worst, float(np.abs(gp - wp).max()))
    report.add("update rules match hand-unrolled recurrences", worst, TOL_ALGEBRAIC)

    # titans without momentum/retention reduces to a plain L2 gradient step
    hps_degenerate = [
        {**hp, "alpha": 1.0, "beta": 0.0} for hp in hps
    ]
    titans = oracle_unrolled_recurrence("titans", "linear", d, kv, hps_degenerate)
    worst2 = 0.0
    params = np.zeros((d, d))
    for (k, v), hp, want in zip(kv, hps_degenerate, titans):
        params = params - hp["eta"] * (2.0 * np.outer(params @ k - v, k))
        worst2 = max(worst2, float(np.abs(params - want[0]).max()))
    report.add("titans with alpha=1, beta=0 is plain gradient descent",
               worst2, TOL_ALGEBRAIC)


def _check_gradients(report, rng, trials=12):
    from . import tensor as T
    from .memory import MemoryArch, MemoryState, inner_gradient, retrieve
    from .tensor import finite_difference_grad

    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(3, 8))
        for arch_kind in ("linear", "mlp"):
            arch = MemoryArch(arch_kind, d)
            params = tuple(
                T.tensor(rng.normal(0, 0.5, size=s)) for s in arch.param_shapes()
            )
            k = T.tensor(rng.normal(size=d))
            v = T.tensor(rng.normal(size=d))
            state = MemoryState(params, arch)
            for objective in ("dot", "l2"):
                grads = inner_gradient(state, k, v, objective)
                for j, p in enumerate(params):
                    def f(x, j=j, objective=objective):
                        ps = list(params)
                        ps[j] = x
                        y = retrieve(MemoryState(tuple(ps), arch), k)
                        if objective == "dot":
                            return -float(np.dot(y.data, v.data))
                        r = y.data - v.data
                        return float(r @ r)

                    fd = finite_difference_grad(f, p, 1e-6)
                    num = np.abs(fd.data - grads[j].data).max()
                    den = max(1.0, float(np.abs(fd.data).max()))
                    worst = max(worst, float(num / den))
    report.add("inner gradients match finite differences", worst, TOL_GRADIENT)


def run_oracle_suite(seed: int = 0, sizes: str = "default") -> OracleReport:
    """Execute every equivalence check; any failure names the seed."""
    t0 = time.time()
    report = OracleReport(seed=seed)
    rng = np.random.default_rng(seed)
    cases = 20 if sizes == "default" else 6
    _check_collapse(report, rng, cases=cases)
    _check_grm_soup(report, rng, cases=max(4, cases // 2))
    _check_attention_recovery(report, rng)
    _check_pure_rnn_limit(report, rng)
    _check_unrolled(report, rng)
    _check_gradients(report, rng, trials=max(4, cases // 2))
    report.runtime_seconds = time.time() - t0
    return report
