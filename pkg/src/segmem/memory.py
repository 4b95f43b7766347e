"""Recurrent memory modules: per-token update rules and retrieval.

Four families behind one interface:

* ``la``      -- linear matrix memory, Hebbian write W <- W + v k^T
* ``swla``    -- linear matrix memory written from a 2-token window with a
                 retention gate
* ``dla``     -- gradient step on a dot-product objective (matrix or MLP
                 memory)
* ``titans``  -- momentum + retention gradient steps on an L2 objective

plus ``valueless``, a vector memory that stores only keys (used by the
softmax-attention recovery construction).

States are immutable snapshots: every update returns a new state.  The
inner gradients are spelled out as tape primitives so the outer training
loop can differentiate straight through them.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .tensor import Tensor

_GELU_A = 0.044715
_GELU_C = T._GELU_C


@dataclass(frozen=True)
class MemoryArch:
    """Shape of one memory instance.

    ``linear``: a single d x d matrix.  ``mlp``: two-layer residual MLP
    with expansion factor 4 and GELU, retrieval q + W1 gelu(W2 q).
    ``vector``: a single length-d vector retrieved by elementwise product.
    """

    kind: str
    d: int
    hidden: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "mlp", "vector"):
            raise ValueError(f"unknown memory arch {self.kind!r}")
        if self.kind == "mlp" and self.hidden <= 0:
            object.__setattr__(self, "hidden", 4 * self.d)

    def param_shapes(self) -> tuple[tuple[int, ...], ...]:
        if self.kind == "linear":
            return ((self.d, self.d),)
        if self.kind == "mlp":
            return ((self.d, self.hidden), (self.hidden, self.d))
        return ((self.d,),)

    @property
    def num_params(self) -> int:
        return len(self.param_shapes())


@dataclass(frozen=True)
class MemoryState:
    """Parameters (and optional momentum) of one memory instance."""

    params: tuple[Tensor, ...]
    arch: MemoryArch
    momentum: tuple[Tensor, ...] | None = None

    def __post_init__(self):
        expect = self.arch.param_shapes()
        got = tuple(p.shape[-len(s):] if p.ndim > len(s) else p.shape
                    for p, s in zip(self.params, expect))
        if len(self.params) != len(expect) or got != expect:
            raise T.ShapeError(
                f"memory state params {got} do not match arch {expect}"
            )
        if self.momentum is not None and len(self.momentum) != len(self.params):
            raise T.ShapeError("momentum must match params")

    @property
    def batched(self) -> bool:
        return self.params[0].ndim > len(self.arch.param_shapes()[0])


@dataclass
class InnerHyperparams:
    """Per-token data-dependent scalars of the update rules.

    eta >= 0 (inner step size); alpha, beta in [0, 1] (retention and
    momentum gates); swla_beta / swla_lambda weight the two window writes.
    Each is a scalar tensor, or (B, 1) when batched, or None for "unused".
    """

    eta: Tensor | None = None
    alpha: Tensor | None = None
    beta: Tensor | None = None
    swla_beta: Tensor | None = None
    swla_lambda: Tensor | None = None


def _gated(w: Tensor, gate: Tensor | None) -> Tensor:
    """Multiply a parameter tensor by a per-token (optionally batched) gate."""
    if gate is None:
        return w
    if gate.ndim == 0:
        return T.mul(w, gate)
    want = (gate.shape[0],) + (1,) * (w.ndim - 1)
    if gate.shape != want:
        gate = T.reshape(gate, want)
    return T.mul(w, gate)


def initial_state(
    arch: MemoryArch,
    init_params: tuple[Tensor, ...] | None = None,
    batch: int | None = None,
    with_momentum: bool = False,
) -> MemoryState:
    """Fresh memory state.

    Linear matrices start at zero.  MLP and vector memories start from the
    shared learned initial parameters (gradients flow back into them when a
    batch axis is expanded on top).
    """
    if arch.kind == "linear":
        shape = arch.param_shapes()[0]
        if batch is not None:
            shape = (batch,) + shape
        params = (T.zeros(shape),)
    else:
        if init_params is None:
            raise ValueError(f"{arch.kind} memory needs learned initial params")
        if batch is not None:
            params = tuple(T.expand_batch(p, batch) for p in init_params)
        else:
            params = tuple(init_params)
    momentum = None
    if with_momentum:
        momentum = tuple(T.zeros(p.shape) for p in params)
    return MemoryState(params, arch, momentum)


# ---------------------------------------------------------------------------
# update rules
# ---------------------------------------------------------------------------

def linear_update(state: MemoryState, k: Tensor, v: Tensor) -> MemoryState:
    """Hebbian write: W <- W + v k^T."""
    if state.arch.kind != "linear":
        raise T.ShapeError("linear_update requires a linear matrix memory")
    w = T.add(state.params[0], T.outer(v, k))
    return MemoryState((w,), state.arch, state.momentum)


def valueless_update(state: MemoryState, k: Tensor) -> MemoryState:
    """Key-only write for the vector memory: m <- m + k."""
    if state.arch.kind != "vector":
        raise T.ShapeError("valueless_update requires a vector memory")
    return MemoryState((T.add(state.params[0], k),), state.arch, state.momentum)


def swla_update(
    state: MemoryState,
    window: tuple[tuple[Tensor, Tensor], tuple[Tensor, Tensor]],
    hp: InnerHyperparams,
) -> MemoryState:
    """Two-token window write with retention:

    W <- alpha * W + (swla_beta * v_prev k_prev^T + swla_lambda * v k^T)

    At a segment start the missing previous pair is all zeros.
    """
    if state.arch.kind != "linear":
        raise T.ShapeError("swla_update requires a linear matrix memory")
    (k_prev, v_prev), (k, v) = window
    write = T.add(
        _gated(T.outer(v_prev, k_prev), hp.swla_beta),
        _gated(T.outer(v, k), hp.swla_lambda),
    )
    w = T.add(_gated(state.params[0], hp.alpha), write)
    return MemoryState((w,), state.arch, state.momentum)


def _gelu_prime(x: Tensor) -> Tensor:
    # Derivative of the tanh-approximated GELU, written with primitives so
    # the outer loop can differentiate through inner gradients.
    one = T.tensor(1.0)
    x2 = T.mul(x, x)
    u = T.scale(T.add(x, T.scale(T.mul(x, x2), _GELU_A)), _GELU_C)
    t = T.tanh(u)
    sech2 = T.sub(one, T.mul(t, t))
    du = T.scale(T.add(one, T.scale(x2, 3.0 * _GELU_A)), _GELU_C)
    term1 = T.add(T.scale(t, 0.5), T.tensor(0.5))
    term2 = T.scale(T.mul(T.mul(x, sech2), du), 0.5)
    return T.add(term1, term2)


def _mlp_hidden(state: MemoryState, k: Tensor) -> tuple[Tensor, Tensor]:
    w1, w2 = state.params
    hpre = T.matvec(w2, k)
    return hpre, T.gelu(hpre)


def inner_gradient(
    state: MemoryState, k: Tensor, v: Tensor, objective: str
) -> tuple[Tensor, ...]:
    """Gradient of the inner objective at the current state.

    objective 'dot': L = -<M(k), v>; 'l2': L = ||M(k) - v||^2.
    """
    if objective not in ("dot", "l2"):
        raise ValueError(f"unknown inner objective {objective!r}")
    kind = state.arch.kind
    if kind == "linear":
        if objective == "dot":
            return (T.scale(T.outer(v, k), -1.0),)
        r = T.sub(T.matvec(state.params[0], k), v)
        return (T.scale(T.outer(r, k), 2.0),)
    if kind == "vector":
        m = state.params[0]
        if objective == "dot":
            return (T.scale(T.mul(k, v), -1.0),)
        r = T.sub(T.mul(m, k), v)
        return (T.scale(T.mul(r, k), 2.0),)
    # mlp: y = k + W1 gelu(W2 k)
    w1, _ = state.params
    hpre, hact = _mlp_hidden(state, k)
    if objective == "dot":
        dy = T.scale(v, -1.0)
    else:
        y = T.add(k, T.matvec(w1, hact))
        dy = T.scale(T.sub(y, v), 2.0)
    g1 = T.outer(dy, hact)
    dhact = T.matvec(T.transpose(w1), dy)
    dhpre = T.mul(dhact, _gelu_prime(hpre))
    g2 = T.outer(dhpre, k)
    return (g1, g2)


def dla_update(
    state: MemoryState, k: Tensor, v: Tensor, hp: InnerHyperparams
) -> MemoryState:
    """Gradient step on the dot-product objective: M <- M - eta * grad L."""
    grads = inner_gradient(state, k, v, "dot")
    params = tuple(
        T.sub(p, _gated(g, hp.eta)) for p, g in zip(state.params, grads)
    )
    return MemoryState(params, state.arch, state.momentum)


def titans_update(
    state: MemoryState, k: Tensor, v: Tensor, hp: InnerHyperparams
) -> MemoryState:
    """Momentum update on the L2 objective:

    S <- beta * S - eta * grad L (at the pre-update state)
    M <- alpha * M + S

    so beta = 0, alpha = 1 is plain gradient descent.
    """
    if state.momentum is None:
        raise ValueError("titans_update requires a state carrying momentum")
    grads = inner_gradient(state, k, v, "l2")
    new_s = tuple(
        T.sub(_gated(s, hp.beta), _gated(g, hp.eta))
        for s, g in zip(state.momentum, grads)
    )
    params = tuple(
        T.add(_gated(p, hp.alpha), s) for p, s in zip(state.params, new_s)
    )
    return MemoryState(params, state.arch, new_s)


def retrieve(state: MemoryState, q: Tensor) -> Tensor:
    """Read the memory at query q."""
    kind = state.arch.kind
    if kind == "linear":
        return T.matvec(state.params[0], q)
    if kind == "vector":
        return T.mul(state.params[0], q)
    w1, _ = state.params
    _, hact = _mlp_hidden(state, q)
    return T.add(q, T.matvec(w1, hact))


# ---------------------------------------------------------------------------
# uniform per-kind stepping interface
# ---------------------------------------------------------------------------

KINDS = ("la", "swla", "dla", "titans", "valueless")


class MemoryModule:
    """Dispatch wrapper binding a memory kind to its arch and update rule."""

    def __init__(self, kind: str, arch: MemoryArch):
        if kind not in KINDS:
            raise ValueError(f"unknown memory kind {kind!r}")
        if kind in ("la", "swla") and arch.kind != "linear":
            raise ValueError(f"{kind} requires a linear matrix memory")
        if kind == "valueless" and arch.kind != "vector":
            raise ValueError("valueless requires a vector memory")
        if kind in ("dla", "titans") and arch.kind == "vector":
            raise ValueError(f"{kind} does not support the vector memory")
        self.kind = kind
        self.arch = arch

    @property
    def needs_momentum(self) -> bool:
        return self.kind == "titans"

    @property
    def uses_window(self) -> bool:
        return self.kind == "swla"

    def step(
        self,
        state: MemoryState,
        k: Tensor,
        v: Tensor,
        hp: InnerHyperparams | None = None,
        prev_kv: tuple[Tensor, Tensor] | None = None,
    ) -> MemoryState:
        hp = hp if hp is not None else InnerHyperparams()
        if self.kind == "la":
            return linear_update(state, k, v)
        if self.kind == "valueless":
            return valueless_update(state, k)
        if self.kind == "swla":
            if prev_kv is None:
                prev_kv = (T.zeros(k.shape), T.zeros(v.shape))
            return swla_update(state, (prev_kv, (k, v)), hp)
        if self.kind == "dla":
            return dla_update(state, k, v, hp)
        return titans_update(state, k, v, hp)
