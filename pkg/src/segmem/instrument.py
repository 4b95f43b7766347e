"""FLOP accounting for memory updates and cached-memory retrieval."""

from __future__ import annotations

from dataclasses import dataclass, field

from .memory import MemoryArch


def retrieval_cost(arch: MemoryArch) -> int:
    """Multiply-accumulate count of one retrieval from one memory state."""
    if arch.kind == "linear":
        return 2 * arch.d * arch.d
    if arch.kind == "mlp":
        return 4 * arch.d * arch.hidden + arch.d
    return arch.d


def update_cost(kind: str, arch: MemoryArch) -> int:
    d = arch.d
    if kind == "la":
        return 2 * d * d
    if kind == "swla":
        return 6 * d * d
    if kind == "valueless":
        return d
    # gradient-based rules: forward + gradient + step
    per_param = sum(2 * a * b if len(s) == 2 else 2 * s[0]
                    for s in arch.param_shapes()
                    for a, b in [s if len(s) == 2 else (s[0], 1)])
    factor = 3 if kind == "dla" else 5
    return factor * per_param


@dataclass
class FlopCounter:
    """Monotone per-run counters, split by phase."""

    update_flops: int = 0
    retrieval_flops: int = 0
    memories_touched: int = 0
    tokens: int = 0
    max_touched_per_token: int = 0
    touched_per_token: list = field(default_factory=list)

    def count_update(self, kind: str, arch: MemoryArch) -> None:
        self.update_flops += update_cost(kind, arch)
        self.tokens += 1

    def count_retrieval(self, touched: int, arch: MemoryArch) -> None:
        self.retrieval_flops += touched * retrieval_cost(arch)
        self.memories_touched += touched
        self.touched_per_token.append(touched)
        if touched > self.max_touched_per_token:
            self.max_touched_per_token = touched

    def report(self) -> dict:
        return {
            "update_flops": self.update_flops,
            "retrieval_flops": self.retrieval_flops,
            "memories_touched": self.memories_touched,
            "tokens": self.tokens,
            "max_touched_per_token": self.max_touched_per_token,
        }
