"""Segment plans: how a sequence of length L is cut into cached segments.

Two modes.  Constant: equal segments of size C with a short trailing
remainder.  Logarithmic: segment lengths are the set bits of L in binary,
largest first, so a stream of growing L maintains Fenwick-style boundaries
and at most floor(log2 L) + 1 segments exist at any time.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class SegmentPlan:
    lengths: tuple[int, ...]
    mode: str  # 'constant' or 'logarithmic'
    chunk: int | None = None  # C for constant mode

    def __post_init__(self):
        if not self.lengths or any(n <= 0 for n in self.lengths):
            raise ValueError(f"segment lengths must be positive, got {self.lengths}")

    @property
    def total(self) -> int:
        return sum(self.lengths)

    @property
    def num_segments(self) -> int:
        return len(self.lengths)


def constant_plan(length: int, chunk: int) -> SegmentPlan:
    """ceil(L/C) segments of size C; the last holds the remainder."""
    if length < 1:
        raise ValueError(f"sequence length must be >= 1, got {length}")
    if chunk < 1:
        raise ValueError(f"segment size must be >= 1, got {chunk}")
    lengths = [chunk] * (length // chunk)
    if length % chunk:
        lengths.append(length % chunk)
    return SegmentPlan(tuple(lengths), "constant", chunk)


def logarithmic_plan(length: int) -> SegmentPlan:
    """Set-bit decomposition of L, strictly decreasing powers of two."""
    if length < 1:
        raise ValueError(f"sequence length must be >= 1, got {length}")
    lengths = []
    bit = 1 << (length.bit_length() - 1)
    while bit:
        if length & bit:
            lengths.append(bit)
        bit >>= 1
    return SegmentPlan(tuple(lengths), "logarithmic")


def boundaries(plan: SegmentPlan) -> list[int]:
    """Absolute 1-based token indices that end each segment (prefix sums)."""
    out = []
    acc = 0
    for n in plan.lengths:
        acc += n
        out.append(acc)
    return out


@dataclass(frozen=True)
class RestepResult:
    plan: SegmentPlan
    # Boundary indices whose cached checkpoints are now obsolete.  The
    # merged span's state is the checkpoint at its right boundary, which the
    # stream caches when the closing token arrives.
    retired: tuple[int, ...] = field(default=())


def logarithmic_restep(prev: SegmentPlan, new_length: int) -> RestepResult:
    """Grow a streaming logarithmic plan from L to L+1.

    Only meaningful for checkpoint-mode caches: retired boundaries name
    checkpoints that fold into the new rightmost segment.  Re-compressing
    merged spans for independent compressors is not defined here.
    """
    if prev.mode != "logarithmic":
        raise ValueError("logarithmic_restep requires a logarithmic plan")
    if new_length != prev.total + 1:
        raise ValueError(
            f"restep grows the plan one token at a time: have L={prev.total}, "
            f"asked for {new_length}"
        )
    new_plan = logarithmic_plan(new_length)
    old_bounds = set(boundaries(prev))
    new_bounds = set(boundaries(new_plan))
    retired = tuple(sorted(old_bounds - new_bounds))
    return RestepResult(new_plan, retired)
