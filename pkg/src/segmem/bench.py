"""Throughput and FLOP benchmarking.

Times the per-token cost of the memory-layer scans (sparse selective vs
gated-residual vs the dense softmax-attention reference) across sequence
lengths, reports analytic FLOP counts from the same accounting the
instrumented forward uses, and compares the numba kernels against their
plain-numpy fallbacks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import backend, kernels
from .instrument import FlopCounter, retrieval_cost
from .memory import MemoryArch
from .segmentation import boundaries, constant_plan


@dataclass
class BenchRow:
    variant: str
    length: int
    chunk: int
    k_top: int
    median_ms: float
    us_per_token: float
    tokens_per_sec: float
    retrieval_flops: int
    update_flops: int

    def as_record(self) -> dict:
        return {
            "kind": "bench",
            "variant": self.variant,
            "length": self.length,
            "chunk": self.chunk,
            "k_top": self.k_top,
            "median_ms": self.median_ms,
            "us_per_token": self.us_per_token,
            "tokens_per_sec": self.tokens_per_sec,
            "retrieval_flops": self.retrieval_flops,
            "update_flops": self.update_flops,
        }


def _median_time(fn, runs: int, warmup: int = 1) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def analytic_flops(variant: str, length: int, chunk: int, k_top: int, d: int) -> FlopCounter:
    """The same counts the instrumented forward would accumulate."""
    from . import fused

    counter = FlopCounter()
    plan = constant_plan(length, chunk)
    fused._count(counter, plan, d, fused._CODES.get(variant, fused.NONE), k_top)
    return counter


def scan_timings(
    d: int = 32,
    lengths=(256, 512, 1024, 2048),
    chunk: int = 32,
    k_top: int = 4,
    variants=("none", "grm", "ssc", "attention"),
    runs: int = 5,
    seed: int = 0,
) -> list[BenchRow]:
    kernels.warmup()
    rng = np.random.default_rng(seed)
    rows = []
    for length in lengths:
        K, V, Q, U = (rng.normal(size=(length, d)) for _ in range(4))
        ends = np.asarray(boundaries(constant_plan(length, chunk)), dtype=np.int64)
        for variant in variants:
            if variant == "attention":
                fn = lambda: kernels.attention_scan(K, V, Q)
            elif variant == "none":
                fn = lambda: kernels.la_plain_scan(K, V, Q)
            else:
                fn = lambda v=variant: kernels.la_mc_scan(
                    K, V, Q, U, ends, False, v != "ssc", v, k_top
                )
            med = _median_time(fn, runs)
            if variant == "attention":
                # scores + softmax + weighted sum per token: ~4 t d MACs
                ret = int(sum(4 * (t + 1) * d for t in range(length)))
                upd = 0
            else:
                counter = analytic_flops(variant, length, chunk, k_top, d)
                ret = counter.retrieval_flops
                upd = counter.update_flops
            rows.append(
                BenchRow(
                    variant=variant,
                    length=length,
                    chunk=chunk,
                    k_top=k_top,
                    median_ms=med * 1e3,
                    us_per_token=med / length * 1e6,
                    tokens_per_sec=length / med,
                    retrieval_flops=ret,
                    update_flops=upd,
                )
            )
    return rows


def backend_comparison(
    d: int = 32, length: int = 1024, chunk: int = 32, k_top: int = 4,
    runs: int = 5, seed: int = 0,
) -> list[dict]:
    """numba kernels vs their plain-numpy fallbacks on identical inputs."""
    kernels.warmup()
    rng = np.random.default_rng(seed)
    K, V, Q, U = (rng.normal(size=(length, d)) for _ in range(4))
    ends = np.asarray(boundaries(constant_plan(length, chunk)), dtype=np.int64)
    jobs = {
        "plain_scan": lambda impl: impl.la_plain_scan(K, V, Q),
        "grm_scan": lambda impl: impl.la_mc_scan(
            K, V, Q, U, ends, False, True, kernels.VARIANT_CODES["grm"], k_top
        ),
        "ssc_scan": lambda impl: impl.la_mc_scan(
            K, V, Q, U, ends, False, False, kernels.VARIANT_CODES["ssc"], k_top
        ),
        "attention_scan": lambda impl: impl.attention_scan(K, V, Q),
    }
    rows = []
    for name, job in jobs.items():
        out_nb = job(kernels.numba_impl)
        out_np = job(kernels.numpy_impl)
        dev = float(np.abs(out_nb - out_np).max())
        t_nb = _median_time(lambda: job(kernels.numba_impl), runs)
        t_np = _median_time(lambda: job(kernels.numpy_impl), runs)
        rows.append(
            {
                "kind": "backend_compare",
                "kernel": name,
                "length": length,
                "numba_ms": t_nb * 1e3,
                "numpy_ms": t_np * 1e3,
                "speedup": t_np / t_nb,
                "max_dev": dev,
            }
        )
    return rows


def format_table(rows) -> str:
    if not rows:
        return "(no rows)"
    if isinstance(rows[0], BenchRow):
        rows = [r.as_record() for r in rows]
    keys = [k for k in rows[0] if k != "kind"]
    widths = {k: max(len(k), *(len(_fmt(r[k])) for r in rows)) for k in keys}
    lines = ["  ".join(k.ljust(widths[k]) for k in keys)]
    for r in rows:
        lines.append("  ".join(_fmt(r[k]).ljust(widths[k]) for k in keys))
    return "\n".join(lines)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)
