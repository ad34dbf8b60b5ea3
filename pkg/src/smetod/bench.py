"""Latency scaling and expert-count ablation harnesses.

CSV schema ``bench-v1`` (one row per configuration, columns in this order)::

    m, p, total_slots, parameter_count, median_latency_ns, p10_ns, p90_ns,
    repeats, jga, status
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import no_grad
from .corpus import Corpus
from .errors import BenchError, SmetodError
from .evaluate import evaluate_dst
from .rng import make_rng
from .textgen import TextGenerator
from .train import OptConfig, train
from .transformer import ModelConfig, Seq2SeqModel, expected_parameter_count

CSV_COLUMNS = (
    "m",
    "p",
    "total_slots",
    "parameter_count",
    "median_latency_ns",
    "p10_ns",
    "p90_ns",
    "repeats",
    "jga",
    "status",
)
MIN_REPEATS = 30
MIN_WARMUP = 5


@dataclass
class BenchRow:
    m: int
    p: int
    parameter_count: int
    median_latency_ns: float | None = None
    p10_ns: float | None = None
    p90_ns: float | None = None
    repeats: int = 0
    jga: float | None = None
    status: str = "ok"

    @property
    def total_slots(self) -> int:
        return self.m * self.p


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(
                [
                    r.m,
                    r.p,
                    r.total_slots,
                    r.parameter_count,
                    "" if r.median_latency_ns is None else f"{r.median_latency_ns:.1f}",
                    "" if r.p10_ns is None else f"{r.p10_ns:.1f}",
                    "" if r.p90_ns is None else f"{r.p90_ns:.1f}",
                    r.repeats,
                    "" if r.jga is None else f"{r.jga:.4f}",
                    r.status,
                ]
            )
        return buf.getvalue()


def check_timer_resolution(resolution: float | None = None) -> float:
    """Refuse to time with a clock coarser than one microsecond."""
    if resolution is None:
        resolution = time.get_clock_info("perf_counter").resolution
    if resolution > 1e-6:
        raise BenchError(f"timer resolution {resolution:g} s is coarser than 1 us")
    return resolution


def timing_loop(fn: Callable[[], object], out: np.ndarray, warmup: int) -> None:
    """Fill the preallocated int64 ``out`` with per-call durations in ns.

    The loop only writes into ``out``; any allocation inside the timed region
    comes from ``fn`` itself.
    """
    clock = time.perf_counter_ns
    for _ in range(warmup):
        fn()
    for i in range(out.shape[0]):
        t0 = clock()
        fn()
        out[i] = clock() - t0


def summarize(samples_ns: np.ndarray) -> tuple[float, float, float]:
    return (
        float(np.median(samples_ns)),
        float(np.percentile(samples_ns, 10)),
        float(np.percentile(samples_ns, 90)),
    )


def fixed_batch(config: ModelConfig, batch_size: int, length: int, seed: int = 0) -> np.ndarray:
    rng = make_rng(seed, "bench-input")
    return rng.integers(3, config.vocab_size, size=(batch_size, length))


def bench_latency(
    base: ModelConfig,
    grid: Sequence[tuple[int, int]],
    seq_len: int = 64,
    batch_size: int = 1,
    repeats: int = MIN_REPEATS,
    warmup: int = MIN_WARMUP,
    seed: int = 0,
) -> BenchReport:
    """Median single-thread latency of the encoder forward pass per (m, p).

    Only the Soft-MoE shape changes between rows; the input batch is the
    same seeded array for every row.
    """
    if repeats < MIN_REPEATS or warmup < MIN_WARMUP:
        raise BenchError(f"need repeats >= {MIN_REPEATS} and warmup >= {MIN_WARMUP}")
    if seq_len > base.max_len:
        raise BenchError(f"seq_len {seq_len} exceeds max_len {base.max_len}")
    check_timer_resolution()
    ids = fixed_batch(base, batch_size, seq_len, seed)
    mask = np.ones(ids.shape, dtype=bool)
    report = BenchReport()
    with threadpool_limits(limits=1):
        for m, p in grid:
            config = replace(base, num_experts=m, slots_per_expert=p)
            model = Seq2SeqModel(config, seed=seed)
            samples = np.zeros(repeats, dtype=np.int64)

            def forward():
                with no_grad():
                    model._encode_batch(ids, mask)

            timing_loop(forward, samples, warmup)
            med, p10, p90 = summarize(samples)
            report.rows.append(BenchRow(m, p, model.parameter_count(), med, p10, p90, repeats))
    return report


def parse_expert_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValueError(f"bad expert list {text!r}") from None
    if not values or min(values) < 1:
        raise ValueError(f"bad expert list {text!r}")
    return values


def slot_grid(experts: Sequence[int], total_slots: int) -> list[tuple[int, int]]:
    """(m, p) pairs with m * p == total_slots."""
    grid = []
    for m in experts:
        if total_slots % m:
            raise ValueError(f"{m} experts do not divide {total_slots} total slots")
        grid.append((m, total_slots // m))
    return grid


def ablation_run(
    base: ModelConfig,
    grid: Sequence[tuple[int, int]],
    corpus: Corpus,
    opt: OptConfig,
    seed: int = 0,
    eval_split: str = "dev",
    progress: Callable[[str], None] | None = None,
) -> BenchReport:
    """Train one DST model per grid point and record dev JGA.

    A grid point that diverges or errors becomes a ``failed`` row; the sweep
    continues.
    """
    vocab = corpus.vocab()
    base = replace(base, vocab_size=len(vocab))
    train_ex = corpus.examples("dst", "train")
    dev_ex = corpus.examples("dst", eval_split)
    report = BenchReport()
    for m, p in grid:
        config = replace(base, num_experts=m, slots_per_expert=p)
        row = BenchRow(m, p, expected_parameter_count(config))
        try:
            model = Seq2SeqModel(config, seed=seed)
            row.parameter_count = model.parameter_count()
            with threadpool_limits(limits=1):
                train(model, train_ex, opt, vocab)
                result = evaluate_dst(TextGenerator(model, vocab, max_len=32), dev_ex)
            row.jga = result.jga
        except (SmetodError, FloatingPointError) as exc:
            row.status = f"failed: {type(exc).__name__}"
        if row.jga is not None and not (0.0 <= row.jga <= 100.0 and math.isfinite(row.jga)):
            row.status = "failed: jga out of range"
        report.rows.append(row)
        if progress is not None:
            progress(f"m={m} p={p} params={row.parameter_count} jga={row.jga} {row.status}")
    return report
