"""Single-core inference latency measurement.

Per dataset: a fixed batch is assembled, `warmup` untimed predictions run
first, then `iters` timed predictions on the monotonic clock. When a single
batch is too fast for the timer, an inner repetition count is raised
automatically and the measured time divided. Raw samples are retained so
anything beyond the mean can be derived later.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

try:
    import psutil
except ImportError:  # pragma: no cover - psutil is a soft dependency
    psutil = None

MIN_SAMPLE_SECONDS = 1e-4


class BenchError(RuntimeError):
    pass


@dataclass
class LatencyReport:
    model_name: str
    per_dataset_ms: dict
    macro_mean_ms: float
    batch_size: int
    warmup_iters: int
    measured_iters: int
    raw_samples_ms: dict = field(default_factory=dict)
    inner_reps: dict = field(default_factory=dict)
    threads_before: dict = field(default_factory=dict)
    threads_after: dict = field(default_factory=dict)
    pinned_core: int | None = None


def _fixed_batch(features: np.ndarray, batch_size: int) -> np.ndarray:
    idx = np.resize(np.arange(len(features)), batch_size)
    return np.ascontiguousarray(features[idx])


def _thread_count() -> int | None:
    if psutil is None:
        return None
    return psutil.Process(os.getpid()).num_threads()


def measure_latency(predict, datasets, batch_size: int = 1000, warmup: int = 10,
                    iters: int = 100, pin_core: bool = False,
                    model_name: str = "model") -> LatencyReport:
    """Time `predict` on a fixed batch per dataset; macro-mean across datasets.

    `predict` is a callable mapping a feature matrix to predictions, or a
    mapping {dataset_name: callable} when each dataset has its own model.
    `datasets` is a list of (name, feature_matrix) pairs. With `pin_core`
    the process affinity is restricted to one logical core for the measured
    region (ignored on platforms without sched_setaffinity).
    """
    if warmup < 0 or iters < 1 or batch_size < 1:
        raise BenchError("warmup >= 0, iters >= 1, batch_size >= 1 required")

    old_affinity = None
    pinned = None
    if pin_core and hasattr(os, "sched_setaffinity"):
        try:
            old_affinity = os.sched_getaffinity(0)
            pinned = min(old_affinity)
            os.sched_setaffinity(0, {pinned})
        except OSError:
            old_affinity = None
            pinned = None

    per_dataset: dict = {}
    raw: dict = {}
    inner_used: dict = {}
    threads_before: dict = {}
    threads_after: dict = {}
    try:
        for name, features in datasets:
            fn = predict[name] if isinstance(predict, dict) else predict
            batch = _fixed_batch(np.asarray(features, dtype=np.float64), batch_size)
            for _ in range(warmup):
                fn(batch)
            # raise inner repetitions until one sample exceeds the timer floor
            inner = 1
            while True:
                t0 = time.perf_counter()
                for _ in range(inner):
                    fn(batch)
                probe = time.perf_counter() - t0
                if probe >= MIN_SAMPLE_SECONDS or inner >= 10**6:
                    break
                inner *= 10
            threads_before[name] = _thread_count()
            samples = np.empty(iters, dtype=np.float64)
            for i in range(iters):
                t0 = time.perf_counter()
                for _ in range(inner):
                    fn(batch)
                samples[i] = (time.perf_counter() - t0) / inner * 1000.0
            threads_after[name] = _thread_count()
            per_dataset[name] = float(samples.mean())
            raw[name] = samples.tolist()
            inner_used[name] = inner
    finally:
        if old_affinity is not None:
            os.sched_setaffinity(0, old_affinity)

    return LatencyReport(
        model_name=model_name,
        per_dataset_ms=per_dataset,
        macro_mean_ms=float(np.mean(list(per_dataset.values()))),
        batch_size=batch_size,
        warmup_iters=warmup,
        measured_iters=iters,
        raw_samples_ms=raw,
        inner_reps=inner_used,
        threads_before=threads_before,
        threads_after=threads_after,
        pinned_core=pinned,
    )


def speedup(teacher_ms: float, student_ms: float) -> float:
    """How many times faster the student is than the teacher."""
    if student_ms <= 0:
        raise BenchError(f"student latency must be > 0, got {student_ms}")
    return teacher_ms / student_ms
