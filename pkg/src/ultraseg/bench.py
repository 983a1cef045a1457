"""Throughput benchmark: continuous forward passes on a fixed input."""

from __future__ import annotations

import os
import platform
import threading
import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import kernels
from .autodiff import no_grad
from .errors import ConfigError
from .tensor import Rng
from .zoo import Model

WALL_CLOCK = "time.perf_counter around each forward; fps = iterations / timed wall time"


@dataclass
class BenchReport:
    model: str
    input_shape: list
    threads: int
    warmup: int
    iters: int
    fps: float
    latency_mean_ms: float
    latency_p50_ms: float
    latency_p95_ms: float
    wall_seconds: float
    method: str
    affinity_applied: bool
    affinity_cpus: list
    kernel_backend: str
    machine: str

    def to_dict(self):
        return asdict(self)


def _pin_current_thread(cpu):
    """Restrict the calling thread to one CPU; returns the previous mask or None."""
    if not hasattr(os, "sched_setaffinity"):
        return None
    try:
        prev = os.sched_getaffinity(0)
        os.sched_setaffinity(0, {cpu})
        return prev
    except OSError:
        return None


def _worker(model, image, warmup, iters, lat, pin_cpu, result, barrier):
    prev = _pin_current_thread(pin_cpu) if pin_cpu is not None else None
    result["affinity"] = prev is not None
    try:
        with no_grad():
            for _ in range(warmup):
                model(image)
            barrier.wait()
            clock = time.perf_counter
            result["start"] = clock()
            for i in range(iters):
                t = clock()
                model(image)
                lat[i] = clock() - t
            result["end"] = clock()
    except BaseException as exc:
        result["error"] = exc
        barrier.abort()
    finally:
        if prev is not None:
            os.sched_setaffinity(0, prev)


def run_bench(model: Model, threads=1, iters=1000, warmup=20, input_hw=(256, 256), seed=0) -> BenchReport:
    """Time ``iters`` forward passes per worker thread.

    With ``threads == 1`` one worker runs pinned to a single CPU when the
    platform allows it. BLAS is limited to one thread per worker in every
    mode so that ``threads`` is the only source of parallelism.
    """
    if iters < 10:
        raise ConfigError("bench needs iters >= 10")
    if threads < 1:
        raise ConfigError("bench needs threads >= 1")
    if warmup < 0:
        raise ConfigError("warmup must be >= 0")
    cap = os.environ.get("USEG_THREADS")
    if cap:
        threads = max(1, min(threads, int(cap)))
    model.eval()
    h, w = input_hw
    model.check_input((1, 3, h, w))
    images = [Rng(seed).fork(k).tensor((1, 3, h, w), 0.0, 1.0) for k in range(threads)]
    lats = [np.zeros(iters) for _ in range(threads)]
    allowed = sorted(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else []
    pin = [allowed[0]] if threads == 1 and allowed else [None] * threads
    results = [{} for _ in range(threads)]
    barrier = threading.Barrier(threads + 1)
    workers = [
        threading.Thread(target=_worker, args=(model, images[k], warmup, iters, lats[k], pin[k], results[k], barrier))
        for k in range(threads)
    ]
    with threadpool_limits(limits=1):
        for t in workers:
            t.start()
        try:
            barrier.wait()
        except threading.BrokenBarrierError:
            pass
        for t in workers:
            t.join()
    for r in results:
        if "error" in r:
            raise r["error"]
    # the timed window comes from the workers; the main thread may start late
    wall = max(r["end"] for r in results) - min(r["start"] for r in results)
    lat_ms = np.concatenate(lats) * 1e3
    total = threads * iters
    applied = threads == 1 and bool(results[0].get("affinity"))
    return BenchReport(
        model=model.name,
        input_shape=[1, 3, h, w],
        threads=threads,
        warmup=warmup,
        iters=iters,
        fps=total / wall,
        latency_mean_ms=float(lat_ms.mean()),
        latency_p50_ms=float(np.percentile(lat_ms, 50)),
        latency_p95_ms=float(np.percentile(lat_ms, 95)),
        wall_seconds=wall,
        method=WALL_CLOCK,
        affinity_applied=applied,
        affinity_cpus=pin if applied else [],
        kernel_backend=kernels.BACKEND,
        machine=f"{platform.machine()} {platform.processor() or platform.system()}".strip(),
    )
