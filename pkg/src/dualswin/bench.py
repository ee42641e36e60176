"""Single-sample inference latency benchmark.

Times the model forward pass only (no image decode or disk IO) over N
iterations after W warmup passes, and reports mean/std/p50/p95 seconds plus
throughput alongside a hardware descriptor.
"""

from __future__ import annotations

import os
import platform
import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .autodiff import Tensor, no_grad
from .model import DualSwinUnet

# Reference latency figure for this architecture class; included in reports
# for context only (absolute timings are hardware-bound).
REFERENCE_LATENCY_S = 0.18


@dataclass
class BenchResult:
    mean_s: float
    std_s: float
    p50_s: float
    p95_s: float
    throughput: float
    iterations: int
    warmup: int
    img_size: int
    param_count: int
    hardware: str
    times_s: np.ndarray


def hardware_descriptor() -> str:
    return (f"{platform.system()} {platform.machine()}, "
            f"{os.cpu_count()} cpus, python {platform.python_version()}, "
            f"numpy {np.__version__}")


def run_benchmark(model: DualSwinUnet, iterations: int = 100, warmup: int = 10,
                  seed: int = 0) -> BenchResult:
    rng = nn.rng_for(seed, nn.STREAM_BENCH)
    cfg = model.cfg
    x = Tensor(rng.random((1, cfg.img_size, cfg.img_size, cfg.in_channels))
               .astype(model.dtype))
    times = np.empty(iterations, dtype=np.float64)
    with no_grad():
        for _ in range(warmup):
            model.forward(x)
        for i in range(iterations):
            t0 = time.perf_counter()
            model.forward(x)
            times[i] = time.perf_counter() - t0
    return BenchResult(
        mean_s=float(times.mean()),
        std_s=float(times.std()),
        p50_s=float(np.percentile(times, 50)),
        p95_s=float(np.percentile(times, 95)),
        throughput=float(1.0 / times.mean()),
        iterations=iterations,
        warmup=warmup,
        img_size=cfg.img_size,
        param_count=model.parameter_count(),
        hardware=hardware_descriptor(),
        times_s=times,
    )


def format_report(r: BenchResult) -> str:
    lines = [
        "# single-sample inference latency report",
        "# timing covers the model forward pass only; image decode and IO are excluded",
        f"hardware = {r.hardware}",
        f"img_size = {r.img_size}",
        f"param_count = {r.param_count}",
        f"iterations = {r.iterations}",
        f"warmup = {r.warmup}",
        f"mean_s = {r.mean_s:.6f}",
        f"std_s = {r.std_s:.6f}",
        f"p50_s = {r.p50_s:.6f}",
        f"p95_s = {r.p95_s:.6f}",
        f"throughput_per_s = {r.throughput:.3f}",
        f"reference_mean_s = {REFERENCE_LATENCY_S} (reference figure for this architecture, context only)",
    ]
    return "\n".join(lines)
