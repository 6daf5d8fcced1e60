"""Wall-clock latency measurement: warmup, then the median of timed runs."""

from __future__ import annotations

import statistics
import time
from typing import Callable

import torch

DEFAULT_RUNS = 50


def median_ms(samples: list[float]) -> float:
    return float(statistics.median(samples))


def time_callable(fn: Callable[[], object], runs: int = DEFAULT_RUNS, warmup: int = 3) -> list[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(runs):
        start = time.perf_counter()
        fn()
        out.append((time.perf_counter() - start) * 1000.0)
    return out


@torch.no_grad()
def bench_latency(model, input_shape, runs: int = DEFAULT_RUNS, warmup: int = 3, t: float = 0.5,
                  seed: int = 0) -> float:
    """Median milliseconds of one denoising forward on a random latent of ``input_shape``."""
    if runs < 3:
        raise ValueError("runs must be >= 3")
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(*input_shape, generator=g)
    prompts = torch.zeros(input_shape[0], dtype=torch.long)
    was_training = model.training
    model.eval()
    try:
        samples = time_callable(lambda: model(x, t, prompts), runs=runs, warmup=warmup)
    finally:
        model.train(was_training)
    return median_ms(samples)
