"""Seeded desk-scale experiments shared by the acceptance suite and scripts/."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import MaltConfig
from .data import generate_benchmark, split_streams
from .training import evaluate, fit


def benchmark(cfg: MaltConfig):
    spec = cfg.data
    streams = generate_benchmark(spec)
    return split_streams(streams, spec.num_train / (spec.num_train + spec.num_eval), spec.seed)


# training budget used for the learning-capability check (<= 25 epochs)
LEARNING = dict(epochs=12, batch_size=16, windows_per_stream=32)

# reduced model for the 5-seed depth comparison, to fit the suite's time budget
DEPTH_ABLATION = dict(d_model=32, m_l=64, k=32, epochs=6, batch_size=16, windows_per_stream=32)


@dataclass
class SeedRun:
    seed: int
    train_acc: float
    eval_map: float
    eval_mcap: float
    seconds: float


def learning_run(cfg: MaltConfig, seeds, train_stride: int = 8, eval_stride: int = 4,
                 log=None) -> list[SeedRun]:
    """Train ``cfg`` once per seed; report train accuracy and eval mAP."""
    train, evaluation = benchmark(cfg)
    runs = []
    for seed in seeds:
        t0 = time.perf_counter()
        state = fit(cfg.replace(seed=seed), train)
        tr = evaluate(state.model, train, stride=train_stride)
        ev = evaluate(state.model, evaluation, stride=eval_stride)
        run = SeedRun(seed, tr.accuracy, ev.report.mean_ap, ev.report.mean_cap,
                      time.perf_counter() - t0)
        runs.append(run)
        if log:
            log(f"seed {seed}: train acc {run.train_acc:.4f}  eval mAP {run.eval_map:.4f}  "
                f"({run.seconds:.0f}s)")
    return runs


def depth_comparison(cfg: MaltConfig, seeds, depths=(1, 2), eval_stride: int = 8,
                     log=None) -> dict[int, list[float]]:
    """Eval mAP per seed for each encoder/decoder depth N."""
    train, evaluation = benchmark(cfg)
    out: dict[int, list[float]] = {n: [] for n in depths}
    for seed in seeds:
        for n in depths:
            state = fit(cfg.replace(N=n, seed=seed), train)
            m = evaluate(state.model, evaluation, stride=eval_stride).report.mean_ap
            out[n].append(m)
            if log:
                log(f"seed {seed} N={n}: eval mAP {m:.4f}")
    return out


def median_gap(scores: dict[int, list[float]], hi: int = 2, lo: int = 1) -> tuple[float, list[float]]:
    gaps = [a - b for a, b in zip(scores[hi], scores[lo])]
    return float(np.median(gaps)), gaps
