"""Ablation variants mirroring the component / design-choice comparisons.

Every variant is a config transformation of a base config; all variants of
one seed share that seed, so they start from the same data and sampling
stream.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError, MaltConfig
from .data import LabeledStream
from .training import evaluate, fit

DEFAULT_K_GRID = (4, 8, 16, 32, 64, 128)


def expand_variant(cfg: MaltConfig, variant: str,
                   k_grid: tuple[int, ...] = DEFAULT_K_GRID) -> list[tuple[str, MaltConfig]]:
    """Labeled configs for one variant name (``k-sweep`` yields one per grid value)."""
    if variant == "full":
        return [("full", cfg)]
    if variant == "no-sparse":
        return [(variant, cfg.replace(sparse=False))]
    if variant == "no-recurrent":
        return [(variant, cfg.replace(fusion="cascade"))]
    if variant == "no-aux":
        return [(variant, cfg.replace(beta=0.0))]
    if variant == "k-sweep":
        return [(f"k={k}", cfg.replace(k=k, sparse=True)) for k in k_grid]
    key, sep, value = variant.partition("=")
    if sep and key == "N":
        n = int(value)
        if not 1 <= n <= 4:
            raise ConfigError(f"N variant must be in 1..4, got {n}")
        return [(variant, cfg.replace(N=n))]
    if sep and key == "k":
        return [(variant, cfg.replace(k=int(value), sparse=True))]
    if sep and key == "fusion":
        if value not in ("add", "cascade", "recurrent"):
            raise ConfigError(f"unknown fusion {value!r}")
        return [(variant, cfg.replace(fusion=value))]
    raise ConfigError(f"unknown ablation variant {variant!r}")


@dataclass
class AblationRow:
    variant: str
    seed: int
    config: MaltConfig
    mean_ap: float
    mean_cap: float
    accuracy: float
    params: int


def run_ablation(cfg: MaltConfig, variants: list[str], train: list[LabeledStream],
                 evaluation: list[LabeledStream], seeds: list[int],
                 k_grid: tuple[int, ...] = DEFAULT_K_GRID, eval_stride: int | None = None,
                 on_row=None) -> list[AblationRow]:
    jobs = [job for v in variants for job in expand_variant(cfg, v, k_grid)]
    for _, c in jobs:
        c.validate()
    rows = []
    for seed in seeds:
        for label, c in jobs:
            c = c.replace(seed=seed)
            state = fit(c, train)
            res = evaluate(state.model, evaluation, stride=eval_stride)
            row = AblationRow(label, seed, c, res.report.mean_ap, res.report.mean_cap, res.accuracy,
                              state.model.store.num_values())
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def summarize(rows: list[AblationRow]) -> list[dict]:
    """Median metrics per variant (in first-seen order)."""
    order: list[str] = []
    by: dict[str, list[AblationRow]] = {}
    for r in rows:
        if r.variant not in by:
            order.append(r.variant)
            by[r.variant] = []
        by[r.variant].append(r)
    out = []
    for v in order:
        rs = by[v]
        c = rs[0].config
        out.append({"variant": v, "N": c.N, "k": c.k if c.sparse else None, "fusion": c.fusion,
                    "beta": c.beta, "params": rs[0].params, "seeds": [r.seed for r in rs],
                    "mAP": [r.mean_ap for r in rs], "median_mAP": float(np.median([r.mean_ap for r in rs])),
                    "median_mcAP": float(np.median([r.mean_cap for r in rs])),
                    "median_acc": float(np.median([r.accuracy for r in rs]))})
    return out


def best_k(summary: list[dict]) -> int | None:
    ks = [s for s in summary if s["variant"].startswith("k=")]
    if not ks:
        return None
    return max(ks, key=lambda s: s["median_mAP"])["k"]


def format_table(summary: list[dict]) -> str:
    lines = [f"{'variant':<16} {'N':>2} {'k':>5} {'fusion':<10} {'beta':>5} {'params':>8} "
             f"{'mAP':>7} {'mcAP':>7} {'acc':>7}"]
    for s in summary:
        k = "-" if s["k"] is None else str(s["k"])
        lines.append(f"{s['variant']:<16} {s['N']:>2} {k:>5} {s['fusion']:<10} {s['beta']:>5.2f} "
                     f"{s['params']:>8} {s['median_mAP']:>7.4f} {s['median_mcAP']:>7.4f} "
                     f"{s['median_acc']:>7.4f}")
    k = best_k(summary)
    if k is not None:
        lines.append(f"best k: {k}")
    return "\n".join(lines)
