"""Finite-difference verification of the analytic gradients.

Two suites: module-level checks on a single attention block and a small
loss head, and an end-to-end check of the full composite loss over a random
sample of parameter entries drawn across every module.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import SparsityConfig, attention_block, init_attention_block
from .autodiff import ParamStore, Tensor
from .config import ConfigError, MaltConfig, tiny_config
from .model import build_model, compute_loss
from .rng import make_rng

TOLERANCE = 1e-6
MAX_PARAMS = 50_000


@dataclass
class CheckResult:
    suite: str
    name: str
    index: tuple[int, ...]
    error: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def _sample_entries(store: ParamStore, count: int, rng: np.random.Generator) -> list[tuple[str, tuple]]:
    """``count`` (name, index) pairs; one tensor per top-level module first, then shuffled cycling."""
    names = store.names()
    modules: dict[str, list[str]] = {}
    for n in names:
        modules.setdefault(n.split(".", 1)[0], []).append(n)
    chosen = [group[int(rng.integers(len(group)))] for group in modules.values()]
    order = list(rng.permutation(len(names)))
    while len(chosen) < count:
        if not order:
            order = list(rng.permutation(len(names)))
        chosen.append(names[order.pop()])
    picks = []
    for name in chosen[:count]:
        shape = store.entries[name].value.shape
        flat = int(rng.integers(store.entries[name].value.size))
        picks.append((name, tuple(int(i) for i in np.unravel_index(flat, shape))))
    return picks


def _check(suite, store, objective, picks, h) -> list[CheckResult]:
    store.zero_grad()
    ad.backward(objective())
    value = lambda: objective().data.item()  # noqa: E731
    return [CheckResult(suite, name, idx, ad.finite_diff_check(value, store, name, idx, h=h))
            for name, idx in picks]


def random_batch(cfg: MaltConfig, rng: np.random.Generator, batch: int = 2):
    """Random windows with a padded prefix in the first window."""
    size = cfg.m_s + cfg.m_l
    windows = rng.standard_normal((batch, size, cfg.d_in))
    valid = np.ones((batch, size), dtype=bool)
    valid[0, : size // 3] = False
    windows[~valid] = 0.0
    labels = rng.integers(0, cfg.num_outputs, size=(batch, cfg.m_s))
    label_valid = valid[:, cfg.m_l:]
    return windows, valid, labels, label_valid


def end_to_end(cfg: MaltConfig | None = None, samples: int = 32, h: float = 1e-5,
               seed: int = 0) -> list[CheckResult]:
    cfg = cfg or tiny_config()
    model = build_model(cfg)
    if model.store.num_values() >= MAX_PARAMS:
        raise ConfigError(f"gradcheck needs a tiny config (< {MAX_PARAMS} parameters)")
    rng = make_rng(seed)
    batch = random_batch(cfg, rng)
    objective = lambda: compute_loss(model, *batch).total_tensor  # noqa: E731
    return _check("end-to-end", model.store, objective, _sample_entries(model.store, samples, rng), h)


def module_level(dim: int = 8, heads: int = 2, seed: int = 0, h: float = 1e-5) -> list[CheckResult]:
    """Attention blocks (self, sparse cross) and a cross-entropy head, every parameter tensor."""
    rng = make_rng(seed)
    results = []
    for mode, sparsity in (("self", SparsityConfig(k=1, enabled=False)),
                           ("cross", SparsityConfig(k=3, enabled=True))):
        store = ParamStore()
        w = init_attention_block(store, f"block_{mode}", dim, rng, cross=mode == "cross")
        x1 = Tensor(rng.standard_normal((2, 5, dim)))
        x2 = x1 if mode == "self" else Tensor(rng.standard_normal((2, 7, dim)))
        proj = Tensor(rng.standard_normal((2, 5, dim)))
        objective = lambda: ad.tensor_sum(ad.mul(  # noqa: E731
            attention_block(x1, x2, w, sparsity, heads, mode=mode), proj))
        picks = [(n, tuple(int(i) for i in np.unravel_index(
            int(rng.integers(store.entries[n].value.size)), store.entries[n].value.shape)))
            for n in store.names()]
        results += _check(f"block/{mode}", store, objective, picks, h)

    store = ParamStore()
    logits = store.add("head.logits", rng.standard_normal((3, 4)))
    labels = rng.integers(0, 4, size=3)
    picks = [("head.logits", (i, j)) for i in range(3) for j in range(4)]
    results += _check("cross-entropy", store, lambda: ad.cross_entropy(logits, labels), picks, h)
    return results


def run_all(cfg: MaltConfig | None = None, samples: int = 32, seed: int = 0) -> list[CheckResult]:
    return module_level(seed=seed) + end_to_end(cfg, samples=samples, seed=seed)


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'suite':<14} {'parameter':<40} {'index':<12} {'rel.error':>10}  status"]
    for r in results:
        lines.append(f"{r.suite:<14} {r.name:<40} {str(r.index):<12} {r.error:>10.2e}  "
                     f"{'ok' if r.ok else 'FAIL'}")
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    name, err = max(worst.items(), key=lambda kv: kv[1])
    lines.append(f"worst: {name} {err:.2e} (tolerance {TOLERANCE:.0e})")
    return "\n".join(lines)
