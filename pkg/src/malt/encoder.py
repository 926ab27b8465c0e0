"""Hierarchical encoder: N branches of growing depth over the long-term memory.

Branch ``n`` starts from its own learned latent of ``L / 2**(n-1)`` tokens,
compresses the long-term memory into it (self-attention on the latent, then
sparse cross-attention onto the memory), and then runs ``n - 1`` fuse stages.
Fuse stage ``p`` uses branch ``n-1``'s stage ``p-1`` output as queries and
this branch's stage ``p-1`` output as keys/values, which doubles the token
count each time.  Stage ``p`` of branch ``n`` therefore has
``L / 2**(n-p)`` tokens and every branch ends with ``L`` tokens.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import (DENSE, AttentionWeights, SparsityConfig, attention_block,
                        effective_sparsity, init_attention_block)
from .autodiff import ParamStore, Tensor
from .config import ConfigError


@dataclass
class BranchWeights:
    latent: Tensor
    compress_self: AttentionWeights
    compress_cross: AttentionWeights
    fuse: list[AttentionWeights]


@dataclass
class EncoderOutput:
    features: list[Tensor]          # f_1 .. f_N, each (..., L, D)
    stages: list[list[Tensor]]      # stages[n-1][p-1] = f_n^p


def latent_length(L: int, n: int) -> int:
    return L // 2 ** (n - 1)


def stage_length(L: int, n: int, p: int) -> int:
    """Token count of branch ``n``'s stage ``p`` output."""
    return L // 2 ** (n - p)


def check_hierarchy(L: int, N: int) -> None:
    if N < 1:
        raise ConfigError("encoder needs N >= 1 branches")
    if L < 1 or L % 2 ** (N - 1):
        raise ConfigError(f"L={L} is not divisible by 2^(N-1)={2 ** (N - 1)}")


def init_encoder(store: ParamStore, L: int, N: int, dim: int, rng: np.random.Generator,
                 prefix: str = "encoder") -> list[BranchWeights]:
    check_hierarchy(L, N)
    branches = []
    for n in range(1, N + 1):
        p = f"{prefix}.branch{n}"
        latent = store.add(f"{p}.lambda", rng.standard_normal((latent_length(L, n), dim)) * 0.02)
        branches.append(BranchWeights(
            latent=latent,
            compress_self=init_attention_block(store, f"{p}.compress_self", dim, rng, cross=False),
            compress_cross=init_attention_block(store, f"{p}.compress_cross", dim, rng, cross=True),
            fuse=[init_attention_block(store, f"{p}.fuse{q}", dim, rng, cross=True)
                  for q in range(2, n + 1)],
        ))
    return branches


def compress_stage(latent: Tensor, memory: Tensor, w: BranchWeights, s: SparsityConfig,
                   heads: int, key_valid: np.ndarray | None = None) -> Tensor:
    """First stage of a branch: latent self-attention, then sparse cross-attention onto ``memory``.

    ``memory`` is (..., m_l, D); the latent is broadcast over its leading axes.
    """
    m_l = memory.shape[-2]
    if m_l < 1:
        raise ad.ShapeError("long-term memory is empty")
    lam = ad.expand_batch(latent, memory.shape[:-2])
    lam = attention_block(lam, lam, w.compress_self, DENSE, heads, mode="self")
    return attention_block(lam, memory, w.compress_cross, effective_sparsity(s, m_l), heads,
                           mode="cross", key_valid=key_valid)


def fuse_stage(prev_branch: Tensor, this_branch: Tensor, w: AttentionWeights, heads: int) -> Tensor:
    """Dense cross-attention: preceding branch's stage output queries this branch's."""
    return attention_block(prev_branch, this_branch, w, DENSE, heads, mode="cross")


def run_encoder(memory: Tensor, branches: list[BranchWeights], s: SparsityConfig, heads: int,
                L: int, key_valid: np.ndarray | None = None) -> EncoderOutput:
    N = len(branches)
    check_hierarchy(L, N)
    stages: list[list[Tensor]] = []
    for n, w in enumerate(branches, start=1):
        out = [compress_stage(w.latent, memory, w, s, heads, key_valid)]
        for p in range(2, n + 1):
            out.append(fuse_stage(stages[n - 2][p - 2], out[p - 2], w.fuse[p - 2], heads))
        for p, f in enumerate(out, start=1):
            if f.shape[-2] != stage_length(L, n, p):
                raise AssertionError(f"branch {n} stage {p}: {f.shape[-2]} tokens, "
                                     f"expected {stage_length(L, n, p)}")
        stages.append(out)
    return EncoderOutput(features=[st[-1] for st in stages], stages=stages)
