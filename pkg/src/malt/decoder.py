"""Recurrent decoder: one shared self+cross block folded over f_1 .. f_N.

The running query starts as the embedded short-term memory resampled to
``L`` tokens.  Stage ``n`` applies self-attention to it, then sparse
cross-attention onto ``f_n``; its output is the query of stage ``n + 1``.

Two ablation fusions live here as well: ``cascade`` (a separate, unshared
block pair per stage) and ``add`` (sum the features, decode once).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import (DENSE, AttentionWeights, SparsityConfig, attention_block,
                        effective_sparsity, init_attention_block)
from .autodiff import ContractError, ParamStore, Tensor


@dataclass
class DecoderWeights:
    self_block: AttentionWeights
    cross_block: AttentionWeights


@dataclass
class DecoderState:
    query: Tensor
    stage: int = 0
    key_valid: np.ndarray | None = None


def init_decoder(store: ParamStore, dim: int, rng: np.random.Generator, num_stacks: int = 1,
                 prefix: str = "decoder") -> list[DecoderWeights]:
    """One block pair (``num_stacks=1``) for the shared decoder, N for cascade."""
    out = []
    for i in range(num_stacks):
        p = prefix if num_stacks == 1 else f"{prefix}.layer{i + 1}"
        out.append(DecoderWeights(
            self_block=init_attention_block(store, f"{p}.self", dim, rng, cross=False),
            cross_block=init_attention_block(store, f"{p}.cross", dim, rng, cross=True),
        ))
    return out


def token_sources(m_s: int, L: int) -> np.ndarray:
    """Short-term frame index feeding each of the ``L`` query tokens.

    Anchored at the most recent frame: strided subsampling when ``m_s > L``,
    nearest-frame repetition when ``m_s < L``, identity when equal.
    """
    if m_s < 1:
        raise ContractError("short-term memory is empty")
    i = np.arange(L)
    return m_s - 1 - ((L - 1 - i) * m_s) // L


def frame_tokens(m_s: int, L: int) -> np.ndarray:
    """For each short-term frame, the query token whose source is nearest (later wins ties)."""
    src = token_sources(m_s, L)
    frames = np.arange(m_s)[:, None]
    dist = np.abs(src[None, :] - frames)
    # argmin on the reversed token axis picks the latest token among ties
    return L - 1 - np.argmin(dist[:, ::-1], axis=1)


def init_query_from_short_term(embedded: Tensor, L: int) -> Tensor:
    """Resample embedded short-term frames (..., m_s, D) to (..., L, D)."""
    m_s = embedded.shape[-2]
    if m_s == L:
        return embedded
    return ad.take_rows(embedded, token_sources(m_s, L))


def decode_stage(state: DecoderState, feature: Tensor, w: DecoderWeights, s: SparsityConfig,
                 heads: int) -> DecoderState:
    q = attention_block(state.query, state.query, w.self_block, DENSE, heads, mode="self",
                        key_valid=state.key_valid)
    s_eff = effective_sparsity(s, feature.shape[-2], warn=False)
    out = attention_block(q, feature, w.cross_block, s_eff, heads, mode="cross")
    return DecoderState(query=out, stage=state.stage + 1, key_valid=state.key_valid)


def run_decoder(features: list[Tensor], q0: Tensor, weights: list[DecoderWeights],
                s: SparsityConfig, heads: int, fusion: str = "recurrent",
                key_valid: np.ndarray | None = None) -> Tensor:
    if not features:
        raise ContractError("decoder needs at least one feature")
    state = DecoderState(query=q0, key_valid=key_valid)
    if fusion == "add":
        summed = features[0]
        for f in features[1:]:
            summed = ad.add(summed, f)
        return decode_stage(state, summed, weights[0], s, heads).query
    if fusion == "recurrent":
        stack = [weights[0]] * len(features)
    elif fusion == "cascade":
        if len(weights) != len(features):
            raise ContractError(f"cascade decoder has {len(weights)} layers for {len(features)} features")
        stack = weights
    else:
        raise ValueError(f"unknown fusion {fusion!r}")
    for f, w in zip(features, stack):
        state = decode_stage(state, f, w, s, heads)
    return state.query
