"""Scaled dot-product attention with an optional per-row top-k score mask.

Scores of every head are ``Q K^T / sqrt(d_head)``.  The sparse variant keeps,
in each score row, the entries that are >= the row's k-th largest value and
sends the rest to ``-inf`` before the softmax, so they receive exactly zero
probability.  Entries tied with the threshold are all kept.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .config import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SparsityConfig:
    k: int
    enabled: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"top-k needs k >= 1, got {self.k}")


DENSE = SparsityConfig(k=1, enabled=False)


@dataclass
class AttentionWeights:
    """Parameters of one pre-norm transformer block (attention + FFN)."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln_q_gain: Tensor
    ln_q_bias: Tensor
    ln_kv_gain: Tensor | None
    ln_kv_bias: Tensor | None
    ln_ff_gain: Tensor
    ln_ff_bias: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]


def init_attention_block(store: ParamStore, prefix: str, dim: int, rng: np.random.Generator,
                         cross: bool, zero_out: bool = False) -> AttentionWeights:
    """Register a block's parameters under ``prefix`` and return handles.

    Cross blocks get a second layer norm for the key/value stream.  With
    ``zero_out`` the attention and FFN output projections start at zero, so
    the block is the identity map at initialization.
    """
    def normal(shape, std):
        return rng.standard_normal(shape) * std

    std = 1.0 / np.sqrt(dim)
    hidden = 4 * dim
    out_std = 0.0 if zero_out else std
    p = prefix
    w = AttentionWeights(
        w_q=store.add(f"{p}.w_q", normal((dim, dim), std)),
        w_k=store.add(f"{p}.w_k", normal((dim, dim), std)),
        w_v=store.add(f"{p}.w_v", normal((dim, dim), std)),
        w_o=store.add(f"{p}.w_o", normal((dim, dim), out_std)),
        b_o=store.add(f"{p}.b_o", np.zeros(dim)),
        ln_q_gain=store.add(f"{p}.ln_q.gain", np.ones(dim)),
        ln_q_bias=store.add(f"{p}.ln_q.bias", np.zeros(dim)),
        ln_kv_gain=store.add(f"{p}.ln_kv.gain", np.ones(dim)) if cross else None,
        ln_kv_bias=store.add(f"{p}.ln_kv.bias", np.zeros(dim)) if cross else None,
        ln_ff_gain=store.add(f"{p}.ln_ff.gain", np.ones(dim)),
        ln_ff_bias=store.add(f"{p}.ln_ff.bias", np.zeros(dim)),
        ff_w1=store.add(f"{p}.ff.w1", normal((dim, hidden), std)),
        ff_b1=store.add(f"{p}.ff.b1", np.zeros(hidden)),
        ff_w2=store.add(f"{p}.ff.w2", normal((hidden, dim), 0.0 if zero_out else 1.0 / np.sqrt(hidden))),
        ff_b2=store.add(f"{p}.ff.b2", np.zeros(dim)),
    )
    return w


def scaled_scores(q: Tensor, keys: Tensor) -> Tensor:
    """``q @ keys^T / sqrt(d)`` over the last two axes (one head)."""
    if q.shape[-1] != keys.shape[-1]:
        raise ad.ShapeError(f"scaled_scores: query dim {q.shape} vs key dim {keys.shape}")
    d = q.shape[-1]
    return ad.scale(ad.matmul(q, ad.transpose_last(keys)), 1.0 / np.sqrt(d))


def topk_keep(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the entries >= each row's k-th largest value."""
    if k < 1:
        raise ConfigError(f"top-k needs k >= 1, got {k}")
    n = scores.shape[-1]
    if k >= n:
        return np.ones(scores.shape, dtype=bool)
    thresh = np.partition(scores, n - k, axis=-1)[..., n - k:n - k + 1]
    return scores >= thresh


def topk_mask(a, k: int) -> Tensor:
    """Keep each row's top-k entries (ties at the threshold included), rest -inf.

    When ``k`` reaches the row length the input is returned unchanged.
    """
    a = ad.as_tensor(a)
    if k < 1:
        raise ConfigError(f"top-k needs k >= 1, got {k}")
    if k >= a.shape[-1]:
        return a
    return ad.apply_score_mask(a, topk_keep(a.data, k))


def sparse_attention(x1: Tensor, x2: Tensor, w: AttentionWeights, s: SparsityConfig,
                     heads: int, key_valid: np.ndarray | None = None,
                     probs_out: list | None = None) -> Tensor:
    """Multi-head attention of ``x1`` (queries) over ``x2`` (keys/values).

    ``key_valid`` (shape ``x2.shape[:-1]``) marks real key rows; padding keys
    are masked to ``-inf`` before the top-k step.  Query rows with no valid
    key output zeros.  If ``probs_out`` is a list the per-head probability
    maps are appended to it.
    """
    if x1.shape[-1] != w.dim or x2.shape[-1] != w.dim:
        raise ad.ShapeError(f"attention inputs {x1.shape}, {x2.shape} vs model dim {w.dim}")
    q = ad.split_heads(ad.matmul(x1, w.w_q), heads)
    k = ad.split_heads(ad.matmul(x2, w.w_k), heads)
    v = ad.split_heads(ad.matmul(x2, w.w_v), heads)
    scores = scaled_scores(q, k)
    if key_valid is not None:
        kv = np.asarray(key_valid, dtype=bool)
        if not kv.all():
            scores = ad.apply_score_mask(scores, kv[..., None, None, :])
    if s.enabled:
        scores = topk_mask(scores, s.k)
    probs = ad.softmax_rows(scores, allow_empty=key_valid is not None)
    if probs_out is not None:
        probs_out.append(probs.data)
    out = ad.merge_heads(ad.matmul(probs, v))
    return ad.add_bias(ad.matmul(out, w.w_o), w.b_o)


def dense_attention(x1: Tensor, x2: Tensor, w: AttentionWeights, heads: int,
                    key_valid: np.ndarray | None = None) -> Tensor:
    return sparse_attention(x1, x2, w, DENSE, heads, key_valid)


def feed_forward(x: Tensor, w: AttentionWeights) -> Tensor:
    h = ad.gelu(ad.add_bias(ad.matmul(x, w.ff_w1), w.ff_b1))
    return ad.add_bias(ad.matmul(h, w.ff_w2), w.ff_b2)


def attention_block(x1: Tensor, x2: Tensor, w: AttentionWeights, s: SparsityConfig,
                    heads: int, mode: str = "cross", key_valid: np.ndarray | None = None) -> Tensor:
    """Pre-norm residual block: ``x1 + Attn(LN(x1), LN(x2))`` then ``+ FFN(LN(.))``."""
    if mode == "self":
        if x2 is not x1:
            raise ValueError("self-attention block needs x1 and x2 to be the same tensor")
        h = ad.layer_norm(x1, w.ln_q_gain, w.ln_q_bias)
        att = sparse_attention(h, h, w, s, heads, key_valid)
    elif mode == "cross":
        if w.ln_kv_gain is None:
            raise ValueError("cross mode needs a block built with cross=True")
        hq = ad.layer_norm(x1, w.ln_q_gain, w.ln_q_bias)
        hkv = ad.layer_norm(x2, w.ln_kv_gain, w.ln_kv_bias)
        att = sparse_attention(hq, hkv, w, s, heads, key_valid)
    else:
        raise ValueError(f"unknown attention mode {mode!r}")
    x = ad.add(x1, att)
    ff = feed_forward(ad.layer_norm(x, w.ln_ff_gain, w.ln_ff_bias), w)
    return ad.add(x, ff)


_clamp_warned: set[tuple[int, int]] = set()


def effective_sparsity(s: SparsityConfig, num_keys: int, warn: bool = True) -> SparsityConfig:
    """Clamp ``k`` to the number of keys (warns once per (k, keys) pair)."""
    if s.enabled and s.k > num_keys:
        if warn and (s.k, num_keys) not in _clamp_warned:
            _clamp_warned.add((s.k, num_keys))
            log.warning("top-k k=%d exceeds %d keys; clamping (mask becomes dense)", s.k, num_keys)
        return SparsityConfig(k=num_keys, enabled=True)
    return s
