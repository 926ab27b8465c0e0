"""End-to-end MALT model: windows, embedding, encoder, decoder, heads, losses."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import SparsityConfig
from .autodiff import ContractError, ParamStore, Tensor
from .config import MaltConfig
from .decoder import (DecoderWeights, frame_tokens, init_decoder, init_query_from_short_term,
                      run_decoder, token_sources)
from .encoder import BranchWeights, EncoderOutput, init_encoder, run_encoder
from .rng import make_rng


@dataclass
class Head:
    ln_gain: Tensor
    ln_bias: Tensor
    w: Tensor
    b: Tensor


@dataclass
class MaltModel:
    config: MaltConfig
    store: ParamStore
    embed_w: Tensor
    embed_b: Tensor
    encoder: list[BranchWeights]
    decoder: list[DecoderWeights]
    classifier: Head
    aux: list[Head]

    @property
    def sparsity(self) -> SparsityConfig:
        return SparsityConfig(k=self.config.k, enabled=self.config.sparse)


@dataclass
class ForwardOutput:
    logits: Tensor                # (..., m_s, C+1); row i classifies window frame m_l + i
    encoded: EncoderOutput


@dataclass
class LossBreakdown:
    main: float
    aux: list[float]
    total: float
    total_tensor: Tensor


HEAD_INIT_STD = 0.02


def _head(store: ParamStore, prefix: str, dim: int, out: int, rng: np.random.Generator) -> Head:
    # small init: near-uniform class scores before training
    return Head(store.add(f"{prefix}.ln.gain", np.ones(dim)),
                store.add(f"{prefix}.ln.bias", np.zeros(dim)),
                store.add(f"{prefix}.w", rng.standard_normal((dim, out)) * HEAD_INIT_STD),
                store.add(f"{prefix}.b", np.zeros(out)))


def build_model(cfg: MaltConfig, seed: int | None = None) -> MaltModel:
    """Initialize every parameter from the config seed (or ``seed``)."""
    cfg.validate()
    rng = make_rng(cfg.seed if seed is None else seed)
    store = ParamStore()
    D = cfg.d_model
    embed_w = store.add("embed.w", rng.standard_normal((cfg.d_in, D)) / np.sqrt(cfg.d_in))
    embed_b = store.add("embed.b", np.zeros(D))
    encoder = init_encoder(store, cfg.L, cfg.N, D, rng)
    stacks = cfg.N if cfg.fusion == "cascade" else 1
    decoder = init_decoder(store, D, rng, num_stacks=stacks)
    classifier = _head(store, "classifier", D, cfg.num_outputs, rng)
    aux = [_head(store, f"aux.branch{n}", D, cfg.num_outputs, rng) for n in range(1, cfg.N + 1)]
    return MaltModel(cfg, store, embed_w, embed_b, encoder, decoder, classifier, aux)


# ---------------------------------------------------------------- windows

def partition_memory(h: np.ndarray, m_s: int, m_l: int):
    """Split a stream (T, D_in) into short-term and long-term memory ending at its last frame.

    Returns ``(M_S, M_L, valid_s, valid_l)``; positions before the stream
    start are zero rows with ``valid`` False.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ContractError("partition_memory needs a nonempty (T, D_in) stream")
    window, valid = window_at(h, h.shape[0] - 1, m_s, m_l)
    return window[m_l:], window[:m_l], valid[m_l:], valid[:m_l]


def window_at(h: np.ndarray, t: int, m_s: int, m_l: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``m_l + m_s`` frames ending at frame ``t`` (inclusive), zero-padded at the front.

    Only rows ``<= t`` of ``h`` are ever read.
    """
    size = m_s + m_l
    lo = t - size + 1
    window = np.zeros((size, h.shape[1]))
    valid = np.zeros(size, dtype=bool)
    src_lo = max(lo, 0)
    window[src_lo - lo:] = h[src_lo:t + 1]
    valid[src_lo - lo:] = True
    return window, valid


def windows_at(h: np.ndarray, ends: np.ndarray, m_s: int, m_l: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`window_at` for several end frames of one stream."""
    size = m_s + m_l
    ends = np.asarray(ends, dtype=np.int64)
    padded = np.concatenate([np.zeros((size - 1, h.shape[1])), h], axis=0)
    idx = ends[:, None] + np.arange(size)[None, :]
    windows = padded[idx]
    valid = idx >= size - 1
    return windows, valid


def label_windows(labels: np.ndarray, ends: np.ndarray, m_s: int) -> tuple[np.ndarray, np.ndarray]:
    """Short-term labels for each window plus their validity."""
    idx = np.asarray(ends)[:, None] - (m_s - 1) + np.arange(m_s)[None, :]
    valid = idx >= 0
    return np.where(valid, np.asarray(labels)[np.clip(idx, 0, None)], 0), valid


# ---------------------------------------------------------------- forward

def positional_encoding(ages: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal encoding of frame age (0 = current frame)."""
    ages = np.asarray(ages, dtype=np.float64)
    i = np.arange(dim // 2)
    freq = 1.0 / (10000.0 ** (2 * i / dim))
    ang = ages[:, None] * freq[None, :]
    pe = np.zeros((len(ages), dim))
    pe[:, 0:2 * len(i):2] = np.sin(ang)
    pe[:, 1:2 * len(i):2] = np.cos(ang)
    return pe


def embed(model: MaltModel, frames: np.ndarray, ages: np.ndarray) -> Tensor:
    x = ad.add_bias(ad.matmul(Tensor(frames), model.embed_w), model.embed_b)
    pe = np.broadcast_to(positional_encoding(ages, model.config.d_model), x.shape)
    return ad.add(x, Tensor(pe))


def _classify(x: Tensor, head: Head) -> Tensor:
    return ad.add_bias(ad.matmul(ad.layer_norm(x, head.ln_gain, head.ln_bias), head.w), head.b)


def forward_windows(model: MaltModel, windows: np.ndarray, valid: np.ndarray | None = None) -> ForwardOutput:
    """Forward a batch of windows (B, m_l + m_s, D_in); ``valid`` marks non-padding frames."""
    cfg = model.config
    windows = np.asarray(windows, dtype=np.float64)
    if windows.shape[-2:] != (cfg.m_l + cfg.m_s, cfg.d_in):
        raise ad.ShapeError(f"windows {windows.shape} do not match (m_l + m_s, d_in) = "
                            f"{(cfg.m_l + cfg.m_s, cfg.d_in)}")
    if valid is None:
        valid = np.ones(windows.shape[:-1], dtype=bool)
    ages = np.arange(cfg.m_l + cfg.m_s)[::-1]
    long_mem = embed(model, windows[..., :cfg.m_l, :], ages[:cfg.m_l])
    short_mem = embed(model, windows[..., cfg.m_l:, :], ages[cfg.m_l:])
    valid_l, valid_s = valid[..., :cfg.m_l], valid[..., cfg.m_l:]

    encoded = run_encoder(long_mem, model.encoder, model.sparsity, cfg.heads, cfg.L,
                          key_valid=valid_l)
    q0 = init_query_from_short_term(short_mem, cfg.L)
    if cfg.m_s != cfg.L:
        q_valid = valid_s[..., token_sources(cfg.m_s, cfg.L)]
    else:
        q_valid = valid_s
    out = run_decoder(encoded.features, q0, model.decoder, model.sparsity, cfg.heads,
                      fusion=cfg.fusion, key_valid=q_valid)
    if cfg.m_s != cfg.L:
        out = ad.take_rows(out, frame_tokens(cfg.m_s, cfg.L))
    return ForwardOutput(logits=_classify(out, model.classifier), encoded=encoded)


def forward(model: MaltModel, h: np.ndarray) -> ForwardOutput:
    """Classify the short-term frames of a stream (T, D_in) ending at its last frame."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ContractError("forward needs a nonempty (T, D_in) stream")
    window, valid = window_at(h, h.shape[0] - 1, model.config.m_s, model.config.m_l)
    return forward_windows(model, window[None], valid[None])


# ---------------------------------------------------------------- losses

def main_loss(logits: Tensor, labels: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
    """Mean per-frame cross-entropy over the present short-term frames."""
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ad.ShapeError(f"labels {labels.shape} vs logits {logits.shape}")
    if labels.size and labels.max() >= logits.shape[-1]:
        raise ValueError(f"label {labels.max()} exceeds the {logits.shape[-1] - 1} action classes")
    return ad.cross_entropy(logits, labels, None if valid is None else valid.astype(np.float64))


def aux_losses(model: MaltModel, features: list[Tensor], current_labels: np.ndarray) -> list[Tensor]:
    """Per-branch loss: mean-pool f_n, classify, cross-entropy against the current-frame label."""
    return [ad.cross_entropy(_classify(ad.mean_rows(f), head), current_labels)
            for f, head in zip(features, model.aux)]


def combine_losses(main: Tensor, aux: list[Tensor], alpha: float, betas: list[float]) -> LossBreakdown:
    total = ad.linear_combination([main, *aux], [alpha, *betas])
    return LossBreakdown(main=float(main.data.item()), aux=[float(a.data.item()) for a in aux],
                         total=float(total.data.item()), total_tensor=total)


def compute_loss(model: MaltModel, windows: np.ndarray, valid: np.ndarray, labels: np.ndarray,
                 label_valid: np.ndarray) -> LossBreakdown:
    out = forward_windows(model, windows, valid)
    cfg = model.config
    main = main_loss(out.logits, labels, label_valid)
    aux = aux_losses(model, out.encoded.features, labels[..., -1])
    return combine_losses(main, aux, cfg.alpha, cfg.betas())


# ---------------------------------------------------------------- bookkeeping

MODULE_PREFIXES = ("embed", "encoder", "decoder", "classifier", "aux")


def parameter_count(store: ParamStore) -> dict[str, int]:
    """Scalar counts per top-level module plus ``total``, name-sorted."""
    counts: dict[str, int] = defaultdict(int)
    for name, entry in store.items():
        counts[name.split(".", 1)[0]] += entry.value.size
    report = {k: counts[k] for k in sorted(counts)}
    report["total"] = sum(counts.values())
    return report
