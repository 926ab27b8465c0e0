"""Training loop, sliding-window scoring and evaluation."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import MaltConfig
from .data import LabeledStream
from .metrics import MetricReport, frame_accuracy, per_frame_map
from .model import (LossBreakdown, MaltModel, build_model, compute_loss, forward_windows,
                    label_windows, window_at, windows_at)
from .rng import derive_seed, make_rng

log = logging.getLogger(__name__)


@dataclass
class TrainState:
    model: MaltModel
    rng: np.random.Generator
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def config(self) -> MaltConfig:
        return self.model.config


def init_state(cfg: MaltConfig) -> TrainState:
    model = build_model(cfg)
    return TrainState(model=model, rng=make_rng(derive_seed(cfg.seed, 7)))


def loss_identity_gap(lb: LossBreakdown, cfg: MaltConfig) -> float:
    expect = cfg.alpha * lb.main + sum(b * a for b, a in zip(cfg.betas(), lb.aux))
    return abs(lb.total - expect)


def sample_batches(streams: list[LabeledStream], cfg: MaltConfig, rng: np.random.Generator):
    """Yield (windows, valid, labels, label_valid) batches for one epoch."""
    picks = []
    for si, s in enumerate(streams):
        ends = rng.integers(0, len(s), size=cfg.windows_per_stream)
        picks.extend((si, int(t)) for t in ends)
    order = rng.permutation(len(picks))
    for lo in range(0, len(order), cfg.batch_size):
        chunk = [picks[i] for i in order[lo:lo + cfg.batch_size]]
        ws, vs, ls, lvs = [], [], [], []
        for si, t in chunk:
            s = streams[si]
            w, v = window_at(s.features, t, cfg.m_s, cfg.m_l)
            lab, lv = label_windows(s.labels, np.array([t]), cfg.m_s)
            ws.append(w)
            vs.append(v)
            ls.append(lab[0])
            lvs.append(lv[0])
        yield np.stack(ws), np.stack(vs), np.stack(ls), np.stack(lvs)


def train_step(state: TrainState, batch) -> LossBreakdown:
    cfg = state.config
    windows, valid, labels, label_valid = batch
    lb = compute_loss(state.model, windows, valid, labels, label_valid)
    gap = loss_identity_gap(lb, cfg)
    if gap > 1e-12:
        raise AssertionError(f"loss identity violated by {gap:.3e}")
    ad.backward(lb.total_tensor)
    ad.adam_step(state.model.store, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return lb


def train_epoch(state: TrainState, streams: list[LabeledStream], on_batch=None) -> dict:
    losses = []
    for batch in sample_batches(streams, state.config, state.rng):
        lb = train_step(state, batch)
        losses.append((lb.total, lb.main, *lb.aux))
        if on_batch is not None:
            on_batch(lb)
    state.epoch += 1
    arr = np.array(losses)
    return {"epoch": state.epoch, "total": float(arr[:, 0].mean()), "main": float(arr[:, 1].mean()),
            "aux": [float(x) for x in arr[:, 2:].mean(axis=0)], "steps": len(losses)}


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def score_stream(model: MaltModel, stream_features: np.ndarray, frames: np.ndarray | None = None,
                 batch_size: int = 128) -> np.ndarray:
    """Online class probabilities for each requested frame (default: all).

    Frame ``t`` is scored from the window ending at ``t`` using only the
    last output token, so nothing after ``t`` is read.
    """
    cfg = model.config
    h = np.asarray(stream_features, dtype=np.float64)
    frames = np.arange(len(h)) if frames is None else np.asarray(frames)
    out = np.empty((len(frames), cfg.num_outputs))
    with ad.no_grad():
        for lo in range(0, len(frames), batch_size):
            ends = frames[lo:lo + batch_size]
            w, v = windows_at(h, ends, cfg.m_s, cfg.m_l)
            logits = forward_windows(model, w, v).logits.data
            out[lo:lo + len(ends)] = softmax(logits[:, -1, :])
    return out


@dataclass
class EvalResult:
    report: MetricReport
    accuracy: float
    scores: np.ndarray
    labels: np.ndarray


def evaluate(model: MaltModel, streams: list[LabeledStream], stride: int | None = None,
             oracle: bool = False) -> EvalResult:
    """Score every ``stride``-th frame of each stream and compute metrics.

    With ``oracle`` the scores are the one-hot labels (upper-bound check).
    """
    stride = model.config.eval_stride if stride is None else stride
    all_scores, all_labels = [], []
    for s in streams:
        frames = np.arange(0, len(s), stride)
        labels = s.labels[frames]
        if oracle:
            scores = np.eye(model.config.num_outputs)[labels]
        else:
            scores = score_stream(model, s.features, frames)
        all_scores.append(scores)
        all_labels.append(labels)
    scores = np.concatenate(all_scores)
    labels = np.concatenate(all_labels)
    return EvalResult(per_frame_map(scores, labels), frame_accuracy(scores, labels), scores, labels)


def fit(cfg: MaltConfig, train: list[LabeledStream], evaluation: list[LabeledStream] | None = None,
        state: TrainState | None = None, eval_stride: int | None = None,
        on_epoch=None) -> TrainState:
    """Train until ``cfg.epochs`` epochs are done (resuming from ``state``)."""
    state = state or init_state(cfg)
    while state.epoch < cfg.epochs:
        t0 = time.perf_counter()
        rec = train_epoch(state, train)
        if evaluation:
            res = evaluate(state.model, evaluation, stride=eval_stride)
            rec["eval_mAP"] = res.report.mean_ap
            rec["eval_mcAP"] = res.report.mean_cap
            rec["eval_acc"] = res.accuracy
        state.history.append(rec)
        log.info("epoch %d (%.1fs): %s", state.epoch, time.perf_counter() - t0, rec)
        if on_epoch is not None:
            on_epoch(state, rec)
    return state
