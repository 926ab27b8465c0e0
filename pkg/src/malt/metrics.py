"""Per-frame average precision and calibrated average precision.

Frames are ranked by descending class score; equal scores keep frame order
(earlier frame first).  AP averages precision at the rank of every positive
frame.  Calibrated precision rescales false positives by the class's
negative/positive ratio ``w``: ``TP / (TP + FP / w)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricReport:
    ap: dict[int, float]
    cap: dict[int, float]
    mean_ap: float
    mean_cap: float
    positives: dict[int, int]
    num_frames: int
    excluded: list[int] = field(default_factory=list)

    def to_records(self) -> list[dict]:
        """One record per scored class followed by a summary record."""
        rows = [{"class": c, "ap": self.ap[c], "cap": self.cap[c], "positives": self.positives[c]}
                for c in sorted(self.ap)]
        rows.append({"summary": True, "mAP": self.mean_ap, "mcAP": self.mean_cap,
                     "frames": self.num_frames, "excluded": self.excluded})
        return rows

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())


def _ranked_hits(scores: np.ndarray, positive: np.ndarray) -> np.ndarray:
    order = np.argsort(-scores, kind="stable")
    return positive[order]


def average_precision(scores: np.ndarray, positive: np.ndarray) -> float:
    hits = _ranked_hits(np.asarray(scores, dtype=np.float64), np.asarray(positive, dtype=bool))
    npos = hits.sum()
    if npos == 0:
        return float("nan")
    tp = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    return math.fsum(tp[hits] / ranks[hits]) / int(npos)


def calibrated_average_precision(scores: np.ndarray, positive: np.ndarray) -> float:
    hits = _ranked_hits(np.asarray(scores, dtype=np.float64), np.asarray(positive, dtype=bool))
    npos = hits.sum()
    if npos == 0:
        return float("nan")
    w = (len(hits) - npos) / npos
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    if w == 0:
        prec = np.ones(len(hits))
    else:
        prec = tp / (tp + fp / w)
    return math.fsum(prec[hits]) / int(npos)


def per_frame_map(scores: np.ndarray, labels: np.ndarray) -> MetricReport:
    """AP and cAP for every action class (background, class 0, excluded).

    Classes without positive frames are left out of the means and listed in
    ``excluded``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError(f"scores {scores.shape} vs labels {labels.shape}")
    ap, cap, pos, excluded = {}, {}, {}, []
    for c in range(1, scores.shape[1]):
        positive = labels == c
        if not positive.any():
            excluded.append(c)
            continue
        ap[c] = average_precision(scores[:, c], positive)
        cap[c] = calibrated_average_precision(scores[:, c], positive)
        pos[c] = int(positive.sum())
    mean_ap = float(np.mean(list(ap.values()))) if ap else float("nan")
    mean_cap = float(np.mean(list(cap.values()))) if cap else float("nan")
    return MetricReport(ap, cap, mean_ap, mean_cap, pos, int(len(labels)), excluded)


def calibrated_ap(scores: np.ndarray, labels: np.ndarray) -> dict[int, float]:
    return per_frame_map(scores, labels).cap


def frame_accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    return float((np.argmax(scores, axis=1) == np.asarray(labels)).mean())
