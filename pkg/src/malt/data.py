"""Synthetic streaming benchmark and its binary file layout.

Each action class is an ordered template of distinct "segment" base
vectors.  Classes come in pairs that use the same set of segments in a
different order, and every class starts with a different segment, so a
single frame never identifies its class: the order of segments does.
Background frames use one dedicated base vector.

Stream file layout (little-endian)::

    magic  b"MALTSTRM"
    u32    version (1)
    u64    T
    u32    D_in
    u32    C
    f64    features[T * D_in]   row-major
    u16    labels[T]
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, DataSpec
from .rng import derive_seed, make_rng

STREAM_MAGIC = b"MALTSTRM"
STREAM_VERSION = 1
_HEADER = struct.Struct("<8sIQII")


@dataclass
class LabeledStream:
    features: np.ndarray   # (T, D_in) float64
    labels: np.ndarray     # (T,) int, 0 = background

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ValueError(f"{len(self.features)} feature rows vs {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Templates:
    bases: np.ndarray            # (num_bases, D_in)
    background: np.ndarray       # (D_in,)
    orders: list[list[int]]      # orders[c] = base indices of class c + 1


def make_templates(spec: DataSpec) -> Templates:
    """Draw the shared base vectors and per-class segment orders from ``spec.seed``."""
    spec.validate()
    rng = make_rng(derive_seed(spec.seed, 0))
    C, S = spec.num_classes, spec.segments_per_action
    num_bases = max(C, S)
    bases = rng.standard_normal((num_bases, spec.d_in))
    background = rng.standard_normal(spec.d_in)
    firsts = rng.permutation(num_bases)[:C]
    orders: list[list[int]] = []
    for c in range(0, C - 1, 2):
        a, b = int(firsts[c]), int(firsts[c + 1])
        rest = [i for i in range(num_bases) if i not in (a, b)]
        middle = [int(i) for i in rng.choice(rest, size=S - 2, replace=False)]
        orders.append([a, *middle, b])
        orders.append([b, *middle[::-1], a])
    if C % 2:
        a = int(firsts[C - 1])
        rest = [i for i in range(num_bases) if i != a]
        orders.append([a, *(int(i) for i in rng.choice(rest, size=S - 1, replace=False))])
    return Templates(bases, background, orders)


def generate_stream(spec: DataSpec, index: int = 0, templates: Templates | None = None) -> LabeledStream:
    """Stream ``index`` of the benchmark described by ``spec`` (deterministic)."""
    templates = templates or make_templates(spec)
    S = spec.segments_per_action
    min_instance = spec.background_gap[0] + S * spec.segment_len[0]
    if spec.length < min_instance:
        raise ConfigError(f"stream length {spec.length} cannot hold one action instance "
                          f"(needs >= {min_instance} frames)")
    rng = make_rng(derive_seed(spec.seed, 1, index))
    T = spec.length
    clean = np.empty((T, spec.d_in))
    labels = np.zeros(T, dtype=np.int64)
    t = 0
    while t < T:
        gap = int(rng.integers(spec.background_gap[0], spec.background_gap[1] + 1))
        clean[t:t + gap] = templates.background
        t += gap
        c = int(rng.integers(spec.num_classes))
        for base in templates.orders[c]:
            if t >= T:
                break
            seg = int(rng.integers(spec.segment_len[0], spec.segment_len[1] + 1))
            clean[t:t + seg] = templates.bases[base]
            labels[t:t + seg] = c + 1
            t += seg
    noise = rng.standard_normal((T, spec.d_in)) * spec.noise_sigma
    return LabeledStream(clean[:T] + noise, labels[:T])


def generate_benchmark(spec: DataSpec) -> list[LabeledStream]:
    templates = make_templates(spec)
    return [generate_stream(spec, i, templates) for i in range(spec.num_train + spec.num_eval)]


def split_streams(streams: list, train_fraction: float, seed: int) -> tuple[list, list]:
    """Seeded disjoint split; the train side gets ``round(fraction * n)`` streams."""
    if len(streams) < 2:
        raise ValueError("need at least two streams to split")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train fraction must lie in (0, 1), got {train_fraction}")
    n = len(streams)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    perm = make_rng(seed).permutation(n)
    train_idx = sorted(int(i) for i in perm[:n_train])
    eval_idx = sorted(int(i) for i in perm[n_train:])
    return [streams[i] for i in train_idx], [streams[i] for i in eval_idx]


# ---------------------------------------------------------------- file I/O

def stream_to_bytes(stream: LabeledStream, num_classes: int) -> bytes:
    T, d_in = stream.features.shape
    if stream.labels.size and (stream.labels.min() < 0 or stream.labels.max() > min(num_classes, 0xFFFF)):
        raise ValueError("labels outside 0..C")
    header = _HEADER.pack(STREAM_MAGIC, STREAM_VERSION, T, d_in, num_classes)
    feats = np.ascontiguousarray(stream.features, dtype="<f8").tobytes()
    labels = np.ascontiguousarray(stream.labels, dtype="<u2").tobytes()
    return header + feats + labels


def stream_from_bytes(buf: bytes) -> tuple[LabeledStream, int]:
    """Parse a stream file; returns the stream and its class count C."""
    if len(buf) < _HEADER.size:
        raise ValueError("stream file truncated (header)")
    magic, version, T, d_in, C = _HEADER.unpack_from(buf)
    if magic != STREAM_MAGIC:
        raise ValueError(f"bad stream magic {magic!r}")
    if version != STREAM_VERSION:
        raise ValueError(f"unsupported stream version {version}")
    off = _HEADER.size
    need = off + 8 * T * d_in + 2 * T
    if len(buf) != need:
        raise ValueError(f"stream file has {len(buf)} bytes, expected {need}")
    feats = np.frombuffer(buf, dtype="<f8", count=T * d_in, offset=off).reshape(T, d_in).astype(np.float64)
    labels = np.frombuffer(buf, dtype="<u2", count=T, offset=off + 8 * T * d_in).astype(np.int64)
    return LabeledStream(feats, labels), C


def save_stream(path: str | Path, stream: LabeledStream, num_classes: int) -> None:
    Path(path).write_bytes(stream_to_bytes(stream, num_classes))


def load_stream(path: str | Path) -> tuple[LabeledStream, int]:
    return stream_from_bytes(Path(path).read_bytes())


def write_dataset(root: str | Path, train: list[LabeledStream], evaluation: list[LabeledStream],
                  num_classes: int) -> None:
    root = Path(root)
    for split, streams in (("train", train), ("eval", evaluation)):
        (root / split).mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(streams):
            save_stream(root / split / f"stream_{i:04d}.bin", s, num_classes)


def read_split(root: str | Path, split: str) -> tuple[list[LabeledStream], int | None]:
    files = sorted((Path(root) / split).glob("stream_*.bin"))
    streams, classes = [], None
    for f in files:
        s, c = load_stream(f)
        if classes is not None and c != classes:
            raise ValueError(f"{f}: C={c} differs from C={classes} of earlier files")
        streams.append(s)
        classes = c
    return streams, classes


def content_hash(root: str | Path) -> str:
    """sha256 over the relative paths and bytes of every stream file under ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for f in sorted(root.rglob("stream_*.bin")):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()
