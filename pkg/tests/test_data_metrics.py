import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from malt.config import ConfigError, DataSpec
from malt.data import (content_hash, generate_benchmark, generate_stream, load_stream, make_templates,
                       read_split, save_stream, split_streams, stream_from_bytes, stream_to_bytes,
                       write_dataset)
from malt.metrics import (average_precision, calibrated_average_precision, frame_accuracy,
                          per_frame_map)


def brute_force(scores, positive, calibrated=False):
    """Enumerate every prefix of the ranking and average precision at positive ranks."""
    n = len(scores)
    ranking = sorted(range(n), key=lambda i: (-scores[i], i))
    npos = sum(bool(p) for p in positive)
    w = (n - npos) / npos
    precisions = []
    for r in range(1, n + 1):
        top = ranking[:r]
        if not positive[top[-1]]:
            continue
        tp = sum(bool(positive[i]) for i in top)
        fp = r - tp
        if calibrated:
            precisions.append(1.0 if w == 0 else tp / (tp + fp / w))
        else:
            precisions.append(tp / r)
    return math.fsum(precisions) / npos


def test_ap_hand_example():
    assert average_precision([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)
    assert round(average_precision([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]), 4) == 0.8333


def test_cap_hand_example():
    assert calibrated_average_precision([0.2, 0.9, 0.8, 0.7], [1, 0, 0, 0]) == pytest.approx(0.5, abs=1e-15)


def test_perfect_ranking():
    pos = np.array([1, 1, 0, 0, 0, 0, 0], dtype=bool)
    scores = np.linspace(1, 0, 7)
    assert average_precision(scores, pos) == 1.0
    assert calibrated_average_precision(scores, pos) == 1.0


def test_one_hot_scores_give_perfect_map():
    labels = np.random.default_rng(0).integers(0, 4, size=50)
    rep = per_frame_map(np.eye(4)[labels], labels)
    assert rep.mean_ap == 1.0 and rep.mean_cap == 1.0


@pytest.mark.parametrize("seed", range(200))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 12))
    scores = rng.integers(0, 5, size=n) / 4.0          # coarse grid forces ties
    positive = rng.random(n) < 0.4
    if not positive.any():
        positive[rng.integers(n)] = True
    assert average_precision(scores, positive) == brute_force(scores, positive)
    assert calibrated_average_precision(scores, positive) == brute_force(scores, positive, calibrated=True)


@settings(max_examples=100)
@given(st.integers(1, 8), st.integers(0, 2 ** 32 - 1))
def test_cap_equals_ap_when_balanced(half, seed):
    rng = np.random.default_rng(seed)
    positive = rng.permutation(np.r_[np.ones(half), np.zeros(half)]).astype(bool)
    scores = rng.integers(0, 4, size=2 * half).astype(float)
    assert calibrated_average_precision(scores, positive) == average_precision(scores, positive)


def test_ties_rank_earlier_frame_first():
    assert average_precision([0.5, 0.5], [1, 0]) == 1.0
    assert average_precision([0.5, 0.5], [0, 1]) == 0.5


def test_background_excluded_and_absent_classes_listed():
    labels = np.array([0, 1, 1, 0, 3])
    rep = per_frame_map(np.random.default_rng(0).random((5, 4)), labels)
    assert set(rep.ap) == {1, 3} and rep.excluded == [2]
    assert all(0 <= v <= 1 for v in [*rep.ap.values(), *rep.cap.values()])
    assert rep.to_records()[-1]["summary"]


def test_frame_accuracy():
    assert frame_accuracy(np.eye(3)[[0, 1, 2, 2]], np.array([0, 1, 2, 1])) == 0.75


# ---------------------------------------------------------------- data

SMALL = DataSpec(num_classes=4, d_in=8, length=300, num_train=3, num_eval=2)


def test_same_seed_identical_streams():
    a, b = generate_stream(SMALL, 1), generate_stream(SMALL, 1)
    assert a.features.tobytes() == b.features.tobytes()
    npt.assert_array_equal(a.labels, b.labels)
    assert generate_stream(SMALL, 2).features.tobytes() != a.features.tobytes()


def test_noiseless_segments_are_constant():
    spec = DataSpec(num_classes=4, d_in=8, length=300, noise_sigma=0.0)
    s = generate_stream(spec, 0)
    changes = np.flatnonzero(np.any(np.diff(s.features, axis=0) != 0, axis=1)) + 1
    for lo, hi in zip(np.r_[0, changes], np.r_[changes, len(s)]):
        assert (s.features[lo:hi] == s.features[lo]).all()
        assert (s.labels[lo:hi] == s.labels[lo]).all()


@pytest.mark.parametrize("C", [2, 4, 5, 6])
def test_generator_reconstruction_at_zero_noise(C):
    spec = DataSpec(num_classes=C, d_in=8, length=600, noise_sigma=0.0, seed=C)
    tpl = make_templates(spec)
    s = generate_stream(spec, 0, tpl)
    runs = np.flatnonzero(np.diff(np.r_[0, (s.labels > 0).astype(int), 0]))
    assert len(runs) >= 4
    for lo, hi in zip(runs[::2], runs[1::2]):
        c = int(s.labels[lo])
        assert (s.labels[lo:hi] == c).all()
        seq = []
        for row in s.features[lo:hi]:
            base = int(np.flatnonzero((tpl.bases == row).all(axis=1))[0])
            if not seq or seq[-1] != base:
                seq.append(base)
        expected = tpl.orders[c - 1]
        if hi < len(s):
            assert seq == expected
        else:
            assert seq == expected[:len(seq)]
    assert (s.features[s.labels == 0] == tpl.background).all()


def test_paired_classes_share_segment_set_but_not_order():
    tpl = make_templates(DataSpec(num_classes=6, segments_per_action=3))
    for a, b in zip(tpl.orders[::2], tpl.orders[1::2]):
        assert sorted(a) == sorted(b) and a != b
    assert len({o[0] for o in tpl.orders}) == len(tpl.orders)
    assert all(len(set(o)) == len(o) for o in tpl.orders)


def test_too_short_stream_rejected():
    with pytest.raises(ConfigError):
        generate_stream(DataSpec(length=10), 0)


def test_split_examples():
    tr, ev = split_streams(list(range(10)), 0.5, seed=3)
    assert len(tr) == len(ev) == 5 and not set(tr) & set(ev)
    assert split_streams(list(range(10)), 0.5, seed=3) == (tr, ev)
    with pytest.raises(ValueError):
        split_streams([1], 0.5, 0)
    with pytest.raises(ValueError):
        split_streams([1, 2], 1.0, 0)


def test_stream_bytes_round_trip(tmp_path):
    s = generate_stream(SMALL, 0)
    buf = stream_to_bytes(s, SMALL.num_classes)
    back, C = stream_from_bytes(buf)
    assert C == SMALL.num_classes
    assert back.features.tobytes() == s.features.tobytes()
    npt.assert_array_equal(back.labels, s.labels)
    save_stream(tmp_path / "s.bin", s, 4)
    assert load_stream(tmp_path / "s.bin")[0].features.tobytes() == s.features.tobytes()


def test_stream_bad_magic():
    buf = bytearray(stream_to_bytes(generate_stream(SMALL, 0), 4))
    buf[:4] = b"XXXX"
    with pytest.raises(ValueError):
        stream_from_bytes(bytes(buf))


def test_dataset_write_read_and_hash(tmp_path):
    streams = generate_benchmark(SMALL)
    tr, ev = split_streams(streams, 0.6, 0)
    write_dataset(tmp_path / "a", tr, ev, 4)
    write_dataset(tmp_path / "b", tr, ev, 4)
    back, C = read_split(tmp_path / "a", "train")
    assert C == 4 and len(back) == len(tr)
    assert content_hash(tmp_path / "a") == content_hash(tmp_path / "b")
