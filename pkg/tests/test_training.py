import numpy as np
import numpy.testing as npt
import pytest

from malt import autodiff as ad
from malt import gradcheck
from malt.checkpoint import CheckpointError, load_checkpoint, save_checkpoint, state_from_bytes, state_to_bytes
from malt.config import ConfigError, tiny_config
from malt.data import generate_benchmark
from malt.training import evaluate, fit, init_state, loss_identity_gap, sample_batches, train_epoch, train_step


@pytest.fixture(scope="module")
def tiny_streams():
    cfg = tiny_config()
    return cfg, generate_benchmark(cfg.data)


def test_loss_decreases_over_50_steps():
    cfg = tiny_config(lr=3e-3, batch_size=4, windows_per_stream=100,
                      data={"length": 200, "num_train": 2, "num_eval": 1})
    streams = generate_benchmark(cfg.data)[:2]
    state = init_state(cfg)
    losses = [train_step(state, b).total for b in sample_batches(streams, cfg, state.rng)][:50]
    assert len(losses) == 50
    moving = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert moving[-1] < moving[0]


def test_every_batch_satisfies_loss_identity(tiny_streams):
    cfg, streams = tiny_streams
    state = init_state(cfg)
    gaps = []
    train_epoch(state, streams, on_batch=lambda lb: gaps.append(loss_identity_gap(lb, cfg)))
    assert gaps and max(gaps) <= 1e-12


def test_epoch_counter_and_history(tiny_streams):
    cfg, streams = tiny_streams
    state = fit(cfg.replace(epochs=2), streams[:2], streams[2:])
    assert state.epoch == 2 and [h["epoch"] for h in state.history] == [1, 2]
    assert "eval_mAP" in state.history[-1]


def test_resume_continues_trajectory(tiny_streams):
    cfg, streams = tiny_streams
    straight = fit(cfg.replace(epochs=3), streams)
    half = fit(cfg.replace(epochs=2), streams)
    resumed = state_from_bytes(state_to_bytes(half))
    resumed.model.config = cfg.replace(epochs=3)
    resumed = fit(cfg.replace(epochs=3), streams, state=resumed)
    assert resumed.history == straight.history
    for name, e in straight.model.store.items():
        assert resumed.model.store.entries[name].value.tobytes() == e.value.tobytes()


def test_checkpoint_byte_identity(tiny_streams, tmp_path):
    cfg, streams = tiny_streams
    state = fit(cfg.replace(epochs=1), streams)
    save_checkpoint(tmp_path / "a.ckpt", state)
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", loaded)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert loaded.rng.integers(1 << 62) == state.rng.integers(1 << 62)
    for name, e in state.model.store.items():
        le = loaded.model.store.entries[name]
        assert e.m.tobytes() == le.m.tobytes() and e.v.tobytes() == le.v.tobytes()
    assert loaded.model.store.step == state.model.store.step


def test_checkpoint_rejects_config_mismatch_and_corruption(tiny_streams):
    cfg, _ = tiny_streams
    buf = state_to_bytes(init_state(cfg))
    with pytest.raises(CheckpointError, match="config"):
        state_from_bytes(buf, expected=cfg.replace(lr=0.5))
    state_from_bytes(buf, expected=cfg)
    with pytest.raises(CheckpointError, match="magic"):
        state_from_bytes(b"NOPE" + buf[4:])
    with pytest.raises(CheckpointError, match="truncated"):
        state_from_bytes(buf[:-5])


def test_evaluate_deterministic_and_oracle(tiny_streams):
    cfg, streams = tiny_streams
    model = init_state(cfg).model
    a = evaluate(model, streams)
    b = evaluate(model, streams)
    assert a.report.to_jsonl() == b.report.to_jsonl()
    o = evaluate(model, streams, oracle=True)
    assert o.report.mean_ap == 1.0 and o.report.mean_cap == 1.0


def test_gradcheck_passes_on_tiny_config():
    results = gradcheck.run_all(tiny_config())
    assert all(r.ok for r in results)
    assert sum(r.suite == "end-to-end" for r in results) == 32
    assert "worst:" in gradcheck.format_table(results)


def test_gradcheck_detects_corrupted_backward(monkeypatch):
    real = ad.gelu

    def broken(x):
        out = real(x)
        bw = out._backward
        if bw is not None:
            out._backward = lambda g: bw(g * 1.01)
        return out

    monkeypatch.setattr(ad, "gelu", broken)
    results = gradcheck.end_to_end(tiny_config())
    assert not all(r.ok for r in results)


def test_gradcheck_refuses_large_models():
    with pytest.raises(ConfigError):
        gradcheck.end_to_end(tiny_config(d_model=64, heads=4, m_l=64, m_s=16, L=16, k=8,
                                         d_in=32, data={"d_in": 32}))
