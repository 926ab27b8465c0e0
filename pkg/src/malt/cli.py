"""Command line: gen-data, train, eval, stream, gradcheck, ablate.

Exit codes: 0 success, 1 invariant or tolerance failure, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import ablation, gradcheck
from . import autodiff as ad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, write_manifest
from .config import ConfigError, MaltConfig, load_config, tiny_config
from .data import (content_hash, generate_benchmark, load_stream, read_split, split_streams,
                   write_dataset)
from .training import evaluate, init_state, softmax, train_epoch
from .model import forward_windows, window_at

log = logging.getLogger("malt")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _config(args) -> MaltConfig:
    cfg = load_config(args.config) if args.config else MaltConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    cfg.validate()
    return cfg


def _generate(cfg: MaltConfig, root: Path | None, seed: int | None = None):
    spec = cfg.data if seed is None else cfg.replace(data={"seed": seed}).data
    streams = generate_benchmark(spec)
    frac = spec.num_train / (spec.num_train + spec.num_eval)
    train, evaluation = split_streams(streams, frac, spec.seed)
    if root is not None:
        write_dataset(root, train, evaluation, spec.num_classes)
    return train, evaluation


def _load_data(cfg: MaltConfig, root: Path | None):
    """Train/eval streams from ``root``; generated (and written there) if absent."""
    if root is None or not (root / "train").is_dir():
        log.info("no dataset at %s; generating from the config's data spec", root)
        return _generate(cfg, root)
    train, c_train = read_split(root, "train")
    evaluation, c_eval = read_split(root, "eval")
    if not train:
        raise UsageError(f"{root}/train holds no stream files")
    for streams, c in ((train, c_train), (evaluation, c_eval)):
        if streams:
            _check_dims(cfg, streams[0].features.shape[1], c, root)
    return train, evaluation


def _check_dims(cfg: MaltConfig, d_in: int, classes: int | None, where) -> None:
    if d_in != cfg.d_in or (classes is not None and classes != cfg.num_classes):
        raise UsageError(f"dimension mismatch: checkpoint/config has d_in={cfg.d_in}, "
                         f"C={cfg.num_classes} but data {where} has d_in={d_in}, C={classes}")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    train, evaluation = _generate(cfg, out, seed=args.data_seed)
    print(f"wrote {len(train)} train / {len(evaluation)} eval streams to {out} "
          f"(content hash {content_hash(out)[:16]})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_root = Path(args.data) if args.data else None
    train, evaluation = _load_data(cfg, data_root)
    data_hash = content_hash(data_root) if data_root is not None else "generated-in-memory"

    if args.resume:
        state = load_checkpoint(args.resume)
        if state.config.replace(epochs=0).canonical_json() != cfg.replace(epochs=0).canonical_json():
            raise CheckpointError("checkpoint config does not match the requested config")
        state.model.config = cfg
    else:
        state = init_state(cfg)

    best = max((h.get("eval_mAP", -1.0) for h in state.history), default=-1.0)
    save_checkpoint(out / "last.ckpt", state)
    with open(out / "batches.jsonl", "a") as batch_log:
        while state.epoch < cfg.epochs:
            step = [0]

            def on_batch(lb, epoch=state.epoch + 1):
                step[0] += 1
                batch_log.write(json.dumps({"epoch": epoch, "step": step[0], "main": lb.main,
                                            "aux": lb.aux, "total": lb.total}) + "\n")

            rec = train_epoch(state, train, on_batch=on_batch)
            if evaluation:
                res = evaluate(state.model, evaluation, stride=args.eval_stride)
                rec.update(eval_mAP=res.report.mean_ap, eval_mcAP=res.report.mean_cap,
                           eval_acc=res.accuracy)
            state.history.append(rec)
            print(json.dumps(rec), flush=True)
            save_checkpoint(out / "last.ckpt", state)
            if rec.get("eval_mAP", -1.0) > best:
                best = rec["eval_mAP"]
                save_checkpoint(out / "best.ckpt", state)
            write_manifest(out / "manifest.json", cfg, data_hash, state.history)
    write_manifest(out / "manifest.json", cfg, data_hash, state.history)
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    cfg = state.config
    streams, classes = read_split(Path(args.data), args.split)
    if not streams:
        raise UsageError(f"no streams under {args.data}/{args.split}")
    _check_dims(cfg, streams[0].features.shape[1], classes, args.data)
    res = evaluate(state.model, streams, stride=args.stride, oracle=args.oracle)
    text = res.report.to_jsonl()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    print(f"mAP {res.report.mean_ap:.4f}  mcAP {res.report.mean_cap:.4f}  "
          f"frame accuracy {res.accuracy:.4f}")
    return EXIT_OK


def stream_predictions(model, features: np.ndarray):
    """Yield (t, probabilities, seconds) for every frame, reading only frames <= t."""
    cfg = model.config
    with ad.no_grad():
        for t in range(len(features)):
            visible = features[:t + 1]      # causality guard: later frames are unreachable
            t0 = time.perf_counter()
            w, v = window_at(visible, t, cfg.m_s, cfg.m_l)
            logits = forward_windows(model, w[None], v[None]).logits.data
            yield t, softmax(logits[0, -1]), time.perf_counter() - t0


def cmd_stream(args) -> int:
    state = load_checkpoint(args.checkpoint)
    cfg = state.config
    stream, classes = load_stream(args.stream)
    _check_dims(cfg, stream.features.shape[1], classes, args.stream)
    if len(stream) < 2:
        raise UsageError("stream needs more than one frame")
    total = 0.0
    with open(args.emit, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "label", *(f"score_{c}" for c in range(cfg.num_outputs))])
        for t, probs, dt in stream_predictions(state.model, stream.features):
            total += dt
            writer.writerow([t, int(np.argmax(probs)), *(repr(float(p)) for p in probs)])
    print(f"{len(stream)} frames, {1e3 * total / len(stream):.2f} ms/frame, "
          f"{len(stream) / total:.1f} frames/s", file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config) if args.config else tiny_config()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    results = gradcheck.run_all(cfg, samples=args.samples)
    print(gradcheck.format_table(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


def cmd_ablate(args) -> int:
    cfg = _config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    k_grid = tuple(int(k) for k in args.k_grid.split(","))
    for v in variants:
        ablation.expand_variant(cfg, v, k_grid)
    train, evaluation = _load_data(cfg, Path(args.data) if args.data else None)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = ablation.run_ablation(
        cfg, variants, train, evaluation, seeds, k_grid, eval_stride=args.eval_stride,
        on_row=lambda r: print(f"{r.variant} seed={r.seed}: mAP {r.mean_ap:.4f}", flush=True))
    summary = ablation.summarize(rows)
    print(ablation.format_table(summary))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(summary, indent=1) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="malt", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", help="YAML config (default: desk-scale defaults)")
        sp.add_argument("--seed", type=int, help="override the config seed (u64)")
        sp.add_argument("--out", required=out_required)

    sp = sub.add_parser("gen-data", help="write a synthetic benchmark")
    common(sp, out_required=True)
    sp.add_argument("--data-seed", type=int, help="override data.seed")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train and checkpoint")
    common(sp, out_required=True)
    sp.add_argument("--data", help="dataset dir (train/, eval/); generated if absent")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--eval-stride", type=int, default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="per-frame mAP / mcAP of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="eval")
    sp.add_argument("--stride", type=int, default=None)
    sp.add_argument("--oracle", action="store_true", help="score with one-hot labels (debug)")
    sp.add_argument("--out", help="write the JSONL report here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("stream", help="online per-frame predictions")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--stream", required=True)
    sp.add_argument("--emit", required=True, help="CSV prediction log")
    sp.set_defaults(func=cmd_stream)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--samples", type=int, default=32)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="train ablation variants and compare")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--variants", default="full,no-sparse,no-recurrent,no-aux")
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--k-grid", default=",".join(map(str, ablation.DEFAULT_K_GRID)))
    sp.add_argument("--eval-stride", type=int, default=None)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except AssertionError as e:
        print(f"invariant failure: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
