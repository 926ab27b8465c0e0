"""Per-frame latency of online inference with a freshly initialized desk-scale model."""
import argparse
import time

import numpy as np

from malt.cli import stream_predictions
from malt.config import MaltConfig
from malt.model import build_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=300)
    args = ap.parse_args()
    model = build_model(MaltConfig())
    h = np.random.default_rng(0).normal(size=(args.frames, model.config.d_in))
    t0 = time.perf_counter()
    compute = sum(dt for _, _, dt in stream_predictions(model, h))
    wall = time.perf_counter() - t0
    print(f"{args.frames} frames: {1e3 * compute / args.frames:.2f} ms/frame model time, "
          f"{args.frames / wall:.1f} frames/s wall clock")


if __name__ == "__main__":
    main()
