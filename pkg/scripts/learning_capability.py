"""Train the desk-scale config on the default synthetic benchmark for several seeds."""
import argparse
import json

import numpy as np

from malt.config import MaltConfig, load_config
from malt.experiments import LEARNING, learning_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="YAML config (default: desk config with the acceptance budget)")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--out", help="write per-seed results as JSON")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else MaltConfig().replace(**LEARNING)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    seeds = [int(s) for s in args.seeds.split(",")]
    runs = learning_run(cfg, seeds, log=print)
    acc = np.median([r.train_acc for r in runs])
    mAP = np.median([r.eval_map for r in runs])
    print(f"median train acc {acc:.4f}  median eval mAP {mAP:.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump([vars(r) for r in runs], fh, indent=1)


if __name__ == "__main__":
    main()
