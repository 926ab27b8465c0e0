"""Compare encoder/decoder depths N on the order-sensitive synthetic task."""
import argparse

from malt.config import MaltConfig
from malt.experiments import DEPTH_ABLATION, depth_comparison, median_gap


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--depths", default="1,2")
    ap.add_argument("--epochs", type=int)
    args = ap.parse_args()

    cfg = MaltConfig().replace(**DEPTH_ABLATION)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    depths = tuple(int(d) for d in args.depths.split(","))
    scores = depth_comparison(cfg, range(args.seeds), depths, log=print)
    for n in depths:
        print(f"N={n}: {[round(v, 4) for v in scores[n]]}")
    if 1 in scores and 2 in scores:
        med, gaps = median_gap(scores)
        print(f"median mAP(N=2) - mAP(N=1) = {med:+.4f}  per seed {[round(g, 4) for g in gaps]}")


if __name__ == "__main__":
    main()
