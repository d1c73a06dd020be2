"""Semantic loss with and without the score floor on a prepared working directory.

Triplets attended below gamma get a negative weight on an unbounded
softplus term, so without a floor the loss can fall without limit by
pushing their scores down. This prints the last-epoch losses for both
settings.

    python3 scripts/score_floor.py --out runs/toy --epochs 100
"""

import argparse
import math
from pathlib import Path

from alternation_curve import curve

HERE = Path(__file__).resolve().parent

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--config", default=HERE / "toy.cfg")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--iterations", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=100)
    a = ap.parse_args()
    print("score_floor\titeration\tL_c\tL_s\tval_CIDEr\tmean_fresh_graph_size")
    for floor in (-5.0, -math.inf):
        for r in curve(a.out, a.config, a.seed, a.iterations, {"score_floor": floor, "epochs_per_iteration": a.epochs}):
            print(f"{floor}\t{r['iteration']}\t{r['L_c']:.6g}\t{r['L_s']:.6g}\t{r['val_CIDEr']:.6g}\t"
                  f"{r['mean_fresh_graph_size']:.3g}")
