"""Run every CLI stage on a synthetic corpus and print the test-split metrics.

    python3 scripts/run_toy.py --out runs/toy --seed 7
"""

import argparse
from pathlib import Path

from jointcap.cli import main

HERE = Path(__file__).resolve().parent


def run(out, seed, scenes, config):
    common = ["--config", str(config), "--seed", str(seed), "--out", str(out)]
    for cmd in (["synth", "--scenes", str(scenes)], ["kg-train"], ["map-train"], ["train"], ["caption"], ["eval"]):
        code = main(cmd + common)
        if code:
            raise SystemExit(code)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--scenes", type=int, default=50)
    ap.add_argument("--config", default=HERE / "toy.cfg")
    a = ap.parse_args()
    run(a.out, a.seed, a.scenes, a.config)
