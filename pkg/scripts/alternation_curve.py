"""Per-alternation validation metrics and training BLEU on a prepared working directory.

Expects ``synth``, ``kg-train`` and ``map-train`` to have run in ``--out``
(``run_toy.py`` does this). Training BLEU is reported twice: on the graphs
the captioner was trained with during the alternation, and on graphs
reselected from the refreshed cache.

    python3 scripts/alternation_curve.py --out runs/toy --iterations 5 --csv curve.csv
"""

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from jointcap import pipeline as P
from jointcap.cli import apply_config, read_config
from jointcap.train import TrainConfig

HERE = Path(__file__).resolve().parent


def curve(out, config_path, seed, iterations, overrides=None):
    cfg = apply_config("train", TrainConfig(), read_config(config_path))
    cfg = replace(cfg, seed=seed, iterations=iterations, **(overrides or {}))
    ws = P.load_workspace(out, cfg)
    tr = P.make_trainer(ws, cfg)
    rows = []
    while tr.iteration < iterations and not tr.converged:
        tr.fit(max_iterations=tr.iteration + 1)
        last = tr.iteration_metrics[-1]
        used = tr.evaluate(tr.train_scenes, tr.graphs)["BLEU4"]
        fresh_graphs = tr.select_graphs()
        fresh = tr.evaluate(tr.train_scenes, fresh_graphs)["BLEU4"]
        sizes = [len(fresh_graphs[s.scene_id].triplets) for s in tr.train_scenes]
        rows.append({"iteration": last["iteration"], "epochs": last["epochs"], "L_c": tr.reports[-1]["L_c"],
                     "L_s": tr.reports[-1]["L_s"], "val_BLEU4": last["val_BLEU4"], "val_CIDEr": last["val_CIDEr"],
                     "train_BLEU4_used_graphs": used, "train_BLEU4_fresh_graphs": fresh,
                     "mean_fresh_graph_size": sum(sizes) / len(sizes)})
    return rows


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--config", default=HERE / "toy.cfg")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--iterations", type=int, default=5)
    ap.add_argument("--csv")
    a = ap.parse_args()
    rows = curve(a.out, a.config, a.seed, a.iterations)
    fh = open(a.csv, "w", newline="") if a.csv else sys.stdout
    w = csv.DictWriter(fh, fieldnames=list(rows[0]))
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
