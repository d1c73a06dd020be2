"""Command-line entry point: ``jointcap <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from .data import SynthSpec, synth_dataset
from .errors import ConfigError, JointCapError
from .kg import KGConfig
from .mapping import MappingConfig
from .train import TrainConfig

log = logging.getLogger("jointcap")

SECTIONS = {"synth": SynthSpec, "kg": KGConfig, "map": MappingConfig, "train": TrainConfig}
MODE_BEAM = {"image": 3, "video": 5}


def read_config(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(value: str, default):
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def apply_config(section: str, obj, values: dict[str, str]):
    """Apply ``key`` (every section) and ``section.key`` entries to a dataclass."""
    names = {f.name: getattr(obj, f.name) for f in fields(obj)}
    updates = {}
    for key, value in values.items():
        sec, _, name = key.rpartition(".")
        if sec and sec != section:
            continue
        if name in names:
            updates[name] = _coerce(value, names[name])
    return replace(obj, **updates)


def check_config_keys(values: dict[str, str]):
    known = {f.name for cls in SECTIONS.values() for f in fields(cls)}
    for key in values:
        sec, _, name = key.rpartition(".")
        if sec and sec not in SECTIONS:
            raise ConfigError(f"unknown config section {sec!r}")
        pool = {f.name for f in fields(SECTIONS[sec])} if sec else known
        if name not in pool:
            raise ConfigError(f"unknown config key {key!r}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="seed for every random stage")
    common.add_argument("--out", default="run", help="working directory for all artifacts (default: run)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="jointcap", description="Semantic-graph captioner with knowledge-graph embeddings")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a toy corpus")
    s.add_argument("--scenes", type=int)
    s.add_argument("--ontology-size", type=int)
    s.add_argument("--feature-dim", type=int)
    s.add_argument("--noise", type=float)

    sub.add_parser("kg-train", parents=[common], help="train complex knowledge-graph embeddings")
    sub.add_parser("map-train", parents=[common], help="train the knowledge-mapping networks")

    t = sub.add_parser("train", parents=[common], help="alternating joint training")
    t.add_argument("--iterations", type=int)
    t.add_argument("--epochs", type=int, help="captioning epochs per alternation")
    t.add_argument("--resume", action="store_true", help="continue from the working directory's checkpoint")

    c = sub.add_parser("caption", parents=[common], help="caption a split with beam search")
    c.add_argument("--beam", type=int)
    c.add_argument("--mode", choices=sorted(MODE_BEAM), help="image: beam 3, video: beam 5")
    c.add_argument("--split", default="test")
    c.add_argument("--captions", help="output path (default: <out>/captions.tsv)")

    e = sub.add_parser("eval", parents=[common], help="BLEU-4 / CIDEr of a caption file")
    e.add_argument("--captions", help="caption file (default: <out>/captions.tsv)")
    e.add_argument("--smooth", action="store_true", help="add-one smoothing for BLEU")

    g = sub.add_parser("export-graph", parents=[common], help="write a scene's semantic graph as DOT")
    g.add_argument("--scene", required=True)
    g.add_argument("--dot", help="output path (default: <out>/graph_<scene>.dot)")
    return p


def _configs(args):
    values = read_config(args.config) if args.config else {}
    check_config_keys(values)
    cfgs = {name: apply_config(name, cls(), values) for name, cls in SECTIONS.items()}
    if args.seed is not None:
        cfgs = {k: replace(v, seed=args.seed) for k, v in cfgs.items()}
    return cfgs


def _fmt(x):
    return f"{x:.6g}"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return _run(args)
    except (JointCapError, OSError, KeyError, ValueError) as exc:
        log.error("%s failed: %s", args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _run(args) -> int:
    from . import pipeline as P

    cfgs = _configs(args)
    out = Path(args.out)
    if args.command == "synth":
        spec = cfgs["synth"]
        overrides = {"scenes": args.scenes, "ontology_size": args.ontology_size,
                     "feature_dim": args.feature_dim, "noise": args.noise}
        spec = replace(spec, **{k: v for k, v in overrides.items() if v is not None})
        paths = synth_dataset(spec, out)
        log.info("wrote %d scenes to %s", spec.scenes, paths["scenes"])
    elif args.command == "kg-train":
        P.run_kg_train(out, cfgs["kg"])
        log.info("embeddings written to %s", P.path_of(out, "embeddings"))
    elif args.command == "map-train":
        _, maps = P.run_map_train(out, cfgs["map"])
        for role, v in maps.items():
            print(f"mAP\t{role}\t{_fmt(v)}")
    elif args.command == "train":
        cfg = cfgs["train"]
        if args.iterations is not None:
            cfg = replace(cfg, iterations=args.iterations)
        if args.epochs is not None:
            cfg = replace(cfg, epochs_per_iteration=args.epochs)
        tr = P.resume_train(out) if args.resume else P.run_train(out, cfg)
        for row in tr.iteration_metrics:
            print(f"iteration\t{row['iteration']}\tval_BLEU4\t{_fmt(row['val_BLEU4'])}\tval_CIDEr\t{_fmt(row['val_CIDEr'])}")
    elif args.command == "caption":
        beam = args.beam if args.beam is not None else (MODE_BEAM[args.mode] if args.mode else None)
        res = P.run_caption(out, args.split, beam, args.captions)
        log.info("captioned %d scenes", len(res))
    elif args.command == "eval":
        rep = P.run_eval(out, args.captions, smooth=args.smooth)
        print(f"BLEU4\t{_fmt(rep['corpus_BLEU4'])}\nCIDEr\t{_fmt(rep['corpus_CIDEr'])}\nscenes\t{rep['scenes']}")
    elif args.command == "export-graph":
        path = P.run_export_graph(out, args.scene, args.dot)
        log.info("graph written to %s", path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
