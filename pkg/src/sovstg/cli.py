"""Command-line entry point: ``sovstg {gen-data,train,eval,ablate,plot}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config, load_variants, read_mapping


def _gen_data(args):
    from .data import SceneSpec, generate_dataset
    spec = SceneSpec.from_dict(read_mapping(args.spec)) if args.spec else SceneSpec()
    paths = generate_dataset(spec, args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=1))


def _train(args):
    from .training import train
    cfg = load_config(args.config)
    res = train(cfg, args.data, args.out, init_from=args.init_from)
    best = res.best()
    print(f"metrics: {res.metrics_path}")
    print(f"checkpoint: {res.checkpoints[-1]}")
    print(f"final Full mAP {res.rows[-1]['full']:.4f}; best {best['full']:.4f} at epoch {best['epoch']}")


def _eval(args):
    from .data import HOIDataset
    from .evaluation import rare_classes_from_counts, write_metrics_csv, write_prediction_records
    from .training import evaluate_records, load_checkpoint, predict
    model, _ = load_checkpoint(args.checkpoint)
    test = HOIDataset(args.data, args.split)
    if list(test.hoi_classes) != list(model.vocab.hoi_classes):
        raise SystemExit("the checkpoint and the corpus disagree on the HOI class vocabulary")
    rare = rare_classes_from_counts(test.class_counts(), model.cfg.rare_threshold)
    records = predict(model, test)
    settings = ["default", "known-object"] if args.setting == "both" else [args.setting]
    results = {s: evaluate_records(records, test, model.cfg, rare, s) for s in settings}
    for s, r in results.items():
        print(f"{s:13s} full {r['full']:.4f}  rare {r['rare']:.4f}  non-rare {r['non_rare']:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_prediction_records(records, out / "predictions.jsonl")
        write_metrics_csv(results, out / "eval_metrics.csv")


def _ablate(args):
    from .training import run_ablation
    cfg = load_config(args.config)
    path = run_ablation(cfg, load_variants(args.variants), args.data, args.out)
    print(Path(path).read_text())


def _plot(args):
    from .plotting import emit_curves
    image, tidy = emit_curves(args.runs, args.out, args.names, args.metric)
    print(f"figure: {image}\ntidy csv: {tidy}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sovstg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic HOI corpus")
    g.add_argument("--spec", help="scene spec (YAML/JSON); defaults to the built-in corpus")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_gen_data)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", help="flat YAML/JSON run config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init-from", help="checkpoint whose matching parameters initialize the model")
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--setting", choices=["default", "known-object", "both"], default="default")
    e.add_argument("--split", default="test")
    e.add_argument("--out", help="directory for predictions.jsonl and eval_metrics.csv")
    e.set_defaults(func=_eval)

    a = sub.add_parser("ablate", help="train a set of switch variants and compare them")
    a.add_argument("--config", help="base run config")
    a.add_argument("--variants", required=True,
                   help="variant file, or a builtin set: table3, table4, table6, vla, all")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=_ablate)

    pl = sub.add_parser("plot", help="overlay convergence curves")
    pl.add_argument("--runs", nargs="+", required=True, help="metrics CSVs")
    pl.add_argument("--names", nargs="+", help="legend names, one per run")
    pl.add_argument("--metric", default="full")
    pl.add_argument("--out", required=True, help="image path; the tidy CSV goes next to it")
    pl.set_defaults(func=_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
