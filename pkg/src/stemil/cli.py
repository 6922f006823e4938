"""Command line entry point: ``stemil {fit,cv,gradcheck,synth,predict}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from . import checkpoint as ckpt_mod
from .data import load_mil_csv, save_mil_csv, standardize, synth_generate
from .gradients import FLIP_SIGN_OPTIONS, fd_check
from .model import predict_batch, predict_label, random_bags, random_model
from .training import TrainConfig, cross_validate, make_trainer


def _config(path) -> TrainConfig:
    return TrainConfig() if path is None else TrainConfig.from_json(path)


def cmd_fit(args) -> int:
    config = _config(args.config)
    data = load_mil_csv(args.data)
    stats = None
    if config.standardize:
        data, stats = standardize(data)
    trainer = make_trainer(data, config)
    history = trainer.fit(data, config.epochs)
    ckpt_mod.save_checkpoint(ckpt_mod.Checkpoint.from_trainer(trainer, stats), args.out)
    if history:
        print(f"trained {config.epochs} epochs, final loss {history[-1]:.6f}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_cv(args) -> int:
    config = _config(args.config)
    data = load_mil_csv(args.data)
    result = cross_validate(data, config)
    for f in result.folds:
        print(f"fold {f.fold}: accuracy {f.accuracy:.4f} ({f.seconds:.1f}s)")
    print(f"mean {result.mean:.4f} +- {result.std:.4f}")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(result.to_dict(), fh, indent=2)
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    model = random_model(T=3, h=2, E=4, m=6, rng=rng)
    bags = random_bags(2, 6, rng)
    report = fd_check(model, bags, step=args.step, flip_sign=args.inject_bug)
    print(report.format_table())
    return 0 if report.passed else 1


def cmd_synth(args) -> int:
    data = synth_generate(args.bags, (args.min_size, args.max_size), args.features,
                          args.positive_fraction, args.seed)
    save_mil_csv(data, args.out)
    print(f"wrote {len(data)} bags ({data.n_instances} instances) to {args.out}")
    return 0


def cmd_predict(args) -> int:
    ckpt = ckpt_mod.load_checkpoint(args.checkpoint)
    data = load_mil_csv(args.data)
    if ckpt.standardization is not None:
        data, _ = standardize(data, ckpt.standardization)
    preds = predict_batch(ckpt.model, data.bags)
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["bag_id", "probability", "label_pred"])
    for bag, p in zip(data.bags, preds):
        writer.writerow([bag.id, repr(p.probability), predict_label(p)])
    if args.out:
        out.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stemil", description="Soft tree ensemble multiple instance learning")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="train on a CSV dataset and write a checkpoint")
    p.add_argument("data")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("cv", help="k-fold cross-validation")
    p.add_argument("data")
    p.add_argument("--config")
    p.add_argument("--report", help="write metrics JSON here")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--inject-bug", choices=FLIP_SIGN_OPTIONS,
                   help="flip the sign of one Jacobian to confirm the checker catches it")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a planted-box MIL dataset")
    p.add_argument("--bags", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--features", type=int, default=10)
    p.add_argument("--min-size", type=int, default=3)
    p.add_argument("--max-size", type=int, default=8)
    p.add_argument("--positive-fraction", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("predict", help="per-bag probabilities from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_predict)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"stemil {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
