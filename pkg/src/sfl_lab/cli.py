"""
``sfl-lab`` command line.

Exit codes: 0 on success, 2 for configuration or usage errors, 3 when a run
fails (every seed aborted, unreadable inputs during scoring, ...).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, config_help, parse_config
from .data import DeskClassifier, default_benchmark, make_dataset
from .trainer import METHODS, _fmt

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3

SCORE_COLUMNS = ["inception_score", "fid", "precision", "recall", "density", "coverage", "n_real", "n_fake", "k",
                 "gt_prob_mean"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _load_config(path):
    return parse_config(path) if path else RunConfig()


def _seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def _floats(text):
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _report(summaries):
    failed = 0
    for label, s in summaries.items():
        agg = s.aggregate.get("fid")
        med = "n/a" if agg is None else f"{agg['median']:.5g}"
        print(f"{label}: {len(s.ok_seeds)}/{len(s.seeds)} seeds ok, median best FID {med}")
        failed += not s.ok_seeds
    return EXIT_RUN if failed else EXIT_OK


def cmd_train(args):
    from .experiment import run_experiment

    config = _load_config(args.config)
    if args.method:
        config = config.with_values(method=args.method)
    seed = config.seed if args.seed is None else args.seed
    summary = run_experiment(config, [seed], args.out, flat=True)
    return _report({config.method: summary})


def cmd_compare(args):
    from .experiment import compare

    config = _load_config(args.config)
    summaries = compare(args.methods.split(","), config, args.seeds, args.out)
    code = _report(summaries)
    print(f"table: {Path(args.out) / 'comparison.csv'}")
    return code


def cmd_sweep(args):
    from .experiment import sweep

    config = _load_config(args.config)
    for nu in args.nu:
        if not 0.0 <= nu <= 1.0:
            raise ConfigError(f"value {nu!r} out of range (maximum focusing rate in [0, 1])", key="nu")
    summaries = sweep(config, args.nu, args.seeds, args.out)
    code = _report(summaries)
    print(f"table: {Path(args.out) / 'sweep.csv'}")
    return code


def cmd_score(args):
    from .experiment import score_files

    clf = DeskClassifier.load(args.classifier) if args.classifier else None
    report = score_files(args.real, args.fake, k=args.k, classifier=clf).to_dict()
    print(json.dumps(report, sort_keys=True))
    print(",".join(SCORE_COLUMNS))
    print(",".join(_fmt(report[c]) for c in SCORE_COLUMNS))
    return EXIT_OK


def cmd_make_data(args):
    from .data import train_desk_classifier

    ds = make_dataset(default_benchmark(), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds.to_csv(out / "dataset.csv")
    clf = train_desk_classifier(ds, epochs=args.classifier_epochs, seed=args.seed)
    clf.save(out / "classifier.npz")
    print(f"wrote {out / 'dataset.csv'} ({len(ds)} points) and classifier "
          f"(held-out accuracy {clf.heldout_accuracy:.4f})")
    return EXIT_OK


def build_parser():
    parser = _Parser(
        prog="sfl-lab",
        description="Selective focusing training for 2-D conditional GANs.",
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=config_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train one seed and write diagnostics, metrics, snapshots and checkpoints")
    p.add_argument("--config", help="config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="training seed (overrides the config)")
    p.add_argument("--method", choices=METHODS, help="override the configured method")
    p.add_argument("--out", required=True, help="output directory")

    p = add("compare", cmd_compare, "train several methods on identical data and seeds")
    p.add_argument("--config", help="config file")
    p.add_argument("--methods", required=True, help=f"comma-separated subset of {','.join(METHODS)}")
    p.add_argument("--seeds", type=_seeds, default=[0], help="comma-separated seeds (default 0)")
    p.add_argument("--out", required=True, help="output directory")

    p = add("sweep", cmd_sweep, "repeat the configured method over several maximum focusing rates")
    p.add_argument("--config", help="config file")
    p.add_argument("--nu", type=_floats, required=True, help="comma-separated nu values")
    p.add_argument("--seeds", type=_seeds, default=[0], help="comma-separated seeds (default 0)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("score", help="metrics between two sample files",
                       description="Score two CSV point files. The last column holds a class label or -1.")
    p.set_defaults(func=cmd_score)
    p.add_argument("--real", required=True)
    p.add_argument("--fake", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--classifier", help="classifier .npz from make-data; enables IS and gt probability")

    p = sub.add_parser("make-data", help="write the default benchmark dataset and a trained desk classifier")
    p.set_defaults(func=cmd_make_data)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classifier-epochs", type=int, default=10)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
