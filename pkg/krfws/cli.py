'''
Command line interface:

    krfws train-apr | train-3dapr | train-lbf | train-pose | eval | predict | synth-bench

Every command writes its outputs (model bundle, CSV reports, run
manifest) to the directory given by --out.
'''

import argparse
import logging
import sys

from krfws import wrappers
from krfws.align_tools import STAGES
from krfws.evaluate_tools import NORMS
from krfws.exceptions import KrfwsError


def _overrides(args):
    overrides = {"seed": args.seed}
    if getattr(args, "weighted", None) is not None:
        overrides["forest.weighted"] = args.weighted
    for item in args.set or []:
        if "=" not in item:
            raise argparse.ArgumentTypeError(f"expected key=value, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _common(args):
    return dict(main_dir=args.out, config=args.config, overrides=_overrides(args), n_jobs=args.jobs)


def _stages(text):
    stages = tuple(s.strip().replace("3dapr", "apr3d") for s in text.split(",") if s.strip())
    for s in stages:
        if s not in STAGES:
            raise argparse.ArgumentTypeError(f"unknown stage '{s}', expected some of apr,3dapr,lbf")
    return stages


def _bool(text):
    if text.lower() in ("true", "yes", "on", "1"):
        return True
    if text.lower() in ("false", "no", "off", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got '{text}'")


def cmd_train(args):
    train = {"train-apr": wrappers.train_apr, "train-3dapr": wrappers.train_3dapr,
             "train-lbf": wrappers.train_lbf}[args.command]
    train(data=args.data, split=args.split, list_file=args.list, bbox_file=args.bbox,
          synthetic=args.synthetic, **_common(args))


def cmd_train_pose(args):
    wrappers.train_pose(data=args.data, bbox_file=args.bbox, folds=args.folds,
                        synthetic=args.synthetic, **_common(args))


def cmd_eval(args):
    norms = NORMS if args.norm == "both" else (args.norm,)
    wrappers.evaluate(data=args.data, split=args.split, list_file=args.list, bbox_file=args.bbox,
                      norms=norms, predictions_dir=args.predictions, synthetic=args.synthetic,
                      **_common(args))


def cmd_predict(args):
    wrappers.predict(data=args.data, split=args.split, list_file=args.list, bbox_file=args.bbox,
                     stages=args.stages, synthetic=args.synthetic, **_common(args))


def cmd_synth_bench(args):
    wrappers.synth_bench(stages=args.stages or STAGES, **_common(args))


def build_parser():

    parser = argparse.ArgumentParser(prog="krfws", description="Face alignment and head pose estimation "
                                     "with K-cluster regression forests with weighted splitting")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--config", default=None, help="configuration file (key = value lines)")
        p.add_argument("--seed", type=int, default=None, help="random seed, overrides the configuration")
        p.add_argument("--out", default=None, help="run directory (default: current directory)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a configuration value; may be repeated")
        p.add_argument("--jobs", type=int, default=None, help="number of worker threads")
        p.add_argument("--weighted", type=_bool, default=None, help="false trains plain KRF forests")
        p.add_argument("--verbose", "-v", action="count", default=0)
        return p

    def add_data(p, split):
        p.add_argument("--data", default=None, help="dataset directory")
        p.add_argument("--split", default=split, help="training, common, challenging, full or custom")
        p.add_argument("--list", default=None, help="image list of the custom split")
        p.add_argument("--bbox", default=None, help="face box file ('name x y w h' lines)")
        p.add_argument("--synthetic", type=int, default=None, metavar="N",
                       help="use N synthetic faces instead of a dataset")

    for name, help in (("train-apr", "train the affine pose regression stage"),
                       ("train-3dapr", "train the 3D pose regression stage"),
                       ("train-lbf", "train the local binary features cascade")):
        add_data(add(name, cmd_train, help), "training")

    p = add("train-pose", cmd_train_pose, "cross-validate head pose estimation")
    p.add_argument("--data", default=None, help="Pointing'04 directory")
    p.add_argument("--bbox", default=None, help="face box file ('name x y w h' lines)")
    p.add_argument("--folds", type=int, default=None, help="2 (by session) or a random fold count")
    p.add_argument("--synthetic", type=int, default=None, metavar="N",
                   help="use N synthetic faces instead of a dataset")

    p = add("eval", cmd_eval, "compute normalized landmark errors")
    add_data(p, "full")
    p.add_argument("--norm", choices=NORMS + ("both",), default="inter-pupil")
    p.add_argument("--predictions", default=None,
                   help="directory of .pts predictions; the trained models are run if omitted")

    p = add("predict", cmd_predict, "align faces and write .pts files")
    add_data(p, "full")
    p.add_argument("--stages", type=_stages, default=None, help="comma separated, e.g. apr,3dapr,lbf")

    p = add("synth-bench", cmd_synth_bench, "train and evaluate the pipeline on synthetic faces")
    p.add_argument("--stages", type=_stages, default=None, help="comma separated, e.g. apr,3dapr,lbf")
    return parser


def main(argv=None):

    '''
    Runs a command.

    Returns:
        The process exit status: 0 on success, 1 for usage errors, 2 for
        data errors and 3 for numerical failures.
    '''

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as ex:
        return 0 if ex.code in (0, None) else 1

    level = logging.WARNING - 10*min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        args.func(args)
    except KrfwsError as ex:
        print(f"krfws {args.command}: {ex}", file=sys.stderr)
        return ex.exit_code
    except (ValueError, argparse.ArgumentTypeError) as ex:
        print(f"krfws {args.command}: {ex}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
