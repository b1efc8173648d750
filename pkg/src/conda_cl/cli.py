"""Command line entry point: ``conda-cl <subcommand> --config <path> [--stage k] [--out dir]``.

Exit codes: 0 on success, 1 when the package raises one of its own errors
(bad config, missing artifact, access denied, ...), 2 on usage errors.
"""

import argparse
import json
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from .config import parse_config
from .errors import CondaError

logger = logging.getLogger("conda_cl")

THREADS_ENV = "CONDA_CL_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse reports problems through an exception instead of exiting."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_common(p, stage=False):
    p.add_argument("--config", required=True, help="path to the JSON run configuration")
    p.add_argument("--out", help="output directory (overrides output_dir in the config)")
    if stage:
        p.add_argument("--stage", type=int, required=True, help="stage index k")


def build_parser():
    parser = _Parser(prog="conda-cl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    _add_common(sub.add_parser("generate", help="render and store every domain's datasets"))
    _add_common(sub.add_parser("train-source", help="supervised training on the source domain"))
    _add_common(sub.add_parser("train-flow", help="fit the flow to source segmentation maps"))
    _add_common(sub.add_parser("adapt", help="adapt to target k from the stage k-1 checkpoint"),
                stage=True)
    _add_common(sub.add_parser("evaluate", help="score every domain's val split at stage k"),
                stage=True)
    _add_common(sub.add_parser("report", help="forgetting report, CSV, JSON and SVG"))
    _add_common(sub.add_parser("run-all", help="the whole sequence in one go"))

    cmp_ = sub.add_parser("compare", help="likelihood-regularised vs naive adaptation over seeds")
    cmp_.add_argument("--config", required=True)
    cmp_.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    cmp_.add_argument("--json", help="also write the seed-averaged summary here")

    st = sub.add_parser("selftest", help="run the verification oracles at reduced sizes")
    st.add_argument("--inject-fault", choices=["inverse"],
                    help="corrupt a component on purpose to show the suite catches it")
    return parser


def _threads():
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _run(args):
    if args.command == "selftest":
        from .selftest import run_selftest
        return 0 if run_selftest(fault=args.inject_fault, out=sys.stdout) else 1

    cfg = parse_config(args.config)

    if args.command == "compare":
        from .benchmark import compare_arms, format_comparison
        result = compare_arms(cfg, args.seeds)
        print(format_comparison(result))
        if args.json:
            with open(args.json, "w") as fh:
                json.dump({"seeds": result["seeds"], "mean": result["mean"]}, fh,
                          indent=2, sort_keys=True)
                fh.write("\n")
        return 0

    from .pipeline import RunDir
    run = RunDir(cfg, args.out)
    cmd = args.command
    if cmd == "generate":
        run.generate()
        print(f"datasets written under {run.root / 'data'}")
    elif cmd == "train-source":
        run.train_source()
        print(f"source checkpoint: {run.source_ckpt}")
    elif cmd == "train-flow":
        run.train_flow()
        print(f"flow checkpoint: {run.flow_ckpt}")
    elif cmd == "adapt":
        run.adapt(args.stage)
        print(f"stage {args.stage} checkpoint: {run.stage_ckpt(args.stage)}")
    elif cmd == "evaluate":
        for r in run.evaluate(args.stage):
            print(f"stage {r.stage} {r.domain:10s} mIoU {100 * r.miou:5.1f}")
    elif cmd == "report":
        paths, _, rep = run.report()
        for kind, p in sorted(paths.items()):
            print(f"{kind}: {p}")
    elif cmd == "run-all":
        manifest = run.run_all()
        print(f"manifest: {run.manifest_path} (config {manifest['config_hash']})")
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        n_threads = _threads()
    except UsageError as exc:
        print(build_parser().format_usage().rstrip(), file=sys.stderr)
        print(exc, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        if n_threads is None:
            return _run(args)
        with threadpool_limits(limits=n_threads):
            return _run(args)
    except CondaError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
