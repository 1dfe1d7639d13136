"""FlowFusion entry point.

Thin CLI that wires datasets, flow providers, the pipeline and evaluation
into three sub-commands: ``run``, ``eval`` and ``synth``.
"""

import argparse
import logging
import sys
from typing import List, Optional

from dotenv import load_dotenv

from flowfusion import __version__
from flowfusion.commands import cmd_eval, cmd_run, cmd_synth

load_dotenv()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowfusion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for debug output")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="estimate a trajectory and dynamic masks")
    source = run.add_mutually_exclusive_group()
    source.add_argument("--dataset", help="TUM-layout RGB-D sequence directory (pipeline.dataset)")
    source.add_argument("--synthetic-spec", help="synthetic scene spec file (pipeline.synthetic_spec)")
    run.add_argument("--config", help="section.key=value config file")
    run.add_argument("--flow", help="exact | builtin | dir:<path>")
    run.add_argument("--no-segmentation", action="store_true", help="trust every pixel (no dynamic scores)")
    run.add_argument("--out", help="output directory (pipeline.out)")
    run.add_argument("--seed", type=int, help="texture seed for synthetic input")
    run.add_argument("--max-outer-iters", type=int, help="cap on segmentation/VO alternations per pair")
    run.set_defaults(handler=cmd_run)

    ev = sub.add_parser("eval", help="ATE/RPE of an estimated trajectory against ground truth")
    ev.add_argument("estimate", help="estimated trajectory (TUM format)")
    ev.add_argument("groundtruth", help="ground-truth trajectory (TUM format)")
    ev.add_argument("--delta", type=float, default=1.0, help="RPE interval in seconds (default 1)")
    ev.add_argument("--out", default=".", help="directory for ate.csv and rpe.csv")
    ev.set_defaults(handler=cmd_eval)

    synth = sub.add_parser("synth", help="render a synthetic sequence with ground truth")
    synth.add_argument("spec", help="synthetic scene spec file")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--seed", type=int, help="override the spec's texture seed")
    synth.set_defaults(handler=cmd_synth)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
