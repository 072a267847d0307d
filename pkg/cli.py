#!/usr/bin/env python3
"""
Command-line front door for the hijacking lab.

    python cli.py make-scenes --scenes 50 --out artifacts
    python cli.py calibrate --scenes 50 --seed 42 --out artifacts
    python cli.py rank-heads --k 8 --profile artifacts/profile.json
    python cli.py generate --alpha 0.1 --trace
    python cli.py eval --alpha 0.3 --compare-persist --t 5 --ktop 10
    python cli.py pipeline --scenes 50 --seed 42

Exit codes: 0 success, 2 usage or configuration, 3 incomplete profile,
4 numeric or degenerate, 1 anything else.
"""
import argparse
import json
import sys
from typing import Any, Dict, List, Optional

from config.settings import settings
from core.errors import HijackLensError
from tools.calibrate_profile import CalibrateProfileTool
from tools.evaluate import EvaluateTool
from tools.generate_captions import GenerateCaptionsTool
from tools.make_scenes import MakeScenesTool
from tools.pipeline import PipelineTool
from tools.rank_heads import RankHeadsTool
from utils.logger import set_level, setup_logger

logger = setup_logger("hijacklens", settings.LOG_LEVEL)

TOOLS = {
    "make-scenes": MakeScenesTool,
    "calibrate": CalibrateProfileTool,
    "rank-heads": RankHeadsTool,
    "generate": GenerateCaptionsTool,
    "eval": EvaluateTool,
    "pipeline": PipelineTool,
}

# flag -> RunConfig field
OPTIONS = [
    ("--scenes", "scenes", int, "number of scenes to generate"),
    ("--seed", "seed", int, "run seed (HIJACKLENS_SEED when absent)"),
    ("--layers", "layers", int, "toy model layers"),
    ("--heads", "heads", int, "heads per layer"),
    ("--dmodel", "dmodel", int, "residual width"),
    ("--vocab", "vocab", int, "vocabulary size"),
    ("--nvision", "nvision", int, "vision tokens per scene"),
    ("--max-seq", "max_seq", int, "model context length"),
    ("--n-inert", "n_inert", int, "planted inert tokens per scene"),
    ("--alpha", "alpha", float, "enhancement strength"),
    ("--beta", "beta", float, "inert penalty in [0, 1]"),
    ("--k", "k", int, "number of target heads"),
    ("--iqr-mult", "iqr_mult", float, "IQR multiplier for the anchor threshold"),
    ("--salient-frac", "salient_frac", float, "attention-mass fraction of salient tokens"),
    ("--t", "t", int, "steps for the persistent set"),
    ("--ktop", "ktop", int, "top vision tokens per step for the persistent set"),
    ("--max-new", "max_new", int, "tokens generated per scene"),
    ("--criterion", "criterion", str, "head ranking: nhar or total_attention"),
    ("--out", "out", str, "output directory"),
    ("--profile", "profile", str, "profile JSON path (default <out>/profile.json)"),
    ("--scene-dir", "scene_dir", str, "read scenes from this directory instead of generating"),
    ("--workers", "workers", int, "scene-parallel worker threads"),
]

FLAGS = [
    ("--skip-salient", "skip_salient", "compute ratios over all vision tokens"),
    ("--renormalize", "renormalize", "renormalize rows after enhancement"),
    ("--no-gt", "no_gt", "rank heads over all object steps"),
    ("--trace", "trace", "dump per-step HAR/NHAR rows"),
    ("--compare-persist", "compare_persist", "compare identified tokens with persistent sets"),
]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    for flag, dest, kind, help_text in OPTIONS:
        common.add_argument(flag, dest=dest, type=kind, default=None, help=help_text)
    for flag, dest, help_text in FLAGS:
        common.add_argument(flag, dest=dest, action="store_true", default=None, help=help_text)
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="hijacklens", description="Vocabulary hijacking lab on a toy transformer", allow_abbrev=False
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for name in TOOLS:
        commands.add_parser(name, parents=[common], allow_abbrev=False)
    return parser


def to_input(args: argparse.Namespace) -> Dict[str, Any]:
    fields = [dest for _, dest, _, _ in OPTIONS] + [dest for _, dest, _ in FLAGS]
    data = {f: getattr(args, f) for f in fields if getattr(args, f) is not None}
    data["seed"] = settings.resolve_seed(args.seed)
    return data


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        set_level("DEBUG")
    try:
        settings.validate()
        input_data = to_input(args)
    except HijackLensError as e:
        logger.error(str(e))
        return e.exit_code
    result = TOOLS[args.command]().run(input_data)
    summary = {k: v for k, v in result.items() if k != "report"}
    print(json.dumps(summary, indent=2, default=str))
    if not result.get("success"):
        logger.error(result.get("error"))
    return int(result.get("exit_code", 0 if result.get("success") else 1))


if __name__ == "__main__":
    sys.exit(main())
