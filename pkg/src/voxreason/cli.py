"""Command-line interface.

Exit codes: 0 success, 2 config error, 3 stage failure.
"""

import argparse
import json
import os
import sys


def _build_parser():
    p = argparse.ArgumentParser(
        prog="voxreason",
        description="Neural-symbolic 3D visual reasoning over voxel fields",
    )
    p.add_argument("--config", help="JSON config file (defaults apply without one)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--deterministic", action="store_true",
                   help="pin the pure-numpy kernel backend for bit-exact output")
    sub = p.add_subparsers(dest="command", required=True)
    for name, doc in [
        ("synth", "synthesize scenes and ground-truth grids"),
        ("render", "sample trajectories and render multi-view images"),
        ("fit", "fit density/color then feature grids"),
        ("ground", "semantic-segment the fitted fields"),
        ("bench", "generate the question benchmark with bias control"),
        ("train-rel", "train per-relation scorers from one-hop questions"),
        ("pipeline", "run every stage end to end"),
    ]:
        sub.add_parser(name, help=doc)
    ask = sub.add_parser("ask", help="answer a question or program against a scene")
    ask.add_argument("question", help='question text or an s-expression program')
    ask.add_argument("--scene", type=int, default=0, help="scene index")
    ask.add_argument("--evaluator", choices=["geometric", "learned"], default="geometric")
    ev = sub.add_parser("eval", help="evaluate question answering on the test split")
    ev.add_argument("--evaluator", choices=["geometric", "learned"])
    return p


def main(argv=None):
    args = _build_parser().parse_args(argv)
    if args.deterministic:
        os.environ["VOXREASON_BACKEND"] = "numpy"
    # import after the backend choice is pinned
    from . import pipeline as pl

    try:
        if args.config:
            config = pl.load_config(args.config)
        else:
            config = pl.merge_config({})
        if args.seed is not None:
            config["seed"] = args.seed
        if args.out:
            config["out_dir"] = args.out
        if getattr(args, "evaluator", None) and args.command == "eval":
            config["eval"]["evaluator"] = args.evaluator
    except pl.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    stage_of = {
        "synth": "synth", "render": "render", "fit": "fit", "ground": "ground",
        "bench": "bench", "train-rel": "train_rel", "eval": "eval",
    }
    try:
        if args.command == "pipeline":
            pl.run_pipeline(config)
        elif args.command in stage_of:
            pl.run_pipeline(config, only=stage_of[args.command])
        elif args.command == "ask":
            question, answer = pl.ask(config, config["out_dir"], args.question,
                                      evaluator=args.evaluator, scene_index=args.scene)
            print(json.dumps({"question": question, "answer": answer}))
        else:  # pragma: no cover
            raise AssertionError(args.command)
    except pl.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except pl.StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        print(f"error: missing artifact {e.filename}; run earlier stages first",
              file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
