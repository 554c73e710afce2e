# cli.py
# Command-line front end: synth, train, fuse, metrics, bench, ablate

import os
import sys
import logging
import argparse
from dataclasses import asdict, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config_manager import VARIANTS, ConfigError, ConfigManager, FusionConfig, configure_logging
from estimators import FLOW_MODES, EstimatorError, create_estimator
from media_io import FormatError, read_frames, write_csv, write_frames
from metrics import report
from pipeline import (NumericalError, FusionModel, ablate, bench_table, fuse_sequence,
                      load_model, save_model, train)
from synth_data import SceneSpec, generate, object_list, write_scene
from tensor_core import ShapeError

logger = logging.getLogger("Cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3


class FusionArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_sets(pairs: Optional[List[str]]) -> Dict[str, str]:
    values = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = (part.strip() for part in pair.split("=", 1))
        values[key] = value
    return values


def resolve_config(args) -> FusionConfig:
    """defaults < --config file < FUSION_* environment < flags; prints the result"""
    manager = ConfigManager(getattr(args, "config", None))
    overrides = _parse_sets(getattr(args, "set", None))
    for key in ("seed", "iters", "variant", "tau"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    config = manager.apply_overrides(overrides)
    print("Resolved config:")
    print(manager.describe())
    print(f"seed = {config.seed}")
    return config


def load_sequences(data_dir: str) -> Tuple[List[Tuple[np.ndarray, np.ndarray]], Optional[np.ndarray]]:
    """
    A data directory holds ir/ and vis/ frame folders, or subfolders that
    each do. Ground-truth masks are read from the first sequence's mask/.
    """
    if not os.path.isdir(data_dir):
        raise FileNotFoundError(f"data directory not found: {data_dir}")
    roots = [data_dir] if os.path.isdir(os.path.join(data_dir, "ir")) else [
        os.path.join(data_dir, name) for name in sorted(os.listdir(data_dir))
        if os.path.isdir(os.path.join(data_dir, name, "ir"))
    ]
    if not roots:
        raise FileNotFoundError(f"no ir/ and vis/ frame folders under {data_dir}")
    sequences = [(read_frames(os.path.join(r, "ir")), read_frames(os.path.join(r, "vis"))) for r in roots]
    mask_dir = os.path.join(roots[0], "mask")
    masks = read_frames(mask_dir) > 0.5 if os.path.isdir(mask_dir) else None
    return sequences, masks


def _add_config_flags(parser: argparse.ArgumentParser, config_required: bool = False) -> None:
    parser.add_argument("--config", required=config_required, help="key = value config file")
    parser.add_argument("--seed", type=int, help="Override the seed")
    parser.add_argument("--iters", type=int, help="Override the training iterations")
    parser.add_argument("--variant", choices=VARIANTS, help="Override the ablation variant")
    parser.add_argument("--tau", type=float, help="Override the Top-K ratio")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override any config key")


def cmd_synth(args) -> int:
    spec = SceneSpec.from_file(args.spec) if args.spec else SceneSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    print("Resolved scene:")
    for key, value in asdict(spec).items():
        if key != "objects":
            print(f"{key} = {value}")
    for line in object_list(spec):
        print(f"object = {line}")
    print(f"seed = {spec.seed}")
    layout = write_scene(generate(spec), args.out)
    print(f"✅ Wrote {spec.frames} frames to {', '.join(layout.values())}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_config(args)
    sequences, _ = load_sequences(args.data)
    model, curve = train(config, sequences)
    save_model(model, args.out)
    curve_path = os.path.splitext(args.out)[0] + "_loss.csv"
    write_csv(curve_path, curve)
    print(f"✅ Saved weights to {args.out} and loss curve to {curve_path}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    config = resolve_config(args)
    mode = args.flow_mode or ("file" if args.flow else "estimate")
    print(f"flow_mode = {mode}{' (single-image)' if args.single else ''}")
    estimator = create_estimator(mode, args.flow, config.seed)
    if args.weights:
        model = load_model(config, args.weights)
    else:
        print("⚠️ No weights given, using the seeded initialization")
        model = FusionModel.init(config)
    ir = read_frames(args.ir)
    vis = read_frames(args.vis)
    fused = fuse_sequence(model, ir, vis, estimator, jobs=args.jobs, single=args.single)
    write_frames(args.out, fused)
    print(f"✅ Fused {len(fused)} frames into {args.out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    print(f"flow_mode = {args.flow_mode}")
    print(f"seed = {args.seed}")
    estimator = create_estimator(args.flow_mode, args.flow, args.seed)
    result = report(args.fused, args.ir, args.vis, estimator, jobs=args.jobs)
    write_csv(args.out, result.to_frame())
    for name, value in {**result.means(), **result.sequence}.items():
        print(f"{name} = {value:.6f}")
    print(f"✅ Wrote metric report to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        n_list = [int(n) for n in args.n_list.split(",") if n.strip()]
    except ValueError:
        raise ConfigError(f"--n-list expects comma-separated integers, got {args.n_list!r}")
    if not n_list or min(n_list) < 1:
        raise ConfigError("--n-list needs at least one positive integer")
    config = resolve_config(args)
    print(f"n_list = {','.join(str(n) for n in n_list)}  d = {args.d}  tau = {args.tau}  k_max = {config.k_max}")
    table = bench_table(n_list, args.tau, args.d, config.k_max, config.kv_mode, config, timing=args.timing)
    write_csv(args.out, table)
    print(f"✅ Wrote {len(table)} benchmark rows to {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = resolve_config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variant(s) {', '.join(unknown)}, expected {', '.join(VARIANTS)}")
    sequences, masks = load_sequences(args.data)
    table = ablate(config, variants, sequences, masks)
    write_csv(args.out, table)
    print(table.to_string(index=False))
    print(f"✅ Wrote ablation table to {args.out}")
    return EXIT_OK


def build_parser() -> FusionArgumentParser:
    parser = FusionArgumentParser(prog="video-fusion", description="Motion-aware infrared/visible video fusion")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{synth,train,fuse,metrics,bench,ablate}")

    p = sub.add_parser("synth", help="Generate a synthetic paired scene")
    p.add_argument("--spec", help="Scene spec file; default scene when omitted")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--seed", type=int, help="Override the scene seed")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="Train on a data directory")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="Directory with ir/ and vis/ frames")
    p.add_argument("--out", required=True, help="Weights file (.mavw)")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("fuse", help="Fuse an infrared/visible sequence")
    _add_config_flags(p)
    p.add_argument("--ir", required=True, help="Infrared frame directory")
    p.add_argument("--vis", required=True, help="Visible frame directory")
    p.add_argument("--out", required=True, help="Output frame directory")
    p.add_argument("--weights", help="Weights file; seeded initialization when omitted")
    p.add_argument("--flow", help="Directory of <a>_<b>.flo files")
    p.add_argument("--flow-mode", choices=FLOW_MODES, help="Flow source (default: file with --flow, else estimate)")
    p.add_argument("--single", action="store_true", help="Fuse frames as unordered image pairs")
    p.add_argument("--jobs", type=int, default=1, help="Frames fused in parallel")
    p.set_defaults(handler=cmd_fuse)

    p = sub.add_parser("metrics", help="Score a fused sequence")
    p.add_argument("--fused", required=True)
    p.add_argument("--ir", required=True)
    p.add_argument("--vis", required=True)
    p.add_argument("--out", required=True, help="Report CSV")
    p.add_argument("--flow", help="Directory of <a>_<b>.flo files")
    p.add_argument("--flow-mode", choices=FLOW_MODES, default="estimate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(handler=cmd_metrics)

    p = sub.add_parser("bench", help="Attention and pipeline operation counts")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--n-list", default="256,1024,4096", help="Comma-separated token counts")
    p.add_argument("--tau", type=float, default=0.25)
    p.add_argument("--d", type=int, default=64, help="Token width")
    p.add_argument("--out", required=True, help="Benchmark CSV")
    p.add_argument("--timing", action="store_true", help="Also measure wall time")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("ablate", help="Train and compare variants")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="Comparison CSV")
    p.add_argument("--variants", default=",".join(VARIANTS), help="Comma-separated variants")
    p.set_defaults(handler=cmd_ablate)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse and dispatch; returns the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return int(exit_.code or 0)
    configure_logging()
    try:
        return args.handler(args)
    except FormatError as e:
        print(f"❌ Format error: {e}", file=sys.stderr)
        return EXIT_IO
    except EstimatorError as e:
        print(f"❌ Flow estimator error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"❌ I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as e:
        print(f"❌ Numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ShapeError, ValueError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
