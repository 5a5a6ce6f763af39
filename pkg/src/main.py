#!/usr/bin/env python3
"""
UVZ underwater image enhancement - command-line entry point
Synthetic data generation, two-stage training, inference, evaluation and checks
"""

import sys
import os
import argparse
import glob
import logging
from typing import Dict, List, Optional, Sequence

# Add the src directory to the Python path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import numpy as np

import image_io
from blocks import BlockConfig
from checkpoint import load_checkpoint
from config import format_key_values, load_config_file, parse_bool, parse_triple
from datagen import DegradationParams, load_manifest, make_dataset
from depthops import DepthMap
from errors import ConfigurationError, FormatError, RangeError, ShapeError, UVZError
from gradcheck import format_table, run_suite
from losses import LossWeights
from networks import ABLATION_FLAGS, NetConfig
from tensorcore import Tensor
from trainer import (ABLATION_COLUMNS, Dataset, TrainConfig, evaluate, load_model, load_stage1, raw_report_path,
                     run_ablation, train_stage1, train_stage2)

logger = logging.getLogger("uvz")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

# argparse destinations that are not part of the resolved config
NOT_CONFIG = {"command", "config", "verbose", "quiet", "handler"}

# checked after the config-file merge so a resolved config can supply them
REQUIRED = {
    "train1": ("data",),
    "train2": ("data", "init_ckpt"),
    "enhance": ("ckpt", "input"),
    "depth": ("ckpt", "input"),
    "eval": ("ckpt", "data"),
    "ablate": ("data",),
}


class CliParser(argparse.ArgumentParser):
    """Usage errors become ConfigurationError so they share the validation exit code.

    Abbreviated long options are refused: explicit flags are matched by full
    name when deciding what a --config file may override.
    """

    def __init__(self, *args, **kwargs):
        kwargs.setdefault('allow_abbrev', False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


def _triple(value: str):
    return parse_triple(value, "triple")


# ---------------------------------------------------------------------------
# Parser

def _shared(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument('--config', metavar='PATH', help='key=value file; explicit flags win over it (default: none)')
    p.add_argument('--seed', type=int, default=0, help='random seed (default: %(default)s)')
    p.add_argument('--out', metavar='DIR', default=out_default, help='output directory (default: %(default)s)')
    p.add_argument('--threads', type=int, default=1,
                   help='worker threads for data loading/evaluation (default: %(default)s)')
    verbosity = p.add_mutually_exclusive_group()
    verbosity.add_argument('--verbose', action='store_true', help='debug logging')
    verbosity.add_argument('--quiet', action='store_true', help='warnings and errors only')


def _network(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group('network')
    g.add_argument('--base-channels', type=int, default=16, help='channels at full resolution (default: %(default)s)')
    g.add_argument('--depth-levels', type=int, default=3, help='encoder levels (default: %(default)s)')
    g.add_argument('--window-size', type=int, default=4, help='attention window side (default: %(default)s)')
    g.add_argument('--heads', type=int, default=2, help='attention heads (default: %(default)s)')
    g.add_argument('--mlp-ratio', type=float, default=2.0, help='MLP expansion (default: %(default)s)')
    g.add_argument('--dam-pool-factor', type=int, default=4, help='DAM spatial pooling (default: %(default)s)')
    g.add_argument('--se-reduction', type=int, default=4, help='channel-attention reduction (default: %(default)s)')
    g.add_argument('--far-is-zero', action='store_true', help='depth maps use 0 = far (default: 0 = near)')
    a = p.add_argument_group('ablations')
    for flag in ABLATION_FLAGS:
        name = flag[len('use_'):]
        a.add_argument(f'--no-{name}', action='store_true', help=f'disable {name.upper()} (default: enabled)')


def _training(p: argparse.ArgumentParser, epochs: int = 100) -> None:
    p.add_argument('--data', metavar='MANIFEST', help='dataset manifest (required)')
    p.add_argument('--epochs', type=int, default=epochs, help='training epochs (default: %(default)s)')
    p.add_argument('--lr', type=float, default=2e-4, help='learning rate (default: %(default)s)')
    p.add_argument('--lr-halve-epoch', type=int, default=50, help='epoch the lr is halved at (default: %(default)s)')
    p.add_argument('--batch', type=int, default=4, help='batch size (default: %(default)s)')
    p.add_argument('--size', type=int, default=64, help='training crop size (default: %(default)s)')
    p.add_argument('--lambda1', type=float, default=3.0, help='stage-1 depth weight (default: %(default)s)')
    p.add_argument('--lambda2', type=float, default=0.5, help='stage-2 SSIM weight (default: %(default)s)')
    p.add_argument('--epsilon', type=float, default=1e-3, help='Charbonnier epsilon (default: %(default)s)')


def build_parser() -> CliParser:
    parser = CliParser(prog='uvz', description='Depth-guided underwater image enhancement')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    p = sub.add_parser('datagen', help='generate a synthetic (raw, clean, depth) dataset')
    _shared(p, 'data')
    p.add_argument('--count', type=int, default=64, help='number of triples (default: %(default)s)')
    p.add_argument('--size', type=int, default=64, help='image side in pixels (default: %(default)s)')
    p.add_argument('--split', type=float, default=0.8, help='train fraction (default: %(default)s)')
    p.add_argument('--beta', type=_triple, default=(0.8, 0.35, 0.30), help='attenuation r,g,b (default: 0.8,0.35,0.3)')
    p.add_argument('--backscatter', type=_triple, default=(0.05, 0.35, 0.45),
                   help='backscatter colour r,g,b (default: 0.05,0.35,0.45)')
    p.add_argument('--noise', type=float, default=0.01, help='gaussian noise sigma (default: %(default)s)')
    p.set_defaults(handler=cmd_datagen)

    p = sub.add_parser('train1', help='stage 1: train DEN and ASN')
    _shared(p, 'runs')
    _training(p)
    _network(p)
    p.add_argument('--ckpt', metavar='PATH', help='checkpoint to write (default: OUT/stage1.uvz)')
    p.add_argument('--resume', metavar='PATH', help='continue from a stage-1 checkpoint (default: none)')
    p.set_defaults(handler=cmd_train1)

    p = sub.add_parser('train2', help='stage 2: train DGEN with a frozen DEN')
    _shared(p, 'runs')
    _training(p)
    _network(p)
    p.add_argument('--init-ckpt', metavar='PATH', help='stage-1 checkpoint providing DEN (required)')
    p.add_argument('--ckpt', metavar='PATH', help='checkpoint to write (default: OUT/stage2.uvz)')
    p.add_argument('--resume', metavar='PATH', help='continue from a stage-2 checkpoint (default: none)')
    p.set_defaults(handler=cmd_train2)

    for name, help_text, handler in (('enhance', 'enhance PPM images', cmd_enhance),
                                     ('depth', 'predict PGM depth maps', cmd_depth)):
        p = sub.add_parser(name, help=help_text)
        _shared(p, name)
        p.add_argument('--ckpt', metavar='PATH', help='stage-2 checkpoint (required)')
        p.add_argument('--input', metavar='GLOB', help='input PPM files (required)')
        if name == 'enhance':
            p.add_argument('--gt-depth', metavar='MANIFEST',
                           help='use ground-truth depth from this manifest instead of DEN (default: none)')
        p.set_defaults(handler=handler)

    p = sub.add_parser('eval', help='score a checkpoint on the test split')
    _shared(p, 'eval')
    p.add_argument('--ckpt', metavar='PATH', help='stage-2 checkpoint (required)')
    p.add_argument('--data', metavar='MANIFEST', help='dataset manifest (required)')
    p.add_argument('--report', metavar='PATH', help='metric table (default: OUT/report.csv)')
    p.add_argument('--gt-depth', action='store_true', help='enhance with ground-truth depth instead of DEN')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('gradcheck', help='finite-difference check of every differentiable operation')
    _shared(p, 'gradcheck')
    p.add_argument('--samples', type=int, default=6, help='entries checked per tensor (default: %(default)s)')
    p.add_argument('--ops', help='comma-separated subset of operations (default: all)')
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser('ablate', help='train the full model and every ablation variant')
    _shared(p, 'ablation')
    _training(p, epochs=5)
    _network(p)
    p.set_defaults(handler=cmd_ablate)
    return parser


# ---------------------------------------------------------------------------
# Config resolution

def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise ConfigurationError(f"unknown command {command!r}")


def _explicit_dests(sub: argparse.ArgumentParser, argv: Sequence[str]) -> set:
    given = {token.split('=', 1)[0] for token in argv if token.startswith('--')}
    return {action.dest for action in sub._actions if any(opt in given for opt in action.option_strings)}


def _coerce_action(action: argparse.Action, value: str):
    key = action.dest
    if isinstance(action, argparse._StoreTrueAction):
        return parse_bool(value, key)
    if value == '' and action.default is None:
        return None
    if action.type is None:
        return value
    try:
        return action.type(value)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{key}: invalid value {value!r} ({e})") from None


def apply_config_file(parser: argparse.ArgumentParser, args: argparse.Namespace, argv: Sequence[str]) -> None:
    """defaults < config file < explicit flags"""
    if not args.config:
        return
    sub = _subparser(parser, args.command)
    actions = {a.dest: a for a in sub._actions if a.dest not in NOT_CONFIG and a.option_strings}
    values = load_config_file(args.config)
    explicit = _explicit_dests(sub, argv)
    for key, value in values.items():
        if key == 'command':
            if value != args.command:
                raise ConfigurationError(f"{args.config}: written for command {value!r}, not {args.command}")
            continue
        if key not in actions:
            raise ConfigurationError(f"{args.config}: unknown key {key!r} for command {args.command}")
        if key not in explicit:
            setattr(args, key, _coerce_action(actions[key], value))


def require_flags(args: argparse.Namespace) -> None:
    missing = [d for d in REQUIRED.get(args.command, ()) if getattr(args, d, None) in (None, "")]
    if missing:
        flags = ", ".join("--" + d.replace("_", "-") for d in missing)
        raise ConfigurationError(f"{args.command}: missing required {flags}")


def resolved_config(args: argparse.Namespace) -> Dict[str, object]:
    return {key: value for key, value in sorted(vars(args).items()) if key not in NOT_CONFIG}


def net_config(args: argparse.Namespace) -> NetConfig:
    block = BlockConfig(window_size=args.window_size, heads=args.heads, mlp_ratio=args.mlp_ratio,
                        dam_pool_factor=args.dam_pool_factor, se_reduction=args.se_reduction)
    flags = {flag: not getattr(args, f"no_{flag[len('use_'):]}") for flag in ABLATION_FLAGS}
    return NetConfig(base_channels=args.base_channels, depth_levels=args.depth_levels, block=block,
                     near_is_zero=not args.far_is_zero, seed=args.seed, **flags)


def train_config(args: argparse.Namespace, stage: int) -> TrainConfig:
    return TrainConfig(stage=stage, epochs=args.epochs, lr=args.lr, lr_halve_epoch=args.lr_halve_epoch,
                       batch=args.batch, image_size=args.size, seed=args.seed,
                       loss=LossWeights(args.lambda1, args.lambda2, args.epsilon), net=net_config(args))


# ---------------------------------------------------------------------------
# Commands

def cmd_datagen(args: argparse.Namespace) -> int:
    params = DegradationParams(args.beta, args.backscatter, args.noise, args.seed)
    entries = make_dataset(args.count, args.split, params, args.out, args.size, args.threads)
    train = sum(1 for e in entries if e.split == 'train')
    print(f"Wrote {len(entries)} triples ({train} train, {len(entries) - train} test)")
    print(f"Manifest: {os.path.join(args.out, 'manifest.txt')}")
    return EXIT_OK


def _print_counts(model) -> None:
    print("Parameters: " + ", ".join(f"{k}={v}" for k, v in model.parameter_counts().items()))


def cmd_train1(args: argparse.Namespace) -> int:
    cfg = train_config(args, 1)
    dataset = Dataset.from_manifest(args.data, args.threads)
    ckpt_path = args.ckpt or os.path.join(args.out, 'stage1.uvz')
    resume = load_checkpoint(args.resume) if args.resume else None
    outcome = train_stage1(dataset, cfg, ckpt_path, os.path.splitext(ckpt_path)[0] + '.log', resume)
    _print_counts(outcome.model)
    print(f"Stage 1 finished: best validation loss {outcome.best_loss:.6f}")
    print(f"Checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_train2(args: argparse.Namespace) -> int:
    cfg = train_config(args, 2)
    stage1 = load_stage1(args.init_ckpt)
    dataset = Dataset.from_manifest(args.data, args.threads)
    ckpt_path = args.ckpt or os.path.join(args.out, 'stage2.uvz')
    resume = load_checkpoint(args.resume) if args.resume else None
    outcome = train_stage2(dataset, cfg, stage1, ckpt_path, os.path.splitext(ckpt_path)[0] + '.log', resume)
    _print_counts(outcome.model)
    print(f"Stage 2 finished: best validation loss {outcome.best_loss:.6f}")
    print(f"Checkpoint: {ckpt_path}")
    return EXIT_OK


def _inputs(pattern: str) -> List[str]:
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise ConfigurationError(f"no input files match {pattern!r}")
    return paths


def _gt_depths(manifest: Optional[str]) -> Dict[str, str]:
    if not manifest:
        return {}
    return {os.path.basename(e.raw): e.depth for e in load_manifest(manifest)}


def cmd_enhance(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = load_model(ckpt)
    depths = _gt_depths(args.gt_depth)
    for path in _inputs(args.input):
        image = image_io.load_image(path)
        depth = None
        if args.gt_depth:
            name = os.path.basename(path)
            if name not in depths:
                raise ConfigurationError(f"{name} is not listed in {args.gt_depth}")
            depth = DepthMap(image_io.load_depth(depths[name])).in_convention(ckpt.config.near_is_zero)
        y, _ = model.enhance(Tensor(image[None]), depth)
        target = os.path.join(args.out, os.path.basename(path))
        image_io.save_image(target, y.data[0].astype(np.float64))
        print(f"{path} -> {target}")
    return EXIT_OK


def cmd_depth(args: argparse.Namespace) -> int:
    model = load_model(load_checkpoint(args.ckpt))
    for path in _inputs(args.input):
        depth, _ = model.den_forward(Tensor(image_io.load_image(path)[None]))
        target = os.path.join(args.out, os.path.splitext(os.path.basename(path))[0] + '.pgm')
        image_io.save_depth(target, depth.data[0, 0].astype(np.float64))
        print(f"{path} -> {target}")
    return EXIT_OK


def _summary(label: str, means: Dict[str, Optional[float]]) -> str:
    return label + "  " + "  ".join(f"{k}={'' if v is None else f'{v:.4f}'}" for k, v in means.items())


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.ckpt)
    report_path = args.report or os.path.join(args.out, 'report.csv')
    enhanced, raw = evaluate(ckpt, load_manifest(args.data), os.path.join(args.out, 'enhanced'),
                             report_path, use_gt_depth=args.gt_depth)
    print(_summary("enhanced", enhanced.means()))
    print(_summary("raw     ", raw.means()))
    if enhanced.skipped:
        print(f"Skipped {len(enhanced.skipped)} unreadable image(s); see report footer")
    print(f"Report: {report_path} (baseline {raw_report_path(report_path)})")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    names = [n.strip() for n in args.ops.split(',')] if args.ops else None
    results = run_suite(args.seed, args.samples, names)
    if not results:
        raise ConfigurationError(f"no gradient checks named {args.ops!r}")
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"All {len(results)} operations PASS")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = train_config(args, 1)
    dataset = Dataset.from_manifest(args.data, args.threads)
    rows = run_ablation(dataset, load_manifest(args.data), cfg, args.out)
    print(",".join(ABLATION_COLUMNS))
    for row in rows:
        print(row.to_line())
    print(f"Table: {os.path.join(args.out, 'ablation.csv')}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if getattr(args, 'verbose', False) else \
        logging.WARNING if getattr(args, 'quiet', False) else logging.INFO
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s', stream=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point"""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        apply_config_file(parser, args, argv)
        require_flags(args)
        _configure_logging(args)
        print("# resolved config")
        print(format_key_values({'command': args.command, **resolved_config(args)}), end='')
        return args.handler(args)
    except (ConfigurationError, ShapeError, FormatError, RangeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (UVZError, OSError, ArithmeticError, RuntimeError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
