"""Command line interface.

Exit codes: 0 on success; 1 for usage and configuration problems (unknown
flags, bad config values, dimension mismatches); 2 for data problems
(unreadable or malformed files, runs where every restart diverged).
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import generator as gen
from . import harness as hn
from . import measure as ms
from . import solver as sv
from .errors import (ConfigError, DataError, DimensionError, FormatError,
                     ModelValidationError, SolveFailed)

_USAGE_ERRORS = (ConfigError, DimensionError)
_DATA_ERRORS = (DataError, FormatError, ModelValidationError, SolveFailed,
                OSError)


def _add_common(p, config_required=True):
    p.add_argument("--config", required=config_required,
                   help="TOML experiment file")
    p.add_argument("--out", default=None,
                   help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, default=None,
                   help="master seed (overrides the config)")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="genphase",
        description="Phase retrieval over a generator's latent space.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve",
                       help="recover one image from magnitude measurements")
    _add_common(p)
    p.add_argument("--image", default=None,
                   help="target image file (PNG/PGM/PPM)")
    p.add_argument("--latent-seed", type=int, default=None,
                   help="synthesize an in-range target from this latent draw "
                        "instead of reading an image")
    p.add_argument("--m", type=int, default=None,
                   help="measurement count (default: first sweep value)")
    p.add_argument("--noise", type=float, default=None,
                   help="noise percent (default: first sweep value)")

    p = sub.add_parser("sweep", help="run the full experiment grid")
    _add_common(p)

    p = sub.add_parser("project-range",
                       help="closest generator output to an image")
    _add_common(p)
    p.add_argument("--image", required=True)

    p = sub.add_parser("gen-info", help="print a weight file's layer table")
    p.add_argument("path")

    p = sub.add_parser("make-tm",
                       help="convert CSV matrix + residuals to a TM file")
    p.add_argument("matrix_csv")
    p.add_argument("residual_csv")
    p.add_argument("--out", required=True)

    p = sub.add_parser("make-synthetic-gen",
                       help="write a seeded synthetic generator")
    p.add_argument("--k", type=int, required=True, help="latent dimension")
    p.add_argument("--shape", type=int, nargs=3, required=True,
                   metavar=("H", "W", "C"))
    p.add_argument("--arch", default="mlp",
                   choices=["mlp", "mlp_tanh", "conv", "dcgan", "mnist"])
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def _load_model(config):
    model = gen.load_generator(config.generator_path)
    if config.dataset.target_shape != model.output_shape:
        raise ConfigError(
            f"target_shape {config.dataset.target_shape} does not match "
            f"generator output {model.output_shape}"
        )
    return model


def _cmd_solve(args):
    config = hn.load_config(args.config, out_dir=args.out,
                            master_seed=args.seed)
    model = _load_model(config)
    m = args.m if args.m is not None else config.m_values[0]
    pct = args.noise if args.noise is not None else config.noise_percents[0]
    if args.latent_seed is not None:
        z_true = np.random.default_rng(args.latent_seed).standard_normal(
            model.input_dim)
        x_ref = np.asarray(gen.forward(model.astype(np.float64), z_true),
                           dtype=np.float64)
        tag = f"latent{args.latent_seed}"
    elif args.image is not None:
        x_ref = hn.load_image(args.image, config.dataset)
        tag = Path(args.image).stem
    else:
        raise ConfigError("solve needs --image or --latent-seed")
    cell = hn.mix_seed(config.master_seed, 0, m, pct, 0)
    op = hn.build_operator(config.operator, m, config.dataset.target_shape,
                           seed=hn.mix_seed(cell, 1))
    mv = ms.measure_magnitude(op, x_ref.ravel(), pct,
                              noise_mode=config.noise_mode,
                              seed=hn.mix_seed(cell, 2))
    solver_cfg = replace(config.solver, seed=hn.mix_seed(cell, 3))
    best, every = sv.solve(model, op, mv.y, solver_cfg)
    proj = sv.project_to_range(
        model, x_ref, replace(config.projection, seed=hn.mix_seed(cell, 4)))
    report = hn.save_solve_report(config.out_dir, tag, solver_cfg, best, every,
                                  x_ref=x_ref,
                                  x_range=np.asarray(proj.x_hat,
                                                     dtype=np.float64))
    print(report)
    return 0


def _cmd_sweep(args):
    config = hn.load_config(args.config, out_dir=args.out,
                            master_seed=args.seed)
    bundle = hn.run_sweep(config)
    print(bundle)
    return 0


def _cmd_project_range(args):
    config = hn.load_config(args.config, out_dir=args.out,
                            master_seed=args.seed)
    model = _load_model(config)
    x_ref = hn.load_image(args.image, config.dataset)
    cfg = replace(config.projection,
                  seed=hn.mix_seed(config.master_seed, 0, 0, 0.0, 0, 4))
    best = sv.project_to_range(model, x_ref, cfg)
    tag = Path(args.image).stem + "_range"
    report = hn.save_solve_report(config.out_dir, tag, cfg, best, [best],
                                  x_ref=x_ref)
    print(report)
    return 0


def _cmd_gen_info(args):
    print(gen.describe(gen.load_generator(args.path)))
    return 0


def _cmd_make_tm(args):
    print(ms.tm_csv_to_prtm(args.matrix_csv, args.residual_csv, args.out))
    return 0


def _cmd_make_synthetic_gen(args):
    model = gen.make_synthetic_generator(args.k, tuple(args.shape),
                                         seed=args.seed, arch=args.arch,
                                         hidden=args.hidden)
    gen.save_generator(model, args.out)
    print(args.out)
    return 0


_HANDLERS = {
    "solve": _cmd_solve,
    "sweep": _cmd_sweep,
    "project-range": _cmd_project_range,
    "gen-info": _cmd_gen_info,
    "make-tm": _cmd_make_tm,
    "make-synthetic-gen": _cmd_make_synthetic_gen,
}


def cli(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits itself; remap to our codes
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _HANDLERS[args.command](args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    raise SystemExit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
