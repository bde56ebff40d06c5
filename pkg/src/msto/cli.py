"""Command-line entry point: ``msto optimize | evaluate | render``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from msto import cli_io, plots
from msto.config import ConfigError, config_from_dict, parse_config
from msto.driver import DriverError, Trainer, threshold_and_evaluate
from msto.homogenize import HomogenizationError
from msto.macro_fe import MacroSolveError

EXIT_CONFIG = 2
EXIT_FE = 3
EXIT_IO = 4

log = logging.getLogger("msto")


def _evaluate(config, params, threshold=None):
    solid = config.macro.solid_mask if config.macro is not None else None
    return threshold_and_evaluate(params, config.grid, config.threshold if threshold is None else threshold,
                                  config.simp_p, config.e_min, config.nu, solid_mask=solid)


def _write_images(config, params, macro_params, out: Path, figures: bool):
    solid = config.macro.solid_mask if config.macro is not None else None
    factors = sorted({1, config.export.upsample})
    for f in factors:
        img = cli_io.render_density(params, config.grid, f, solid)
        cli_io.export_density_image(img, img.shape, out / f"density_x{f}.pgm")
        if figures and f == factors[-1]:
            plots.plot_density(img, out / "density.png")
    if macro_params is not None:
        img = cli_io.render_macro_density(macro_params, config.grid)
        cli_io.export_density_image(img, img.shape, out / "macro_density.pgm")


def cmd_optimize(args) -> int:
    config = parse_config(args.config)
    if args.seed is not None:
        raw = dict(config.raw, seed=args.seed)
        config = config_from_dict(raw)
    if args.epochs is not None:
        config = config_from_dict(dict(config.raw, epochs=args.epochs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def save(epoch, params, macro_params):
        cli_io.save_checkpoint(out / "checkpoints" / f"epoch_{epoch:04d}.npz", params, epoch, config.raw,
                               macro_params)

    trainer = Trainer(config)
    result = trainer.run(checkpoint_cb=save)
    cli_io.save_checkpoint(out / "checkpoint.npz", result.params, config.epochs, config.raw, result.macro_params)
    evaluation = _evaluate(config, result.params)
    cli_io.export_reports(result.log, evaluation, out)
    n_params = result.params.n_params + (result.macro_params.n_params if result.macro_params else 0)
    ratio = float(np.nanmean([e.ratio for e in evaluation]))
    cli_io.write_metadata(out / "run.json", config.raw, config.seed, n_params, result.wall_time,
                          {"mean_hs_ratio": ratio, "final_total": result.log.records[-1]["total"]})
    if config.export.images:
        _write_images(config, result.params, result.macro_params, out, config.export.figures)
    if config.export.figures:
        plots.plot_convergence(result.log, out / "convergence.png")
        plots.plot_hs_ratios(evaluation, out / "hs_ratio.png")
    print(f"done: {config.epochs} epochs in {result.wall_time:.1f} s, final loss "
          f"{result.log.records[-1]['total']:.6f}, mean HS ratio {ratio:.4f}; outputs in {out}")
    return 0


def _load(path):
    ckpt = cli_io.load_checkpoint(path)
    return ckpt, config_from_dict(ckpt.config)


def cmd_evaluate(args) -> int:
    ckpt, config = _load(args.checkpoint)
    evaluation = _evaluate(config, ckpt.params, args.threshold)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    cli_io.export_reports(None, evaluation, f"{out}/eval_")
    plots.plot_hs_ratios(evaluation, out / "eval_hs_ratio.png")
    ratios = np.array([e.ratio for e in evaluation])
    flagged = sum(e.flagged for e in evaluation)
    print(f"{len(evaluation)} cells, mean HS ratio {np.nanmean(ratios):.4f}, max {np.nanmax(ratios):.4f}, "
          f"{flagged} all-void")
    return 0


def cmd_render(args) -> int:
    ckpt, config = _load(args.checkpoint)
    if args.factor < 1:
        raise ConfigError("--factor: must be >= 1")
    solid = config.macro.solid_mask if config.macro is not None else None
    img = cli_io.render_density(ckpt.params, config.grid, args.factor, solid)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"render_x{args.factor}.pgm"
    cli_io.export_density_image(img, img.shape, out)
    print(f"wrote {img.shape[1]}x{img.shape[0]} image to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msto", description="Neural-field multiscale topology optimization")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    o = sub.add_parser("optimize", help="train a density field from a TOML config")
    o.add_argument("--config", required=True)
    o.add_argument("--seed", type=int)
    o.add_argument("--epochs", type=int, help="override the configured epoch count")
    o.add_argument("--out", default="out")
    o.set_defaults(func=cmd_optimize)

    e = sub.add_parser("evaluate", help="threshold a checkpoint and report HS ratios")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--threshold", type=float, default=None)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("render", help="write an upsampled density image")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--factor", type=int, default=4)
    r.add_argument("--out")
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DriverError, HomogenizationError, MacroSolveError, FloatingPointError) as exc:
        print(f"FE/optimization failure: {exc}", file=sys.stderr)
        return EXIT_FE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
