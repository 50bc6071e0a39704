"""Command line entry point.

    dpglab fit-lambda|train|sweep-batch|bench-variance|plot|dump-distribution \
        --config <path> [--out <dir>] [--seed N]

Exit codes: 0 success, 2 lambda fit missed tolerance / hit the cap,
3 invalid config or task, 4 runtime abort during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from dpglab import experiments as xp
from dpglab.config import ConfigError, ExperimentConfig, load_config
from dpglab.ebm import NoSurvivingSamplesError, UnsatisfiableError
from dpglab.features import FeatureSyntaxError
from dpglab.seqspace import EnumerationError
from dpglab.trainer import TrainingAborted

log = logging.getLogger("dpglab")

EXIT_OK, EXIT_FIT, EXIT_INVALID, EXIT_ABORT = 0, 2, 3, 4
COMMANDS = ("fit-lambda", "train", "sweep-batch", "bench-variance", "plot", "dump-distribution")


class FitFailed(Exception):
    pass


def _with_seed(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    if seed is None:
        return cfg
    data = cfg.model_dump()
    data["train"]["seed"] = seed
    data["fit"]["seed"] = seed
    data["sweep"]["seeds"] = [seed]
    data["bench"]["seeds"] = [seed]
    return ExperimentConfig.model_validate(data)


def _fitted_task(cfg: ExperimentConfig, out: Path):
    task, report = xp.prepare_task(cfg)
    if report is not None:
        info = xp.fit_report_dict(task, report)
        (out / "lambda_report.json").write_text(json.dumps(info, indent=2) + "\n", encoding="utf-8")
        if not report.converged or report.capped:
            raise FitFailed(f"lambda fit failed (max residual {report.max_residual:.3g}); see lambda_report.json")
    return task


def cmd_fit_lambda(cfg: ExperimentConfig, out: Path, args) -> int:
    task, report = xp.prepare_task(cfg)
    info = xp.fit_report_dict(task, report)
    (out / "lambda_report.json").write_text(json.dumps(info, indent=2) + "\n", encoding="utf-8")
    print(f"lambdas {info['lambdas']}  residuals {info['residuals']}  iterations {info['iterations']}")
    if info["capped"]:
        log.warning("lambda hit the cap %g: the target is only approximated", cfg.fit.lambda_max)
        return EXIT_FIT
    if not info["converged"]:
        log.warning("lambda fit did not reach tolerance %g in %d iterations", cfg.fit.tolerance, info["iterations"])
        return EXIT_FIT
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, out: Path, args) -> int:
    task = _fitted_task(cfg, out)
    tc = cfg.train
    ck = out / "checkpoints" if tc.checkpoint_every else None
    res = xp.run_training(task.config, tc, checkpoint_dir=ck)
    name = f"train_{tc.method}_seed{tc.seed}.csv"
    xp.write_csv(out / name, xp.train_header(task), res.rows)
    xp.write_manifest(out, cfg, "train", [tc.seed], [name])
    if res.final is not None:
        summary = {"method": tc.method, "seed": tc.seed, "epoch": res.final.epoch,
                   "samples_seen": res.final.samples_seen, **res.final.metrics, "aborted": res.aborted}
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
        print(" ".join(f"{k}={xp.fmt(v)}" for k, v in summary.items()))
    if res.aborted:
        log.error("training aborted: %s", res.aborted)
        return EXIT_ABORT
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, out: Path, args) -> int:
    task = _fitted_task(cfg, out)
    header, rows, aborts = xp.run_sweep(cfg, task)
    xp.write_csv(out / "sweep.csv", header, rows)
    xp.write_manifest(out, cfg, "sweep-batch", cfg.sweep.seeds, ["sweep.csv"])
    for a in aborts:
        log.error("run aborted: %s", a)
    return EXIT_ABORT if aborts else EXIT_OK


def cmd_bench(cfg: ExperimentConfig, out: Path, args) -> int:
    task = _fitted_task(cfg, out)
    header, rows = xp.run_bench(cfg, task, out)
    xp.write_csv(out / "bench_variance.csv", header, rows)
    xp.write_manifest(out, cfg, "bench-variance", cfg.bench.seeds, ["bench_variance.csv"])
    return EXIT_OK


def cmd_dump(cfg: ExperimentConfig, out: Path, args) -> int:
    which = args.which or cfg.dump
    task = _fitted_task(cfg, out) if which == "p" else xp.prepare_task(cfg)[0]
    name = f"distribution_{which}.csv"
    xp.write_csv(out / name, ["rank", "sequence", "prob"], xp.distribution_rows(task, which, cfg.train.beta))
    xp.write_manifest(out, cfg, "dump-distribution", [], [name])
    return EXIT_OK


def cmd_plot(cfg, out: Path, args) -> int:
    if not args.csv:
        raise ConfigError("plot needs at least one --csv path")
    paths = xp.make_plots(args.csv, out)
    for p in paths:
        print(p)
    return EXIT_OK


HANDLERS = {
    "fit-lambda": cmd_fit_lambda,
    "train": cmd_train,
    "sweep-batch": cmd_sweep,
    "bench-variance": cmd_bench,
    "dump-distribution": cmd_dump,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dpglab", description="Reward maximization vs distribution matching lab.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="experiment config (JSON)")
    ap.add_argument("--out", default="out", help="output directory (default: ./out)")
    ap.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    ap.add_argument("--csv", nargs="+", help="plot: training or sweep CSVs to draw")
    ap.add_argument("--which", choices=("p", "a", "pz"), help="dump-distribution: which distribution")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = None
        if args.command != "plot" or args.config:
            if not args.config:
                raise ConfigError(f"{args.command} needs --config")
            cfg = _with_seed(load_config(args.config), args.seed)
        out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.command](cfg, out, args)
    except FitFailed as e:
        print(f"dpglab: {e}", file=sys.stderr)
        return EXIT_FIT
    except (ConfigError, ValidationError, UnsatisfiableError, FeatureSyntaxError, EnumerationError,
            xp.PlotError, KeyError, ValueError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"dpglab: invalid configuration: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingAborted, NoSurvivingSamplesError, FloatingPointError) as e:
        print(f"dpglab: aborted: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
