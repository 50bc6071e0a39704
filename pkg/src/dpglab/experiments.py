"""Run orchestration behind the CLI: training runs, batch sweeps, variance benches,
distribution dumps, plots and run manifests. Everything written here is a pure
function of the config, so re-running a manifest reproduces its CSVs byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dpglab import __version__
from dpglab.config import ExperimentConfig
from dpglab.ebm import FitReport, fit_lambdas
from dpglab.estimators import dpg_off_grads
from dpglab.metrics import variance_diagnostics
from dpglab.oracle import EstimatorSpec, exact_advantage_stats, exact_gradient_variance, tvd, ziegler_optimal_policy
from dpglab.policy import TabularPolicy
from dpglab.seqspace import all_sequences, format_sequence
from dpglab.tasks import Task, TaskConfig, build_task
from dpglab.trainer import TrainConfig, Trainer, TrainingAborted, TrainRecord

log = logging.getLogger(__name__)

RECORD_KEYS = ["method", "seed", "epoch", "samples_seen"]
PLOT_METRICS = ["kl_p_pi", "kl_pi_a", "tvd", "mean_phi", "var_grad", "var_adv", "mean_abs_adv", "distinct_1"]


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.10g" % v
    return str(v)


def write_csv(path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def metric_columns(task: Task) -> list[str]:
    phi = [f"mean_phi_{fid}" for fid, _ in task.constraints()]
    return ["z_ma", "kl_p_pi", "kl_pi_a", "tvd", *phi, "var_grad", "var_adv", "mean_abs_adv", "distinct_1"]


def record_row(rec: TrainRecord, cols: list[str], batch_size: int | None = None) -> list:
    head = [rec.method, rec.seed] + ([batch_size] if batch_size is not None else []) + [rec.epoch, rec.samples_seen]
    return head + [rec.metrics[c] for c in cols]


# task preparation ---------------------------------------------------------------

def prepare_task(cfg: ExperimentConfig) -> tuple[Task, FitReport | None]:
    """Build the task; fit lambda first when the config leaves it unset.

    The fitted values are written back into the returned task's config so
    worker processes can rebuild the identical EBM without refitting.
    """
    tcfg = cfg.task_config().model_copy(deep=True)
    task = build_task(tcfg)
    report = None
    if task.ebm.features and tcfg.ebm.lambdas is None:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.fit.seed)))
        report = fit_lambdas(task.ebm, task.targets, cfg.fit.fit_config(), rng)
        tcfg.ebm.lambdas = list(report.lambdas)
        task.config = tcfg
    return task, report


def fit_report_dict(task: Task, report: FitReport | None) -> dict:
    feats = [str(f) for f in task.ebm.features]
    if report is None:
        return {"task": task.name, "features": feats, "lambdas": task.ebm.lambdas.tolist(),
                "targets": task.targets.mu_bar.tolist(), "iterations": 0, "converged": True,
                "capped": False, "residuals": [], "moments": []}
    return {"task": task.name, "features": feats, "lambdas": report.lambdas, "targets": task.targets.mu_bar.tolist(),
            "moments": report.moments, "residuals": report.residuals, "iterations": report.iterations,
            "converged": report.converged, "capped": report.capped, "mode": report.mode}


# training -----------------------------------------------------------------------

@dataclass
class RunResult:
    rows: list[list]
    final: TrainRecord | None
    aborted: str | None = None


def run_training(task_cfg: TaskConfig, train_cfg: TrainConfig, batch_column: bool = False,
                 checkpoint_dir=None) -> RunResult:
    task = build_task(task_cfg)
    cols = metric_columns(task)
    rows: list[list] = []
    bs = train_cfg.batch_size if batch_column else None

    def sink(rec):
        rows.append(record_row(rec, cols, bs))

    policy = task.ebm.base.copy()
    try:
        final = Trainer(policy, task, train_cfg, sink, checkpoint_dir).run()
    except TrainingAborted as e:
        return RunResult(rows, e.record, e.reason)
    return RunResult(rows, final)


def train_header(task: Task, batch_column: bool = False) -> list[str]:
    head = ["method", "seed"] + (["batch_size"] if batch_column else []) + ["epoch", "samples_seen"]
    return head + metric_columns(task)


def _sweep_job(args):
    task_cfg_json, train_cfg_json = args
    tcfg = TaskConfig.model_validate_json(task_cfg_json)
    return run_training(tcfg, TrainConfig.model_validate_json(train_cfg_json), batch_column=True)


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("DPGLAB_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_jobs))


def sweep_jobs(cfg: ExperimentConfig, task: Task) -> list[TrainConfig]:
    jobs = []
    for method in cfg.sweep.methods:
        for seed in cfg.sweep.seeds:
            for b in cfg.sweep.batch_sizes:
                upd = {"method": method, "seed": seed, "batch_size": b}
                if cfg.sweep.sample_budget is not None:
                    upd["epochs"] = max(1, cfg.sweep.sample_budget // b)
                jobs.append(TrainConfig.model_validate({**cfg.train.model_dump(), **upd}))
    return jobs


def run_sweep(cfg: ExperimentConfig, task: Task) -> tuple[list[str], list[list], list[str]]:
    """All (method, seed, batch size) runs; rows sorted by (method, seed, batch_size, epoch)."""
    jobs = sweep_jobs(cfg, task)
    payload = [(task.config.model_dump_json(), j.model_dump_json()) for j in jobs]
    n = worker_count(len(payload))
    if n == 1:
        results = [_sweep_job(p) for p in payload]
    else:
        with ProcessPoolExecutor(max_workers=n) as ex:
            results = list(ex.map(_sweep_job, payload))
    rows = [r for res in results for r in res.rows]
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    aborts = [f"{j.method} seed={j.seed} batch={j.batch_size}: {res.aborted}"
              for j, res in zip(jobs, results) if res.aborted]
    return train_header(task, batch_column=True), rows, aborts


# variance bench -----------------------------------------------------------------

BENCH_HEADER = ["seed", "epoch", "variant", "q_is_pi", "exact_var_grad", "exact_var_adv", "exact_mean_abs_adv",
                "var_grad", "var_adv", "mean_abs_adv", "mean_abs_adv_se", "tvd"]


def bench_checkpoint(task: Task, policy: TabularPolicy, proposal: TabularPolicy, Z: float, p,
                     mc_batch: int, rng: np.random.Generator) -> list[list]:
    """Paired diagnostics at one (pi, q): Z pi/q baseline vs none, same theta and same samples."""
    xs = proposal.sample(rng, mc_batch)
    t = tvd(p, policy.exact_distribution())
    same_q = bool(np.array_equal(policy.logits, proposal.logits))
    out = []
    for variant, bl in (("baseline", "offpolicy_Z_ratio"), ("none", "none")):
        spec = EstimatorSpec("dpg_off", ebm=task.ebm, proposal=proposal, baseline=bl, Z=Z)
        ex = exact_advantage_stats(spec, policy, scale=1.0 / Z)
        vg = exact_gradient_variance(spec, policy, scale=1.0 / Z)
        batch = dpg_off_grads(policy, proposal, task.ebm, Z, variant == "baseline", xs)
        d = variance_diagnostics(batch, 1.0 / Z)
        se = float(np.std(np.abs(batch.advantage / Z), ddof=1) / np.sqrt(mc_batch))
        out.append([variant, same_q, vg, ex["var_adv"], ex["mean_abs_adv"], d.var_grad, d.var_adv,
                    d.mean_abs_adv, se, t])
    return out


def run_bench(cfg: ExperimentConfig, task: Task, workdir) -> tuple[list[str], list[list]]:
    """Train gdcpp per seed with checkpoints, then reload each checkpoint pair and diagnose it."""
    workdir = Path(workdir)
    p, Z = task.ebm.normalize()
    rows = []
    for seed in cfg.bench.seeds:
        tc = TrainConfig.model_validate({**cfg.train.model_dump(), "method": "gdcpp", "seed": seed,
                                         "checkpoint_every": cfg.bench.checkpoint_every,
                                         "accept_every": cfg.bench.accept_every,
                                         "eval_every": cfg.train.epochs})
        ck = workdir / "checkpoints" / f"seed{seed}"
        Trainer(task.ebm.base.copy(), task, tc, None, ck).run()
        for epoch in range(cfg.bench.checkpoint_every, tc.epochs + 1, cfg.bench.checkpoint_every):
            pol = TabularPolicy.load(ck / f"policy_e{epoch:06d}.txt")
            q = TabularPolicy.load(ck / f"proposal_e{epoch:06d}.txt")
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch])))
            for r in bench_checkpoint(task, pol, q, Z, p, cfg.bench.mc_batch, rng):
                rows.append([seed, epoch, *r])
    return BENCH_HEADER, rows


# distribution dump --------------------------------------------------------------

def distribution_rows(task: Task, which: str, beta: float = 1.0) -> list[list]:
    if which == "p":
        dist, _ = task.ebm.normalize()
    elif which == "a":
        dist = task.ebm.base.exact_distribution()
    elif which == "pz":
        if task.reward is None:
            raise ValueError(f"task {task.name} has no pointwise reward, so p_z is undefined")
        dist = ziegler_optimal_policy(task.ebm.base, task.reward, beta)
    else:
        raise ValueError(f"unknown distribution {which!r}; expected p, a or pz")
    X = all_sequences(task.space)
    return [[i, format_sequence(X[i]), dist.probs[i]] for i in range(len(X))]


# plots --------------------------------------------------------------------------

class PlotError(ValueError):
    pass


def _read_csvs(paths) -> list[dict]:
    rows = []
    for path in paths:
        with open(path, encoding="utf-8", newline="") as fh:
            rd = csv.DictReader(fh)
            cols = rd.fieldnames or []
            check_plot_columns(cols, path)
            rows += list(rd)
    return rows


def check_plot_columns(cols: list[str], source="csv") -> None:
    expected = RECORD_KEYS + ["z_ma", "kl_p_pi", "kl_pi_a", "tvd", "mean_phi_<id>", "var_grad", "var_adv",
                              "mean_abs_adv", "distinct_1"]
    known = set(expected) | {"batch_size"}
    unknown = [c for c in cols if c not in known and not c.startswith("mean_phi_")]
    missing = [c for c in expected if c != "mean_phi_<id>" and c not in cols]
    if not any(c.startswith("mean_phi_") for c in cols):
        missing.append("mean_phi_<id>")
    if unknown or missing:
        raise PlotError(f"{source}: unknown columns {unknown}, missing columns {missing}; "
                        f"expected {', '.join(expected)} (batch_size optional)")


def make_plots(csv_paths, out_dir) -> list[Path]:
    """One PNG per metric; curves are the per-label median over seeds vs samples_seen."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = _read_csvs(csv_paths)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sweep = any(r.get("batch_size") for r in rows)

    def label(r):
        return f"{r['method']} b={r['batch_size']}" if sweep else r["method"]

    labels = sorted({label(r) for r in rows})
    phi_cols = sorted({c for r in rows for c in r if c.startswith("mean_phi_")})
    written = []
    for metric in PLOT_METRICS:
        cols = phi_cols if metric == "mean_phi" else [metric]
        fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
        for lab in labels:
            for col in cols:
                by_x: dict[int, list[float]] = {}
                for r in rows:
                    if label(r) == lab and r.get(col) not in (None, ""):
                        by_x.setdefault(int(r["samples_seen"]), []).append(float(r[col]))
                if not by_x:
                    continue
                xs = sorted(by_x)
                name = lab if len(cols) == 1 else f"{lab} {col[len('mean_phi_'):]}"
                ax.plot(xs, [float(np.median(by_x[x])) for x in xs], label=name, linewidth=1.2)
        ax.set_xlabel("samples_seen")
        ax.set_ylabel(metric)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"{metric}.png"
        fig.savefig(path, format="png", metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written


# manifest -----------------------------------------------------------------------

def write_manifest(out_dir, cfg: ExperimentConfig, command: str, seeds: list[int], files: list[str]) -> dict:
    h = cfg.sha256()
    manifest = {
        "command": command,
        "config_sha256": h,
        "seeds": seeds,
        "layout": sorted(files),
        "provenance": f"dpglab {__version__} config:{h[:12]}",
    }
    out_dir = Path(out_dir)
    (out_dir / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


__all__ = [
    "BENCH_HEADER", "PLOT_METRICS", "PlotError", "RunResult", "bench_checkpoint", "check_plot_columns",
    "distribution_rows", "fit_report_dict", "make_plots", "metric_columns", "prepare_task", "run_bench",
    "run_sweep", "run_training", "train_header", "write_csv", "write_manifest",
]
