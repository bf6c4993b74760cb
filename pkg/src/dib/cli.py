"""Command-line entry point: config resolution, experiment dispatch, seed
policy and resumable sweep bookkeeping.

Exit codes: 0 success, 1 usage error, 2 dataset files missing, 3 numeric
failure during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import verify as verify_mod
from .checkpoint import load_model, save_model
from .data import (TaskSequence, load_mnist, make_permuted_tasks,
                   make_split_tasks, make_synthetic, resolve_mnist_paths)
from .model import DibModel
from .reporting import (DETERMINISTIC_FIELDS, SUMMARY_FIELDS, cond_entropy_per_path,
                        mean_final_error, write_entropy_report, write_results)
from .training import (ArchScale, NumericError, RunCondition, RunResult, RunStore,
                       SWEEP_LAMBDAS, evaluate, run_continual, sweep,
                       train_lower_bound)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA_MISSING = 2
EXIT_NUMERIC = 3

DATA_DIR_ENV = "DIB_DATA_DIR"

DATASETS = ("permuted", "split", "synthetic")

# synthetic dataset geometry for CI runs; small enough that a full sweep
# finishes in seconds
SYNTHETIC_SAMPLES = 600
SYNTHETIC_DIM = 16
SYNTHETIC_CLASSES = 3


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "run"
    dataset: str = "synthetic"
    data_dir: str = "data/mnist"
    model_kind: str = "dib"
    ewc: bool = False
    conditions: tuple[str, ...] = ()
    lambdas: tuple[float, ...] = SWEEP_LAMBDAS
    trials: int = 3
    epochs: int = 20
    lower_bound_epochs: int = 200
    batch_size: int = 128
    seed: int = 0
    num_tasks: int = 10
    fisher_samples: int = 1024
    output_dir: str = ""
    checkpoint: str = ""
    desk_scale: bool = False
    save_checkpoints: bool = True

    def arch(self) -> ArchScale:
        return ArchScale.desk() if self.desk_scale else ArchScale.paper()


# keys a JSON config file may set (command/checkpoint stay CLI-only)
CONFIG_FILE_KEYS = {
    "dataset", "data_dir", "model_kind", "ewc", "conditions", "lambdas",
    "trials", "epochs", "lower_bound_epochs", "batch_size", "seed",
    "num_tasks", "fisher_samples", "output_dir", "desk_scale",
    "save_checkpoints",
}


def _parse_lambdas(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"bad lambda list: {text!r}")
    if not values or any(v <= 0 for v in values):
        raise UsageError(f"lambdas must be positive: {text!r}")
    return values


def _parse_condition(text: str) -> tuple[str, bool]:
    parts = text.strip().lower().split("+")
    kind = parts[0]
    if kind not in ("mlp", "mhmlp", "dib", "rir"):
        raise UsageError(f"unknown model kind {kind!r}")
    if len(parts) > 2 or (len(parts) == 2 and parts[1] != "ewc"):
        raise UsageError(f"bad condition {text!r} (expected e.g. 'dib+ewc')")
    return kind, len(parts) == 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="dib", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--dataset", choices=DATASETS)
        p.add_argument("--data-dir", dest="data_dir",
                       help=f"MNIST IDX directory (or ${DATA_DIR_ENV})")
        p.add_argument("--lambdas", type=_parse_lambdas,
                       help="comma-separated positive scale values")
        p.add_argument("--trials", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--num-tasks", dest="num_tasks", type=int)
        p.add_argument("--fisher-samples", dest="fisher_samples", type=int)
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--desk-scale", dest="desk_scale", action="store_true",
                       default=None)
        p.add_argument("--no-checkpoints", dest="save_checkpoints",
                       action="store_false", default=None)

    p_run = sub.add_parser("run", help="one condition (its lambda list x trials)")
    common(p_run)
    p_run.add_argument("--model", dest="model_kind",
                       choices=("mlp", "mhmlp", "dib", "rir"))
    p_run.add_argument("--ewc", action="store_true", default=None)

    p_sweep = sub.add_parser("sweep", help="grid over conditions")
    common(p_sweep)
    p_sweep.add_argument("--conditions",
                         help="comma list, e.g. mlp,mlp+ewc,mhmlp+ewc,dib+ewc")

    p_low = sub.add_parser("lower-bound", help="jointly trained error floor")
    common(p_low)
    p_low.add_argument("--lower-bound-epochs", dest="lower_bound_epochs", type=int)

    p_rep = sub.add_parser("report", help="summaries/entropy from a checkpoint")
    common(p_rep)
    p_rep.add_argument("--checkpoint", required=True)

    sub.add_parser("verify", help="run the built-in property checks")
    return parser


def parse_config(argv: list[str]) -> RunConfig:
    """Resolve the CLI + optional config file into one RunConfig.

    Precedence: flags > config file > defaults. Unknown config-file keys
    are rejected rather than ignored.
    """
    parser = _build_parser()
    if not argv:
        raise UsageError(parser.format_usage().strip())
    ns = parser.parse_args(argv)
    if ns.command is None:
        raise UsageError(parser.format_usage().strip())

    cfg = RunConfig(command=ns.command)
    file_values = {}
    if getattr(ns, "config", None):
        with open(ns.config) as f:
            file_values = json.load(f)
        unknown = set(file_values) - CONFIG_FILE_KEYS
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for key, value in file_values.items():
        if key == "lambdas":
            value = tuple(float(v) for v in value)
        if key == "conditions":
            value = tuple(value)
        setattr(cfg, key, value)
    for key in dataclasses.asdict(cfg):
        flag = getattr(ns, key, None)
        if flag is not None:
            setattr(cfg, key, flag)
    if getattr(ns, "conditions", None):
        cfg.conditions = tuple(s.strip() for s in ns.conditions.split(","))
    if os.environ.get(DATA_DIR_ENV) and "data_dir" not in file_values and \
            getattr(ns, "data_dir", None) is None:
        cfg.data_dir = os.environ[DATA_DIR_ENV]

    if cfg.desk_scale:
        # CI geometry: smaller widths, shorter runs, fewer permuted tasks
        if getattr(ns, "epochs", None) is None and "epochs" not in file_values:
            cfg.epochs = 5
        if getattr(ns, "num_tasks", None) is None and "num_tasks" not in file_values:
            cfg.num_tasks = 5
        if getattr(ns, "lower_bound_epochs", None) is None and \
                "lower_bound_epochs" not in file_values:
            cfg.lower_bound_epochs = 20
    if not cfg.output_dir:
        cfg.output_dir = f"runs/{cfg.command}_{cfg.dataset}"
    for field_name in ("trials", "epochs", "batch_size", "num_tasks",
                       "fisher_samples", "lower_bound_epochs"):
        if getattr(cfg, field_name) < 1:
            raise UsageError(f"{field_name} must be >= 1")
    if cfg.dataset not in DATASETS:
        raise UsageError(f"unknown dataset {cfg.dataset!r}")
    return cfg


def build_tasks(cfg: RunConfig) -> TaskSequence:
    if cfg.dataset == "synthetic":
        return make_synthetic(cfg.num_tasks, SYNTHETIC_SAMPLES, SYNTHETIC_DIM,
                              SYNTHETIC_CLASSES, seed=cfg.seed)
    try:
        resolve_mnist_paths(cfg.data_dir)
    except FileNotFoundError:
        expected = ", ".join(f"{cfg.data_dir}/{n}[.gz]" for n in (
            "train-images-idx3-ubyte", "train-labels-idx1-ubyte",
            "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"))
        raise FileNotFoundError(
            f"MNIST files not found; expected {expected}. "
            f"Run scripts/fetch_mnist.py or set --data-dir/{DATA_DIR_ENV}.")
    train, test = load_mnist(cfg.data_dir)
    if cfg.dataset == "permuted":
        return make_permuted_tasks(train, test, cfg.num_tasks, seed=cfg.seed)
    return make_split_tasks(train, test, seed=cfg.seed)


class FileStore(RunStore):
    """Per-run JSON records under <out>/runs; a record's presence is what
    lets an interrupted sweep skip completed (condition, lambda, trial)
    triples on resume."""

    def __init__(self, out_dir: Path, tasks: TaskSequence,
                 save_checkpoints: bool = True) -> None:
        self.runs_dir = Path(out_dir) / "runs"
        self.runs_dir.mkdir(parents=True, exist_ok=True)
        self.tasks = tasks
        self.save_checkpoints = save_checkpoints

    def _slug(self, condition: str, lam, trial: int) -> str:
        lam_txt = "na" if lam is None else format(lam, "g")
        return f"{condition}_lam{lam_txt}_t{trial}"

    def get(self, condition: str, lam, trial: int):
        path = self.runs_dir / (self._slug(condition, lam, trial) + ".json")
        if not path.exists():
            return None
        with open(path) as f:
            rec = json.load(f)
        return rec["mean_final_error"], rec["wall_seconds"]

    def put(self, condition: str, lam, trial: int, error: float,
            seconds: float, result: RunResult) -> None:
        slug = self._slug(condition, lam, trial)
        record = {
            "condition": condition,
            "lambda": lam,
            "trial": trial,
            "mean_final_error": error,
            "wall_seconds": seconds,
            "error_matrix": result.matrix.entries,
            "memnet_agreement": [d.memnet_agreement for d in result.diagnostics],
            "val_errors": [d.val_error for d in result.diagnostics],
        }
        if isinstance(result.model, DibModel) and trial == 0:
            report = cond_entropy_per_path(result.model, self.tasks)
            from .reporting import entropy_report_payload, write_entropy_report
            write_entropy_report(report, self.runs_dir / (slug + "_entropy.json"))
            record["mean_path_entropy"] = report.overall_mean()
        if self.save_checkpoints and trial == 0:
            save_model(result.model, self.runs_dir / (slug + ".ckpt"),
                       anchors=result.anchors)
        with open(self.runs_dir / (slug + ".json"), "w") as f:
            json.dump(record, f, indent=2)
            f.write("\n")


def _write_manifest(cfg: RunConfig, out: Path, extra: dict) -> None:
    manifest = {"config": dataclasses.asdict(cfg),
                "seed_policy": "trial i uses seed + i, paired across conditions"}
    manifest.update(extra)
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _run_sweep(cfg: RunConfig, condition_names: list[str]) -> int:
    tasks = build_tasks(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    conditions = []
    for name in condition_names:
        kind, ewc = _parse_condition(name)
        conditions.append(RunCondition(
            model_kind=kind, ewc=ewc, epochs_per_task=cfg.epochs,
            trials=cfg.trials, batch_size=cfg.batch_size,
            fisher_samples=cfg.fisher_samples))
    store = FileStore(out, tasks, save_checkpoints=cfg.save_checkpoints)
    t0 = time.perf_counter()
    rows, summaries = sweep(conditions, tasks, cfg.arch(), lambdas=cfg.lambdas,
                            base_seed=cfg.seed, store=store)
    elapsed = time.perf_counter() - t0
    table = [{"condition": r.condition, "dataset": r.dataset,
              "lambda": r.lambda_value, "trial": r.trial,
              "mean_final_error": r.mean_final_error} for r in rows]
    write_results(table, out / "results.csv", fields=DETERMINISTIC_FIELDS)
    write_results(table, out / "results.json", fmt="json",
                  fields=DETERMINISTIC_FIELDS)
    summary_table = [{"condition": s.condition, "dataset": s.dataset,
                      "best_lambda": s.best_lambda, "mean_error": s.mean_error,
                      "std_error": s.std_error, "trials": s.trials}
                     for s in summaries]
    write_results(summary_table, out / "summary.csv", fields=SUMMARY_FIELDS)
    _write_manifest(cfg, out, {"conditions": condition_names,
                               "wall_seconds_total": elapsed,
                               "wall_seconds_per_run": {
                                   f"{r.condition}/{r.lambda_value}/{r.trial}":
                                       r.wall_seconds for r in rows}})
    for s in summaries:
        lam = "-" if s.best_lambda is None else format(s.best_lambda, "g")
        print(f"{s.condition:>12}  lambda={lam:>6}  "
              f"{s.mean_error:6.2f} +- {s.std_error:.2f} %")
    return EXIT_OK


def _run_lower_bound(cfg: RunConfig) -> int:
    tasks = build_tasks(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    mean_err, per_task, _ = train_lower_bound(
        tasks, cfg.arch(), epochs=cfg.lower_bound_epochs, seed=cfg.seed,
        batch_size=cfg.batch_size)
    elapsed = time.perf_counter() - t0
    table = [{"condition": "lower-bound", "dataset": cfg.dataset, "lambda": None,
              "trial": 0, "mean_final_error": mean_err}]
    write_results(table, out / "results.csv", fields=DETERMINISTIC_FIELDS)
    _write_manifest(cfg, out, {"per_task_errors": per_task,
                               "wall_seconds_total": elapsed})
    print(f" lower-bound  {mean_err:6.2f} %  (per task: "
          + ", ".join(f"{e:.2f}" for e in per_task) + ")")
    return EXIT_OK


def _run_report(cfg: RunConfig) -> int:
    tasks = build_tasks(cfg)
    model, _anchors = load_model(cfg.checkpoint)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    errors = [evaluate(model, tasks[j].test, j) for j in range(len(tasks))]
    summary = {"per_task_errors": errors,
               "mean_final_error": float(np.mean(errors))}
    if isinstance(model, DibModel):
        report = cond_entropy_per_path(model, tasks)
        write_entropy_report(report, out / "entropy_report.json")
        summary["mean_path_entropy"] = report.overall_mean()
    with open(out / "report.json", "w") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")
    print(f"mean final error {summary['mean_final_error']:.2f} % "
          f"over {len(tasks)} tasks")
    return EXIT_OK


def dispatch(cfg: RunConfig) -> int:
    if cfg.command == "verify":
        return EXIT_OK if verify_mod.run_all() else EXIT_NUMERIC
    if cfg.command == "run":
        name = cfg.model_kind + ("+ewc" if cfg.ewc else "")
        return _run_sweep(cfg, [name])
    if cfg.command == "sweep":
        if not cfg.conditions:
            raise UsageError("sweep needs --conditions (e.g. mlp,mlp+ewc,dib+ewc)")
        return _run_sweep(cfg, list(cfg.conditions))
    if cfg.command == "lower-bound":
        return _run_lower_bound(cfg)
    if cfg.command == "report":
        return _run_report(cfg)
    raise UsageError(f"unknown command {cfg.command!r}")


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_config(argv)
        return dispatch(cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA_MISSING
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
