"""Command line front end: INI configuration, the five pipeline commands,
and schedule plotting/export."""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from pathlib import Path

from .augment import OPERATORS
from .kdloss import KDConfig, default_decay_interval
from .pba import load_schedule
from .pipeline import (
    ConfigError,
    DataConfig,
    OptConfig,
    StageConfig,
    distill_student,
    evaluate_checkpoint,
    load_datasets,
    search_student,
    search_teacher,
    train_teacher,
)
from .quant import QuantConfig


class RunConfigError(ValueError):
    pass


# (type, default) per key; booleans use configparser's truthy strings
_SCHEMA = {
    "run": {
        "seed": (int, 0),
        "out_dir": (str, "runs"),
    },
    "data": {
        "kind": (str, "synth"),
        "train_path": (str, ""),
        "test_path": (str, ""),
        "classes": (int, 4),
        "image_size": (int, 16),
        "n_train": (int, 4000),
        "n_test": (int, 1000),
        "seed": (int, 0),
    },
    "search": {
        "reduced_train": (int, 512),
        "reduced_val": (int, 256),
        "epochs": (int, 6),
        "population_size": (int, 4),
        "exploit_interval": (int, 3),
    },
    "train": {
        "epochs": (int, 12),
        "lr": (float, 0.1),
        "momentum": (float, 0.9),
        "weight_decay": (float, 5e-4),
        "batch_size": (int, 64),
        "decay_fraction": (float, 0.3),
    },
    "model": {
        "teacher_channels": (str, "8,16,32"),
        "student_channels": (str, ""),
        "teacher_checkpoint": (str, ""),
    },
    "kd": {
        "lambda0": (float, 0.4),
        "decay_factor": (float, 0.5),
        "decay_interval": (int, 0),  # 0: derive from train epochs
        "kd_grad_clip": (float, 1.0),
        "svd_rank": (int, 4),
        "temperature": (float, 1.0),
        "use_soft": (bool, False),
        "use_intra": (bool, True),
        "use_inter": (bool, True),
    },
    "quant": {
        "enabled": (bool, False),
        "n_bits": (int, 4),
        "quantize_first_layer": (bool, False),
        "quantize_last_layer": (bool, False),
    },
}


def load_run_config(path) -> dict:
    """Parse an INI config, rejecting unknown sections/keys and
    materializing every default. DFKD_SEED overrides run.seed."""
    if not Path(path).exists():
        raise RunConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise RunConfigError(f"{path}: {exc}") from exc

    resolved: dict = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise RunConfigError(f"{path}: unknown section [{section}]")
    for section, keys in _SCHEMA.items():
        resolved[section] = {}
        present = dict(parser[section]) if parser.has_section(section) else {}
        for key in present:
            if key not in keys:
                raise RunConfigError(f"{path}: unknown key '{key}' in section [{section}]")
        for key, (typ, default) in keys.items():
            if key in present:
                try:
                    if typ is bool:
                        value = parser.getboolean(section, key)
                    else:
                        value = typ(present[key])
                except ValueError as exc:
                    raise RunConfigError(
                        f"{path}: bad value for [{section}] {key}: {present[key]!r}") from exc
            else:
                value = default
            resolved[section][key] = value

    env_seed = os.environ.get("DFKD_SEED")
    if env_seed is not None:
        try:
            resolved["run"]["seed"] = int(env_seed)
        except ValueError as exc:
            raise RunConfigError(f"DFKD_SEED must be an integer, got {env_seed!r}") from exc
    return resolved


def write_resolved_config(resolved: dict, path):
    """Emit the fully materialized config so every run is self-describing."""
    parser = configparser.ConfigParser()
    for section, keys in resolved.items():
        parser[section] = {k: str(v) for k, v in keys.items()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        parser.write(fh)


def _parse_channels(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise RunConfigError(f"bad channel list {text!r}") from exc


def build_stage_config(resolved: dict, stage: str) -> StageConfig:
    run, data, search = resolved["run"], resolved["data"], resolved["search"]
    train, model, kd, quant = resolved["train"], resolved["model"], resolved["kd"], resolved["quant"]
    interval = kd["decay_interval"] or default_decay_interval(train["epochs"])
    kd_cfg = KDConfig(
        lambda0=kd["lambda0"], decay_factor=kd["decay_factor"], decay_interval=interval,
        kd_grad_clip=kd["kd_grad_clip"], svd_rank=kd["svd_rank"],
        temperature=kd["temperature"], use_soft=kd["use_soft"],
        use_intra=kd["use_intra"], use_inter=kd["use_inter"])
    quant_cfg = None
    if quant["enabled"]:
        quant_cfg = QuantConfig(n_bits=quant["n_bits"],
                                quantize_first_layer=quant["quantize_first_layer"],
                                quantize_last_layer=quant["quantize_last_layer"])
    try:
        return StageConfig(
            stage=stage, seed=run["seed"], out_dir=run["out_dir"],
            data=DataConfig(**data),
            reduced_train=search["reduced_train"], reduced_val=search["reduced_val"],
            search_epochs=search["epochs"], retrain_epochs=train["epochs"],
            population_size=search["population_size"],
            exploit_interval=search["exploit_interval"],
            teacher_channels=_parse_channels(model["teacher_channels"]),
            student_channels=_parse_channels(model["student_channels"]),
            opt=OptConfig(lr=train["lr"], momentum=train["momentum"],
                          weight_decay=train["weight_decay"],
                          batch_size=train["batch_size"],
                          decay_fraction=train["decay_fraction"]),
            kd=kd_cfg, quant=quant_cfg,
            teacher_checkpoint=model["teacher_checkpoint"] if stage == "beta" else "")
    except ConfigError as exc:
        raise RunConfigError(str(exc)) from exc


# -- schedule plotting -------------------------------------------------------


def schedule_table(schedule):
    """Per epoch and operator: mean probability/magnitude of the two policy
    slots, plus probabilities normalized by the maximal per-epoch probability
    sum across all epochs (an all-zero schedule normalizes to zeros)."""
    rows = []
    epoch_sums = []
    for epoch, policy in enumerate(schedule.per_epoch):
        by_op: dict = {}
        for entry in policy:
            by_op.setdefault(entry.op, []).append(entry)
        epoch_rows = []
        for op in OPERATORS:
            entries = by_op[op]
            prob = sum(e.probability for e in entries) / len(entries)
            mag = sum(e.magnitude for e in entries) / len(entries)
            epoch_rows.append({"epoch": epoch, "op": op, "probability": prob, "magnitude": mag})
        epoch_sums.append(sum(r["probability"] for r in epoch_rows))
        rows.extend(epoch_rows)
    denom = max(epoch_sums) if epoch_sums else 0.0
    for row in rows:
        row["normalized_probability"] = row["probability"] / denom if denom > 0 else 0.0
    return rows


def plot_schedule(schedule_path, out_dir):
    """Write the normalized table plus probability and magnitude plots as
    vector-image files; returns (rows, table path, probability plot path,
    magnitude plot path)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    schedule = load_schedule(schedule_path)
    rows = schedule_table(schedule)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    table_path = out / "schedule_table.tsv"
    with open(table_path, "w") as fh:
        fh.write("epoch\top\tprobability\tnormalized_probability\tmagnitude\n")
        for r in rows:
            fh.write(f"{r['epoch']}\t{r['op']}\t{r['probability']:.4f}"
                     f"\t{r['normalized_probability']:.4f}\t{r['magnitude']:.4f}\n")

    epochs = list(range(len(schedule)))
    paths = {}
    for field, fname, ylabel in (
        ("normalized_probability", "schedule_probabilities.svg", "normalized probability"),
        ("magnitude", "schedule_magnitudes.svg", "mean magnitude"),
    ):
        series = [[r[field] for r in rows if r["op"] == op] for op in OPERATORS]
        fig, ax = plt.subplots(figsize=(8, 5))
        ax.stackplot(epochs, *series, labels=OPERATORS)
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=6, ncol=3, loc="upper left")
        fig.tight_layout()
        path = out / fname
        fig.savefig(path, format="svg")
        plt.close(fig)
        paths[field] = path
    return rows, table_path, paths["normalized_probability"], paths["magnitude"]


# -- command dispatch --------------------------------------------------------


def _pipeline_command(args, stage: str, runner, label: str) -> int:
    resolved = load_run_config(args.config)
    cfg = build_stage_config(resolved, stage)
    write_resolved_config(resolved, Path(cfg.out_dir) / f"resolved_{label}.ini")
    runner(cfg)
    return 0


def _cmd_search_teacher(args):
    return _pipeline_command(args, "alpha", search_teacher, "search_teacher")


def _cmd_train_teacher(args):
    return _pipeline_command(args, "alpha", train_teacher, "train_teacher")


def _cmd_search_student(args):
    return _pipeline_command(args, "beta", search_student, "search_student")


def _cmd_distill_student(args):
    return _pipeline_command(args, "beta", distill_student, "distill_student")


def _cmd_evaluate(args):
    resolved = load_run_config(args.config)
    cfg = build_stage_config(resolved, "alpha")
    ckpt_path = args.checkpoint or str(Path(cfg.out_dir) / "student.ckpt")
    if not Path(ckpt_path).exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    train, test = load_datasets(cfg.data)
    dataset = train if args.split == "train" else test
    acc = evaluate_checkpoint(ckpt_path, dataset)
    print(f"top1_accuracy\t{acc:.4f}")
    return 0


def _cmd_plot_schedule(args):
    plot_schedule(args.schedule, args.out_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfkd",
                                     description="role-wise augmentation search and distillation")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn in (("search-teacher", _cmd_search_teacher),
                     ("train-teacher", _cmd_train_teacher),
                     ("search-student", _cmd_search_student),
                     ("distill-student", _cmd_distill_student)):
        p = sub.add_parser(name)
        p.add_argument("config", help="path to an INI run configuration")
        p.set_defaults(fn=fn)

    p = sub.add_parser("evaluate")
    p.add_argument("config")
    p.add_argument("--checkpoint", default="", help="defaults to <out_dir>/student.ckpt")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("plot-schedule")
    p.add_argument("schedule", help="path to a schedule file")
    p.add_argument("--out-dir", default=".", help="directory for plots and table")
    p.set_defaults(fn=_cmd_plot_schedule)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (RunConfigError, ConfigError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
