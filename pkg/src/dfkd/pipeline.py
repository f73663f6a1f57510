"""Two-stage orchestration: teacher schedule search + retrain (stage alpha),
student schedule search under distillation + retrain (stage beta), plus
checkpoint persistence and evaluation."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import augment_batch
from .dataio import Dataset, load_cifar_binary, make_reduced, synth_shapes
from .kdloss import (
    KDConfig,
    clip_kd_gradients,
    ii_kd_total,
    inter_loss,
    intra_loss,
    soft_label_divergence,
)
from .nets import ArchDescriptor, Model, init_from, sgd_step
from .pba import Schedule, load_schedule, run_search, save_schedule, trial_rng
from .quant import QuantConfig
from .tensor import Tensor

CHECKPOINT_MAGIC = b"DFKD"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


# -- checkpoint persistence -------------------------------------------------


@dataclass
class Checkpoint:
    desc: ArchDescriptor
    arrays: dict
    quant: QuantConfig | None = None
    metadata: dict = field(default_factory=dict)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name], dtype="<f4").tobytes())
        return h.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path):
    """Binary layout: magic, u32 version, length-prefixed descriptor JSON,
    then per array: u64 name length, name, u64 rank, u64 dims, f32 LE data."""
    header = {
        "arch": json.loads(ckpt.desc.to_json()),
        "quant": None if ckpt.quant is None else {
            "n_bits": ckpt.quant.n_bits,
            "quantize_first_layer": ckpt.quant.quantize_first_layer,
            "quantize_last_layer": ckpt.quant.quantize_last_layer,
        },
        "metadata": ckpt.metadata,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in sorted(ckpt.arrays):
            arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f4")
            nb = name.encode()
            fh.write(struct.pack("<Q", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    pos = 16
    header = json.loads(data[pos : pos + hlen].decode())
    pos += hlen
    arrays = {}
    while pos < len(data):
        (nlen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        name = data[pos : pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        arrays[name] = arr.astype(np.float32)
    quant = None
    if header.get("quant"):
        quant = QuantConfig(**header["quant"])
    desc = ArchDescriptor.from_json(json.dumps(header["arch"]))
    return Checkpoint(desc=desc, arrays=arrays, quant=quant, metadata=header.get("metadata", {}))


# -- configuration ----------------------------------------------------------


@dataclass
class DataConfig:
    kind: str = "synth"  # synth | cifar10 | cifar100
    train_path: str = ""
    test_path: str = ""
    classes: int = 4
    image_size: int = 16
    n_train: int = 4000
    n_test: int = 1000
    seed: int = 0


@dataclass
class OptConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    # lr multiplied by 0.1 after every 30% of total epochs
    decay_fraction: float = 0.3


QUANT_OPT_DEFAULTS = OptConfig(lr=1e-3, momentum=0.9, weight_decay=1e-5)


@dataclass
class StageConfig:
    stage: str  # alpha | beta
    seed: int = 0
    out_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    reduced_train: int = 512
    reduced_val: int = 256
    search_epochs: int = 6
    retrain_epochs: int = 12
    population_size: int = 4
    exploit_interval: int = 3
    teacher_channels: tuple = (8, 16, 32)
    student_channels: tuple = ()  # empty: same as teacher (quantized pairing)
    opt: OptConfig = field(default_factory=OptConfig)
    kd: KDConfig = field(default_factory=KDConfig)
    quant: QuantConfig | None = None
    teacher_checkpoint: str = ""

    def __post_init__(self):
        if self.stage not in ("alpha", "beta"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.stage == "beta" and not self.teacher_checkpoint:
            raise ConfigError("stage beta requires a teacher checkpoint path")
        if self.stage == "alpha" and self.teacher_checkpoint:
            raise ConfigError("stage alpha must not be given a teacher checkpoint")

    def teacher_descriptor(self) -> ArchDescriptor:
        return ArchDescriptor(kind="tapcnn", num_classes=self.data.classes,
                              channels=tuple(self.teacher_channels),
                              image_size=self.data.image_size)

    def student_descriptor(self) -> ArchDescriptor:
        channels = tuple(self.student_channels) or tuple(self.teacher_channels)
        return ArchDescriptor(kind="tapcnn", num_classes=self.data.classes,
                              channels=channels, image_size=self.data.image_size)


def load_datasets(cfg: DataConfig):
    """Return (train, test) datasets for the configured source."""
    if cfg.kind == "synth":
        full = synth_shapes(cfg.n_train + cfg.n_test, cfg.classes, size=cfg.image_size, seed=cfg.seed)
        train = full.subset(np.arange(cfg.n_train), "train")
        test = full.subset(np.arange(cfg.n_train, cfg.n_train + cfg.n_test), "test")
        return train, test
    if cfg.kind in ("cifar10", "cifar100"):
        classes = 10 if cfg.kind == "cifar10" else 100
        train = load_cifar_binary(cfg.train_path, num_classes=classes, split="train")
        test = load_cifar_binary(cfg.test_path, num_classes=classes, split="test")
        return train, test
    raise ConfigError(f"unknown dataset kind {cfg.kind!r}")


# -- training loops ----------------------------------------------------------


def _one_hot(labels, classes, dtype=np.float32):
    return np.eye(classes, dtype=dtype)[labels]


def lr_at(opt: OptConfig, epoch: int, total_epochs: int) -> float:
    interval = max(1, math.ceil(opt.decay_fraction * total_epochs))
    return opt.lr * 0.1 ** (epoch // interval)


def _teacher_forward(teacher: Model, x: Tensor):
    teacher.eval()
    return teacher.forward_with_taps(x)


def train_epoch(model: Model, dataset: Dataset, policy, rng, opt: OptConfig, lr: float,
                teacher: Model | None = None, kd: KDConfig | None = None, epoch: int = 0):
    """One pass over the dataset with fresh augmentation; returns mean losses
    as a dict. With a teacher and KDConfig the combined objective is used and
    the KD gradient is clipped separately from the task gradient."""
    n = len(dataset)
    order = rng.permutation(n)
    model.train()
    sums = {"total": 0.0, "task": 0.0, "kd_intra": 0.0, "kd_inter": 0.0, "kd_soft": 0.0}
    batches = 0
    lam = 0.0
    for start in range(0, n, opt.batch_size):
        idx = order[start : start + opt.batch_size]
        if len(idx) < 2:
            continue  # relational losses need pairs; skip a trailing singleton
        images = augment_batch(dataset.images[idx], policy, rng)
        x = Tensor(images)
        y = Tensor(_one_hot(dataset.labels[idx], dataset.num_classes))

        logits, taps = model.forward_with_taps(x)
        task = T.softmax_cross_entropy(logits, y)

        if teacher is not None and kd is not None:
            _, t_taps = _teacher_forward(teacher, x)
            t_taps = t_taps[-len(taps):]
            intra = intra_loss(t_taps, taps) if kd.use_intra else 0.0
            inter = inter_loss(t_taps, taps, kd.svd_rank) if kd.use_inter else 0.0
            soft = (soft_label_divergence(t_taps[-1], logits, kd.temperature)
                    if kd.use_soft else 0.0)
            total, report = ii_kd_total(task, intra, inter, kd, epoch, soft=soft)
            lam = report.lambda_used

            model.zero_grad()
            kd_terms = [t for t in (intra, inter, soft) if isinstance(t, Tensor)]
            if kd_terms and lam > 0:
                scaled = T.scalar_multiply(sum(kd_terms[1:], kd_terms[0]), lam)
                scaled.backward()
                clip_kd_gradients(model, kd.kd_grad_clip)
                kd_grads = {name: p.grad for name, p in model.params.items() if p.grad is not None}
                model.zero_grad()
            else:
                kd_grads = {}
            task.backward()
            for name, g in kd_grads.items():
                p = model.params[name]
                p.grad = g if p.grad is None else p.grad + g
            for p in model.params.values():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            sums["task"] += report.task
            sums["kd_intra"] += report.kd_intra
            sums["kd_inter"] += report.kd_inter
            sums["kd_soft"] += report.kd_soft
            sums["total"] += report.total
        else:
            model.zero_grad()
            task.backward()
            sums["task"] += task.item()
            sums["total"] += task.item()
        sgd_step(model, lr=lr, momentum=opt.momentum, weight_decay=opt.weight_decay)
        batches += 1

    out = {k: v / max(batches, 1) for k, v in sums.items()}
    out["lambda"] = lam
    return out


def evaluate_model(model: Model, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in eval mode, no augmentation."""
    model.eval()
    correct = 0
    for start in range(0, len(dataset), batch_size):
        x = Tensor(dataset.images[start : start + batch_size])
        logits, _ = model.forward_with_taps(x)
        correct += int((logits.data.argmax(axis=1) == dataset.labels[start : start + batch_size]).sum())
    return correct / len(dataset)


def train_model(model: Model, train: Dataset, epochs: int, opt: OptConfig, seed: int,
                schedule: Schedule | None = None, teacher: Model | None = None,
                kd: KDConfig | None = None, val: Dataset | None = None, log=None):
    """Full training loop with per-epoch re-augmentation, lr decay, and
    divergence detection; returns per-epoch metric rows."""
    rows = []
    initial_loss = None
    bad_epochs = 0
    for epoch in range(epochs):
        policy = schedule.policy_for(epoch, epochs) if schedule is not None else None
        rng = trial_rng(seed, 0, epoch, stream=7)
        stats = train_epoch(model, train, policy, rng, opt, lr_at(opt, epoch, epochs),
                            teacher=teacher, kd=kd, epoch=epoch)
        if initial_loss is None:
            initial_loss = stats["total"]
        if not math.isfinite(stats["total"]):
            raise DivergenceError(f"training loss is not finite at epoch {epoch}")
        bad_epochs = bad_epochs + 1 if stats["total"] > 10 * initial_loss else 0
        if bad_epochs >= 3:
            raise DivergenceError(
                f"training loss exceeded 10x the initial loss for 3 consecutive epochs (epoch {epoch})"
            )
        row = {"epoch": epoch, **stats}
        if val is not None:
            row["val_acc"] = evaluate_model(model, val)
        rows.append(row)
        if log:
            log(row)
    return rows


def write_metrics(rows, path):
    cols = ["epoch", "total", "task", "kd_intra", "kd_inter", "kd_soft", "lambda", "val_acc"]
    with open(path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(row.get(c)) for c in cols) + "\n")


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- search fitness ----------------------------------------------------------


def _search_fitness(train: Dataset, val: Dataset, opt: OptConfig,
                    teacher: Model | None = None, kd: KDConfig | None = None):
    def fitness(trial, epoch, rng):
        lr = opt.lr  # constant lr during the short search phase
        train_epoch(trial.model, train, trial.policy, rng, opt, lr,
                    teacher=teacher, kd=kd, epoch=epoch)
        return evaluate_model(trial.model, val)

    return fitness


# -- stages -------------------------------------------------------------------


def _prepare(config: StageConfig, datasets):
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = datasets if datasets is not None else load_datasets(config.data)
    return out, train, test


def _frozen_teacher(ckpt: Checkpoint) -> Model:
    teacher = Model(ckpt.desc, seed=0)
    teacher.load_state_arrays(ckpt.arrays)
    for p in teacher.params.values():
        p.requires_grad = False
    teacher.eval()
    return teacher


def _student_factory(config: StageConfig, teacher_ckpt: Checkpoint):
    s_desc = config.student_descriptor()
    if s_desc.num_taps > teacher_ckpt.desc.num_taps:
        raise ConfigError(
            f"student has more taps ({s_desc.num_taps}) than the teacher "
            f"({teacher_ckpt.desc.num_taps}); deep-end pairing impossible"
        )
    same_arch = s_desc == teacher_ckpt.desc

    def make_student(seed):
        m = Model(s_desc, quant=config.quant, seed=seed)
        if config.quant is not None and same_arch:
            init_from(m, teacher_ckpt.desc, teacher_ckpt.arrays)
        return m

    return s_desc, make_student


def search_teacher(config: StageConfig, datasets=None) -> Schedule:
    """Population search for the teacher's augmentation schedule; writes
    schedule_teacher.tsv into the output directory."""
    if config.stage != "alpha":
        raise ConfigError("search_teacher requires an alpha config")
    out, train, _ = _prepare(config, datasets)
    red_train, red_val = make_reduced(train, config.reduced_train, config.reduced_val, config.seed)
    desc = config.teacher_descriptor()
    schedule, _ = run_search(
        _search_fitness(red_train, red_val, config.opt),
        population_size=config.population_size,
        epochs=config.search_epochs,
        exploit_interval=config.exploit_interval,
        seed=config.seed,
        model_factory=lambda tid: Model(desc, seed=config.seed * 1000 + tid),
    )
    save_schedule(schedule, out / "schedule_teacher.tsv",
                  seed=config.seed, population_size=config.population_size)
    return schedule


def train_teacher(config: StageConfig, schedule: Schedule | None = None, datasets=None):
    """Retrain a fresh teacher on the full training set under the searched
    schedule; writes teacher.ckpt and metrics_teacher.tsv."""
    if config.stage != "alpha":
        raise ConfigError("train_teacher requires an alpha config")
    out, train, test = _prepare(config, datasets)
    sched_path = out / "schedule_teacher.tsv"
    if schedule is None:
        schedule = load_schedule(sched_path)
    desc = config.teacher_descriptor()
    teacher = Model(desc, seed=config.seed)
    rows = train_model(teacher, train, config.retrain_epochs, config.opt, config.seed,
                       schedule=schedule, val=test)
    acc = evaluate_model(teacher, test)
    meta = {"stage": "alpha", "final_accuracy": acc, "seed": config.seed}
    if sched_path.exists():
        meta["schedule_hash"] = _file_hash(sched_path)
    ckpt = Checkpoint(desc=desc, arrays=teacher.state_arrays(), quant=None, metadata=meta)
    save_checkpoint(ckpt, out / "teacher.ckpt")
    write_metrics(rows, out / "metrics_teacher.tsv")
    return ckpt, rows


def search_student(config: StageConfig, teacher_ckpt: Checkpoint | None = None,
                   datasets=None) -> Schedule:
    """Population search for the student's schedule with the frozen teacher
    in the loop; writes schedule_student.tsv."""
    if config.stage != "beta":
        raise ConfigError("search_student requires a beta config")
    out, train, _ = _prepare(config, datasets)
    if teacher_ckpt is None:
        teacher_ckpt = load_checkpoint(config.teacher_checkpoint)
    red_train, red_val = make_reduced(train, config.reduced_train, config.reduced_val, config.seed)
    teacher = _frozen_teacher(teacher_ckpt)
    _, make_student = _student_factory(config, teacher_ckpt)
    schedule, _ = run_search(
        _search_fitness(red_train, red_val, config.opt, teacher=teacher, kd=config.kd),
        population_size=config.population_size,
        epochs=config.search_epochs,
        exploit_interval=config.exploit_interval,
        seed=config.seed,
        model_factory=lambda tid: make_student(config.seed * 1000 + tid),
    )
    save_schedule(schedule, out / "schedule_student.tsv",
                  seed=config.seed, population_size=config.population_size)
    return schedule


def distill_student(config: StageConfig, teacher_ckpt: Checkpoint | None = None,
                    schedule: Schedule | None = None, datasets=None):
    """Retrain the student on the full training set with the combined
    distillation objective under the searched schedule; writes student.ckpt
    and metrics_student.tsv. Verifies the teacher stayed frozen."""
    if config.stage != "beta":
        raise ConfigError("distill_student requires a beta config")
    out, train, test = _prepare(config, datasets)
    if teacher_ckpt is None:
        teacher_ckpt = load_checkpoint(config.teacher_checkpoint)
    sched_path = out / "schedule_student.tsv"
    if schedule is None:
        schedule = load_schedule(sched_path)
    teacher = _frozen_teacher(teacher_ckpt)
    teacher_hash_before = teacher_ckpt.param_hash()
    s_desc, make_student = _student_factory(config, teacher_ckpt)

    student = make_student(config.seed)
    rows = train_model(student, train, config.retrain_epochs, config.opt, config.seed,
                       schedule=schedule, teacher=teacher, kd=config.kd, val=test)
    acc = evaluate_model(student, test)

    after = Checkpoint(desc=teacher_ckpt.desc, arrays=teacher.state_arrays())
    if after.param_hash() != teacher_hash_before:
        raise RuntimeError("teacher parameters changed during distillation")

    meta = {"stage": "beta", "final_accuracy": acc, "seed": config.seed}
    if sched_path.exists():
        meta["schedule_hash"] = _file_hash(sched_path)
    ckpt = Checkpoint(desc=s_desc, arrays=student.state_arrays(), quant=config.quant, metadata=meta)
    save_checkpoint(ckpt, out / "student.ckpt")
    write_metrics(rows, out / "metrics_student.tsv")
    return ckpt, rows


def stage_alpha(config: StageConfig, datasets=None):
    """Teacher schedule search + teacher retraining.

    Returns (Schedule, Checkpoint, metric rows); artifacts are written into
    config.out_dir."""
    schedule = search_teacher(config, datasets=datasets)
    ckpt, rows = train_teacher(config, schedule=schedule, datasets=datasets)
    return schedule, ckpt, rows


def stage_beta(config: StageConfig, teacher_ckpt: Checkpoint | None = None, datasets=None):
    """Student schedule search under the combined distillation objective +
    student retraining with the frozen teacher.

    Returns (Schedule, Checkpoint, metric rows)."""
    if teacher_ckpt is None:
        teacher_ckpt = load_checkpoint(config.teacher_checkpoint)
    schedule = search_student(config, teacher_ckpt=teacher_ckpt, datasets=datasets)
    ckpt, rows = distill_student(config, teacher_ckpt=teacher_ckpt, schedule=schedule,
                                 datasets=datasets)
    return schedule, ckpt, rows


def evaluate_checkpoint(ckpt_path, dataset: Dataset) -> float:
    """Load a checkpoint and report top-1 accuracy on the given split."""
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.desc.num_classes != dataset.num_classes:
        raise ConfigError(
            f"checkpoint has {ckpt.desc.num_classes} classes, dataset has {dataset.num_classes}"
        )
    model = Model(ckpt.desc, quant=ckpt.quant, seed=0)
    model.load_state_arrays(ckpt.arrays)
    return evaluate_model(model, dataset)
