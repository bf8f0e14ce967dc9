"""Synthetic tasks, the AdamW loop, and deterministic training traces.

Tasks are teacher-student: a frozen random encoder (its own seed) labels
random token rows with the argmax of its head, which guarantees the
labels are a learnable function of the inputs and pins the chance level
at 1/n_classes. Training touches only adapter tensors and the head; the
backbone stays frozen and its checksum is recorded before and after.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from math import cos, pi

import numpy as np

from . import encoder as enc
from .linalg import derive_seed
from .tape import Tape, backward

__all__ = [
    "DivergenceError", "SyntheticTask", "make_task",
    "save_task_csv", "load_task_csv",
    "OptimizerConfig", "AdamState", "step", "lr_at",
    "TrainTrace", "train", "save_trace_csvs",
]

LR_SCHEDULES = ("constant", "linear-decay", "cosine")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step_index: int):
        super().__init__(f"non-finite loss at step {step_index}")
        self.step_index = step_index


@dataclass
class SyntheticTask:
    """Disjoint train/val splits, regenerable bit-exactly from the seed."""

    encoder_cfg: enc.EncoderConfig
    train_tokens: np.ndarray
    train_labels: np.ndarray
    val_tokens: np.ndarray
    val_labels: np.ndarray
    seed: int
    teacher: str = ""

    @property
    def n_classes(self) -> int:
        return self.encoder_cfg.n_classes


def _balanced(labels: np.ndarray, n_classes: int) -> bool:
    counts = np.bincount(labels, minlength=n_classes)
    target = labels.size / n_classes
    return counts.min() >= target / 2 and counts.max() <= target * 2


def make_task(seed: int, cfg: enc.EncoderConfig, n_train: int = 512,
              n_val: int = 128, max_attempts: int = 50,
              n_calibration: int = 256) -> SyntheticTask:
    """Label random token rows with a frozen random teacher's argmax.

    A raw random head is dominated by its per-class logit offsets, so the
    teacher's logits are centered on a seeded calibration sample before
    the argmax; rows are still resampled under a new sub-seed until the
    class distribution is within 2x of uniform.
    """
    if n_train < 1 or n_val < 1:
        raise ValueError("n_train and n_val must be >= 1")
    teacher_seed = derive_seed(seed, "teacher")
    teacher = enc.build_encoder(cfg, teacher_seed)
    bundle = enc.frozen_bundle()
    calib_rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "calibration")))
    calib = calib_rng.integers(0, cfg.vocab, size=(n_calibration, cfg.seq_len),
                               dtype=np.int64)
    offset = np.mean(enc.logits_batch(teacher, bundle, calib), axis=0)
    total = n_train + n_val
    for attempt in range(max_attempts):
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "tokens", attempt)))
        tokens = rng.integers(0, cfg.vocab, size=(total, cfg.seq_len), dtype=np.int64)
        labels = np.argmax(enc.logits_batch(teacher, bundle, tokens) - offset, axis=1)
        if _balanced(labels, cfg.n_classes):
            return SyntheticTask(
                encoder_cfg=cfg,
                train_tokens=tokens[:n_train], train_labels=labels[:n_train],
                val_tokens=tokens[n_train:], val_labels=labels[n_train:],
                seed=seed,
                teacher=f"random encoder, seed {teacher_seed}, centered head, "
                        f"attempt {attempt}",
            )
    raise RuntimeError(f"no balanced sample after {max_attempts} attempts")


def save_task_csv(path, tokens: np.ndarray, labels: np.ndarray) -> None:
    """Token ids one example per row, label in the last column."""
    rows = np.concatenate([tokens, labels.reshape(-1, 1)], axis=1)
    np.savetxt(path, rows, fmt="%d", delimiter=",")


def load_task_csv(path) -> tuple[np.ndarray, np.ndarray]:
    rows = np.loadtxt(path, delimiter=",", dtype=np.int64, ndmin=2)
    return rows[:, :-1], rows[:, -1]


# -- optimizer ----------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 32
    lr_schedule: str = "cosine"

    def __post_init__(self):
        # lr == 0 is allowed so "training is a no-op" stays testable
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def lr_at(opt: OptimizerConfig, step_index: int, total_steps: int) -> float:
    """Scheduled learning rate for a 0-based step index."""
    if opt.lr_schedule == "constant" or total_steps <= 1:
        return opt.lr
    frac = step_index / total_steps
    if opt.lr_schedule == "linear-decay":
        return opt.lr * (1.0 - frac)
    return opt.lr * 0.5 * (1.0 + cos(pi * frac))


def step(params: dict, grads: dict, state: AdamState, opt: OptimizerConfig,
         lr: float | None = None) -> tuple[dict, AdamState]:
    """One AdamW update, in place: moments with bias correction, decay
    applied to the parameters directly rather than through the gradients."""
    if set(grads) - set(params):
        raise ValueError(f"gradients for unknown parameters: {sorted(set(grads) - set(params))}")
    if lr is None:
        lr = opt.lr
    state.t += 1
    b1, b2 = opt.beta1, opt.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        p -= lr * (update + opt.weight_decay * p)
    return params, state


# -- training loop -------------------------------------------------------------

@dataclass
class TrainTrace:
    """Everything the analysis tools consume, all deterministic in the seed."""

    losses: list = field(default_factory=list)            # per step
    val_accuracy: list = field(default_factory=list)      # per epoch
    initial_val_accuracy: float = 0.0
    route_log: list = field(default_factory=list)         # (epoch, batch, layer, weights)
    snapshots: list | None = None                         # per-epoch adapter tensor copies
    route_family: str | None = None
    kind: str = "none"
    adapter_cfg: object = None
    encoder_cfg: enc.EncoderConfig | None = None
    param_count: int = 0
    n_batches_per_epoch: int = 0
    checksum_before: str = ""
    checksum_after: str = ""

    @property
    def final_val_accuracy(self) -> float:
        return self.val_accuracy[-1] if self.val_accuracy else self.initial_val_accuracy

    def epoch_mean_routes(self, epoch: int, layer: int) -> np.ndarray:
        rows = [w for (e, _b, l, w) in self.route_log if e == epoch and l == layer]
        if not rows:
            raise ValueError(f"no route log for epoch {epoch}, layer {layer}")
        return np.mean(rows, axis=0)


def train(model: enc.EncoderModel, bundle: enc.AdapterBundle,
          task: SyntheticTask, opt: OptimizerConfig, seed: int) -> TrainTrace:
    """AdamW over adapters + head; backbone untouched; fully seeded."""
    trainables = enc.trainable_arrays(model, bundle)
    trace = TrainTrace(
        snapshots=[],
        route_family=bundle.report_family(),
        kind=bundle.kind,
        adapter_cfg=bundle.cfg,
        encoder_cfg=task.encoder_cfg,
        param_count=sum(t.size for t in trainables.values()),
        checksum_before=model.backbone_checksum(),
    )
    trace.initial_val_accuracy = enc.accuracy(model, bundle, task.val_tokens,
                                              task.val_labels)
    n = task.train_tokens.shape[0]
    batches = [slice(i, min(i + opt.batch_size, n))
               for i in range(0, n, opt.batch_size)]
    trace.n_batches_per_epoch = len(batches)
    total_steps = opt.epochs * len(batches)
    state = AdamState()
    step_index = 0
    report_family = trace.route_family

    for epoch in range(opt.epochs):
        order = np.random.Generator(
            np.random.PCG64(derive_seed(seed, "shuffle", epoch))).permutation(n)
        for b, sl in enumerate(batches):
            idx = order[sl]
            route_rows: dict[int, list] = {}

            def sink(layer, family, weights, _rows=route_rows):
                if family == report_family:
                    _rows.setdefault(layer, []).append(weights)

            tape = Tape()
            loss = enc.batch_loss_tape(
                tape, model, bundle, task.train_tokens[idx],
                task.train_labels[idx], trainables,
                route_sink=sink if report_family else None)
            loss_value = float(loss.value[0, 0])
            if not np.isfinite(loss_value):
                raise DivergenceError(step_index)
            grads = backward(tape, loss)
            step(trainables, grads, state, opt,
                 lr=lr_at(opt, step_index, total_steps))
            trace.losses.append(loss_value)
            for layer, rows in sorted(route_rows.items()):
                trace.route_log.append((epoch, b, layer, np.mean(rows, axis=0)))
            step_index += 1
        trace.snapshots.append({k: v.copy() for k, v in bundle.tensors().items()})
        trace.val_accuracy.append(
            enc.accuracy(model, bundle, task.val_tokens, task.val_labels))

    trace.checksum_after = model.backbone_checksum()
    return trace


def save_trace_csvs(trace: TrainTrace, outdir) -> list[str]:
    """loss.csv, accuracy.csv and routes.csv per the trace contracts."""
    from pathlib import Path
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    with open(outdir / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        for i, loss in enumerate(trace.losses):
            w.writerow([i, f"{loss:.17g}"])
    written.append("loss.csv")

    with open(outdir / "accuracy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        for e, acc in enumerate(trace.val_accuracy):
            w.writerow([e, f"{acc:.17g}"])
    written.append("accuracy.csv")

    # routes.csv carries the per-epoch mean weight per (layer, expert)
    per_epoch_layer: dict[tuple[int, int], list] = {}
    for (e, _b, layer, weights) in trace.route_log:
        per_epoch_layer.setdefault((e, layer), []).append(weights)
    with open(outdir / "routes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        for (e, layer) in sorted(per_epoch_layer):
            mean = np.mean(per_epoch_layer[(e, layer)], axis=0)
            for expert, weight in enumerate(mean):
                w.writerow([e, layer, expert, f"{weight:.17g}"])
    written.append("routes.csv")
    return written
