"""Training loop, A2/A4 evaluation and whole-model gradient checks."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tc
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Batch, Sample, collate, load_manifest, load_split
from .network import ModelConfig, ModelParams, batch_loss, choose, init_params, logits_for, tiny_config
from .optim import AdamState, adam_step
from .tensor import ParameterStore, Tape

log = logging.getLogger(__name__)

TASK_CANDIDATES = {"a2": 2, "a4": 4}


@dataclass
class TrainRun:
    config: ModelConfig
    manifest: str | Path
    seed: int = 0
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.001
    checkpoint: str | Path | None = None
    log_path: str | Path | None = None
    val_split: str = "val"
    resume: str | Path | None = None
    # stop once validation accuracy reaches this value (off by default)
    stop_at_accuracy: float | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict] = field(default_factory=list)


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle order for one epoch from a counter-based generator keyed by the seed."""
    gen = np.random.Generator(np.random.Philox(key=seed, counter=[epoch, 0, 0, 0]))
    return gen.permutation(n)


def train_step(store: ParameterStore, adam: AdamState, batch: Batch, config: ModelConfig) -> float:
    tape = Tape()
    value = batch_loss(batch, ModelParams.bind(store, tape), config)
    tc.backward(value, store)
    adam_step(store, adam)
    return value.item()


def format_metric(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def train_batches(run: TrainRun, train_set: Batch, val_set: Batch | None,
                  on_record: Callable[[dict], None] | None = None) -> TrainResult:
    """Train on in-memory batches; ``train`` wraps this with manifest loading and file output."""
    config = run.config
    if len(train_set) == 0:
        raise ValueError("training split is empty")
    if run.resume is not None:
        start = load_checkpoint(run.resume, config)
        store, adam = start.store, start.adam
        first_epoch = int(start.meta.get("epochs_done", 0)) + 1
        if int(start.meta.get("seed", run.seed)) != run.seed:
            raise ValueError("resume checkpoint was trained with a different seed")
    else:
        store, adam = init_params(config, run.seed), AdamState(lr=run.lr)
        first_epoch = 1
    adam.lr = run.lr
    metrics: list[dict] = []
    epochs_done = first_epoch - 1
    for epoch in range(first_epoch, run.epochs + 1):
        order = epoch_permutation(run.seed, epoch, len(train_set))
        total, seen = 0.0, 0
        for start_i in range(0, len(order), run.batch_size):
            idx = order[start_i:start_i + run.batch_size]
            total += train_step(store, adam, train_set.subset(idx), config) * len(idx)
            seen += len(idx)
        record = {"epoch": epoch, "train_loss": total / seen, "val_accuracy": None}
        if val_set is not None and len(val_set):
            record["val_accuracy"] = evaluate_batch(store, config, val_set).accuracy
        metrics.append(record)
        epochs_done = epoch
        if on_record is not None:
            on_record(record)
        if (run.stop_at_accuracy is not None and record["val_accuracy"] is not None
                and record["val_accuracy"] >= run.stop_at_accuracy):
            break
    meta = {"seed": run.seed, "epochs_done": epochs_done}
    return TrainResult(Checkpoint(config, store, adam, meta), metrics)


def train(run: TrainRun, echo: Callable[[str], None] | None = print) -> TrainResult:
    """Train from a manifest; writes the checkpoint and metric log when paths are given."""
    manifest = load_manifest(run.manifest)
    train_samples = load_split(manifest, "train", run.config)
    if not train_samples:
        raise ValueError(f"manifest {run.manifest} has no training samples")
    val_samples = load_split(manifest, run.val_split, run.config)
    train_set = collate(train_samples, run.config.L)
    val_set = collate(val_samples, run.config.L) if val_samples else None
    log_file = open(run.log_path, "a" if run.resume else "w") if run.log_path else None

    def on_record(rec):
        line = format_metric(rec)
        if echo is not None:
            echo(line)
        if log_file is not None:
            log_file.write(line + "\n")
            log_file.flush()

    try:
        result = train_batches(run, train_set, val_set, on_record)
    finally:
        if log_file is not None:
            log_file.close()
    if run.checkpoint is not None:
        save_checkpoint(result.checkpoint, run.checkpoint)
    return result


# ---------------------------------------------------------------- evaluation


@dataclass
class Prediction:
    id: str
    logits: list[float]
    predicted: int
    correct: int

    @property
    def hit(self) -> bool:
        return self.predicted == self.correct


@dataclass
class EvalResult:
    accuracy: float
    predictions: list[Prediction]


def accuracy_from_logits(ids, logits: np.ndarray, labels: np.ndarray) -> EvalResult:
    """Accuracy of argmax choices; ``logits`` and ``labels`` are (B, K)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    preds = []
    for sid, row, lab in zip(ids, logits, labels):
        preds.append(Prediction(sid, [float(v) for v in row], choose(row), int(np.argmax(lab))))
    preds.sort(key=lambda p: p.id)
    hits = sum(p.hit for p in preds)
    return EvalResult(hits / len(preds) if preds else 0.0, preds)


def evaluate_batch(store: ParameterStore, config: ModelConfig, batch: Batch, chunk: int = 256) -> EvalResult:
    rows = []
    for s in range(0, len(batch), chunk):
        rows.append(logits_for(batch.subset(np.arange(s, min(s + chunk, len(batch)))), store, config))
    logits = np.concatenate(rows) if rows else np.zeros((0, batch.n_candidates))
    return accuracy_from_logits(batch.ids, logits, batch.labels.reshape(len(batch), batch.n_candidates))


def evaluate(checkpoint: Checkpoint | str | Path, manifest: str | Path, task: str,
             split: str | None = "test") -> EvalResult:
    """A2/A4 accuracy of a checkpoint on one split of a manifest (all samples if ``split`` is None)."""
    task = task.lower()
    if task not in TASK_CANDIDATES:
        raise ValueError(f"task must be a2 or a4, got {task!r}")
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    man = load_manifest(manifest)
    if man.n_candidates is not None and man.n_candidates != TASK_CANDIDATES[task]:
        raise ValueError(f"task {task.upper()} needs {TASK_CANDIDATES[task]} candidates, "
                         f"manifest has {man.n_candidates}")
    samples = load_split(man, split, ckpt.config)
    if not samples:
        return EvalResult(0.0, [])
    return evaluate_batch(ckpt.store, ckpt.config, collate(samples, ckpt.config.L))


# ---------------------------------------------------------------- gradient check


@dataclass
class GradcheckReport:
    """Per-parameter maximum relative error; ``noise_floor`` is the derivative resolution
    of a central difference on the loss value (one ulp of the loss over 2*eps)."""

    errors: dict[str, float]
    threshold: float = 1e-4
    noise_floor: float = 0.0
    # per parameter: max relative error over entries whose gradient exceeds 1e4 * noise_floor
    resolved_errors: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e <= self.threshold for e in self.errors.values())

    def failing(self) -> list[str]:
        return [n for n, e in self.errors.items() if e > self.threshold]

    def lines(self) -> list[str]:
        out = []
        for n, e in self.errors.items():
            extra = f"\tresolved={self.resolved_errors[n]:.3e}" if n in self.resolved_errors else ""
            out.append(f"{n}\t{e:.3e}\t{'PASS' if e <= self.threshold else 'FAIL'}{extra}")
        out.append(f"overall\t{max(self.errors.values()):.3e}\t{'PASS' if self.passed else 'FAIL'}"
                   f"\tnoise_floor={self.noise_floor:.2e}")
        return out


def random_samples(config: ModelConfig, n: int, n_candidates: int, rng: np.random.Generator,
                   ragged: bool = True) -> list[Sample]:
    """Random feature samples; with ``ragged`` some streams are shorter than L to exercise masking."""
    def seq(width):
        steps = int(rng.integers(1, config.L + 1)) if ragged else config.L
        return rng.uniform(-1, 1, size=(steps, width))

    out = []
    for i in range(n):
        correct = int(rng.integers(0, n_candidates))
        out.append(Sample(
            f"g{i}", seq(config.d_text), seq(config.d_audio), seq(config.d_video), seq(config.d_query),
            [seq(config.d_query) for _ in range(n_candidates)],
            [int(k == correct) for k in range(n_candidates)]))
    return out


def gradcheck(config: ModelConfig | None = None, seed: int = 0, eps: float = 1e-5,
              threshold: float = 1e-4, n_samples: int = 2, param_scale: float | None = 1.0,
              input_scale: float = 2.0) -> GradcheckReport:
    """Central-difference check of the full loss against reverse-mode gradients, per parameter.

    At the small initialisation most loss gradients sit near the finite-difference
    noise floor, so by default the check runs at parameters drawn from
    U[-param_scale, param_scale] and inputs from U[-input_scale, input_scale]
    (``param_scale=None`` keeps the initialisation).
    """
    config = tiny_config() if config is None else config
    rng = np.random.default_rng(seed)
    store = init_params(config, seed)
    if param_scale is not None:
        for name in store.names():
            store.set_value(name, rng.uniform(-param_scale, param_scale, size=store.value(name).shape))
    samples = random_samples(config, n_samples, 2, rng)
    for s in samples:
        for attr in ("text", "audio", "video", "question"):
            setattr(s, attr, getattr(s, attr) * input_scale)
        s.candidates = [c * input_scale for c in s.candidates]
    batch = collate(samples, config.L)

    def f(st):
        return batch_loss(batch, ModelParams.bind(st, Tape()), config)

    grads = tc.finite_difference_gradients(f, store, eps)
    floor = float(np.spacing(f(store).item())) / (2.0 * eps)
    errors, resolved = {}, {}
    for name, (a, num) in grads.items():
        rel = tc.relative_errors(a, num)
        errors[name] = float(rel.max(initial=0.0))
        big = np.maximum(np.abs(a), np.abs(num)) > 1e4 * floor
        resolved[name] = float(rel[big].max(initial=0.0))
    return GradcheckReport(errors, threshold, floor, resolved)
