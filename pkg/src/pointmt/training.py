"""Loss, optimizers, the warm-restart schedule, and the training loop.

Training runs one recorded graph per sample; gradients accumulate over the
batch in index order and the optimizer steps once per batch, so a fixed seed
reproduces a run exactly. Metrics append to a CSV with the header
``epoch,lr,train_loss,train_acc,test_acc,wall_time``.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, exp, log, mean_, mul, reshape, sub, sum_
from .checkpoint import save_checkpoint
from .geometry import random_rotation
from .model import GeometryPlan, PointMTClassifier, SpfOutput, build_plan, forward_batch


class TrainingError(RuntimeError):
    """Training aborted; the message names the offending epoch and batch."""


METRICS_HEADER = ["epoch", "lr", "train_loss", "train_acc", "test_acc", "wall_time"]


@dataclass
class TrainConfig:
    """Schedule and optimizer settings.

    The published schedule is 90 epochs in 30-epoch annealing cycles with the
    learning rate falling from 1e-3 to 1e-5; the desk-scale default keeps the
    cycle but runs a single one.
    """

    epochs: int = 30
    cycle_length: int = 30
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    batch_size: int = 32
    seed: int = 42
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment_rotate: bool = False
    augment_jitter: float = 0.0
    branch_mode: str | None = None
    head: str | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.cycle_length < 1:
            raise ValueError("cycle_length must be >= 1")
        if not (self.lr_max >= self.lr_min >= 0):
            raise ValueError("need lr_max >= lr_min >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam or sgd")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    lr: float
    wall_time: float

    def csv_row(self):
        return [self.epoch, repr(self.lr), repr(self.train_loss), repr(self.train_acc),
                repr(self.test_acc), repr(self.wall_time)]


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log softmax probability of ``label`` (numerically stabilized)."""
    flat = reshape(logits, (1, -1))
    k = flat.data.shape[1]
    if label is None or not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    shift = Tensor(np.max(flat.data, axis=1, keepdims=True))
    e = exp(sub(flat, shift))
    lse = add(log(sum_(e, axis=1, keepdims=True)), shift)
    onehot = np.zeros((1, k), dtype=flat.data.dtype)
    onehot[0, label] = 1.0
    picked = sum_(mul(flat, Tensor(onehot)))
    return reshape(sub(lse, reshape(picked, (1, 1))), ())


def cross_entropy_batch(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean cross entropy over a (B, K) logits block, plus per-row losses."""
    labels = np.asarray(labels)
    b, k = logits.data.shape
    shift = Tensor(np.max(logits.data, axis=1, keepdims=True))
    e = exp(sub(logits, shift))
    lse = add(log(sum_(e, axis=1, keepdims=True)), shift)
    onehot = np.zeros((b, k), dtype=logits.data.dtype)
    onehot[np.arange(b), labels] = 1.0
    picked = sum_(mul(logits, Tensor(onehot)), axis=1, keepdims=True)
    rows = sub(lse, picked)
    return reshape(mean_(rows), ()), rows.data.reshape(-1).copy()


def cosine_annealing_lr(epoch: int, cfg: TrainConfig) -> float:
    """Half-cosine decay from lr_max to lr_min, restarting warm every cycle."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    t = epoch % cfg.cycle_length
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + np.cos(np.pi * t / cfg.cycle_length))


class AdamOptimizer:
    """Adaptive per-parameter moments (decay 0.9/0.999, epsilon 1e-8)."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.tensor.data) for p in self.params]
        self.v = [np.zeros_like(p.tensor.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.tensor.zero_grad()

    def step(self, lr: float, grad_scale: float = 1.0):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.tensor.grad is None:
                continue
            g = p.tensor.grad * grad_scale
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.tensor.data = p.tensor.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SgdOptimizer:
    """Plain momentum descent, selectable via TrainConfig.optimizer."""

    def __init__(self, params, momentum=0.9):
        self.params = list(params)
        self.momentum = momentum
        self.vel = [np.zeros_like(p.tensor.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.tensor.zero_grad()

    def step(self, lr: float, grad_scale: float = 1.0):
        for i, p in enumerate(self.params):
            if p.tensor.grad is None:
                continue
            g = p.tensor.grad * grad_scale
            self.vel[i] = self.momentum * self.vel[i] + g
            p.tensor.data = p.tensor.data - lr * self.vel[i]


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return AdamOptimizer(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return SgdOptimizer(params, cfg.momentum)


def _combined_logits(out) -> Tensor:
    return out.combined if isinstance(out, SpfOutput) else out


def _plan_cache(model: PointMTClassifier, samples) -> list[GeometryPlan]:
    return [build_plan(s.coords, model.config) for s in samples]


def build_plans(dataset, config) -> list[GeometryPlan]:
    """Precompute per-sample geometry once; reusable by every fit/evaluate on
    the same dataset and geometry configuration."""
    return [build_plan(s.coords, config) for s in dataset.samples]


def _append_metrics(path, record: EpochRecord, write_header: bool):
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if write_header:
            w.writerow(METRICS_HEADER)
        w.writerow(record.csv_row())


def write_metrics_header(path):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerow(METRICS_HEADER)


def _uniform_size(samples) -> bool:
    n = samples[0].coords.shape[0]
    return all(s.coords.shape[0] == n for s in samples)


def predict_many(model: PointMTClassifier, samples, plans, chunk=64) -> np.ndarray:
    """Predicted class per sample; equally-sized clouds run in batched chunks."""
    if len(samples) > 1 and _uniform_size(samples):
        preds = np.empty(len(samples), dtype=np.int64)
        for i in range(0, len(samples), chunk):
            part = slice(i, min(i + chunk, len(samples)))
            out = forward_batch(model, [s.coords for s in samples[part]], plans[part])
            preds[part] = np.argmax(out.combined.data, axis=1)
        return preds
    return np.array([model.predict(s.coords, p) for s, p in zip(samples, plans)], dtype=np.int64)


def evaluate(model: PointMTClassifier, dataset, plans=None):
    """Overall accuracy and unweighted mean of per-class accuracies.

    Classes with no samples are excluded from the mean with a warning.
    """
    samples = dataset.samples
    if any(s.label is None for s in samples):
        raise ValueError("evaluate needs a labeled dataset")
    if plans is None:
        plans = _plan_cache(model, samples)
    preds = predict_many(model, samples, plans)
    n_classes = len(dataset.class_names)
    correct = np.zeros(n_classes)
    totals = np.zeros(n_classes)
    for sample, pred in zip(samples, preds):
        totals[sample.label] += 1
        if pred == sample.label:
            correct[sample.label] += 1
    present = totals > 0
    if not present.all():
        missing = [dataset.class_names[i] for i in np.flatnonzero(~present)]
        warnings.warn(f"classes absent from dataset excluded from mAcc: {missing}")
    oa = float(correct.sum() / max(totals.sum(), 1))
    macc = float((correct[present] / totals[present]).mean()) if present.any() else 0.0
    return oa, macc


def fit(model: PointMTClassifier, train_set, test_set, cfg: TrainConfig, *,
        metrics_path=None, checkpoint_stem=None, train_plans=None,
        test_plans=None) -> list[EpochRecord]:
    """Mini-batch descent under the warm-restart schedule.

    Deterministic given the seed: shuffling comes from one generator, per-batch
    gradients average in index order. Checkpoints are written at cycle
    boundaries and at the end when ``checkpoint_stem`` is given. Raises
    TrainingError the moment a loss goes non-finite. Pass precomputed
    ``train_plans``/``test_plans`` (see ``build_plans``) to skip the per-sample
    geometry pass when running several fits over one dataset.
    """
    if len(train_set.samples) == 0:
        raise ValueError("training set is empty")
    from ._alloc import reuse_large_blocks

    reuse_large_blocks()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    params = model.parameters()
    opt = make_optimizer(params, cfg)
    augmented = cfg.augment_rotate or cfg.augment_jitter > 0
    if augmented:
        train_plans = None
    elif train_plans is None:
        train_plans = _plan_cache(model, train_set.samples)
    if test_set is not None and test_plans is None:
        test_plans = _plan_cache(model, test_set.samples)
    if metrics_path is not None:
        write_metrics_header(metrics_path)
    batched = not augmented and _uniform_size(train_set.samples)
    records: list[EpochRecord] = []
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lr = cosine_annealing_lr(epoch, cfg)
        order = rng.permutation(len(train_set.samples))
        loss_sum = 0.0
        hit = 0
        for b0 in range(0, len(order), cfg.batch_size):
            batch = order[b0:b0 + cfg.batch_size]
            opt.zero_grad()
            if batched:
                samples = [train_set.samples[int(i)] for i in batch]
                labels = [s.label for s in samples]
                out = forward_batch(model, [s.coords for s in samples],
                                    [train_plans[int(i)] for i in batch])
                loss, row_losses = cross_entropy_batch(out.combined, labels)
                if not np.isfinite(loss.data):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch starting at sample {b0}")
                loss.backward()
                loss_sum += float(row_losses.sum())
                hit += int((np.argmax(out.combined.data, axis=1) == np.asarray(labels)).sum())
                opt.step(lr, grad_scale=1.0)  # batch loss is already the mean
                continue
            for i in batch:
                sample = train_set.samples[int(i)]
                coords = sample.coords
                plan = None if augmented else train_plans[int(i)]
                if augmented:
                    if cfg.augment_rotate:
                        coords = coords @ random_rotation(rng).T.astype(coords.dtype)
                    if cfg.augment_jitter > 0:
                        coords = coords + rng.normal(0, cfg.augment_jitter, coords.shape).astype(coords.dtype)
                out = model.forward(coords, plan)
                logits = _combined_logits(out)
                loss = cross_entropy(logits, sample.label)
                if not np.isfinite(loss.data):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch starting at sample {b0}")
                loss.backward()
                loss_sum += loss.item()
                if int(np.argmax(logits.data)) == sample.label:
                    hit += 1
            opt.step(lr, grad_scale=1.0 / len(batch))
        test_acc, _ = evaluate(model, test_set, test_plans) if test_set is not None else (float("nan"), 0.0)
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / len(order),
            train_acc=hit / len(order),
            test_acc=test_acc,
            lr=lr,
            wall_time=time.perf_counter() - start,
        )
        records.append(record)
        if metrics_path is not None:
            _append_metrics(metrics_path, record, write_header=False)
        if checkpoint_stem is not None and (epoch + 1) % cfg.cycle_length == 0:
            save_checkpoint(params, f"{checkpoint_stem}_cycle{(epoch + 1) // cfg.cycle_length}.ckpt")
    if checkpoint_stem is not None:
        save_checkpoint(params, f"{checkpoint_stem}_final.ckpt")
    return records
