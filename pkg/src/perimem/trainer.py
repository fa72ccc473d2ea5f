"""Training loop: Adam, deterministic shuffling, learning curves, gradient checks.

The trainer works against the duck type shared by ResponseModel and the
sum-pooling baseline: named_tensors(), encode_samples(), loss_and_grads(),
batch_loss() and predict_proba_samples().
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .data import Sample
from .errors import ShapeError, TrainingDivergedError
from .numerics import relative_error

# Hyperparameter grids the experiments sweep over.
LEARNING_RATE_GRID = (1e-4, 5e-3, 1e-3)
REG_WEIGHT_GRID = (1e-3, 1e-4, 1e-5)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    """Optimization hyperparameters; architecture lives in ModelConfig."""

    learning_rate: float = 1e-3
    cov_weight: float = 1e-4  # weight of the covariance penalty
    l2_weight: float = 1e-5  # weight of the parameter norm penalty
    batch_size: int = 128
    epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


class Adam:
    """Adam over a fixed dict of tensors, updated in place."""

    def __init__(
        self,
        tensors: dict[str, np.ndarray],
        learning_rate: float,
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        eps: float = ADAM_EPS,
    ):
        self.tensors = tensors
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first_moment = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.second_moment = {k: np.zeros_like(v) for k, v in tensors.items()}

    def apply(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        bias1 = 1.0 - self.beta1**self.step_count
        bias2 = 1.0 - self.beta2**self.step_count
        for name, tensor in self.tensors.items():
            g = grads[name]
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            tensor -= self.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def _take(enc, idx: np.ndarray):
    """Row-subset of an EncodedBatch (class imported lazily to avoid a cycle)."""
    from .model import EncodedBatch

    return EncodedBatch(
        seq_len=enc.seq_len,
        item=enc.item[idx],
        cat=enc.cat[idx],
        side=enc.side[idx],
        tgt_item=enc.tgt_item[idx],
        tgt_cat=enc.tgt_cat[idx],
        tgt_side=enc.tgt_side[idx],
        ctx=enc.ctx[idx],
        uside=enc.uside[idx],
        labels=enc.labels[idx],
    )


class EncodedDataset:
    """Samples encoded once up front, bucketed by history length."""

    def __init__(self, model, samples: list[Sample]):
        if not samples:
            raise ShapeError("EncodedDataset: no samples")
        by_len: dict[int, list[int]] = {}
        for i, s in enumerate(samples):
            by_len.setdefault(len(s.sequence.events), []).append(i)
        self.groups = []
        for seq_len in sorted(by_len):
            idxs = by_len[seq_len]
            self.groups.append(model.encode_samples([samples[i] for i in idxs]))
        self.n_samples = len(samples)

    def batches(self, batch_size: int, rng: np.random.Generator):
        """One shuffled pass: shuffle within buckets, then shuffle batch order."""
        batch_specs = []
        for enc in self.groups:
            order = rng.permutation(enc.size)
            for lo in range(0, enc.size, batch_size):
                batch_specs.append((enc, order[lo : lo + batch_size]))
        for k in rng.permutation(len(batch_specs)):
            enc, idx = batch_specs[k]
            yield _take(enc, idx)


@dataclass
class EpochSummary:
    epoch: int
    mean_train_loss: float
    test_logloss: float | None = None
    test_auc: float | None = None


@dataclass
class FitResult:
    epoch_summaries: list[EpochSummary]
    curve_rows: list[dict]
    best_epoch: int | None = None

    @property
    def epoch_mean_losses(self) -> list[float]:
        return [s.mean_train_loss for s in self.epoch_summaries]


def train_epoch(
    model,
    dataset: EncodedDataset,
    config: TrainConfig,
    optimizer: Adam,
    epoch: int,
    curve_rows: list[dict] | None = None,
) -> float:
    """One shuffled pass of mini-batch updates; returns the epoch's mean data loss.

    The shuffle is a pure function of (config.seed, epoch). A non-finite loss
    aborts immediately, naming the batch.
    """
    rng = np.random.default_rng([config.seed, epoch])
    total = 0.0
    count = 0
    for k, batch in enumerate(dataset.batches(config.batch_size, rng)):
        loss, grads, stats = model.loss_and_grads(
            batch, config.cov_weight, config.l2_weight
        )
        if not math.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch}, batch {k}"
            )
        optimizer.apply(grads)
        total += stats["data_loss_mean"] * batch.size
        count += batch.size
        if curve_rows is not None:
            curve_rows.append(
                {
                    "epoch": epoch,
                    "batch": k,
                    "train_loss": stats["data_loss_mean"],
                    "test_logloss": "",
                    "test_auc": "",
                }
            )
    return total / count


def evaluate_model(model, samples: list[Sample]) -> dict:
    """Metrics report for a sample set: auc, summed logloss, counts."""
    labels = np.array([s.label for s in samples], dtype=float)
    probs = model.predict_proba_samples(samples)
    return metrics.metrics_report(labels, probs)


def fit_model(
    model,
    train_samples: list[Sample],
    config: TrainConfig,
    test_samples: list[Sample] | None = None,
) -> FitResult:
    """Train for config.epochs; with test data, keep the best-test-auc tensors.

    Appends one curve row per batch (train loss) and fills the test columns on
    each epoch's final row.
    """
    dataset = EncodedDataset(model, train_samples)
    optimizer = Adam(model.named_tensors(), config.learning_rate)
    summaries: list[EpochSummary] = []
    curve_rows: list[dict] = []
    best_auc = -np.inf
    best_epoch = None
    best_tensors = None
    for epoch in range(1, config.epochs + 1):
        mean_loss = train_epoch(model, dataset, config, optimizer, epoch, curve_rows)
        summary = EpochSummary(epoch=epoch, mean_train_loss=mean_loss)
        if test_samples:
            report = evaluate_model(model, test_samples)
            summary.test_logloss = report["logloss"]
            summary.test_auc = report["auc"]
            if curve_rows:
                curve_rows[-1]["test_logloss"] = report["logloss"] / report["n"]
                curve_rows[-1]["test_auc"] = report["auc"]
            if report["auc"] > best_auc:
                best_auc = report["auc"]
                best_epoch = epoch
                best_tensors = model.copy_tensors()
        summaries.append(summary)
    if best_tensors is not None:
        model.set_tensors(best_tensors)
    return FitResult(epoch_summaries=summaries, curve_rows=curve_rows, best_epoch=best_epoch)


CURVE_COLUMNS = ("epoch", "batch", "train_loss", "test_logloss", "test_auc")


def write_learning_curve(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.DictWriter(fp, fieldnames=CURVE_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


@dataclass
class GradCheckReport:
    """Per-tensor max relative error between analytic and central differences."""

    errors: dict[str, float]
    tolerance: float
    step: float

    @property
    def worst(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def lines(self) -> list[str]:
        width = max(len(name) for name in self.errors)
        out = []
        for name, err in self.errors.items():
            verdict = "ok" if err < self.tolerance else "FAIL"
            out.append(f"{name:<{width}}  max_rel_err={err:.3e}  {verdict}")
        out.append(
            f"worst={self.worst:.3e} tolerance={self.tolerance:.0e} "
            f"-> {'PASS' if self.passed else 'FAIL'}"
        )
        return out


def grad_check_model(
    model,
    samples: list[Sample],
    cov_weight: float = 1e-3,
    l2_weight: float = 1e-4,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare every analytic gradient against central finite differences.

    Perturbs each coordinate of each trainable tensor in place and re-evaluates
    the full batch objective, so cost grows with parameter count; intended for
    models of roughly the few-tens-of-thousands-of-parameters scale and below.
    """
    enc = model.encode_samples(samples)
    _, grads, _ = model.loss_and_grads(enc, cov_weight, l2_weight)
    errors: dict[str, float] = {}
    for name, tensor in model.named_tensors().items():
        flat = tensor.reshape(-1)
        if not np.shares_memory(flat, tensor):
            raise ShapeError(f"grad_check_model: tensor {name} is not contiguous")
        fd = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            loss_plus = model.batch_loss(enc, cov_weight, l2_weight)
            flat[i] = orig - step
            loss_minus = model.batch_loss(enc, cov_weight, l2_weight)
            flat[i] = orig
            if not (math.isfinite(loss_plus) and math.isfinite(loss_minus)):
                raise ShapeError(
                    f"grad_check_model: non-finite loss perturbing {name}[{i}]"
                )
            fd[i] = (loss_plus - loss_minus) / (2.0 * step)
        errors[name] = relative_error(grads[name].reshape(-1), fd, floor)
    return GradCheckReport(errors=errors, tolerance=tolerance, step=step)
