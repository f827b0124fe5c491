"""Loss, optimiser, metrics, cross-validated training and the ablation harness."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import FoldPlan, SegmentationSample, augment_dataset, is_derived, make_folds
from .model import VARIANTS, ModelConfig, ModelParams, forward, parameter_init, predict_mask
from .tensor import Tensor, get_dtype, no_grad

__all__ = [
    "NumericAbort",
    "cross_entropy",
    "AdamState",
    "adam_step",
    "confusion_matrix",
    "dice_score",
    "accuracy",
    "precision",
    "FoldMetrics",
    "MetricsReport",
    "evaluate",
    "TrainResult",
    "train",
    "train_fold",
    "AblationTable",
    "ablation_suite",
]

log = logging.getLogger(__name__)

FOREGROUND = (1, 2, 3)


class NumericAbort(RuntimeError):
    pass


# -- loss ------------------------------------------------------------------


def cross_entropy(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[true class]; logits are [N, M, H, W]."""
    n, m, h, w = logits.shape
    mask = np.asarray(mask)
    if mask.shape != (n, h, w):
        raise ValueError(f"cross_entropy: mask {mask.shape} does not match logits {logits.shape}")
    if mask.min() < 0 or mask.max() >= m:
        bad = sorted(set(np.unique(mask).tolist()) - set(range(m)))
        raise ValueError(f"cross_entropy: labels {bad} outside 0..{m - 1}")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    idx = mask[:, None].astype(np.int64)
    picked = np.take_along_axis(logp, idx, axis=1)
    count = n * h * w
    loss = np.asarray(-picked.sum() / count, dtype=x.dtype)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1.0, axis=1)
        return (grad * (g / count),)

    return Tensor.from_op(loss, (logits,), backward, "cross_entropy")


# -- optimiser ---------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update applied in place, parameters visited in name order."""
    missing = [name for name in sorted(params) if grads.get(name) is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {missing[0]!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name in sorted(params):
        p = params[name]
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.data.dtype)
    return state


# -- metrics -------------------------------------------------------------------


def _aligned(pred: np.ndarray, truth: np.ndarray) -> None:
    if np.shape(pred) != np.shape(truth):
        raise ValueError(f"masks are not aligned: {np.shape(pred)} vs {np.shape(truth)}")


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, n_classes: int = 4) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    _aligned(pred, truth)
    flat = np.asarray(truth, dtype=np.int64).ravel() * n_classes + np.asarray(pred, dtype=np.int64).ravel()
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def dice_score(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    """2|X∩Y| / (|X|+|Y|) for X = predicted pixels of the class, Y = labelled pixels; 1.0 when both are empty."""
    _aligned(pred, truth)
    x = np.asarray(pred) == class_id
    y = np.asarray(truth) == class_id
    denom = int(x.sum()) + int(y.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((x & y).sum()) / denom


def accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    _aligned(pred, truth)
    return float(np.mean(np.asarray(pred) == np.asarray(truth)))


def precision(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    """|X∩Y| / |X|; 1.0 if the class is neither predicted nor present, 0.0 if present but never predicted."""
    _aligned(pred, truth)
    x = np.asarray(pred) == class_id
    y = np.asarray(truth) == class_id
    nx = int(x.sum())
    if nx == 0:
        return 1.0 if not y.any() else 0.0
    return int((x & y).sum()) / nx


@dataclass
class FoldMetrics:
    """Metrics over one evaluation set, pixels pooled across its images."""

    dice: np.ndarray  # per class
    precision: np.ndarray  # per class
    accuracy: float

    @property
    def macro_dice(self) -> float:
        return float(np.mean(self.dice[list(FOREGROUND)]))

    @property
    def macro_precision(self) -> float:
        return float(np.mean(self.precision[list(FOREGROUND)]))

    def as_dict(self) -> dict[str, float]:
        out = {"dsc": self.macro_dice, "acc": self.accuracy, "precision": self.macro_precision}
        for c in range(len(self.dice)):
            out[f"dsc_{c}"] = float(self.dice[c])
            out[f"precision_{c}"] = float(self.precision[c])
        return out


def score_masks(preds: np.ndarray, truths: np.ndarray, n_classes: int = 4) -> FoldMetrics:
    """Pool all pixels of the evaluation set, then score each class once."""
    preds = np.asarray(preds)
    truths = np.asarray(truths)
    dice = np.array([dice_score(preds, truths, c) for c in range(n_classes)])
    prec = np.array([precision(preds, truths, c) for c in range(n_classes)])
    return FoldMetrics(dice, prec, accuracy(preds, truths))


@dataclass
class MetricsReport:
    folds: list[FoldMetrics]

    @property
    def mean(self) -> FoldMetrics:
        return FoldMetrics(
            np.mean([f.dice for f in self.folds], axis=0),
            np.mean([f.precision for f in self.folds], axis=0),
            float(np.mean([f.accuracy for f in self.folds])),
        )

    def table(self) -> str:
        header = "fold\tdsc\tacc\tprecision\t" + "\t".join(f"dsc_{c}" for c in range(len(self.folds[0].dice)))
        rows = [header]
        for name, f in [*((str(i), f) for i, f in enumerate(self.folds)), ("mean", self.mean)]:
            rows.append(
                f"{name}\t{f.macro_dice:.6f}\t{f.accuracy:.6f}\t{f.macro_precision:.6f}\t"
                + "\t".join(f"{d:.6f}" for d in f.dice)
            )
        return "\n".join(rows) + "\n"

    def summary(self) -> str:
        return "".join(f"{k}={v:.6f}\n" for k, v in self.mean.as_dict().items()) + f"folds={len(self.folds)}\n"


def _stack(samples: list[SegmentationSample]) -> tuple[np.ndarray, np.ndarray]:
    return (
        np.stack([s.image for s in samples]).astype(get_dtype()),
        np.stack([s.mask for s in samples]).astype(np.int64),
    )


def evaluate(params: ModelParams, samples: list[SegmentationSample], batch_size: int = 8) -> FoldMetrics:
    preds, truths = [], []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            x, y = _stack(samples[i : i + batch_size])
            preds.append(predict_mask(Tensor(x), params))
            truths.append(y)
    return score_masks(np.concatenate(preds), np.concatenate(truths), params.config.n_classes)


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    params: list[ModelParams]
    report: MetricsReport
    losses: list[tuple[int, int, float]]  # (epoch, fold, mean batch loss)

    def loss_csv(self) -> str:
        return "epoch,fold,loss\n" + "".join(f"{e},{f},{loss!r}\n" for e, f, loss in self.losses)


def train_fold(
    config: ModelConfig,
    train_set: list[SegmentationSample],
    test_set: list[SegmentationSample],
    epochs: int,
    seed: int,
    fold: int = 0,
    batch_size: int = 4,
    lr: float = 1e-3,
) -> tuple[ModelParams, FoldMetrics, list[tuple[int, int, float]]]:
    params = parameter_init(config, seed)
    for t in params.parameters():
        t.data = t.data.astype(get_dtype())
    named = params.named()
    state = AdamState(lr=lr)
    rng = np.random.default_rng([seed, fold])
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(train_set))
        total = 0.0
        n_batches = 0
        for b, start in enumerate(range(0, len(order), batch_size)):
            x, y = _stack([train_set[i] for i in order[start : start + batch_size]])
            for t in named.values():
                t.grad = None
            loss = cross_entropy(forward(Tensor(x), params), y)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericAbort(f"non-finite loss {value} at fold {fold}, epoch {epoch}, batch {b}")
            loss.backward()
            adam_step(named, {k: t.grad for k, t in named.items()}, state)
            total += value
            n_batches += 1
        losses.append((epoch, fold, total / max(n_batches, 1)))
        log.info("fold %d epoch %d loss %.5f", fold, epoch, total / max(n_batches, 1))
    for t in named.values():
        t.grad = None
    return params, evaluate(params, test_set), losses


def _split(dataset: list[SegmentationSample], plan: FoldPlan, fold: int):
    held = set(plan.folds[fold])
    train_set = [s for s in dataset if s.id not in held]
    test_set = [s for s in dataset if s.id in held and not is_derived(s.id)]
    return train_set, test_set


def _run_fold(args):
    config, train_set, test_set, epochs, seed, fold, batch_size, lr, dtype = args
    from . import tensor

    tensor.set_precision("f64" if dtype == np.float64 else "f32")
    return train_fold(config, train_set, test_set, epochs, seed, fold, batch_size, lr)


def train(
    config: ModelConfig,
    dataset: list[SegmentationSample],
    folds: FoldPlan,
    epochs: int,
    seed: int,
    batch_size: int = 4,
    lr: float = 1e-3,
    max_folds: int | None = None,
    workers: int = 1,
) -> TrainResult:
    """Train on the complement of each fold and evaluate on the fold's original samples.

    ``max_folds`` limits the run to the first folds of the plan.
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    size = dataset[0].mask.shape
    if size != (config.input_size, config.input_size):
        raise ValueError(f"train: samples are {size} but the model expects {config.input_size}x{config.input_size}")
    n_folds = folds.k if max_folds is None else min(max_folds, folds.k)
    jobs = []
    for fold in range(n_folds):
        train_set, test_set = _split(dataset, folds, fold)
        if folds.k == 1:
            train_set = [s for s in dataset]
        jobs.append((config, train_set, test_set, epochs, seed, fold, batch_size, lr, get_dtype()))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = [train_fold(*job[:-1]) for job in jobs]
    return TrainResult(
        params=[r[0] for r in results],
        report=MetricsReport([r[1] for r in results]),
        losses=[row for r in results for row in r[2]],
    )


def write_report(result: TrainResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.tsv").write_text(result.report.table())
    (out / "summary.txt").write_text(result.report.summary())
    (out / "loss_curves.csv").write_text(result.loss_csv())


# -- ablation ------------------------------------------------------------------


METRIC_COLUMNS = ("aug_dsc", "aug_acc", "aug_precision", "noaug_dsc", "noaug_acc", "noaug_precision")


@dataclass
class AblationTable:
    rows: dict[str, dict[str, float]]  # variant -> column -> value

    def tsv(self) -> str:
        lines = ["model\t" + "\t".join(METRIC_COLUMNS)]
        for variant, cols in self.rows.items():
            lines.append(variant + "\t" + "\t".join(f"{cols[c]:.6f}" for c in METRIC_COLUMNS))
        return "\n".join(lines) + "\n"


def ablation_suite(
    dataset: list[SegmentationSample],
    seed: int,
    base: ModelConfig,
    k: int = 3,
    epochs: int = 10,
    batch_size: int = 4,
    max_folds: int | None = None,
    workers: int = 1,
) -> AblationTable:
    """Train every variant with and without augmentation under one fold plan and seed."""
    originals = [s for s in dataset if not is_derived(s.id)]
    augmented = augment_dataset(originals)
    plans = {
        "aug": (augmented, make_folds([s.id for s in augmented], k, seed)),
        "noaug": (originals, make_folds([s.id for s in originals], k, seed)),
    }
    rows: dict[str, dict[str, float]] = {}
    for variant in VARIANTS:
        config = replace(base, variant=variant)
        row = {}
        for tag, (data, plan) in plans.items():
            result = train(config, data, plan, epochs, seed, batch_size, max_folds=max_folds, workers=workers)
            mean = result.report.mean
            row[f"{tag}_dsc"] = mean.macro_dice
            row[f"{tag}_acc"] = mean.accuracy
            row[f"{tag}_precision"] = mean.macro_precision
            log.info("ablation %s %s dsc %.4f", variant, tag, mean.macro_dice)
        rows[variant] = row
    return AblationTable(rows)
