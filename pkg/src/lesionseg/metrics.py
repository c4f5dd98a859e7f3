"""Segmentation metrics, losses, and training-dynamics statistics.

All overlap quantities accept numpy arrays or torch tensors of identical
shape; loss functions stay differentiable when given tensors. Binary masks
use {0, 1}, predictions may be probabilities in [0, 1].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadBeta, BadGamma, EmptyHistory, ShapeMismatch

# Smoothing constant shared by the dice / tversky family.
SMOOTH = 1.0

# Column order of the per-run metrics CSV.
CSV_COLUMNS = ("epoch", "dice", "val_dice", "FT", "val_FT", "iou", "val_iou")

DEFAULT_SPEED_THRESHOLD = 0.8
DEFAULT_TVERSKY_BETA = 0.7
DEFAULT_FOCAL_GAMMA = 0.75


def _check_shapes(y, p):
    if tuple(y.shape) != tuple(p.shape):
        raise ShapeMismatch(f"shapes differ: {tuple(y.shape)} vs {tuple(p.shape)}")


def iou(y, p) -> float:
    """Intersection over union (Jaccard index) of two binary masks.

    Defined as 1.0 when both masks are empty: truth and prediction agree
    that there is no lesion, which is not an error.
    """
    _check_shapes(y, p)
    yb = np.asarray(y) > 0.5
    pb = np.asarray(p) > 0.5
    union = np.logical_or(yb, pb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(yb, pb).sum() / union)


def dice_score(y, p):
    """Smoothed dice coefficient (2*|y*p| + 1) / (|y| + |p| + 1).

    `p` may be a probability map. Differentiable in `p` for tensor inputs;
    returns a python float for numpy inputs, a 0-d tensor otherwise.
    """
    _check_shapes(y, p)
    inter = (y * p).sum()
    total = y.sum() + p.sum()
    score = (2.0 * inter + SMOOTH) / (total + SMOOTH)
    return float(score) if isinstance(score, (np.floating, float)) else score


def dice_loss(y, p):
    """1 - dice_score; the training loss of every experiment."""
    return 1.0 - dice_score(y, p)


def tversky_loss(y, p, beta: float = DEFAULT_TVERSKY_BETA):
    """Asymmetric overlap loss weighting false positives by `beta`.

    TL = 1 - (1 + tp) / (1 + tp + beta*fp + (1-beta)*fn), with tp/fp/fn
    computed as pixel sums. beta=0.5 makes the loss symmetric under a
    false-positive/false-negative swap.
    """
    if not 0.0 < beta < 1.0:
        raise BadBeta(f"beta must lie in (0, 1), got {beta}")
    _check_shapes(y, p)
    tp = (y * p).sum()
    fp = ((1.0 - y) * p).sum()
    fn = (y * (1.0 - p)).sum()
    tl = 1.0 - (SMOOTH + tp) / (SMOOTH + tp + beta * fp + (1.0 - beta) * fn)
    return float(tl) if isinstance(tl, (np.floating, float)) else tl


def focal_tversky_loss(y, p, beta: float = DEFAULT_TVERSKY_BETA,
                       gamma: float = DEFAULT_FOCAL_GAMMA):
    """Tversky loss raised to the focal exponent: FT = TL**gamma.

    With gamma < 1 the exponent amplifies small residual errors, keeping
    gradient pressure on nearly-solved examples. A perfect prediction
    yields 0, the worst case approaches 1; lower is better, consistent
    with the FT columns of the result tables.
    """
    if gamma <= 0.0:
        raise BadGamma(f"gamma must be positive, got {gamma}")
    tl = tversky_loss(y, p, beta=beta)
    return tl ** gamma


def delta_m(train_value: float, val_value: float) -> float:
    """Overfitting gap |train - val| between a metric and its val twin."""
    return abs(train_value - val_value)


def batch_metrics(y_batch, p_batch) -> tuple[float, float, float]:
    """Mean per-sample (dice, iou, focal tversky) over the leading axis.

    dice and FT are computed on raw probabilities, iou on the prediction
    binarized at 0.5. Per-sample averaging (rather than pooling all pixels)
    keeps small lesions from being swamped by large ones.
    """
    _check_shapes(y_batch, p_batch)
    dices, ious, fts = [], [], []
    for y, p in zip(y_batch, p_batch):
        y = np.asarray(y, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        dices.append(float(dice_score(y, p)))
        ious.append(iou(y, p))
        fts.append(float(focal_tversky_loss(y, p)))
    return float(np.mean(dices)), float(np.mean(ious)), float(np.mean(fts))


@dataclass
class MetricRecord:
    """Train/val metric triplet for one epoch."""

    epoch: int
    dice: float
    val_dice: float
    ft: float
    val_ft: float
    iou: float
    val_iou: float

    def as_row(self) -> list:
        return [self.epoch, self.dice, self.val_dice, self.ft,
                self.val_ft, self.iou, self.val_iou]

    @classmethod
    def from_row(cls, row) -> "MetricRecord":
        return cls(int(row[0]), *(float(v) for v in row[1:7]))

    def value(self, column: str, val: bool = False) -> float:
        """Look up a metric by its CSV column stem ('dice', 'FT', 'iou')."""
        key = {"dice": "dice", "FT": "ft", "iou": "iou"}[column]
        return getattr(self, f"val_{key}" if val else key)


# Columns where a *lower* best value wins (losses).
LOWER_IS_BETTER = ("FT", "val_FT")
METRIC_STEMS = ("dice", "FT", "iou")


@dataclass
class RunHistory:
    """Per-epoch records of one (model, augmentation, seed) training run."""

    model: str
    aug: str
    seed: int
    records: list[MetricRecord] = field(default_factory=list)
    stop_epoch: int = 0

    def __post_init__(self):
        epochs = [r.epoch for r in self.records]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("epochs must be strictly increasing")
        if self.records and not self.stop_epoch:
            self.stop_epoch = self.records[-1].epoch

    def best(self) -> dict[str, float]:
        """Best value per CSV column: max for dice/iou, min for FT."""
        if not self.records:
            raise EmptyHistory("run has no epoch records")
        out = {}
        for col in CSV_COLUMNS[1:]:
            values = [getattr(r, _FIELD_BY_COLUMN[col]) for r in self.records]
            out[col] = min(values) if col in LOWER_IS_BETTER else max(values)
        return out

    def deltas_after(self, after_epoch: int = 15) -> dict[str, list[float]]:
        """Per-epoch |train - val| gaps for epochs strictly after `after_epoch`."""
        out = {stem: [] for stem in METRIC_STEMS}
        for r in self.records:
            if r.epoch > after_epoch:
                for stem in METRIC_STEMS:
                    out[stem].append(delta_m(r.value(stem), r.value(stem, val=True)))
        return out

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for rec in self.records:
                writer.writerow(rec.as_row())
        return path

    @classmethod
    def from_csv(cls, path, model: str = "", aug: str = "", seed: int = 0) -> "RunHistory":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != CSV_COLUMNS:
                raise ValueError(f"unexpected metrics CSV header: {header}")
            records = [MetricRecord.from_row(row) for row in reader if row]
        return cls(model=model, aug=aug, seed=seed, records=records)


_FIELD_BY_COLUMN = {
    "dice": "dice", "val_dice": "val_dice",
    "FT": "ft", "val_FT": "val_ft",
    "iou": "iou", "val_iou": "val_iou",
}


def training_speed(history: RunHistory,
                   threshold: float = DEFAULT_SPEED_THRESHOLD) -> int | None:
    """First epoch whose *train* dice reaches `threshold`; None if never.

    A None return is the "failure" counted by the speed table.
    """
    if not history.records:
        raise EmptyHistory("run has no epoch records")
    for rec in history.records:
        if rec.dice >= threshold:
            return rec.epoch
    return None
