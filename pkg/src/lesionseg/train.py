"""Training protocol: one run, the 5-seed experiment, and the full grid.

Protocol per run: SGD (momentum 0.9, lr 0.01), batch 32, dice loss, up to
60 epochs; the learning rate is multiplied by 0.1 after 15 epochs without
validation-dice improvement and the run stops after 30. Runs persist to
``runs/{label}/{aug}/{seed}/`` (config snapshot, metrics CSV, best
checkpoint, completion manifest) and are skipped on resume.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugConfig, Pipeline, build_pipeline
from .dataset import DatasetIndex, Sample, load_sample
from .errors import (
    DivergenceDetected,
    EmptyDataset,
    IncompleteGrid,
    InvalidConfig,
    OutOfBudget,
)
from .metrics import MetricRecord, RunHistory, batch_metrics, dice_loss, training_speed
from .models import ModelSpec, build_model, default_spec

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (1, 2, 3, 4, 5)

# Accelerator selection: "cpu" (default), "cuda", "cuda:1", ...
DEVICE_ENV_VAR = "LESIONSEG_DEVICE"


def select_device() -> torch.device:
    return torch.device(os.environ.get(DEVICE_ENV_VAR, "cpu"))


@dataclass
class TrainConfig:
    """Hyperparameters of the training protocol."""

    batch_size: int = 32
    max_epochs: int = 60
    momentum: float = 0.9
    initial_lr: float = 0.01
    plateau_patience: int = 15
    plateau_factor: float = 0.1
    early_stop_patience: int = 30
    min_delta: float = 1e-4
    monitor: str = "val_dice"
    image_size: int = 256
    time_budget_s: float | None = None

    def __post_init__(self):
        positives = {"batch_size": self.batch_size,
                     "max_epochs": self.max_epochs,
                     "initial_lr": self.initial_lr,
                     "plateau_patience": self.plateau_patience,
                     "early_stop_patience": self.early_stop_patience,
                     "image_size": self.image_size}
        for name, value in positives.items():
            if value <= 0:
                raise InvalidConfig(f"{name} must be positive, got {value}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise InvalidConfig(
                f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience >= self.early_stop_patience:
            raise InvalidConfig("plateau_patience must be smaller than "
                                "early_stop_patience")
        if self.min_delta < 0 or self.momentum < 0:
            raise InvalidConfig("min_delta and momentum must be >= 0")
        if self.monitor != "val_dice":
            raise InvalidConfig(f"unsupported monitor {self.monitor!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


def _sub_seed(*parts) -> int:
    digest = hashlib.blake2s("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


class SampleStore:
    """Loads and caches resized samples for one index."""

    def __init__(self, index: DatasetIndex, image_size: int):
        if len(index) == 0:
            raise EmptyDataset("cannot train on an empty index")
        self.index = index
        self.size = (image_size, image_size)
        self._cache: dict[int, Sample] = {}

    def __len__(self) -> int:
        return len(self.index)

    def get(self, i: int) -> Sample:
        if i not in self._cache:
            self._cache[i] = load_sample(self.index.records[i], self.size)
        return self._cache[i]


def to_tensors(samples: list[Sample]) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(
        np.stack([s.image.transpose(2, 0, 1) for s in samples]))
    y = torch.from_numpy(np.stack([s.mask[None] for s in samples]))
    return x.float(), y.float()


def _epoch_batches(store: SampleStore, batch_size: int, order: np.ndarray):
    for start in range(0, len(order), batch_size):
        yield [store.get(int(i)) for i in order[start:start + batch_size]]


def _run_train_epoch(model, optimizer, store, pipeline, config, seed, epoch):
    device = next(model.parameters()).device
    rng = np.random.default_rng(_sub_seed(seed, "shuffle", epoch))
    order = rng.permutation(len(store))
    sums = np.zeros(3)
    count = 0
    model.train()
    for b, samples in enumerate(_epoch_batches(store, config.batch_size, order)):
        if pipeline is not None:
            samples = pipeline(samples, seed=_sub_seed(seed, epoch, b))
        x, y = to_tensors(samples)
        x, y = x.to(device), y.to(device)
        proba = model(x)
        loss = dice_loss(y, proba)
        if not torch.isfinite(loss):
            raise DivergenceDetected(
                f"non-finite loss at epoch {epoch}, batch {b}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        triplet = batch_metrics(y[:, 0].cpu().numpy(),
                                proba.detach()[:, 0].cpu().numpy())
        sums += np.array(triplet) * len(samples)
        count += len(samples)
    return tuple(float(v) for v in sums / count)


def _run_eval_epoch(model, store, config):
    device = next(model.parameters()).device
    sums = np.zeros(3)
    count = 0
    order = np.arange(len(store))
    model.eval()
    with torch.no_grad():
        for samples in _epoch_batches(store, config.batch_size, order):
            x, y = to_tensors(samples)
            x, y = x.to(device), y.to(device)
            proba = model(x)
            triplet = batch_metrics(y[:, 0].cpu().numpy(),
                                    proba[:, 0].cpu().numpy())
            sums += np.array(triplet) * len(samples)
            count += len(samples)
    return tuple(float(v) for v in sums / count)


def _atomic_write(path: Path, text: str):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def fit(model, train_index: DatasetIndex, val_index: DatasetIndex,
        aug: AugConfig | Pipeline | None, config: TrainConfig, seed: int,
        run_dir=None, label: str = "", aug_label: str = "") -> RunHistory:
    """Train an already-built model under the full protocol.

    Appends one MetricRecord per epoch, multiplies the learning rate by
    `plateau_factor` after `plateau_patience` stagnant epochs, stops after
    `early_stop_patience`, and checkpoints the best-val-dice weights when
    `run_dir` is given. Raises DivergenceDetected on a non-finite loss.
    """
    started = time.monotonic()
    pipeline = aug
    if isinstance(aug, AugConfig):
        pipeline = build_pipeline(aug)
    if not aug_label and pipeline is not None:
        aug_label = pipeline.config.label
    train_store = SampleStore(train_index, config.image_size)
    val_store = SampleStore(val_index, config.image_size)

    model.to(select_device())
    optimizer = torch.optim.SGD(model.parameters(), lr=config.initial_lr,
                                momentum=config.momentum)
    history = RunHistory(model=label, aug=aug_label, seed=seed)
    best_monitor = -np.inf
    best_epoch = 0
    stagnant = 0
    since_lr_drop = 0
    lr = config.initial_lr
    lrs = []
    checkpoint_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_path = run_dir / f"{label}_{aug_label}_{seed}.ckpt"

    for epoch in range(1, config.max_epochs + 1):
        lrs.append(lr)
        dice, iou, ft = _run_train_epoch(model, optimizer, train_store,
                                         pipeline, config, seed, epoch)
        val_dice, val_iou, val_ft = _run_eval_epoch(model, val_store, config)
        history.records.append(MetricRecord(
            epoch=epoch, dice=dice, val_dice=val_dice, ft=ft, val_ft=val_ft,
            iou=iou, val_iou=val_iou))
        history.stop_epoch = epoch

        if val_dice > best_monitor + config.min_delta:
            best_monitor = val_dice
            best_epoch = epoch
            stagnant = 0
            since_lr_drop = 0
            if checkpoint_path is not None:
                state = {k: v.cpu() for k, v in model.state_dict().items()}
                torch.save({"state_dict": state, "epoch": epoch,
                            "val_dice": val_dice, "seed": seed,
                            "label": label, "aug": aug_label},
                           checkpoint_path)
        else:
            stagnant += 1
            since_lr_drop += 1

        if stagnant >= config.early_stop_patience:
            break
        if since_lr_drop >= config.plateau_patience:
            lr *= config.plateau_factor
            for group in optimizer.param_groups:
                group["lr"] = lr
            since_lr_drop = 0
        if config.time_budget_s is not None \
                and time.monotonic() - started > config.time_budget_s:
            raise OutOfBudget(
                f"exceeded {config.time_budget_s}s after epoch {epoch}")

    if run_dir is not None:
        history.to_csv(run_dir / "metrics.csv")
        config.save(run_dir / "config.json")
        _atomic_write(run_dir / "manifest.json", json.dumps({
            "completed": True, "diverged": False, "label": label,
            "aug": aug_label, "seed": seed, "stop_epoch": history.stop_epoch,
            "best_epoch": best_epoch,
            "best_val_dice": None if best_epoch == 0 else best_monitor,
            "lrs": lrs,
            "pretrained_backbone": bool(getattr(model, "pretrained_loaded",
                                                False)),
        }, indent=2) + "\n")
    return history


def run_dir_for(runs_root, label: str, aug_label: str, seed: int) -> Path:
    return Path(runs_root) / str(label) / str(aug_label) / str(seed)


def train_one(spec: ModelSpec, aug: AugConfig, split, config: TrainConfig,
              seed: int, runs_root="runs") -> RunHistory:
    """Train one (model, augmentation, seed) cell and persist its run dir.

    Fully seeded: weight init, shuffling, and augmentation all derive from
    `seed`, so re-running the same cell reproduces the identical history.
    On divergence the manifest records the failure and the error is
    re-raised for the caller to count.
    """
    train_index, val_index = split
    label = spec.label.value
    run_dir = run_dir_for(runs_root, label, aug.label, seed)
    torch.manual_seed(seed)
    model = build_model(spec)
    try:
        return fit(model, train_index, val_index, aug, config, seed,
                   run_dir=run_dir, label=label, aug_label=aug.label)
    except DivergenceDetected:
        run_dir.mkdir(parents=True, exist_ok=True)
        _atomic_write(run_dir / "manifest.json", json.dumps({
            "completed": True, "diverged": True, "label": label,
            "aug": aug.label, "seed": seed}, indent=2) + "\n")
        raise


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1); std 0 when n < 2."""
    values = list(values)
    if not values:
        return float("nan"), float("nan")
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return mean, std


@dataclass
class ExperimentResult:
    """Aggregated 5-seed outcome for one (model, augmentation) cell."""

    label: str
    aug: str
    histories: list[RunHistory]
    diverged: int = 0
    best_stats: dict = field(default_factory=dict)
    speed_mean: float = float("nan")
    speed_std: float = float("nan")
    speed_failures: int = 0
    delta_stats: dict = field(default_factory=dict)

    @property
    def n_seeds(self) -> int:
        return len(self.histories) + self.diverged


def aggregate(label: str, aug_label: str, histories: list[RunHistory],
              diverged: int = 0, speed_threshold: float = 0.8,
              delta_after_epoch: int = 15) -> ExperimentResult:
    """Aggregate per-seed histories into the table statistics.

    Metric mean/std run over every non-diverged seed; training speed runs
    only over seeds that reached the dice threshold, the rest counting as
    failures alongside diverged seeds.
    """
    result = ExperimentResult(label=label, aug=aug_label,
                              histories=histories, diverged=diverged)
    if histories:
        bests = [h.best() for h in histories]
        result.best_stats = {col: mean_std([b[col] for b in bests])
                             for col in bests[0]}
        speeds = [training_speed(h, speed_threshold) for h in histories]
        reached = [s for s in speeds if s is not None]
        result.speed_failures = diverged + speeds.count(None)
        if reached:
            result.speed_mean, result.speed_std = mean_std(reached)
        pooled: dict[str, list[float]] = {}
        for h in histories:
            for stem, gaps in h.deltas_after(delta_after_epoch).items():
                pooled.setdefault(stem, []).extend(gaps)
        result.delta_stats = {stem: mean_std(gaps)
                              for stem, gaps in pooled.items() if gaps}
    else:
        result.speed_failures = diverged
    return result


def _load_completed(run_dir: Path) -> tuple[RunHistory | None, bool]:
    """(history, diverged) for a completed run dir, else (None, False)."""
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        return None, False
    manifest = json.loads(manifest_path.read_text())
    if not manifest.get("completed"):
        return None, False
    if manifest.get("diverged"):
        return None, True
    history = RunHistory.from_csv(run_dir / "metrics.csv",
                                  model=manifest["label"],
                                  aug=manifest["aug"],
                                  seed=manifest["seed"])
    return history, False


def run_experiment(label, aug_label: str, split, config: TrainConfig,
                   seeds=DEFAULT_SEEDS, runs_root="runs",
                   spec: ModelSpec | None = None) -> ExperimentResult:
    """Train one (model, augmentation) cell over all seeds and aggregate.

    Seeds whose run directory already holds a completion manifest are
    loaded instead of retrained, making the experiment resumable.
    """
    if spec is None:
        spec = default_spec(label)
    aug = AugConfig.from_label(aug_label)
    histories = []
    diverged = 0
    for seed in seeds:
        run_dir = run_dir_for(runs_root, spec.label.value, aug_label, seed)
        history, was_diverged = _load_completed(run_dir)
        if was_diverged:
            diverged += 1
            continue
        if history is None:
            try:
                history = train_one(spec, aug, split, config, seed,
                                    runs_root=runs_root)
            except DivergenceDetected:
                logger.warning("seed %d diverged for %s/%s", seed,
                               spec.label.value, aug_label)
                diverged += 1
                continue
        histories.append(history)
    return aggregate(spec.label.value, aug_label, histories, diverged)


def run_grid(labels, aug_labels, split, config: TrainConfig,
             seeds=DEFAULT_SEEDS, runs_root="runs") -> list[ExperimentResult]:
    """Run every (label, aug) cell; completed runs are skipped."""
    results = []
    for label in labels:
        for aug_label in aug_labels:
            results.append(run_experiment(label, aug_label, split, config,
                                          seeds=seeds, runs_root=runs_root))
    return results


def collect_results(runs_root, labels, aug_labels,
                    seeds=DEFAULT_SEEDS) -> list[ExperimentResult]:
    """Aggregate persisted runs without training; raise IncompleteGrid
    listing any (label, aug, seed) cell that has no completion manifest."""
    results = []
    missing = []
    for label in labels:
        label = getattr(label, "value", label)
        for aug_label in aug_labels:
            histories = []
            diverged = 0
            for seed in seeds:
                run_dir = run_dir_for(runs_root, label, aug_label, seed)
                history, was_diverged = _load_completed(run_dir)
                if was_diverged:
                    diverged += 1
                elif history is None:
                    missing.append((label, aug_label, seed))
                else:
                    histories.append(history)
            results.append(aggregate(label, aug_label, histories, diverged))
    if missing:
        raise IncompleteGrid(missing)
    return results


def overfit_single_batch(label, samples: list[Sample], steps: int = 200,
                         lr: float = 0.05, seed: int = 1,
                         spec: ModelSpec | None = None) -> list[float]:
    """Sanity harness: drive one fixed batch toward memorization.

    Returns the per-step train dice trace; a healthy implementation pushes
    a small batch to near-perfect dice within a couple hundred steps.
    """
    if spec is None:
        spec = default_spec(label)
    torch.manual_seed(seed)
    model = build_model(spec)
    model.to(select_device())
    x, y = to_tensors(samples)
    x, y = x.to(select_device()), y.to(select_device())
    optimizer = torch.optim.SGD(model.parameters(), lr=lr, momentum=0.9)
    trace = []
    model.train()
    for _ in range(steps):
        proba = model(x)
        loss = dice_loss(y, proba)
        if not torch.isfinite(loss):
            raise DivergenceDetected("non-finite loss in overfit harness")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        trace.append(1.0 - float(loss.detach()))
    return trace
