"""Result tables and figures regenerated from persisted run histories.

Every artifact here is a pure function of the run directories' CSVs, so
regenerating from the same runs tree is byte-identical. Cells are rendered
as "mean±std" where std is the sample standard deviation (n-1 denominator);
raw values keep full precision until render time.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import cv2
import matplotlib.pyplot as plt
import numpy as np

from .errors import IncompleteGrid
from .metrics import CSV_COLUMNS, METRIC_STEMS, delta_m, training_speed
from .models import predict_mask
from .train import mean_std

TABLE_KINDS = ("by_model", "by_aug", "speed", "overfitting", "overall",
               "per_aug_detail")
METRIC_DECIMALS = 2
DELTA_DECIMALS = 3
SPEED_DECIMALS = 1
NO_VALUE = "-"
STD_FOOTNOTE = "std is the sample standard deviation (n-1 denominator)"
OVERALL_COLUMNS = ("dice-score", "iou-score", "training-speed",
                   "overfitting-dice", "overfitting-iou")


def fmt_value(x, decimals: int) -> str:
    """Round to `decimals` places, then trim trailing zeros but keep one
    digit after the point (0.20 -> "0.2", 0.004 at 2 places -> "0.0")."""
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return NO_VALUE
    s = f"{float(x):.{decimals}f}"
    if "." in s:
        s = s.rstrip("0")
        if s.endswith("."):
            s += "0"
    return s


def fmt_pm(mean: float, std: float, decimals: int) -> str:
    if np.isnan(mean):
        return NO_VALUE
    return f"{fmt_value(mean, decimals)}±{fmt_value(std, decimals)}"


@dataclass(frozen=True)
class TableArtifact:
    """One rendered result table: ordered rows of pre-formatted cells."""

    kind: str
    title: str
    columns: tuple[str, ...]
    rows: tuple[tuple[str, tuple[str, ...]], ...]
    provenance: tuple[str, ...] = ()
    best: tuple[tuple[str, str], ...] = ()
    footer: str = STD_FOOTNOTE
    name: str = ""  # file stem; defaults to the kind

    def __post_init__(self):
        if self.kind not in TABLE_KINDS:
            raise ValueError(f"unknown table kind {self.kind!r}")
        for label, cells in self.rows:
            if len(cells) != len(self.columns):
                raise ValueError(f"row {label!r} has {len(cells)} cells for "
                                 f"{len(self.columns)} columns")

    def cell(self, row_label: str, column: str) -> str:
        col = self.columns.index(column)
        for label, cells in self.rows:
            if label == row_label:
                return cells[col]
        raise KeyError(row_label)

    def row_labels(self) -> tuple[str, ...]:
        return tuple(label for label, _ in self.rows)

    def to_text(self) -> str:
        best = set(self.best)
        head = ("",) + self.columns
        body = []
        for label, cells in self.rows:
            marked = tuple(
                c + (" *" if (col, label) in best else "")
                for col, c in zip(self.columns, cells))
            body.append((label,) + marked)
        widths = [max(len(row[i]) for row in [head] + body)
                  for i in range(len(head))]
        lines = [self.title,
                 "  ".join(h.ljust(w) for h, w in zip(head, widths)).rstrip(),
                 "  ".join("-" * w for w in widths)]
        for row in body:
            lines.append("  ".join(c.ljust(w)
                                   for c, w in zip(row, widths)).rstrip())
        lines.append("")
        if self.best:
            lines.append("* best value in the column")
        lines.append(self.footer)
        return "\n".join(lines) + "\n"

    def to_csv_text(self) -> str:
        lines = ["label," + ",".join(self.columns)]
        for label, cells in self.rows:
            lines.append(",".join((label,) + cells))
        return "\n".join(lines) + "\n"

    def save(self, out_dir, stem: str | None = None) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or self.name or self.kind
        txt = out_dir / f"{stem}.txt"
        csv = out_dir / f"{stem}.csv"
        txt.write_text(self.to_text())
        csv.write_text(self.to_csv_text())
        return [txt, csv]


def _grid(results) -> tuple[list[str], list[str], dict]:
    """Row/column orders and the cell map; a hole in the cross product of
    the labels and augs present is an error, never silently dropped."""
    labels: list[str] = []
    augs: list[str] = []
    cells = {}
    for r in results:
        if r.label not in labels:
            labels.append(r.label)
        if r.aug not in augs:
            augs.append(r.aug)
        cells[(r.label, r.aug)] = r
    missing = [(l, a) for l in labels for a in augs if (l, a) not in cells]
    if missing:
        raise IncompleteGrid(missing)
    return labels, augs, cells


def _provenance(results) -> tuple[str, ...]:
    return tuple(f"{h.model}/{h.aug}/{h.seed}"
                 for r in results for h in r.histories)


def _pool_best(subset, column) -> list[float]:
    return [h.best()[column] for r in subset for h in r.histories]


def _best_row(results) -> tuple[str, ...]:
    """Six formatted mean±std cells pooled over every seed in `results`."""
    return tuple(fmt_pm(*mean_std(_pool_best(results, col)), METRIC_DECIMALS)
                 for col in CSV_COLUMNS[1:])


def table_by_model(results) -> TableArtifact:
    """Best-obtained metrics per model, pooled over augmentations and seeds."""
    labels, augs, cells = _grid(results)
    rows = tuple(
        (label, _best_row([cells[(label, a)] for a in augs]))
        for label in labels)
    return TableArtifact(
        kind="by_model",
        title="Best metrics per model, averaged over augmentation "
              "configurations",
        columns=CSV_COLUMNS[1:], rows=rows, provenance=_provenance(results))


def table_by_aug(results) -> TableArtifact:
    """Best-obtained metrics per augmentation, pooled over models and seeds."""
    labels, augs, cells = _grid(results)
    rows = tuple(
        (aug, _best_row([cells[(l, aug)] for l in labels]))
        for aug in augs)
    return TableArtifact(
        kind="by_aug",
        title="Best metrics per augmentation configuration, averaged over "
              "models",
        columns=CSV_COLUMNS[1:], rows=rows, provenance=_provenance(results))


def table_per_aug_detail(results, aug: str) -> TableArtifact:
    """Per-model breakdown for a single augmentation configuration."""
    labels, augs, cells = _grid(results)
    if aug not in augs:
        raise IncompleteGrid([(label, aug) for label in labels] or [aug])
    subset = [cells[(label, aug)] for label in labels]
    rows = tuple((label, _best_row([cells[(label, aug)]]))
                 for label in labels)
    return TableArtifact(
        kind="per_aug_detail",
        title=f"Best metrics per model for {aug}",
        columns=CSV_COLUMNS[1:], rows=rows, provenance=_provenance(subset),
        name=f"per_aug_detail_{aug}")


def _speed_pool(subset, threshold: float) -> tuple[list[int], int]:
    """(epochs that crossed, failures) over every seed in `subset`;
    failures count diverged seeds and seeds that never crossed."""
    epochs = []
    failures = 0
    for r in subset:
        failures += r.diverged
        for h in r.histories:
            e = training_speed(h, threshold)
            if e is None:
                failures += 1
            else:
                epochs.append(e)
    return epochs, failures


def table_speed(results, threshold: float = 0.8) -> TableArtifact:
    """First-epoch-over-threshold statistics per model."""
    labels, augs, cells = _grid(results)
    rows = []
    for label in labels:
        epochs, failures = _speed_pool(
            [cells[(label, a)] for a in augs], threshold)
        mean, std = mean_std(epochs)
        rows.append((label, (fmt_value(mean, SPEED_DECIMALS),
                             fmt_value(std, SPEED_DECIMALS),
                             str(failures))))
    return TableArtifact(
        kind="speed",
        title=f"Training speed: epoch where train dice first reaches "
              f"{threshold}",
        columns=("mean-epoch", "std-epoch", "failures"),
        rows=tuple(rows), provenance=_provenance(results))


def _delta_pool(subset, after_epoch: int) -> dict[str, list[float]]:
    pooled: dict[str, list[float]] = {stem: [] for stem in METRIC_STEMS}
    for r in subset:
        for h in r.histories:
            for stem, gaps in h.deltas_after(after_epoch).items():
                pooled[stem].extend(gaps)
    return pooled


def table_overfitting(results, after_epoch: int = 15) -> TableArtifact:
    """Per-epoch |train - val| gaps after `after_epoch`, pooled per model."""
    labels, augs, cells = _grid(results)
    rows = []
    for label in labels:
        pooled = _delta_pool([cells[(label, a)] for a in augs], after_epoch)
        rows.append((label, tuple(
            fmt_pm(*mean_std(pooled[stem]), DELTA_DECIMALS)
            for stem in METRIC_STEMS)))
    return TableArtifact(
        kind="overfitting",
        title=f"Overfitting gaps after epoch {after_epoch}, averaged over "
              "augmentation configurations",
        columns=METRIC_STEMS, rows=tuple(rows),
        provenance=_provenance(results))


def table_overall(results, subset=None, threshold: float = 0.8,
                  after_epoch: int = 15) -> TableArtifact:
    """Summary scoreboard: validation dice/iou, speed, and overfitting gaps
    for a chosen model subset, with the best cell per column flagged.

    Cells are taken verbatim from the by_model, speed, and overfitting
    tables so any value shared between tables is identical.
    """
    labels, augs, cells = _grid(results)
    by_model = table_by_model(results)
    speed = table_speed(results, threshold)
    overfit = table_overfitting(results, after_epoch)
    chosen = list(subset) if subset is not None else labels
    unknown = [l for l in chosen if l not in labels]
    if unknown:
        raise IncompleteGrid([(l, a) for l in unknown for a in augs])

    rows = tuple(
        (label, (by_model.cell(label, "val_dice"),
                 by_model.cell(label, "val_iou"),
                 speed.cell(label, "mean-epoch"),
                 overfit.cell(label, "dice"),
                 overfit.cell(label, "iou")))
        for label in chosen)

    raw = {}
    for label in chosen:
        model_cells = [cells[(label, a)] for a in augs]
        epochs, _ = _speed_pool(model_cells, threshold)
        pooled = _delta_pool(model_cells, after_epoch)
        raw[label] = (
            mean_std(_pool_best(model_cells, "val_dice"))[0],
            mean_std(_pool_best(model_cells, "val_iou"))[0],
            mean_std(epochs)[0],
            mean_std(pooled["dice"])[0],
            mean_std(pooled["iou"])[0],
        )
    higher_wins = (True, True, False, False, False)
    best = []
    for i, col in enumerate(OVERALL_COLUMNS):
        scored = [(raw[l][i], l) for l in chosen if not np.isnan(raw[l][i])]
        if not scored:
            continue
        pick = max(scored, key=lambda t: t[0]) if higher_wins[i] \
            else min(scored, key=lambda t: t[0])
        best.append((col, pick[1]))
    return TableArtifact(
        kind="overall", title="Overall comparison",
        columns=OVERALL_COLUMNS, rows=rows, best=tuple(best),
        provenance=_provenance(results))


def gap_series(history, stem: str) -> tuple[list[int], list[float]]:
    """(epochs, |train - val| gaps) for one run and metric stem."""
    epochs = [rec.epoch for rec in history.records]
    gaps = [delta_m(rec.value(stem), rec.value(stem, val=True))
            for rec in history.records]
    return epochs, gaps


def plot_delta_curves(results, out_dir) -> list[Path]:
    """One PNG per metric: the |train - val| gap per epoch, one line per
    (model, aug, seed) run. Rendering is deterministic for fixed inputs."""
    histories = [h for r in results for h in r.histories]
    if not histories:
        return []
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for stem in METRIC_STEMS:
        fig, ax = plt.subplots(figsize=(8, 5), dpi=100)
        for h in histories:
            epochs, gaps = gap_series(h, stem)
            ax.plot(epochs, gaps, linewidth=1.0,
                    label=f"{h.model}/{h.aug}/seed{h.seed}")
        ax.set_xlabel("epoch")
        ax.set_ylabel(f"|train - val| {stem}")
        ax.set_title(f"Overfitting gap per epoch ({stem})")
        if len(histories) <= 12:
            ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"delta_{stem}.png"
        fig.savefig(path, metadata={"Software": "lesionseg"})
        plt.close(fig)
        paths.append(path)
    return paths


def _to_rgb_u8(plane: np.ndarray) -> np.ndarray:
    if plane.ndim == 2:
        plane = np.repeat(plane[..., None], 3, axis=2)
    return np.clip(plane * 255.0, 0, 255).astype(np.uint8)


def render_overlays(models, samples, out_path,
                    threshold: float = 0.5) -> np.ndarray:
    """Prediction grid PNG: one row per sample, columns = input image,
    ground truth, then one mask per (name, model) pair."""
    rows = []
    for s in samples:
        panels = [_to_rgb_u8(s.image), _to_rgb_u8(s.mask)]
        for _, model in models:
            panels.append(_to_rgb_u8(predict_mask(model, s.image, threshold)))
        rows.append(np.concatenate(panels, axis=1))
    grid = np.concatenate(rows, axis=0)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(out_path), grid[..., ::-1])
    return grid


def build_tables(results, overall_subset=None) -> list[TableArtifact]:
    """All six table kinds (one per_aug_detail per augmentation)."""
    _, augs, _ = _grid(results)
    tables = [table_by_model(results), table_by_aug(results),
              table_speed(results), table_overfitting(results),
              table_overall(results, subset=overall_subset)]
    tables.extend(table_per_aug_detail(results, aug) for aug in augs)
    return tables


def write_report(results, out_dir, overall_subset=None,
                 figures: bool = True) -> list[Path]:
    """Write every table (text + CSV), the gap figures, and a single
    document assembling them. Returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    sections = []
    for table in build_tables(results, overall_subset=overall_subset):
        paths.extend(table.save(out_dir / "tables"))
        sections.append(f"## {table.title}\n\n```\n{table.to_text()}```\n")
    figure_paths = []
    if figures:
        figure_paths = plot_delta_curves(results, out_dir / "figures")
        paths.extend(figure_paths)
    doc = ["# Run report", ""]
    doc.extend(sections)
    if figure_paths:
        doc.append("## Figures\n")
        doc.extend(f"![{p.stem}](figures/{p.name})" for p in figure_paths)
        doc.append("")
    doc.append(f"_{STD_FOOTNOTE}._\n")
    report_path = out_dir / "report.md"
    report_path.write_text("\n".join(doc))
    paths.append(report_path)
    return paths
