"""Dataset ingestion: pairing, splitting, loading, and split persistence.

Expects the ISIC 2016 on-disk convention: JPEG images named
``ISIC_<id>.jpg`` with PNG masks named ``ISIC_<id>_Segmentation.png``,
anywhere under a root directory (images and masks may live in separate
subfolders).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import DecodeError, EmptyDataset, InvalidFraction, MissingMask

logger = logging.getLogger(__name__)

MASK_THRESHOLD = 127
DEFAULT_SIZE = (256, 256)


@dataclass(frozen=True)
class Layout:
    """Naming convention that pairs an image file with its mask file."""

    image_glob: str = "*.jpg"
    mask_suffix: str = "_Segmentation.png"

    def mask_name(self, image_path: Path) -> str:
        return image_path.stem + self.mask_suffix


ISIC2016 = Layout()


@dataclass
class DatasetIndex:
    """Ordered (image_path, mask_path) records for one split."""

    records: list[tuple[Path, Path]] = field(default_factory=list)
    split_tag: str = "train"

    def __len__(self) -> int:
        return len(self.records)

    def ids(self) -> list[str]:
        return [img.stem for img, _ in self.records]

    def subset(self, ids, split_tag: str) -> "DatasetIndex":
        wanted = set(ids)
        picked = [rec for rec in self.records if rec[0].stem in wanted]
        missing = wanted - {rec[0].stem for rec in picked}
        if missing:
            raise KeyError(f"ids absent from index: {sorted(missing)[:5]}")
        return DatasetIndex(records=picked, split_tag=split_tag)


@dataclass
class Sample:
    """One image/mask pair, resized and normalized."""

    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    mask: np.ndarray   # H x W float32 in {0, 1}
    id: str


def scan_dataset(root_dir, layout: Layout = ISIC2016,
                 split_tag: str = "train") -> DatasetIndex:
    """Walk `root_dir`, pair every image with its mask, return the index.

    Parameters
    ----------
    root_dir : path
        Directory containing images and masks (possibly in subfolders).
    layout : Layout
        Naming convention; defaults to the ISIC 2016 segmentation suffix.

    Raises
    ------
    EmptyDataset
        No files match the image pattern.
    MissingMask
        One or more images have no mask file; the unmatched image names
        are carried on the exception.
    """
    root = Path(root_dir)
    images = sorted(root.rglob(layout.image_glob))
    if not images:
        raise EmptyDataset(f"no images matching {layout.image_glob!r} under {root}")

    masks_by_name = {p.name: p for p in root.rglob("*" + layout.mask_suffix)}
    records, unmatched = [], []
    for img in images:
        mask = masks_by_name.get(layout.mask_name(img))
        if mask is None:
            unmatched.append(img.name)
        else:
            records.append((img, mask))
    if unmatched:
        raise MissingMask(unmatched)
    return DatasetIndex(records=records, split_tag=split_tag)


def split_train_val(index: DatasetIndex, val_fraction: float,
                    seed: int) -> tuple[DatasetIndex, DatasetIndex]:
    """Deterministically partition an index into train and val splits.

    The permutation is drawn from ``numpy.random.default_rng(seed)``, so a
    given (index, val_fraction, seed) triple always produces the identical
    disjoint, exhaustive partition. 900 records at fraction 0.2 give
    720/180.
    """
    if not 0.0 < val_fraction < 1.0:
        raise InvalidFraction(f"val_fraction must lie in (0, 1), got {val_fraction}")
    if len(index) == 0:
        raise EmptyDataset("cannot split an empty index")

    n_val = int(round(len(index) * val_fraction))
    # Keep both endpoints non-degenerate for tiny indexes.
    n_val = min(max(n_val, 1), len(index) - 1)
    perm = np.random.default_rng(seed).permutation(len(index))
    val_pos = set(perm[:n_val].tolist())
    train_recs = [rec for i, rec in enumerate(index.records) if i not in val_pos]
    val_recs = [rec for i, rec in enumerate(index.records) if i in val_pos]
    return (DatasetIndex(records=train_recs, split_tag="train"),
            DatasetIndex(records=val_recs, split_tag="val"))


def load_sample(record: tuple[Path, Path],
                target_size: tuple[int, int] = DEFAULT_SIZE) -> Sample:
    """Load, resize, and normalize one (image_path, mask_path) record.

    The image is resized bilinearly and scaled to [0, 1]; the mask is
    resized with nearest-neighbor and binarized at threshold 127/255
    (defensive: nearest-neighbor already preserves binarity).
    """
    image_path, mask_path = Path(record[0]), Path(record[1])
    h, w = target_size

    bgr = cv2.imread(str(image_path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise DecodeError(f"unreadable image: {image_path}")
    raw_mask = cv2.imread(str(mask_path), cv2.IMREAD_GRAYSCALE)
    if raw_mask is None:
        raise DecodeError(f"unreadable mask: {mask_path}")

    if bgr.shape[:2] != raw_mask.shape[:2]:
        # Recoverable: both are resized to target independently.
        logger.warning("native sizes disagree for %s: image %s vs mask %s",
                       image_path.stem, bgr.shape[:2], raw_mask.shape[:2])

    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    image = cv2.resize(rgb, (w, h), interpolation=cv2.INTER_LINEAR)
    image = np.clip(image.astype(np.float32) / 255.0, 0.0, 1.0)

    mask = cv2.resize(raw_mask, (w, h), interpolation=cv2.INTER_NEAREST)
    mask = (mask > MASK_THRESHOLD).astype(np.float32)
    return Sample(image=image, mask=mask, id=image_path.stem)


def save_split(path, train: DatasetIndex, val: DatasetIndex,
               seed: int, val_fraction: float) -> Path:
    """Persist a split manifest so later runs reuse the identical split."""
    manifest = {
        "seed": seed,
        "val_fraction": val_fraction,
        "splits": {"train": train.ids(), "val": val.ids()},
    }
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_split(path, index: DatasetIndex) -> tuple[DatasetIndex, DatasetIndex]:
    """Rebuild (train, val) indexes from a manifest written by save_split."""
    manifest = json.loads(Path(path).read_text())
    splits = manifest["splits"]
    return (index.subset(splits["train"], "train"),
            index.subset(splits["val"], "val"))
