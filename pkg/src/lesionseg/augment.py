"""Augmentation primitives and the four named configurations.

Six primitives: rotation, flips, CutMix, Mosaic, synthetic hair strokes,
and morphological hair removal. Geometric ops transform image and mask
with the same spatial map; photometric ops never touch the mask. Every
stochastic op takes an explicit ``numpy.random.Generator`` so the full
pipeline replays bit-identically from a seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import cv2
import numpy as np

from .dataset import Sample
from .errors import InvalidConfig, ShapeMismatch

# (cutmix, mosaic, hair_aug, hair_removal) per configuration label.
AUG_TABLE = {
    "AUG-1": (False, False, False, False),
    "AUG-2": (True, True, False, False),
    "AUG-3": (True, True, True, False),
    "AUG-4": (True, True, False, True),
}

DEFAULT_PROBS = {
    "rotate": 0.5,
    "flip": 0.5,
    "cutmix": 0.3,
    "mosaic": 0.3,
    "hair_aug": 0.5,
    "hair_removal": 1.0,
}

# CutMix patch geometry.
CUTMIX_AREA_RANGE = (0.1, 0.5)
CUTMIX_ASPECT_RANGE = (0.5, 2.0)

# Hair stroke rendering.
HAIR_COUNT_RANGE = (4, 12)
HAIR_THICKNESS_RANGE = (1, 3)
HAIR_GRAY_RANGE = (10, 40)  # of 255
HAIR_SEGMENTS = 24

# Hair removal (deterministic).
HAIR_KERNEL_SIZE = 17
HAIR_THRESHOLD = 10
INPAINT_RADIUS = 6


@dataclass
class AugConfig:
    """One augmentation configuration (a row of the four-label table)."""

    label: str
    rotation_limit_deg: float = 180.0
    flip_prob: float = 0.5
    cutmix: bool = False
    mosaic: bool = False
    hair_aug: bool = False
    hair_removal: bool = False
    per_op_probs: dict = field(default_factory=lambda: dict(DEFAULT_PROBS))

    def __post_init__(self):
        if self.hair_aug and self.hair_removal:
            raise InvalidConfig("hair_aug and hair_removal are mutually exclusive")
        if not 0.0 < self.rotation_limit_deg <= 180.0:
            raise InvalidConfig(f"rotation limit must be in (0, 180], "
                                f"got {self.rotation_limit_deg}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise InvalidConfig(f"flip_prob={self.flip_prob} outside [0, 1]")
        for name, p in self.per_op_probs.items():
            if not 0.0 <= p <= 1.0:
                raise InvalidConfig(f"probability {name}={p} outside [0, 1]")

    @classmethod
    def from_label(cls, label: str, **overrides) -> "AugConfig":
        if label not in AUG_TABLE:
            raise InvalidConfig(
                f"unknown augmentation label {label!r}; expected one of "
                f"{sorted(AUG_TABLE)}")
        cutmix_f, mosaic_f, hair_a, hair_r = AUG_TABLE[label]
        cfg = cls(label=label, cutmix=cutmix_f, mosaic=mosaic_f,
                  hair_aug=hair_a, hair_removal=hair_r)
        return replace(cfg, **overrides) if overrides else cfg

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "rotation_limit_deg": self.rotation_limit_deg,
            "flip_prob": self.flip_prob,
            "cutmix": self.cutmix,
            "mosaic": self.mosaic,
            "hair_aug": self.hair_aug,
            "hair_removal": self.hair_removal,
            "per_op_probs": dict(self.per_op_probs),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AugConfig":
        return cls(**data)


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent substream keyed by (seed, *keys); stable across runs."""
    digest = hashlib.blake2s(
        "\x1f".join(str(k) for k in keys).encode()).digest()
    return np.random.default_rng(
        np.random.SeedSequence([seed, int.from_bytes(digest[:8], "little")]))


def rotate(sample: Sample, limit_deg: float, rng: np.random.Generator,
           angle: float | None = None) -> Sample:
    """Rotate image and mask jointly by theta ~ Uniform(-limit, +limit).

    Both planes are warped with the same bilinear map; the mask is then
    re-binarized at 0.5, so a channel that equals the mask stays equal to
    it after binarization.
    """
    if not 0.0 < limit_deg <= 180.0:
        raise InvalidConfig(f"rotation limit must be in (0, 180], got {limit_deg}")
    theta = float(rng.uniform(-limit_deg, limit_deg)) if angle is None else angle
    h, w = sample.mask.shape
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), theta, 1.0)
    image = cv2.warpAffine(sample.image, m, (w, h),
                           flags=cv2.INTER_LINEAR, borderValue=0)
    warped = cv2.warpAffine(sample.mask, m, (w, h),
                            flags=cv2.INTER_LINEAR, borderValue=0)
    mask = (warped >= 0.5).astype(np.float32)
    return Sample(image=np.clip(image, 0.0, 1.0), mask=mask, id=sample.id)


def flip(sample: Sample, axis: str, prob: float, rng: np.random.Generator,
         trigger: bool | None = None) -> Sample:
    """Mirror image and mask along one axis with probability `prob`."""
    if axis not in ("horizontal", "vertical"):
        raise InvalidConfig(f"axis must be horizontal or vertical, got {axis!r}")
    if trigger is None:
        trigger = bool(rng.random() < prob)
    if not trigger:
        return Sample(image=sample.image.copy(), mask=sample.mask.copy(),
                      id=sample.id)
    if axis == "horizontal":
        return Sample(image=sample.image[:, ::-1].copy(),
                      mask=sample.mask[:, ::-1].copy(), id=sample.id)
    return Sample(image=sample.image[::-1].copy(),
                  mask=sample.mask[::-1].copy(), id=sample.id)


def _patch_side(lam: float, aspect: float, h: int, w: int) -> tuple[int, int]:
    area = lam * h * w
    pw = int(round(np.sqrt(area * aspect)))
    ph = int(round(np.sqrt(area / aspect)))
    return min(ph, h), min(pw, w)


def cutmix(a: Sample, b: Sample, rng: np.random.Generator,
           lam: float | None = None, aspect: float | None = None,
           src_xy: tuple[int, int] | None = None,
           dst_xy: tuple[int, int] | None = None) -> Sample:
    """Paste a random rectangle of b onto a; the mask patch follows.

    Patch area ratio ~ Uniform(0.1, 0.5), aspect ~ Uniform(0.5, 2); source
    and destination offsets are sampled independently.
    """
    if a.image.shape != b.image.shape or a.mask.shape != b.mask.shape:
        raise ShapeMismatch("cutmix inputs must share shape")
    h, w = a.mask.shape
    if lam is None:
        lam = float(rng.uniform(*CUTMIX_AREA_RANGE))
    if aspect is None:
        aspect = float(rng.uniform(*CUTMIX_ASPECT_RANGE))
    ph, pw = _patch_side(lam, aspect, h, w)
    image, mask = a.image.copy(), a.mask.copy()
    if ph > 0 and pw > 0:
        sy, sx = src_xy if src_xy is not None else (
            int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1)))
        dy, dx = dst_xy if dst_xy is not None else (
            int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1)))
        image[dy:dy + ph, dx:dx + pw] = b.image[sy:sy + ph, sx:sx + pw]
        mask[dy:dy + ph, dx:dx + pw] = b.mask[sy:sy + ph, sx:sx + pw]
    return Sample(image=image, mask=mask, id=a.id)


def mosaic(quad: list[Sample], rng: np.random.Generator,
           center: tuple[int, int] | None = None) -> Sample:
    """Tile four samples into one frame split at a random center point.

    The center is drawn from the central 50% of the frame in each axis;
    quadrant k copies the same region of sample k, masks composited the
    same way.
    """
    if len(quad) != 4:
        raise ShapeMismatch(f"mosaic needs exactly 4 samples, got {len(quad)}")
    shapes = {s.image.shape for s in quad} | {(*s.mask.shape, 3) for s in quad}
    if len(shapes) != 1:
        raise ShapeMismatch("mosaic inputs must share shape")
    h, w = quad[0].mask.shape
    if center is None:
        cy = int(rng.integers(h // 4, 3 * h // 4 + 1))
        cx = int(rng.integers(w // 4, 3 * w // 4 + 1))
    else:
        cy, cx = center
    image = np.empty_like(quad[0].image)
    mask = np.empty_like(quad[0].mask)
    regions = [(slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, w)),
               (slice(cy, h), slice(0, cx)), (slice(cy, h), slice(cx, w))]
    for s, (rows, cols) in zip(quad, regions):
        image[rows, cols] = s.image[rows, cols]
        mask[rows, cols] = s.mask[rows, cols]
    return Sample(image=image, mask=mask, id=quad[0].id)


def stroke_length_bound(shape: tuple[int, int]) -> int:
    """Upper bound on the pixel footprint of one thickness-1 hair stroke."""
    span = min(shape) // 4
    # Bezier arc length <= control polygon length (3 segments, each within
    # a span-radius box), plus one pixel per rasterized segment and caps.
    return int(3 * span * np.sqrt(2)) + HAIR_SEGMENTS + 8


def _bezier_points(p: np.ndarray, segments: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, segments + 1)[:, None]
    return ((1 - t) ** 3 * p[0] + 3 * (1 - t) ** 2 * t * p[1]
            + 3 * (1 - t) * t ** 2 * p[2] + t ** 3 * p[3])


def hair_augment(sample: Sample, rng: np.random.Generator,
                 n_strokes: int | None = None) -> Sample:
    """Draw 4 to 12 dark cubic-arc strokes on the image only.

    Strokes are rasterized as polylines along random cubic Bezier curves,
    thickness 1 to 3 px, gray level in (10..40)/255. The mask is returned
    byte-identical.
    """
    if n_strokes is None:
        n_strokes = int(rng.integers(HAIR_COUNT_RANGE[0], HAIR_COUNT_RANGE[1] + 1))
    h, w = sample.mask.shape
    span = min(h, w) // 4
    image = sample.image.copy()
    for _ in range(n_strokes):
        start = rng.uniform([0, 0], [w - 1, h - 1])
        offsets = rng.uniform(-span, span, size=(3, 2))
        control = np.vstack([start, start + np.cumsum(offsets, axis=0)])
        pts = _bezier_points(control, HAIR_SEGMENTS)
        pts = np.clip(pts, [0, 0], [w - 1, h - 1]).astype(np.int32)
        thickness = int(rng.integers(HAIR_THICKNESS_RANGE[0],
                                     HAIR_THICKNESS_RANGE[1] + 1))
        gray = float(rng.uniform(*HAIR_GRAY_RANGE)) / 255.0
        canvas = np.zeros((h, w), dtype=np.uint8)
        cv2.polylines(canvas, [pts.reshape(-1, 1, 2)], False, 255,
                      thickness=thickness, lineType=cv2.LINE_8)
        image[canvas > 0] = gray
    return Sample(image=image, mask=sample.mask.copy(), id=sample.id)


def hair_remove(sample: Sample) -> Sample:
    """Deterministic hair removal: black-hat detection plus inpainting.

    Grayscale -> morphological black-hat with a 17x17 cross -> binary
    threshold -> Telea inpainting of the flagged pixels. The mask is
    returned byte-identical.
    """
    img8 = (np.clip(sample.image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    gray = cv2.cvtColor(img8, cv2.COLOR_RGB2GRAY)
    kernel = cv2.getStructuringElement(
        cv2.MORPH_CROSS, (HAIR_KERNEL_SIZE, HAIR_KERNEL_SIZE))
    blackhat = cv2.morphologyEx(gray, cv2.MORPH_BLACKHAT, kernel)
    _, flagged = cv2.threshold(blackhat, HAIR_THRESHOLD, 255, cv2.THRESH_BINARY)
    if int(flagged.sum()) == 0:
        image = img8
    else:
        image = cv2.inpaint(img8, flagged, INPAINT_RADIUS, cv2.INPAINT_TELEA)
    return Sample(image=image.astype(np.float32) / 255.0,
                  mask=sample.mask.copy(), id=sample.id)


@dataclass
class Pipeline:
    """Composed batch augmentation for one configuration."""

    config: AugConfig
    ops: list[str]

    def __call__(self, batch: list[Sample], seed: int) -> list[Sample]:
        cfg = self.config
        probs = cfg.per_op_probs
        out = []
        for sample in batch:
            rng = derive_rng(seed, cfg.label, sample.id)
            if "hair_removal" in self.ops and rng.random() < probs["hair_removal"]:
                sample = hair_remove(sample)
            if "hair_aug" in self.ops and rng.random() < probs["hair_aug"]:
                sample = hair_augment(sample, rng)
            if rng.random() < probs["rotate"]:
                sample = rotate(sample, cfg.rotation_limit_deg, rng)
            sample = flip(sample, "horizontal", cfg.flip_prob, rng)
            sample = flip(sample, "vertical", cfg.flip_prob, rng)
            out.append(sample)

        batch_rng = derive_rng(seed, cfg.label, "batch")
        if "cutmix" in self.ops and len(out) >= 2 \
                and batch_rng.random() < probs["cutmix"]:
            partners = batch_rng.permutation(len(out))
            out = [cutmix(s, out[int(j)], derive_rng(seed, cfg.label, s.id, "cutmix"))
                   for s, j in zip(out, partners)]
        if "mosaic" in self.ops and len(out) >= 4 \
                and batch_rng.random() < probs["mosaic"]:
            mixed = []
            for i, s in enumerate(out):
                srng = derive_rng(seed, cfg.label, s.id, "mosaic")
                others = [int(k) for k in srng.choice(len(out), size=3, replace=False)]
                mixed.append(mosaic([s] + [out[k] for k in others], srng))
            out = mixed
        return out


def build_pipeline(config: AugConfig) -> Pipeline:
    """Compose the op sequence for a configuration.

    Order: hair_removal -> hair_aug -> rotate -> flips -> cutmix/mosaic,
    so inpainting sees unrotated hair structure and mixing ops act on
    finished singles.
    """
    if not isinstance(config, AugConfig):
        raise InvalidConfig(f"expected AugConfig, got {type(config).__name__}")
    ops = []
    if config.hair_removal:
        ops.append("hair_removal")
    if config.hair_aug:
        ops.append("hair_aug")
    ops.extend(["rotate", "flip"])
    if config.cutmix:
        ops.append("cutmix")
    if config.mosaic:
        ops.append("mosaic")
    return Pipeline(config=config, ops=ops)


def render_preview(batch: list[Sample], config: AugConfig, seed: int,
                   path) -> "str":
    """Write a before/after panel PNG: one row per sample, four columns
    (image, mask, augmented image, augmented mask)."""
    pipeline = build_pipeline(config)
    augmented = pipeline(batch, seed)
    rows = []
    for before, after in zip(batch, augmented):
        cells = [before.image,
                 np.repeat(before.mask[..., None], 3, axis=2),
                 after.image,
                 np.repeat(after.mask[..., None], 3, axis=2)]
        rows.append(np.hstack([(c * 255).astype(np.uint8) for c in cells]))
    panel = np.vstack(rows)
    cv2.imwrite(str(path), cv2.cvtColor(panel, cv2.COLOR_RGB2BGR))
    return str(path)
