"""Dataset ingestion, augmentation, synthetic data and fold plans.

Masks carry raw labels: 0 background, 1 ground-glass opacity, 2 consolidation,
3 pleural effusion.  Images are single-channel float32 in [0, 1].  On disk a
dataset is a directory with ``images/`` and ``masks/`` holding identically
named 8-bit PNGs and a ``manifest.tsv`` of ``id<TAB>image<TAB>mask`` lines.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

__all__ = [
    "LABELS",
    "FULL_SIZE",
    "DESK_SIZE",
    "DataError",
    "SegmentationSample",
    "FoldPlan",
    "ingest",
    "rotate",
    "scale",
    "augment_dataset",
    "source_id",
    "make_folds",
    "synth_dataset",
    "write_dataset",
    "read_dataset",
    "write_folds",
    "read_folds",
]

LABELS = (0, 1, 2, 3)
FULL_SIZE = 368
DESK_SIZE = 96
ROTATIONS = (90, 180, 270)
SCALES = (0.5, 1.5)
_DERIVED = re.compile(r"^(?P<src>.+)_(?:rot(?:90|180|270)|scale(?:0\.5|1\.5))$")


class DataError(ValueError):
    pass


@dataclass
class SegmentationSample:
    image: np.ndarray  # (1, H, W) float32
    mask: np.ndarray  # (H, W) uint8
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 1 or self.image.shape[1:] != self.mask.shape:
            raise DataError(f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} are not aligned")


def _check_labels(mask: np.ndarray, where: str) -> None:
    bad = sorted(set(np.unique(mask).tolist()) - set(LABELS))
    if bad:
        raise DataError(f"{where}: unexpected mask values {bad}; allowed {list(LABELS)}")


def _resize_image(img: np.ndarray, h: int, w: int) -> np.ndarray:
    if img.shape == (h, w):
        return img.astype(np.float32)
    return np.asarray(Image.fromarray(img.astype(np.float32)).resize((w, h), Image.BILINEAR), dtype=np.float32)


def _resize_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    if mask.shape == (h, w):
        return mask.astype(np.uint8)
    return np.asarray(Image.fromarray(mask.astype(np.uint8)).resize((w, h), Image.NEAREST), dtype=np.uint8)


def ingest(image_path, mask_path, size: int = FULL_SIZE, sample_id: str | None = None) -> SegmentationSample:
    """Load an image/mask pair: luminance grayscale, resized to ``size`` x ``size``, scaled to [0, 1]."""
    try:
        with Image.open(image_path) as im:
            gray = np.asarray(im.convert("L"), dtype=np.float32)
        with Image.open(mask_path) as im:
            if im.mode not in ("L", "P", "I", "I;16"):
                raise DataError(f"{mask_path}: mask must be single-channel, got mode {im.mode}")
            mask = np.asarray(im)
    except OSError as exc:
        raise DataError(f"unreadable file: {exc}") from exc
    if gray.shape != mask.shape:
        raise DataError(f"{image_path} is {gray.shape} but {mask_path} is {mask.shape}")
    _check_labels(mask, str(mask_path))
    image = np.clip(_resize_image(gray, size, size) / 255.0, 0.0, 1.0)
    mask = _resize_mask(mask, size, size)
    return SegmentationSample(image[None].astype(np.float32), mask, sample_id or Path(image_path).stem)


# -- geometric augmentation ----------------------------------------------


def rotate(sample: SegmentationSample, degrees: int) -> SegmentationSample:
    """Clockwise rotation by 90, 180 or 270 degrees, applied identically to image and mask."""
    if degrees not in ROTATIONS:
        raise DataError(f"rotation must be one of {ROTATIONS}, got {degrees}")
    h, w = sample.mask.shape
    if h != w:
        raise DataError(f"sample {sample.id}: rotation needs a square sample, got {h}x{w}")
    k = -(degrees // 90)
    return SegmentationSample(
        np.ascontiguousarray(np.rot90(sample.image, k, axes=(1, 2))),
        np.ascontiguousarray(np.rot90(sample.mask, k)),
        f"{sample.id}_rot{degrees}",
    )


def _fit(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    """Center-crop or zero-pad a 2-D array to h x w."""
    out = np.zeros((h, w), dtype=arr.dtype)
    sh, sw = arr.shape
    ch, cw = min(h, sh), min(w, sw)
    sy, sx = (sh - ch) // 2, (sw - cw) // 2
    dy, dx = (h - ch) // 2, (w - cw) // 2
    out[dy : dy + ch, dx : dx + cw] = arr[sy : sy + ch, sx : sx + cw]
    return out


def scale(sample: SegmentationSample, factor: float) -> SegmentationSample:
    """Rescale (bilinear image, nearest mask) then crop or pad with background back to the original extent."""
    if factor <= 0:
        raise DataError(f"scale factor must be positive, got {factor}")
    h, w = sample.mask.shape
    nh, nw = max(1, round(h * factor)), max(1, round(w * factor))
    image = _fit(_resize_image(sample.image[0], nh, nw), h, w)
    mask = _fit(_resize_mask(sample.mask, nh, nw), h, w)
    return SegmentationSample(np.clip(image, 0.0, 1.0)[None], mask, f"{sample.id}_scale{factor:g}")


def augment_dataset(samples: list[SegmentationSample]) -> list[SegmentationSample]:
    """Originals plus three rotations and two rescalings of each; 100 samples become 600."""
    originals = [s for s in samples]
    out = list(originals)
    out += [rotate(s, d) for s in originals for d in ROTATIONS]
    out += [scale(s, f) for s in originals for f in SCALES]
    seen = set()
    for s in out:
        if s.id in seen:
            raise DataError(f"duplicate sample id {s.id!r} after augmentation")
        seen.add(s.id)
    return out


def source_id(sample_id: str) -> str:
    m = _DERIVED.match(sample_id)
    return m.group("src") if m else sample_id


def is_derived(sample_id: str) -> bool:
    return _DERIVED.match(sample_id) is not None


# -- folds -----------------------------------------------------------------


@dataclass
class FoldPlan:
    folds: list[list[str]]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def fold_of(self, sample_id: str) -> int:
        for i, fold in enumerate(self.folds):
            if sample_id in fold:
                return i
        raise KeyError(sample_id)


def make_folds(ids: list[str], k: int, seed: int) -> FoldPlan:
    """Seeded shuffle of source ids dealt round-robin into ``k`` folds.

    Augmented ids (``<src>_rot90`` etc.) follow their source so no fold tests
    on a transformed copy of a training image.
    """
    sources = sorted({source_id(i) for i in ids})
    if k < 1 or k > len(sources):
        raise DataError(f"cannot split {len(sources)} source ids into {k} folds")
    order = np.random.default_rng(seed).permutation(len(sources))
    fold_of = {sources[j]: n % k for n, j in enumerate(order)}
    folds: list[list[str]] = [[] for _ in range(k)]
    for i in ids:
        folds[fold_of[source_id(i)]].append(i)
    return FoldPlan(folds, seed)


def write_folds(plan: FoldPlan, path) -> None:
    lines = [f"{i}\t{sid}\n" for i, fold in enumerate(plan.folds) for sid in fold]
    Path(path).write_text("".join(lines))


def read_folds(path, seed: int = 0) -> FoldPlan:
    folds: dict[int, list[str]] = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            idx, sid = line.split("\t")
            folds.setdefault(int(idx), []).append(sid)
    return FoldPlan([folds[i] for i in sorted(folds)], seed)


# -- synthetic data --------------------------------------------------------


def _synth_one(size: int, rng: np.random.Generator, p_class: float) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = yy / (size - 1) * 2 - 1
    xx = xx / (size - 1) * 2 - 1

    cy, cx = rng.uniform(-0.1, 0.1, 2)
    ay, ax = rng.uniform(0.55, 0.75), rng.uniform(0.6, 0.8)
    theta = rng.uniform(-0.3, 0.3)
    ry = ((yy - cy) * np.cos(theta) - (xx - cx) * np.sin(theta)) / ay
    rx = ((yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)) / ax
    radius = np.sqrt(ry**2 + rx**2)
    lung = radius <= 1.0

    image = np.where(lung, 0.55, 0.08)
    mask = np.zeros((size, size), dtype=np.uint8)

    if rng.random() < p_class:
        # blotchy low-contrast patches: thresholded smooth noise inside a disk
        field = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 24)
        field /= field.std() + 1e-12
        py, px = rng.uniform(-0.35, 0.35, 2)
        disk = (yy - cy - py) ** 2 + (xx - cx - px) ** 2 <= rng.uniform(0.3, 0.45) ** 2
        ggo = disk & (radius <= 0.8) & (field > rng.uniform(-0.3, 0.3))
        mask[ggo] = 1
        image = np.where(ggo, image + 0.14 + 0.04 * field.clip(-1, 1), image)

    if rng.random() < p_class:
        for _ in range(rng.integers(1, 3)):
            ang = rng.uniform(0, 2 * np.pi)
            dist = np.sqrt(rng.uniform(0, 0.3))
            by, bx = cy + dist * np.sin(ang) * ay, cx + dist * np.cos(ang) * ax
            sy, sx = rng.uniform(0.08, 0.15, 2)
            blob = ((yy - by) / sy) ** 2 + ((xx - bx) / sx) ** 2 <= 1.0
            blob &= lung
            mask[blob] = 2
            image = np.where(blob, 0.92, image)

    if rng.random() < p_class:
        # crescent hugging the lung boundary over a random arc
        angle = np.arctan2(ry, rx)
        centre = rng.uniform(-np.pi, np.pi)
        half = rng.uniform(0.5, 1.0)
        arc = np.abs(np.angle(np.exp(1j * (angle - centre)))) <= half
        rim = (radius >= rng.uniform(0.8, 0.87)) & lung & arc
        mask[rim] = 3
        image = np.where(rim, 0.3, image)

    image = image + rng.normal(0.0, 0.03, image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def synth_dataset(n: int, size: int = DESK_SIZE, seed: int = 0, p_class: float = 0.9) -> list[SegmentationSample]:
    """``n`` CT-like slices: a bright ellipse with GGO patches, dense blobs and boundary crescents."""
    rng = np.random.default_rng(seed)
    samples = []
    width = max(3, len(str(n - 1)))
    for i in range(n):
        image, mask = _synth_one(size, rng, p_class)
        samples.append(SegmentationSample(image[None], mask, f"s{i:0{width}d}"))
    return samples


# -- on-disk layout ----------------------------------------------------------


def write_dataset(samples: list[SegmentationSample], out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in sorted(samples, key=lambda s: s.id):
        name = f"{s.id}.png"
        pixels = np.round(np.clip(s.image[0], 0, 1) * 255).astype(np.uint8)
        Image.fromarray(pixels).save(out / "images" / name, optimize=False)
        Image.fromarray(s.mask.astype(np.uint8)).save(out / "masks" / name, optimize=False)
        lines.append(f"{s.id}\timages/{name}\tmasks/{name}\n")
    (out / "manifest.tsv").write_text("".join(lines))
    return out


def read_dataset(data_dir, size: int | None = None) -> list[SegmentationSample]:
    """Load every manifest entry; ``size`` defaults to each image's native extent."""
    root = Path(data_dir)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise DataError(f"{root}: no manifest.tsv")
    samples = []
    for n, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{manifest}:{n}: expected 'id<TAB>image<TAB>mask'")
        sid, img, msk = parts
        target = size
        if target is None:
            with Image.open(root / img) as im:
                target = im.size[0]
        samples.append(ingest(root / img, root / msk, target, sid))
    return samples
