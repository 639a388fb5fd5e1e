"""Dataset layout, image preprocessing and result rendering.

A dataset directory holds ``images/<id>.png`` and ``masks/<id>.png``, plus an
optional ``folds.csv`` with ``id,fold`` rows. Images are 8- or 16-bit
grayscale; masks are {0,1} or {0,255} 8-bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image

from .tensor.core import Tensor

MULTIPLE = 16


class DatasetError(Exception):
    pass


@dataclass
class Sample:
    id: str
    image: np.ndarray  # float32 in [0, 1], H x W
    mask: np.ndarray  # uint8 in {0, 1}, H x W

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise DatasetError(f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} differ")


@dataclass
class DatasetIndex:
    root: Path
    ids: List[str]
    folds: Optional[Dict[str, int]] = None

    def image_path(self, sid: str) -> Path:
        return self.root / "images" / f"{sid}.png"

    def mask_path(self, sid: str) -> Path:
        return self.root / "masks" / f"{sid}.png"

    def load(self, sid: str) -> Sample:
        return Sample(sid, read_image(self.image_path(sid)), read_mask(self.mask_path(sid)))

    def load_all(self, ids=None) -> List[Sample]:
        return [self.load(s) for s in (self.ids if ids is None else ids)]

    def __len__(self) -> int:
        return len(self.ids)


def read_image(path: Path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim == 3:
        # colour-encoded slices: keep the first channel
        arr = arr[..., 0]
    return normalize_intensity(arr)


def normalize_intensity(arr: np.ndarray) -> np.ndarray:
    if arr.size == 0 or 0 in arr.shape:
        raise DatasetError("degenerate (0-extent) image")
    if arr.dtype == np.uint8:
        return (arr / 255.0).astype(np.float32)
    if arr.dtype.kind in "iu":
        # 16-bit (or PIL's widened 32-bit) integer slices
        return (np.clip(arr, 0, 65535) / 65535.0).astype(np.float32)
    if arr.dtype.kind == "b":
        return arr.astype(np.float32)
    return np.clip(arr.astype(np.float32), 0.0, 1.0)


def read_mask(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3:
        arr = arr[..., 0]
    return normalize_mask(arr, str(path))


def normalize_mask(arr: np.ndarray, where: str = "mask") -> np.ndarray:
    """Accept {0,1} or {0,255}; anything else is rejected as non-binary."""
    values = set(np.unique(arr).tolist())
    if values <= {0, 1}:
        return arr.astype(np.uint8)
    if values <= {0, 255}:
        return (arr > 127).astype(np.uint8)
    bad = sorted(values - {0, 1, 255})[:5]
    raise DatasetError(f"{where}: non-binary mask values {bad}")


def load_dataset(root: Union[str, Path]) -> DatasetIndex:
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DatasetError(f"{root}: expected images/ and masks/ subdirectories")
    images = {p.stem for p in img_dir.glob("*.png")}
    masks = {p.stem for p in mask_dir.glob("*.png")}
    missing = sorted(images - masks)
    orphans = sorted(masks - images)
    if missing:
        raise DatasetError(f"{root}: no mask for image id(s): {', '.join(missing)}")
    if orphans:
        raise DatasetError(f"{root}: no image for mask id(s): {', '.join(orphans)}")
    if not images:
        raise DatasetError(f"{root}: dataset is empty")
    ids = sorted(images)
    for sid in ids:
        normalize_mask(np.asarray(Image.open(mask_dir / f"{sid}.png")), f"mask {sid}")
    folds = None
    fold_file = root / "folds.csv"
    if fold_file.exists():
        folds = read_folds(fold_file, ids)
    return DatasetIndex(root, ids, folds)


def read_folds(path: Path, ids: List[str]) -> Dict[str, int]:
    folds = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0] == "id":
                continue
            folds[row[0]] = int(row[1])
    unknown = sorted(set(folds) - set(ids))
    if unknown:
        raise DatasetError(f"{path}: fold entries for unknown id(s): {', '.join(unknown[:5])}")
    return folds


def write_sample(root: Union[str, Path], sample: Sample) -> None:
    """Write a sample in the dataset layout (8-bit image, {0,255} mask)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    img8 = np.round(np.clip(sample.image, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(img8).save(root / "images" / f"{sample.id}.png")
    Image.fromarray((sample.mask > 0).astype(np.uint8) * 255).save(root / "masks" / f"{sample.id}.png")


# -- preprocessing ----------------------------------------------------------------

@dataclass(frozen=True)
class Padding:
    height: int
    width: int
    bottom: int
    right: int


def preprocess_image(image: np.ndarray) -> np.ndarray:
    """Grayscale H x W -> 3 x H x W float32 in [0, 1]."""
    img = normalize_intensity(np.asarray(image))
    return np.repeat(img[None], 3, axis=0)


def pad_to_multiple(arr: np.ndarray, multiple: int = MULTIPLE) -> Tuple[np.ndarray, Padding]:
    h, w = arr.shape[-2:]
    ph = -h % multiple
    pw = -w % multiple
    pad = Padding(h, w, ph, pw)
    if ph == 0 and pw == 0:
        return arr, pad
    widths = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    # reflect needs pad < extent; fall back to symmetric for tiny images
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(arr, widths, mode=mode), pad


def preprocess(sample_or_image) -> Tuple[Tensor, Padding]:
    """Network input (1, 3, H', W') with H', W' padded up to multiples of 16."""
    image = sample_or_image.image if isinstance(sample_or_image, Sample) else sample_or_image
    x, pad = pad_to_multiple(preprocess_image(image))
    return Tensor(x[None]), pad


def unpad(arr: np.ndarray, pad: Padding) -> np.ndarray:
    return arr[..., : pad.height, : pad.width]


def binarize_prediction(probs: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the two class channels; ties go to background."""
    probs = np.asarray(probs)
    if probs.ndim == 4:
        probs = probs[0]
    return (probs[1] > probs[0]).astype(np.uint8)


# -- rendering ---------------------------------------------------------------------

OVERLAY_COLORS = {"tp": (255, 0, 0), "fn": (0, 255, 0), "fp": (0, 0, 255)}
OVERLAY_ALPHA = 0.5


def render_overlay(image: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """RGB uint8: grayscale base, TP red, FN green, FP blue, blended at 0.5."""
    if not (image.shape == pred.shape == gt.shape):
        raise ValueError(f"overlay extents differ: image {image.shape}, pred {pred.shape}, gt {gt.shape}")
    gray = np.round(normalize_intensity(np.asarray(image)) * 255).astype(np.float64)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    p = np.asarray(pred) > 0
    g = np.asarray(gt) > 0
    for key, sel in (("tp", p & g), ("fn", ~p & g), ("fp", p & ~g)):
        color = np.array(OVERLAY_COLORS[key], dtype=np.float64)
        rgb[sel] = (1 - OVERLAY_ALPHA) * rgb[sel] + OVERLAY_ALPHA * color
    return np.round(rgb).astype(np.uint8)


def write_overlay(image: np.ndarray, pred: np.ndarray, gt: np.ndarray, path: Union[str, Path]) -> None:
    path = Path(path)
    rgb = render_overlay(image, pred, gt)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(rgb).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write overlay to {path}: {exc}") from exc


def write_mask(mask: np.ndarray, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path, format="PNG")


def synthetic_blobs(n: int, size: int = 128, seed: int = 0, max_blobs: int = 3) -> List[Sample]:
    """Toy CT-like slices: smooth noisy background with brighter elliptical lesions."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    out = []
    for k in range(n):
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, max_blobs + 1))):
            cy, cx = rng.uniform(0.15, 0.85, 2) * size
            ry, rx = rng.uniform(0.06, 0.16, 2) * size
            mask |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        base = 0.25 + 0.1 * np.sin(xx / size * 3 + k) * np.cos(yy / size * 2)
        image = base + 0.45 * mask + rng.normal(0, 0.04, (size, size))
        out.append(Sample(f"blob{k:03d}", np.clip(image, 0, 1).astype(np.float32), mask.astype(np.uint8)))
    return out
