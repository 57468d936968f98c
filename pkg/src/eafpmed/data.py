"""Dataset ingestion, augmentation, splitting and synthetic lesion fixtures.

Images are float32 arrays shaped (C, H, W) with values in [0, 1]. On disk a
dataset is ``root/<category>/<image>.pgm|ppm``; category indices follow the
lexicographic order of the folder names.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import checkpoint, netpbm
from .netpbm import FormatError

IMAGE_SUFFIXES = (".pgm", ".ppm", ".eafp")
SYNTH_CATEGORIES = ("0-global", "1-regional", "2-local")


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray
    label: int
    source: str = ""
    box: tuple[int, int, int, int] | None = None  # (row0, col0, row1, col1), inclusive


@dataclass
class DatasetManifest:
    root: str
    categories: list[str]
    files: dict[str, list[str]]
    skipped: list[str] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        return {c: len(self.files[c]) for c in self.categories}

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def items(self) -> list[tuple[str, int]]:
        return [(p, i) for i, c in enumerate(self.categories) for p in self.files[c]]

    def to_json(self) -> str:
        doc = {"root": self.root, "categories": self.categories, "counts": self.counts,
               "files": self.files, "skipped": self.skipped}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _is_image(path: Path) -> bool:
    if path.suffix.lower() not in IMAGE_SUFFIXES or not path.is_file():
        return False
    with open(path, "rb") as fh:
        head = fh.read(4)
    return head[:2] in (b"P5", b"P6") or head == checkpoint.MAGIC


def load_manifest(root: str | os.PathLike) -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    categories = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(categories) < 2:
        raise DatasetError(f"{root} needs at least 2 category folders, found {len(categories)}")
    files, skipped = {}, []
    for cat in categories:
        good = []
        for p in sorted((root / cat).iterdir()):
            if _is_image(p):
                good.append(str(p.relative_to(root)))
            else:
                skipped.append(str(p.relative_to(root)))
        if not good:
            raise DatasetError(f"category {cat!r} contains no decodable images")
        files[cat] = good
    return DatasetManifest(str(root), categories, files, skipped)


def decode_image(path: str | os.PathLike) -> np.ndarray:
    """Decode a PGM/PPM (or single-array checkpoint) into a (C, H, W) array."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] == checkpoint.MAGIC:
        arrays = checkpoint.loads(blob)
        arr = next(iter(arrays.values()))
        arr = arr[None] if arr.ndim == 2 else arr
        if arr.ndim != 3 or arr.min() < 0 or arr.max() > 1:
            raise FormatError(f"{path}: tensor image must be (C,H,W) with values in [0,1]")
        return arr
    arr = netpbm.decode(blob)
    return arr[None] if arr.ndim == 2 else np.ascontiguousarray(arr.transpose(2, 0, 1))


def encode_image(path: str | os.PathLike, image: np.ndarray) -> Path:
    return netpbm.write(path, np.asarray(image))


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a (..., H, W) array with corner-aligned sampling.

    Output pixel ``i`` samples source row ``i * (H - 1) / (height - 1)``; a
    single output row samples the source centre.
    """
    image = np.asarray(image)
    h, w = image.shape[-2:]
    if (h, w) == (height, width):
        return image.copy()

    def axis(n_in, n_out):
        if n_out == 1:
            pos = np.array([(n_in - 1) / 2.0])
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo)

    r0, r1, fr = axis(h, height)
    c0, c1, fc = axis(w, width)
    dtype = image.dtype if image.dtype.kind == "f" else np.float32
    img = image.astype(dtype, copy=False)
    fr = fr.astype(dtype)[:, None]
    fc = fc.astype(dtype)[None, :]
    top = img[..., r0, :]
    bot = img[..., r1, :]
    rows = top + (bot - top) * fr
    left = rows[..., c0]
    right = rows[..., c1]
    return left + (right - left) * fc


def _to_channels(image: np.ndarray, channels: int) -> np.ndarray:
    if image.shape[0] == channels:
        return image
    if channels == 1:
        return image.mean(axis=0, keepdims=True)
    if image.shape[0] == 1:
        return np.repeat(image, channels, axis=0)
    raise FormatError(f"cannot convert {image.shape[0]}-channel image to {channels} channels")


def load_samples(manifest: DatasetManifest, size: int = 64, channels: int | None = None) -> list[Sample]:
    root = Path(manifest.root)
    samples = []
    for rel, label in manifest.items():
        img = decode_image(root / rel)
        if channels is None:
            channels = img.shape[0]
        img = _to_channels(img, channels)
        if img.shape[1:] != (size, size):
            img = resize_bilinear(img, size, size)
        samples.append(Sample(np.ascontiguousarray(img, dtype=np.float32), label, rel))
    boxes_file = root / "boxes.json"
    if boxes_file.exists():
        boxes = json.loads(boxes_file.read_text())
        for s in samples:
            if s.source in boxes:
                s.box = _scale_box(tuple(boxes[s.source]["box"]), boxes[s.source]["size"], size)
    return samples


def _scale_box(box, src_size, size):
    if src_size == size:
        return tuple(int(v) for v in box)
    f = (size - 1) / (src_size - 1)
    return tuple(int(round(v * f)) for v in box)


def split(samples: Sequence[Sample], ratio: float = 0.8, seed: int = 0) -> tuple[list[Sample], list[Sample]]:
    """Stratified shuffle split; each category keeps at least one test sample."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    by_label: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_label.setdefault(s.label, []).append(i)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for label in sorted(by_label):
        idx = by_label[label]
        if len(idx) < 2:
            raise DatasetError(f"category {label} has {len(idx)} sample(s); at least 2 are needed to split")
        order = [idx[j] for j in rng.permutation(len(idx))]
        n_train = min(math.ceil(ratio * len(idx) - 1e-9), len(idx) - 1)
        train_idx += order[:n_train]
        test_idx += order[n_train:]
    return [samples[i] for i in train_idx], [samples[i] for i in test_idx]


def batches(samples: Sequence[Sample], batch_size: int, shuffle_seed: int | None = None
            ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start : start + batch_size]]
        yield (np.stack([s.image for s in chunk]).astype(np.float32, copy=False),
               np.array([s.label for s in chunk], dtype=np.int64))


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentSpec:
    rotations: tuple[int, ...] = (0, 90, 180, 270)
    max_angle: float = 0.0
    hflip: bool = True
    vflip: bool = True
    crop: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if any(r % 90 for r in self.rotations) or not self.rotations:
            raise ValueError("rotations must be a non-empty set of multiples of 90 degrees")
        if not 0.0 < self.crop <= 1.0:
            raise ValueError("crop fraction must lie in (0, 1]")

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(rotations=(0,), hflip=False, vflip=False, crop=1.0)


def rotate90(image: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Clockwise rotation: pixel (r, c) of an n x n image moves to (c, n-1-r)."""
    return np.ascontiguousarray(np.rot90(image, k=-quarter_turns, axes=(-2, -1)))


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[..., ::-1])


def vflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[..., ::-1, :])


def _rotate_box(box, h, w, quarter_turns):
    r0, c0, r1, c1 = box
    for _ in range(quarter_turns % 4):
        r0, c0, r1, c1 = c0, h - 1 - r1, c1, h - 1 - r0
        h, w = w, h
    return (r0, c0, r1, c1)


def rotate_small(image: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation about the image centre with edge clamping."""
    h, w = image.shape[-2:]
    theta = math.radians(degrees)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cos, sin = math.cos(theta), math.sin(theta)
    sr = cy + (rr - cy) * cos - (cc - cx) * sin
    sc = cx + (rr - cy) * sin + (cc - cx) * cos
    sr = np.clip(sr, 0, h - 1)
    sc = np.clip(sc, 0, w - 1)
    r0 = np.minimum(np.floor(sr).astype(int), h - 2) if h > 1 else np.zeros_like(rr)
    c0 = np.minimum(np.floor(sc).astype(int), w - 2) if w > 1 else np.zeros_like(cc)
    fr, fc = (sr - r0).astype(image.dtype), (sc - c0).astype(image.dtype)
    r1, c1 = np.minimum(r0 + 1, h - 1), np.minimum(c0 + 1, w - 1)
    top = image[..., r0, c0] * (1 - fc) + image[..., r0, c1] * fc
    bot = image[..., r1, c0] * (1 - fc) + image[..., r1, c1] * fc
    return top * (1 - fr) + bot * fr


def augment(sample: Sample, spec: AugmentSpec, draw: np.random.Generator) -> Sample:
    """Rotation, then flips, then a random crop resized back to the input size."""
    img = sample.image
    box = sample.box
    h, w = img.shape[-2:]
    turns = (int(draw.choice(spec.rotations)) // 90) % 4
    if turns:
        if box is not None:
            box = _rotate_box(box, h, w, turns)
        img = rotate90(img, turns)
        h, w = img.shape[-2:]
    if spec.max_angle > 0:
        angle = float(draw.uniform(-spec.max_angle, spec.max_angle))
        if angle:
            img = rotate_small(img, angle).astype(sample.image.dtype)
            box = None
    if spec.hflip and draw.random() < 0.5:
        img = hflip(img)
        if box is not None:
            box = (box[0], w - 1 - box[3], box[2], w - 1 - box[1])
    if spec.vflip and draw.random() < 0.5:
        img = vflip(img)
        if box is not None:
            box = (h - 1 - box[2], box[1], h - 1 - box[0], box[3])
    if spec.crop < 1.0:
        ch = max(8, int(round(spec.crop * h)))
        cw = max(8, int(round(spec.crop * w)))
        if ch < h or cw < w:
            top = int(draw.integers(0, h - ch + 1))
            left = int(draw.integers(0, w - cw + 1))
            img = resize_bilinear(img[..., top : top + ch, left : left + cw], h, w)
            if box is not None:
                fr, fc = (h - 1) / max(ch - 1, 1), (w - 1) / max(cw - 1, 1)
                r0 = min(max(box[0] - top, 0), ch - 1)
                r1 = min(max(box[2] - top, 0), ch - 1)
                c0 = min(max(box[1] - left, 0), cw - 1)
                c1 = min(max(box[3] - left, 0), cw - 1)
                box = (int(math.floor(r0 * fr)), int(math.floor(c0 * fc)),
                       int(math.ceil(r1 * fr)), int(math.ceil(c1 * fc)))
    return replace(sample, image=np.ascontiguousarray(img), box=box)


# --------------------------------------------------------------------------
# synthetic lesion fixture

# (radius range, amplitude range) as fractions of the image size
_LESIONS = (
    ((0.25, 0.34), (0.25, 0.40)),   # global: broad low-frequency blob
    ((0.10, 0.15), (0.35, 0.50)),   # regional: medium blob
    ((0.045, 0.065), (0.60, 0.70)),  # local: small high-contrast speck
)
BACKGROUND = 0.2
NOISE_SIGMA = 0.03


def _lesion(size: int, radius: float, amp: float, rng: np.random.Generator):
    lo = radius + 1
    hi = size - radius - 2
    cy, cx = rng.uniform(lo, hi, size=2)
    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    t = ((rr - cy) ** 2 + (cc - cx) ** 2) / (radius * radius)
    bump = np.where(t < 1, amp * (1 - t) ** 2, 0.0)
    rows = np.nonzero(bump.any(axis=1))[0]
    cols = np.nonzero(bump.any(axis=0))[0]
    return bump, (int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


def synth_fixture(num_classes: int = 3, per_category: int = 40, size: int = 64, seed: int = 0) -> list[Sample]:
    """One lesion scale per category on a noisy flat background.

    Category 0 carries a blob spanning tens of pixels or more, category 1 a
    medium blob, category 2 a small bright speck. Each sample's tight lesion
    bounding box is recorded.
    """
    if size < 32:
        raise ValueError("synthetic fixture needs size >= 32")
    if not 2 <= num_classes <= len(_LESIONS):
        raise ValueError(f"default generator supports 2..{len(_LESIONS)} categories")
    rng = np.random.default_rng(seed)
    samples = []
    for label in range(num_classes):
        (rlo, rhi), (alo, ahi) = _LESIONS[label]
        for i in range(per_category):
            radius = rng.uniform(rlo, rhi) * size
            amp = rng.uniform(alo, ahi)
            bump, box = _lesion(size, radius, amp, rng)
            noise = rng.normal(0.0, NOISE_SIGMA, size=(size, size))
            img = np.clip(BACKGROUND + bump + noise, 0.0, 1.0).astype(np.float32)
            samples.append(Sample(img[None], label, f"synth:{label}:{i}", box))
    return samples


def write_dataset(samples: Sequence[Sample], root: str | os.PathLike,
                  categories: Sequence[str] = SYNTH_CATEGORIES) -> Path:
    """Write samples as PGM/PPM files plus ``boxes.json`` for recorded boxes."""
    root = Path(root)
    counters: dict[int, int] = {}
    boxes = {}
    for s in samples:
        cat = categories[s.label]
        n = counters.get(s.label, 0)
        counters[s.label] = n + 1
        (root / cat).mkdir(parents=True, exist_ok=True)
        ext = ".pgm" if s.image.shape[0] == 1 else ".ppm"
        rel = f"{cat}/{n:04d}{ext}"
        encode_image(root / rel, s.image)
        if s.box is not None:
            boxes[rel] = {"box": list(s.box), "size": int(s.image.shape[-1])}
    if boxes:
        (root / "boxes.json").write_text(json.dumps(boxes, indent=1, sort_keys=True) + "\n")
    return root
