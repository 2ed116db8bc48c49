"""Dataset manifests, image transforms, a procedural multi-class dataset and
the mixup / cutpaste cross-class probes.

All on-disk datasets use the MVTec layout::

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect or good>/*.png
    <root>/<category>/ground_truth/<defect>/<stem>_mask.png
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from torch.utils.data import Dataset

from snl.errors import UsageError

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
LAYOUTS = ("mvtec", "visa", "synthetic")
NORMAL, ANOMALOUS = 0, 1


@dataclass
class Sample:
    """One image with its category, label (0 normal, 1 anomalous) and optional mask."""

    image: torch.Tensor
    category: str
    label: int = NORMAL
    mask: torch.Tensor | None = None


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    category: str
    label: int
    mask_path: str | None = None


@dataclass
class DatasetManifest:
    root: str
    split: str
    categories: list[str]
    entries: list[ManifestEntry] = field(default_factory=list)
    layout: str = "mvtec"

    def __len__(self) -> int:
        return len(self.entries)

    def by_category(self, category: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.category == category]

    def subset(self, categories: Sequence[str]) -> "DatasetManifest":
        keep = set(categories)
        return DatasetManifest(
            self.root,
            self.split,
            [c for c in self.categories if c in keep],
            [e for e in self.entries if e.category in keep],
            self.layout,
        )

    def save(self, path) -> None:
        """Line-delimited JSON: one header record, then one record per entry."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {"root": self.root, "split": self.split, "categories": self.categories, "layout": self.layout}
        with path.open("w") as fh:
            fh.write(json.dumps({"manifest": header}, sort_keys=True) + "\n")
            for e in self.entries:
                fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with Path(path).open() as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if not lines or "manifest" not in lines[0]:
            raise ValueError(f"{path} is not a manifest file")
        header = lines[0]["manifest"]
        return cls(entries=[ManifestEntry(**rec) for rec in lines[1:]], **header)


def _images_in(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_manifest(root, layout: str = "mvtec", split: str = "train") -> DatasetManifest:
    """Index an MVTec-layout directory tree.

    ``"visa"`` and ``"synthetic"`` roots must already be in MVTec layout (see
    :func:`convert_visa` and :func:`synth_dataset`).  Ordering is lexicographic.

    Raises:
        FileNotFoundError: missing root, no categories, or a missing mask.
    """
    if layout not in LAYOUTS:
        raise UsageError(f"layout must be one of {LAYOUTS}, got {layout!r}")
    if split not in ("train", "test"):
        raise UsageError(f"split must be 'train' or 'test', got {split!r}")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if layout == "visa" and (root / "split_csv").is_dir():
        raise FileNotFoundError(f"{root} is a raw VisA tree; run `snl convert-visa` first")

    categories = sorted(p.name for p in root.iterdir() if p.is_dir() and (p / "train").is_dir())
    if not categories:
        raise FileNotFoundError(f"no categories with a train/ directory under {root}")

    entries = []
    for cat in categories:
        split_dir = root / cat / split
        if split == "train":
            for p in _images_in(split_dir / "good"):
                entries.append(ManifestEntry(str(p), cat, NORMAL))
            continue
        for defect_dir in sorted(d for d in split_dir.iterdir() if d.is_dir()) if split_dir.is_dir() else []:
            for p in _images_in(defect_dir):
                if defect_dir.name == "good":
                    entries.append(ManifestEntry(str(p), cat, NORMAL))
                    continue
                mask = root / cat / "ground_truth" / defect_dir.name / f"{p.stem}_mask.png"
                if not mask.is_file():
                    raise FileNotFoundError(f"missing mask for anomalous image {p}: expected {mask}")
                entries.append(ManifestEntry(str(p), cat, ANOMALOUS, str(mask)))
    if not entries:
        raise FileNotFoundError(f"no {split} images found under {root}")
    return DatasetManifest(str(root), split, categories, entries, layout)


def transform(image, size: int = 256) -> torch.Tensor:
    """Resize to ``size x size`` (bilinear) and standardize with ImageNet statistics.

    ``image`` may be a PIL image, an ``(H, W, 3)`` uint8 array, or a float
    ``(3, H, W)`` tensor / ``(H, W, 3)`` array with values in ``[0, 1]``.
    """
    if isinstance(image, Image.Image):
        image = np.asarray(image.convert("RGB"))
    if isinstance(image, np.ndarray):
        arr = image.astype(np.float32) / 255.0 if image.dtype == np.uint8 else image.astype(np.float32)
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=-1)
        x = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))
    else:
        x = torch.as_tensor(image, dtype=torch.float32)
    if x.dim() != 3 or x.shape[0] != 3:
        raise UsageError(f"expected an RGB image, got shape {tuple(x.shape)}")
    if tuple(x.shape[1:]) != (size, size):
        x = F.interpolate(x[None], size=(size, size), mode="bilinear", align_corners=False, antialias=True)[0]
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return (x - mean) / std


def denormalize(x: torch.Tensor) -> torch.Tensor:
    mean = torch.tensor(IMAGENET_MEAN, dtype=x.dtype).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=x.dtype).view(3, 1, 1)
    return x * std + mean


def load_mask(path, size: int) -> torch.Tensor:
    """Binary ``(size, size)`` float mask, nearest-neighbour resized."""
    m = Image.open(path).convert("L")
    if m.size != (size, size):
        m = m.resize((size, size), Image.NEAREST)
    return torch.from_numpy((np.asarray(m) > 0).astype(np.float32))


class AnomalyDataset(Dataset):
    """Decoded, transformed samples of a manifest.

    Items are dicts with ``image (3,S,S)``, ``mask (S,S)`` (zeros for normal
    images), ``label`` and ``category``.

    Args:
        on_corrupt: ``"raise"`` or ``"skip"``; with ``"skip"`` undecodable files
            are dropped (and logged) when the dataset is built.
        cache: keep decoded items in memory after first access.
    """

    def __init__(self, manifest: DatasetManifest, image_size: int = 256, on_corrupt: str = "raise", cache: bool = False):
        if on_corrupt not in ("raise", "skip"):
            raise UsageError("on_corrupt must be 'raise' or 'skip'")
        self.image_size = image_size
        self.categories = list(manifest.categories)
        entries = list(manifest.entries)
        if on_corrupt == "skip":
            entries = [e for e in entries if self._decodable(e.path)]
        self.entries = entries
        self._cache: dict[int, dict] | None = {} if cache else None

    @staticmethod
    def _decodable(path: str) -> bool:
        try:
            with Image.open(path) as im:
                im.convert("RGB").load()
            return True
        except (OSError, UnidentifiedImageError) as exc:
            logger.warning("skipping unreadable image %s: %s", path, exc)
            return False

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> dict:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        e = self.entries[i]
        with Image.open(e.path) as im:
            image = transform(im, self.image_size)
        if e.mask_path:
            mask = load_mask(e.mask_path, self.image_size)
        else:
            mask = torch.zeros(self.image_size, self.image_size)
        item = {"image": image, "mask": mask, "label": e.label, "category": e.category}
        if self._cache is not None:
            self._cache[i] = item
        return item

    def sample(self, i: int) -> Sample:
        item = self[i]
        return Sample(item["image"], item["category"], item["label"], item["mask"] if item["label"] else None)


# --------------------------------------------------------------------------
# procedural multi-class dataset

_PALETTES = [
    ((200, 60, 40), (250, 220, 120)),
    ((30, 70, 160), (170, 210, 240)),
    ((40, 120, 50), (230, 230, 200)),
    ((90, 40, 110), (240, 160, 200)),
    ((120, 90, 40), (60, 200, 190)),
    ((20, 20, 20), (200, 200, 60)),
    ((150, 150, 150), (90, 20, 20)),
    ((0, 110, 110), (250, 140, 0)),
]


def _texture(kind: int, size: int, palette, rng: np.random.Generator) -> np.ndarray:
    """Float RGB texture in [0, 255] for one of the texture families."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    family = kind % 4
    phase = rng.uniform(0, 2 * np.pi)
    if family == 0:  # stripes
        freq = rng.uniform(0.9, 1.1) * (2 * np.pi / 10)
        theta = rng.uniform(-0.15, 0.15) + 0.5 * (kind // 4)
        t = 0.5 + 0.5 * np.sin(freq * (xx * np.sin(theta) + yy * np.cos(theta)) + phase)
    elif family == 1:  # dots
        period = 12
        ox, oy = rng.integers(0, period, size=2)
        dx = (xx + ox) % period - period / 2
        dy = (yy + oy) % period - period / 2
        r = rng.uniform(3.0, 3.6)
        t = 1.0 / (1.0 + np.exp((np.hypot(dx, dy) - r) * 2.0))
    elif family == 2:  # checker
        period = 16 if kind < 4 else 10
        ox, oy = rng.integers(0, period, size=2)
        t = (((xx + ox) // (period / 2) + (yy + oy) // (period / 2)) % 2).astype(np.float64)
    else:  # smooth gradient with a gentle ripple
        ang = rng.uniform(0, 2 * np.pi)
        t = (xx * np.cos(ang) + yy * np.sin(ang)) / (size * 1.5) + 0.5
        t = t + 0.08 * np.sin(2 * np.pi * xx / 21 + phase)
        t = np.clip(t, 0, 1)
    a, b = (np.asarray(c, dtype=np.float64) for c in palette)
    img = a[None, None] * (1 - t[..., None]) + b[None, None] * t[..., None]
    return img + rng.normal(0, 4.0, size=img.shape)


def _class_image(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    return _texture(cls, size, _PALETTES[cls % len(_PALETTES)], rng)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _defect_region(size: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean ellipse covering 1.5%..8% of the image."""
    area = rng.uniform(0.015, 0.08) * size * size
    aspect = rng.uniform(0.5, 2.0)
    ry = np.sqrt(area / np.pi * aspect)
    rx = area / (np.pi * ry)
    cy = rng.uniform(ry + 1, size - ry - 1)
    cx = rng.uniform(rx + 1, size - rx - 1)
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _inject_defect(clean: np.ndarray, cls: int, num_classes: int, rng: np.random.Generator):
    size = clean.shape[0]
    while True:
        region = _defect_region(size, rng)
        frac = region.mean()
        if 0.01 <= frac <= 0.10:
            break
    kind = rng.integers(0, 3)
    defect = clean.astype(np.float64).copy()
    if kind == 0:  # patch of a foreign class texture
        other = (cls + rng.integers(1, num_classes)) % num_classes
        defect[region] = _class_image(int(other), size, rng)[region]
        name = "foreign"
    elif kind == 1:  # color stain
        color = rng.uniform(0, 255, size=3)
        defect[region] = 0.35 * defect[region] + 0.65 * color
        name = "stain"
    else:  # local texture inversion
        defect[region] = 255.0 - defect[region]
        name = "inverted"
    out = _to_uint8(defect)
    unchanged = (out == clean).all(axis=-1) & region
    out[unchanged] = 255 - clean[unchanged]
    return out, region, name


def synth_dataset(
    root,
    num_classes: int = 4,
    per_class: int = 50,
    seed: int = 0,
    image_size: int = 64,
    test_normal: int = 10,
    test_anomalous: int = 10,
) -> DatasetManifest:
    """Write a procedural multi-class dataset in MVTec layout; returns the train manifest.

    Classes are distinct texture families and palettes.  Test defects are
    ellipses of 1-10% of the image area filled with a foreign class texture, a
    color stain, or an inversion; every mask pixel differs from the clean image.
    """
    if num_classes < 2:
        raise UsageError("need at least two classes")
    root = Path(root)
    rng = np.random.default_rng(seed)
    for cls in range(num_classes):
        cat = f"class_{cls:02d}"
        for sub in ("train/good", "test/good"):
            (root / cat / sub).mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            img = _to_uint8(_class_image(cls, image_size, rng))
            Image.fromarray(img).save(root / cat / "train" / "good" / f"{i:03d}.png")
        for i in range(test_normal):
            img = _to_uint8(_class_image(cls, image_size, rng))
            Image.fromarray(img).save(root / cat / "test" / "good" / f"{i:03d}.png")
        for i in range(test_anomalous):
            clean = _to_uint8(_class_image(cls, image_size, rng))
            img, region, name = _inject_defect(clean, cls, num_classes, rng)
            (root / cat / "test" / name).mkdir(parents=True, exist_ok=True)
            (root / cat / "ground_truth" / name).mkdir(parents=True, exist_ok=True)
            Image.fromarray(img).save(root / cat / "test" / name / f"{i:03d}.png")
            Image.fromarray(region.astype(np.uint8) * 255).save(
                root / cat / "ground_truth" / name / f"{i:03d}_mask.png"
            )
    return load_manifest(root, "synthetic", "train")


# --------------------------------------------------------------------------
# cross-class probes


def mixup_probe(a: Sample, b: Sample, lam: float = 0.5) -> Sample:
    """Pixelwise ``lam * a + (1 - lam) * b`` of two images from different categories."""
    if a.category == b.category:
        raise UsageError(f"mixup probe needs two categories, got {a.category!r} twice")
    if not 0.0 < lam < 1.0:
        raise UsageError("mixup weight must lie strictly between 0 and 1")
    if a.image.shape != b.image.shape:
        raise UsageError("mixup images must have the same shape")
    return Sample(lam * a.image + (1.0 - lam) * b.image, f"{a.category}+{b.category}", ANOMALOUS, None)


def random_rect(height: int, width: int, rng: np.random.Generator, frac=(0.12, 0.25)) -> tuple[int, int, int, int]:
    """``(top, left, h, w)`` with sides a uniform fraction of the image side."""
    h = max(1, int(round(rng.uniform(*frac) * height)))
    w = max(1, int(round(rng.uniform(*frac) * width)))
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return top, left, h, w


def cutpaste_probe(src: Sample, dst: Sample, rect: tuple[int, int, int, int] | None = None, seed: int = 0) -> Sample:
    """Paste ``src[rect]`` at a random location of ``dst``; the mask marks the paste.

    Args:
        rect: ``(top, left, height, width)`` of the source crop; random when None
            (each side 12-25% of the image side).
        seed: seeds the random paste location (and crop, if ``rect`` is None).
    """
    if src.category == dst.category:
        raise UsageError(f"cutpaste probe needs two categories, got {src.category!r} twice")
    rng = np.random.default_rng(seed)
    _, sh, sw = src.image.shape
    _, dh, dw = dst.image.shape
    if rect is None:
        rect = random_rect(min(sh, dh), min(sw, dw), rng)
    top, left, h, w = (int(v) for v in rect)
    if h <= 0 or w <= 0:
        raise UsageError("cutpaste rectangle must have positive area")
    if top < 0 or left < 0 or top + h > sh or left + w > sw or h > dh or w > dw:
        raise UsageError(f"rectangle {rect} does not fit inside both images")
    y = int(rng.integers(0, dh - h + 1))
    x = int(rng.integers(0, dw - w + 1))
    image = dst.image.clone()
    image[:, y : y + h, x : x + w] = src.image[:, top : top + h, left : left + w]
    mask = torch.zeros(dh, dw)
    mask[y : y + h, x : x + w] = 1.0
    return Sample(image, f"{src.category}->{dst.category}", ANOMALOUS, mask)


# --------------------------------------------------------------------------
# VisA conversion


def convert_visa(src, dst, split_csv: str = "split_csv/1cls.csv") -> DatasetManifest:
    """Rearrange a raw VisA tree into MVTec layout using its split CSV.

    Anomalous test images go to ``test/bad`` with binarized masks in
    ``ground_truth/bad``.  Returns the converted train manifest.
    """
    src, dst = Path(src), Path(dst)
    csv_path = src / split_csv
    if not csv_path.is_file():
        raise FileNotFoundError(f"VisA split file {csv_path} not found")
    with csv_path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        cat, split, label = row["object"], row["split"].strip(), row["label"].strip()
        image = src / row["image"]
        anomalous = label != "normal"
        if split == "train":
            if anomalous:
                continue
            out = dst / cat / "train" / "good" / image.name
        else:
            out = dst / cat / "test" / ("bad" if anomalous else "good") / image.name
        out.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(image, out)
        if anomalous:
            mask_src = src / row["mask"]
            mask_out = dst / cat / "ground_truth" / "bad" / f"{image.stem}_mask.png"
            mask_out.parent.mkdir(parents=True, exist_ok=True)
            m = np.asarray(Image.open(mask_src).convert("L")) > 0
            Image.fromarray(m.astype(np.uint8) * 255).save(mask_out)
    return load_manifest(dst, "visa", "train")
