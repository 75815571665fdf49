"""Dataset ingestion, class selection, persistence and a procedural
desk-scale image set.

Pixels are kept as ``float32`` arrays shaped (height, width, channels) with
values in [0, 1]; raw 8-bit intensities are divided by 255 and nothing else.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError, InputError, ValidationError
from .rng import PRNG_ID, shuffled
from .tensorio import read_tensor, write_tensor

IMAGE_SUFFIXES = {".png", ".bmp", ".jpg", ".jpeg", ".ppm", ".pgm", ".gif", ".tif", ".tiff"}


@dataclass
class ImageExample:
    pixels: np.ndarray
    label: int
    uid: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3:
            raise ValidationError(f"{self.uid}: pixels must be (H, W, C), got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)) or self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValidationError(f"{self.uid}: pixels must be finite and within [0, 1]")


@dataclass
class DatasetSplit:
    train: list[ImageExample]
    test: list[ImageExample]
    class_names: list[str]
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise ValidationError("duplicate class names")
        k = len(self.class_names)
        for ex in self.train + self.test:
            if not 0 <= ex.label < k:
                raise ValidationError(f"{ex.uid}: label {ex.label} outside [0, {k})")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass
class IngestOptions:
    train_fraction: float = 0.75
    seed: int = 0
    image_shape: tuple[int, int, int] = (32, 32, 3)  # only used by the raw binary format


def normalize_u8(raw) -> np.ndarray:
    """Map 8-bit intensities to [0, 1]; float input already in range passes through."""
    raw = np.asarray(raw)
    if raw.dtype == np.uint8:
        return raw.astype(np.float32) / np.float32(255.0)
    return raw.astype(np.float32)


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            arr = np.asarray(img)
    except (UnidentifiedImageError, OSError) as exc:
        raise InputError(f"unreadable image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.dtype != np.uint8:
        raise InputError(f"{path}: expected 8-bit image, got {arr.dtype}")
    if arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return normalize_u8(arr)


def _class_seed(seed: int, class_index: int) -> int:
    return seed * 1_000_003 + class_index


def split_indices(n: int, fraction: float, seed: int, class_index: int) -> tuple[list[int], list[int]]:
    """Per-class split: shuffle 0..n-1 with the class seed, first part trains.

    The train count is ``round(fraction * n)`` clamped to [1, n - 1] so every
    class lands in both splits.
    """
    if n < 2:
        raise ValidationError(f"class {class_index} needs at least 2 images, has {n}")
    order = shuffled(range(n), _class_seed(seed, class_index))
    n_train = min(max(int(round(fraction * n)), 1), n - 1)
    return order[:n_train], order[n_train:]


def _split_from_groups(groups: list[list[ImageExample]], class_names, opts: IngestOptions, source: str):
    train, test, index = [], [], {"train": [], "test": []}
    for c, items in enumerate(groups):
        tr, te = split_indices(len(items), opts.train_fraction, opts.seed, c)
        train += [items[i] for i in tr]
        test += [items[i] for i in te]
        index["train"] += [items[i].uid for i in tr]
        index["test"] += [items[i].uid for i in te]
    meta = {"source": source, "prng": PRNG_ID, "train_fraction": opts.train_fraction, "split": index}
    return DatasetSplit(train, test, list(class_names), opts.seed, meta)


def _load_directory(root: Path, opts: IngestOptions) -> DatasetSplit:
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValidationError(f"{root}: no class directories")
    groups = []
    for c, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ValidationError(f"empty class directory {d}")
        groups.append([ImageExample(_read_image(f), c, f"{d.name}/{f.name}") for f in files])
    shapes = {ex.pixels.shape for g in groups for ex in g}
    if len(shapes) != 1:
        raise ValidationError(f"{root}: mixed image shapes {sorted(shapes)}")
    return _split_from_groups(groups, [d.name for d in class_dirs], opts, str(root))


def _load_raw_binary(path: Path, opts: IngestOptions) -> DatasetSplit:
    """CIFAR-style records: one label byte then channel-planar 8-bit pixels."""
    h, w, ch = opts.image_shape
    rec = 1 + h * w * ch
    buf = path.read_bytes()
    if not buf or len(buf) % rec:
        raise FormatError(f"{path}: size {len(buf)} is not a multiple of record size {rec}")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
    labels = raw[:, 0].astype(int)
    pix = raw[:, 1:].reshape(-1, ch, h, w).transpose(0, 2, 3, 1)
    meta_file = path.with_name("batches.meta.txt")
    if meta_file.exists():
        names = [s for s in meta_file.read_text().split() if s]
    else:
        names = [f"class_{i}" for i in range(labels.max() + 1)]
    groups = [[] for _ in names]
    for i, (lab, img) in enumerate(zip(labels, pix)):
        if lab >= len(names):
            raise FormatError(f"{path}: record {i} has label {lab} beyond {len(names)} classes")
        groups[lab].append(ImageExample(normalize_u8(img), int(lab), f"{path.name}#{i}"))
    for c, g in enumerate(groups):
        if not g:
            raise ValidationError(f"{path}: class {names[c]} has no records")
    return _split_from_groups(groups, names, opts, str(path))


def load_dataset(source_path, opts: IngestOptions | None = None) -> DatasetSplit:
    opts = opts or IngestOptions()
    path = Path(source_path)
    if not path.exists():
        raise InputError(f"dataset path does not exist: {path}")
    if path.is_file():
        return _load_raw_binary(path, opts)
    return _load_directory(path, opts)


def select_classes(split: DatasetSplit, k: int, seed: int) -> DatasetSplit:
    """Keep ``k`` classes chosen as the first ``k`` of a seeded shuffle of
    class indices; the kept classes are re-indexed in ascending original order."""
    n = split.num_classes
    if not 1 <= k <= n:
        raise ValidationError(f"k={k} outside [1, {n}]")
    chosen = sorted(shuffled(range(n), seed)[:k])
    remap = {old: new for new, old in enumerate(chosen)}

    def keep(items):
        return [ImageExample(ex.pixels, remap[ex.label], ex.uid) for ex in items if ex.label in remap]

    meta = dict(split.meta, selected_classes=chosen, selection_seed=seed)
    return DatasetSplit(keep(split.train), keep(split.test), [split.class_names[c] for c in chosen],
                        split.seed, meta)


def stack_pixels(examples: list[ImageExample]) -> np.ndarray:
    return np.stack([ex.pixels for ex in examples]) if examples else np.zeros((0, 0, 0, 0), np.float32)


def save_split(split: DatasetSplit, out_dir) -> Path:
    """Write ``dataset.json`` plus one tensor file per split part."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for part in ("train", "test"):
        items = getattr(split, part)
        write_tensor(out / f"{part}_pixels.afg", stack_pixels(items))
    manifest = {
        "class_names": split.class_names,
        "seed": split.seed,
        "prng": PRNG_ID,
        "train": [[ex.uid, ex.label] for ex in split.train],
        "test": [[ex.uid, ex.label] for ex in split.test],
        "meta": split.meta,
    }
    path = out / "dataset.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_split(out_dir) -> DatasetSplit:
    out = Path(out_dir)
    manifest_path = out / "dataset.json"
    if not manifest_path.exists():
        raise InputError(f"missing dataset manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    parts = {}
    for part in ("train", "test"):
        pix = read_tensor(out / f"{part}_pixels.afg")
        rows = manifest[part]
        if len(rows) != (pix.shape[0] if pix.size else 0):
            raise FormatError(f"{out}: {part} manifest lists {len(rows)} items, tensor holds {pix.shape[0]}")
        parts[part] = [ImageExample(pix[i], lab, uid) for i, (uid, lab) in enumerate(rows)]
    return DatasetSplit(parts["train"], parts["test"], manifest["class_names"], manifest["seed"],
                        manifest.get("meta", {}))


# --- procedural desk-scale image set ---------------------------------------

SYNTHETIC_CLASSES = ["hstripes", "vstripes", "diag_up", "diag_down", "checker",
                     "rings", "disk", "square", "cross", "dots"]


def _pattern(kind: str, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    freq = rng.uniform(2.5, 5.0)
    phase = rng.uniform(0, 2 * math.pi)
    tilt = math.radians(rng.uniform(-12, 12))
    cx, cy = rng.uniform(0.3, 0.7, size=2)

    def grating(angle):
        a = angle + tilt
        return np.sin(2 * math.pi * freq * (xx * math.cos(a) + yy * math.sin(a)) + phase)

    if kind == "hstripes":
        s = grating(math.pi / 2)
    elif kind == "vstripes":
        s = grating(0.0)
    elif kind == "diag_up":
        s = grating(math.pi / 4)
    elif kind == "diag_down":
        s = grating(-math.pi / 4)
    elif kind == "checker":
        s = grating(0.0) * grating(math.pi / 2)
    elif kind == "rings":
        s = np.sin(2 * math.pi * freq * np.hypot(xx - cx, yy - cy) + phase)
    elif kind == "disk":
        s = rng.uniform(0.18, 0.3) - np.hypot(xx - cx, yy - cy)
    elif kind == "square":
        s = rng.uniform(0.15, 0.27) - np.maximum(abs(xx - cx), abs(yy - cy))
    elif kind == "cross":
        arm = rng.uniform(0.06, 0.1)
        s = np.maximum(arm - abs(xx - cx), arm - abs(yy - cy))
        s = np.where(np.maximum(abs(xx - cx), abs(yy - cy)) < 0.35, s, -1.0)
    elif kind == "dots":
        s = grating(0.0) * grating(math.pi / 2) - 0.55
    else:
        raise ValidationError(f"unknown synthetic class {kind}")
    return 1.0 / (1.0 + np.exp(-8.0 * s / max(np.abs(s).max(), 1e-9)))


def synthesize_image(kind: str, rng: np.random.Generator, size: int = 32, channels: int = 3) -> np.ndarray:
    """One 8-bit image of the given pattern class with random colours, low
    contrast, smooth clutter and sensor noise."""
    p = _pattern(kind, rng, size)
    bg = rng.uniform(0.2, 0.8, size=channels)
    direction = rng.normal(size=channels)
    direction /= np.linalg.norm(direction) + 1e-12
    fg = bg + rng.uniform(0.15, 0.45) * direction * math.sqrt(channels)
    img = bg + p[..., None] * (fg - bg)
    blur = rng.normal(size=(4, 4, channels))
    clutter = np.kron(blur, np.ones((size // 4, size // 4, 1)))
    img = img + 0.05 * clutter + rng.normal(scale=0.05, size=img.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def make_synthetic(root, per_class: int = 300, seed: int = 0, size: int = 32, channels: int = 3,
                   classes: list[str] | None = None) -> Path:
    """Write a directory-per-class PNG set under ``root``."""
    root = Path(root)
    classes = classes or SYNTHETIC_CLASSES
    rng = np.random.default_rng(seed)
    for kind in classes:
        d = root / kind
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            img = synthesize_image(kind, rng, size, channels)
            Image.fromarray(img[:, :, 0] if channels == 1 else img).save(d / f"{i:05d}.png")
    return root
