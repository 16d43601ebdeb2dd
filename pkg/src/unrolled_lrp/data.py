"""Seeded multi-label synthetic shapes dataset and its on-disk layout.

Layout of a dataset directory::

    images/NNNN.png   8-bit RGB
    masks/NNNN.png    8-bit grayscale, value = class index (0 = background,
                      255 = unlabelled)
    labels.csv        id,classes   (classes comma-separated by name)
    meta.json         config echo, class names, seed, train/val split
"""
from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .losses import UNLABELED
from .tensor import seeded_rng

SHAPES = ("circle", "square", "triangle", "cross")
DEFAULT_PALETTE = (
    ("circle", "circle", (0.85, 0.25, 0.2)),
    ("square", "square", (0.2, 0.7, 0.3)),
    ("triangle", "triangle", (0.25, 0.35, 0.85)),
    ("cross", "cross", (0.85, 0.75, 0.2)),
)


class DatasetError(ValueError):
    pass


class PlacementError(RuntimeError):
    pass


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    palette: tuple = DEFAULT_PALETTE
    min_objects: int = 1
    max_objects: int = 3
    size_range: tuple = (0.12, 0.24)
    """Object radius as a fraction of the smaller canvas side."""
    class_weights: tuple | None = None
    color_jitter: float = 0.12
    noise: float = 0.04
    seed: int = 0
    max_retries: int = 100

    def __post_init__(self):
        self.palette = tuple((str(n), str(s), tuple(float(c) for c in rgb)) for n, s, rgb in self.palette)
        self.size_range = tuple(self.size_range)
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)
        self.validate()

    def validate(self) -> None:
        if len(self.palette) < 2:
            raise DatasetError("need at least 2 foreground classes")
        names = [p[0] for p in self.palette]
        if len(set(names)) != len(names):
            raise DatasetError("class names must be unique")
        for name, shape, _ in self.palette:
            if shape not in SHAPES:
                raise DatasetError(f"class {name}: unknown shape {shape!r}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise DatasetError("need 1 <= min_objects <= max_objects")
        lo, hi = self.size_range
        side = min(self.height, self.width)
        if not 0 < lo <= hi or 2 * hi * side > side - 1:
            raise DatasetError(f"size_range {self.size_range}: objects must satisfy 0 < lo <= hi "
                               f"and fit a {side}-pixel canvas")
        if min(self.height, self.width) < 8:
            raise DatasetError("canvas too small")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights)
            if w.shape != (len(self.palette),) or np.any(w < 0) or w.sum() <= 0:
                raise DatasetError("class_weights must be non-negative, one per class, not all zero")

    @property
    def class_names(self) -> tuple:
        return ("background",) + tuple(p[0] for p in self.palette)

    @property
    def num_fg(self) -> int:
        return len(self.palette)

    def weights(self) -> np.ndarray:
        if self.class_weights is None:
            return np.ones(self.num_fg)
        return np.asarray(self.class_weights, dtype=np.float64)

    def to_json(self) -> dict:
        d = asdict(self)
        d["palette"] = [list(p[:2]) + [list(p[2])] for p in self.palette]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "palette" in d:
            d["palette"] = tuple((n, s, tuple(c)) for n, s, c in d["palette"])
        return cls(**d)


def object_count_range(config: SceneConfig) -> range:
    available = int(np.count_nonzero(config.weights()))
    return range(min(config.min_objects, available), min(config.max_objects, available) + 1)


def occurrence_probabilities(config: SceneConfig) -> np.ndarray:
    """Exact per-class presence probability, by enumerating ordered draws."""
    w = config.weights()
    counts = object_count_range(config)
    probs = np.zeros(config.num_fg)
    for n in counts:
        for seq in itertools.permutations(range(config.num_fg), n):
            p, left = 1.0 / len(counts), w.sum()
            for c in seq:
                p *= w[c] / left
                left -= w[c]
            for c in seq:
                probs[c] += p
    return probs


def shape_mask(shape: str, cy: float, cx: float, r: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy ** 2 + dx ** 2 <= r ** 2
    if shape == "square":
        s = 0.85 * r
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if shape == "triangle":
        frac = (dy + r) / (2 * r)
        return (frac >= 0) & (frac <= 1) & (np.abs(dx) <= r * frac)
    if shape == "cross":
        t = r / 3
        return ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | ((np.abs(dy) <= t) & (np.abs(dx) <= r))
    raise DatasetError(f"unknown shape {shape!r}")


def _background(rng, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.35, 0.65, size=3)
    coarse = rng.normal(0.0, 0.08, size=(3, 5, 5))
    ys = np.linspace(0, 4, h)
    xs = np.linspace(0, 4, w)
    y0 = np.minimum(ys.astype(int), 3)
    x0 = np.minimum(xs.astype(int), 3)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    c00 = coarse[:, y0][:, :, x0]
    c01 = coarse[:, y0][:, :, x0 + 1]
    c10 = coarse[:, y0 + 1][:, :, x0]
    c11 = coarse[:, y0 + 1][:, :, x0 + 1]
    tex = c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx + c10 * fy * (1 - fx) + c11 * fy * fx
    return base[:, None, None] + tex


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    mask: np.ndarray  # (H, W) uint8
    labels: np.ndarray  # (num_fg,) uint8 multi-hot


def labels_from_mask(mask: np.ndarray, num_fg: int) -> np.ndarray:
    present = np.zeros(num_fg, dtype=np.uint8)
    for c in np.unique(mask):
        if 1 <= c <= num_fg:
            present[c - 1] = 1
    return present


def generate_sample(config: SceneConfig, index: int) -> Sample:
    """Sample ``index`` of the dataset; depends only on ``(config.seed, index)``."""
    rng = seeded_rng(config.seed, index)
    h, w = config.height, config.width
    counts = object_count_range(config)
    n = int(rng.integers(counts.start, counts.stop))
    weights = config.weights().copy()
    classes = []
    for _ in range(n):
        c = int(rng.choice(config.num_fg, p=weights / weights.sum()))
        classes.append(c)
        weights[c] = 0.0
    image = _background(rng, h, w)
    mask = np.zeros((h, w), dtype=np.uint8)
    occupied = np.zeros((h, w), dtype=bool)
    side = min(h, w)
    for c in classes:
        name, shape, rgb = config.palette[c]
        for _ in range(config.max_retries):
            r = rng.uniform(*config.size_range) * side
            cy = rng.uniform(r, h - 1 - r)
            cx = rng.uniform(r, w - 1 - r)
            m = shape_mask(shape, cy, cx, r, h, w)
            grown = m | np.roll(m, 1, 0) | np.roll(m, -1, 0) | np.roll(m, 1, 1) | np.roll(m, -1, 1)
            if m.sum() >= 4 and not np.any(grown & occupied):
                break
        else:
            raise PlacementError(f"sample {index}: could not place {name} after {config.max_retries} tries")
        color = np.clip(np.asarray(rgb) + rng.uniform(-config.color_jitter, config.color_jitter, 3), 0, 1)
        image[:, m] = color[:, None]
        mask[m] = c + 1
        occupied |= m
    image = image + rng.normal(0.0, config.noise, size=image.shape)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8) / 255.0
    return Sample(image=image, mask=mask, labels=labels_from_mask(mask, config.num_fg))


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float64
    masks: np.ndarray  # (N, H, W) uint8
    labels: np.ndarray  # (N, num_fg) uint8
    class_names: tuple  # including "background" at index 0
    ids: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_fg(self) -> int:
        return len(self.class_names) - 1

    def sample(self, i: int) -> Sample:
        return Sample(self.images[i], self.masks[i], self.labels[i])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.masks[idx], self.labels[idx], self.class_names,
                       self.ids[idx], dict(self.meta))

    def split(self) -> tuple["Dataset", "Dataset"]:
        n_train = int(self.meta.get("n_train", len(self)))
        return self.subset(np.arange(n_train)), self.subset(np.arange(n_train, len(self)))

    def equals(self, other: "Dataset") -> bool:
        return (self.class_names == other.class_names
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.masks, other.masks)
                and np.array_equal(self.labels, other.labels))


def generate(config: SceneConfig, n_images: int, n_train: int | None = None) -> Dataset:
    if n_images <= 0:
        raise DatasetError("n_images must be positive")
    samples = [generate_sample(config, i) for i in range(n_images)]
    meta = {"config": config.to_json(), "seed": config.seed, "n_images": n_images,
            "n_train": n_images if n_train is None else int(n_train)}
    return Dataset(images=np.stack([s.image for s in samples]),
                   masks=np.stack([s.mask for s in samples]),
                   labels=np.stack([s.labels for s in samples]),
                   class_names=config.class_names, ids=np.arange(n_images), meta=meta)


def _png_bytes(arr: np.ndarray, mode: str) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def write_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for k, i in enumerate(ds.ids):
        rgb = np.round(ds.images[k].transpose(1, 2, 0) * 255.0).astype(np.uint8)
        (root / "images" / f"{i:04d}.png").write_bytes(_png_bytes(rgb, "RGB"))
        (root / "masks" / f"{i:04d}.png").write_bytes(_png_bytes(ds.masks[k].astype(np.uint8), "L"))
    with open(root / "labels.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["id", "classes"])
        for k, i in enumerate(ds.ids):
            names = [ds.class_names[c + 1] for c in np.flatnonzero(ds.labels[k])]
            wr.writerow([f"{i:04d}", ",".join(names)])
    meta = dict(ds.meta)
    meta["class_names"] = list(ds.class_names)
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def _read_png(path: Path, what: str, ident: str) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"{path}: missing {what} for id {ident}")
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except OSError as exc:
        raise DatasetError(f"{path}: unreadable {what} ({exc})") from exc


def read_dataset(root) -> Dataset:
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"{meta_path}: missing")
    meta = json.loads(meta_path.read_text())
    class_names = tuple(meta.pop("class_names"))
    index = {n: c for c, n in enumerate(class_names)}
    rows = {}
    with open(root / "labels.csv", newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != ["id", "classes"]:
            raise DatasetError(f"{root / 'labels.csv'}: bad header {header}")
        for line, row in enumerate(rd, start=2):
            if len(row) != 2 or not row[0].isdigit():
                raise DatasetError(f"{root / 'labels.csv'}:{line}: malformed row {row}")
            lab = np.zeros(len(class_names) - 1, dtype=np.uint8)
            for name in filter(None, row[1].split(",")):
                if name not in index or index[name] == 0:
                    raise DatasetError(f"{root / 'labels.csv'}:{line}: unknown class {name!r}")
                lab[index[name] - 1] = 1
            rows[int(row[0])] = lab
    ids = np.array(sorted(rows), dtype=np.int64)
    images, masks = [], []
    for i in ids:
        ident = f"{i:04d}"
        rgb = _read_png(root / "images" / f"{ident}.png", "image", ident)
        m = _read_png(root / "masks" / f"{ident}.png", "mask", ident)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise DatasetError(f"{root / 'images' / (ident + '.png')}: expected RGB image")
        if m.shape != rgb.shape[:2]:
            raise DatasetError(f"{root / 'masks' / (ident + '.png')}: mask size differs from image")
        images.append(rgb.transpose(2, 0, 1) / 255.0)
        masks.append(m.astype(np.uint8))
    return Dataset(images=np.stack(images), masks=np.stack(masks),
                   labels=np.stack([rows[i] for i in ids]), class_names=class_names, ids=ids, meta=meta)


def augment(sample: Sample, rng: np.random.Generator, crop: tuple | None = None,
            flip_p: float = 0.5) -> Sample:
    """Random horizontal flip and random crop; labels follow the cropped mask."""
    image, mask = sample.image, sample.mask
    if rng.uniform() < flip_p:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    h, w = mask.shape
    ch, cw = crop if crop is not None else (h, w)
    if ch > h or cw > w:
        raise ValueError(f"crop {crop} larger than canvas {(h, w)}")
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    image = np.ascontiguousarray(image[:, y0:y0 + ch, x0:x0 + cw])
    mask = np.ascontiguousarray(mask[y0:y0 + ch, x0:x0 + cw])
    num_fg = len(sample.labels)
    if np.any(mask == UNLABELED):
        labels = sample.labels.copy()
    else:
        labels = labels_from_mask(mask, num_fg)
    return Sample(image=image, mask=mask, labels=labels)
