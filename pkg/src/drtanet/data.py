"""Change-detection datasets: PCD, VL-CMU-CD and a seeded synthetic generator.

Directory layout shared by every source::

    <root>/t0/<name>.png     RGB image at the earlier time
    <root>/t1/<name>.png     RGB image at the later time
    <root>/mask/<name>.png   grayscale change mask, 0 = unchanged, 255 = changed

PCD uses one such directory per subset (``<root>/tsunami``, ``<root>/gsv``);
VL-CMU-CD uses one per sequence (``<root>/<sequence id>``). Synthetic data is
written directly in this layout, so loaders and commands are source-agnostic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
PCD_SIZE = (224, 1024)
PCD_PATCH = 224
PCD_STRIDE = 56
PCD_PATCHES_PER_PAIR = 4 * ((PCD_SIZE[1] - PCD_PATCH) // PCD_STRIDE + 1)
PCD_SUBSETS = ("tsunami", "gsv")
VL_CMU_CD_SIZE = (512, 512)


@dataclass
class ImagePair:
    t0: np.ndarray
    t1: np.ndarray
    mask: np.ndarray | None = None
    name: str = ""
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.t0.shape != self.t1.shape or self.t0.ndim != 3 or self.t0.shape[2] != 3:
            raise ValueError(f"{self.name or 'pair'}: t0 {self.t0.shape} and t1 {self.t1.shape} must be equal (H, W, 3)")
        if self.mask is not None:
            if self.mask.shape != self.t0.shape[:2]:
                raise ValueError(f"{self.name or 'pair'}: mask {self.mask.shape} does not match images {self.t0.shape}")
            if not np.isin(self.mask, (0, 1)).all():
                raise ValueError(f"{self.name or 'pair'}: mask values must be 0 or 1")

    @property
    def size(self) -> tuple[int, int]:
        return self.t0.shape[:2]

    def transformed(self, fn, name: str | None = None) -> "ImagePair":
        """Apply the same geometric transform to t0, t1 and mask."""
        return ImagePair(
            np.ascontiguousarray(fn(self.t0)),
            np.ascontiguousarray(fn(self.t1)),
            None if self.mask is None else np.ascontiguousarray(fn(self.mask)),
            name=name if name is not None else self.name,
        )

    def rotated(self, k: int) -> "ImagePair":
        return self.transformed(lambda a: np.rot90(a, k, axes=(0, 1)), name=f"{self.name}_r{k * 90}")

    def resized(self, size: tuple[int, int]) -> "ImagePair":
        """Bilinear resize of the images, nearest-neighbor resize of the mask."""
        if tuple(size) == self.size:
            return self
        h, w = size
        t0 = np.asarray(Image.fromarray(self.t0).resize((w, h), Image.BILINEAR))
        t1 = np.asarray(Image.fromarray(self.t1).resize((w, h), Image.BILINEAR))
        mask = None
        if self.mask is not None:
            mask = np.asarray(Image.fromarray(self.mask).resize((w, h), Image.NEAREST))
        return ImagePair(t0, t1, mask, name=self.name)


@dataclass
class DatasetSpec:
    source: str = "synthetic"  # pcd_tsunami | pcd_gsv | vl_cmu_cd | synthetic
    split: str = "train"
    root: str = ""
    seed: int = 0
    resize_to: tuple = (256, 256)
    n_pairs: int = 200
    strip_fraction: float = 0.3
    fold: int = 0
    n_folds: int = 5
    fold_seed: int = 0

    def __post_init__(self):
        if self.source not in ("pcd_tsunami", "pcd_gsv", "vl_cmu_cd", "synthetic"):
            raise ValueError(f"unknown dataset source {self.source!r}")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        self.resize_to = tuple(int(s) for s in self.resize_to)
        if any(s % 32 for s in self.resize_to):
            raise ValueError(f"resize_to {self.resize_to} must be divisible by 32")


# ---------------------------------------------------------------------------
# PNG I/O


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise ValueError(f"{path}: cannot read image ({exc})") from None
    if img.mode in ("I", "I;16", "I;16B", "I;16L", "F") or img.mode.endswith(";16"):
        raise ValueError(f"{path}: unsupported {img.mode} image; expected 8-bit data")
    return img


def load_image(path) -> np.ndarray:
    img = _open(path)
    if img.mode != "RGB":
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.uint8).copy()


def load_mask(path) -> np.ndarray:
    """Grayscale mask -> {0, 1}, thresholded at 128."""
    img = _open(path)
    if img.mode != "L":
        img = img.convert("L")
    return (np.asarray(img) >= 128).astype(np.uint8)


def save_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path)


def save_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ValueError(f"{path}: mask values must be 0 or 1")
    Image.fromarray((m * 255).astype(np.uint8), mode="L").save(path)


def load_png_pair(t0_path, t1_path, mask_path=None) -> ImagePair:
    mask = load_mask(mask_path) if mask_path is not None else None
    return ImagePair(load_image(t0_path), load_image(t1_path), mask, name=Path(t0_path).stem)


def _list_images(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _match(directory: Path, stem: str) -> Path | None:
    for suffix in IMAGE_SUFFIXES:
        p = directory / f"{stem}{suffix}"
        if p.exists():
            return p
    return None


def pair_paths(root) -> list[tuple[Path, Path, Path | None]]:
    """(t0, t1, mask) paths of a layout directory, sorted by name."""
    root = Path(root)
    for sub in ("t0", "t1"):
        if not (root / sub).is_dir():
            raise FileNotFoundError(f"{root}: missing {sub}/ directory")
    out = []
    for p0 in _list_images(root / "t0"):
        p1 = _match(root / "t1", p0.stem)
        if p1 is None:
            raise FileNotFoundError(f"{root}: no t1 image for {p0.name}")
        pm = _match(root / "mask", p0.stem) if (root / "mask").is_dir() else None
        out.append((p0, p1, pm))
    return out


def load_dataset(root, resize_to: tuple[int, int] | None = None) -> list[ImagePair]:
    pairs = [load_png_pair(*paths) for paths in pair_paths(root)]
    if resize_to is not None:
        pairs = [p.resized(resize_to) for p in pairs]
    return pairs


def write_dataset(pairs: Iterable[ImagePair], root) -> Path:
    root = Path(root)
    for sub in ("t0", "t1", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(pairs):
        name = pair.name or f"{i:05d}"
        save_image(root / "t0" / f"{name}.png", pair.t0)
        save_image(root / "t1" / f"{name}.png", pair.t1)
        if pair.mask is not None:
            save_mask(root / "mask" / f"{name}.png", pair.mask)
    return root


# ---------------------------------------------------------------------------
# PCD


def pcd_preprocess(pair: ImagePair) -> list[ImagePair]:
    """Slide a 224x224 window by 56 px across a 224x1024 panorama, then rotate by 0/90/180/270 degrees."""
    if pair.size != PCD_SIZE:
        raise ValueError(f"PCD pairs must be {PCD_SIZE[0]}x{PCD_SIZE[1]}, got {pair.size[0]}x{pair.size[1]}")
    patches = []
    for x in range(0, PCD_SIZE[1] - PCD_PATCH + 1, PCD_STRIDE):
        crop = pair.transformed(lambda a, x=x: a[:, x : x + PCD_PATCH], name=f"{pair.name}_x{x}")
        for k in range(4):
            patches.append(crop.rotated(k))
    return patches


def fold_assignment(n_items: int, n_folds: int = 5, fold_seed: int = 0) -> np.ndarray:
    """Fold index per item: a seeded permutation dealt round-robin into folds."""
    perm = np.random.default_rng(fold_seed).permutation(n_items)
    folds = np.empty(n_items, dtype=np.int64)
    folds[perm] = np.arange(n_items) % n_folds
    return folds


def iter_pcd_patches(root, subsets: Iterable[str] = PCD_SUBSETS) -> Iterator[ImagePair]:
    """Stream patches pair by pair, so full subsets can be counted without holding them."""
    for subset in subsets:
        for paths in pair_paths(Path(root) / subset):
            pair = load_png_pair(*paths)
            pair.name = f"{subset}_{pair.name}"
            yield from pcd_preprocess(pair)


def pcd_patches(root, subsets: Iterable[str] = PCD_SUBSETS) -> list[ImagePair]:
    """All 60-per-pair patches of the requested PCD subsets."""
    return list(iter_pcd_patches(root, subsets))


def pcd_split(patches: list[ImagePair], split: str, fold: int = 0, n_folds: int = 5, fold_seed: int = 0):
    """80-20 (for 5 folds) cross-validation split by patch index."""
    folds = fold_assignment(len(patches), n_folds, fold_seed)
    if split == "test":
        return [p for p, f in zip(patches, folds) if f == fold]
    return [p for p, f in zip(patches, folds) if f != fold]


# ---------------------------------------------------------------------------
# VL-CMU-CD


@dataclass(frozen=True)
class PairRecord:
    sequence: str
    t0: Path
    t1: Path
    mask: Path | None


def default_vl_cmu_cd_split() -> dict:
    text = resources.files("drtanet").joinpath("vl_cmu_cd_split.json").read_text()
    return json.loads(text)


def vlcmucd_split(root, split_file=None) -> tuple[list[PairRecord], list[PairRecord]]:
    """Train/test pair records from ``<root>/<sequence id>/{t0,t1,mask}``.

    The split is a fixed list of sequence ids; pairs of one sequence never
    appear in both splits. A ``split.json`` in ``root`` overrides the bundled list.
    """
    root = Path(root)
    if split_file is None and (root / "split.json").is_file():
        split_file = root / "split.json"
    spec = default_vl_cmu_cd_split() if split_file is None else json.loads(Path(split_file).read_text())
    train_ids, test_ids = list(spec["train"]), list(spec["test"])
    overlap = sorted(set(train_ids) & set(test_ids))
    if overlap:
        raise ValueError(f"split lists sequences in both train and test: {', '.join(overlap)}")
    missing = [s for s in train_ids + test_ids if not (root / s).is_dir()]
    if missing:
        raise FileNotFoundError(f"{root}: missing VL-CMU-CD sequences: {', '.join(missing)}")

    def records(ids):
        out = []
        for seq in ids:
            for p0, p1, pm in pair_paths(root / seq):
                out.append(PairRecord(seq, p0, p1, pm))
        return out

    return records(train_ids), records(test_ids)


def load_records(records: Iterable[PairRecord], resize_to=VL_CMU_CD_SIZE, rotate: bool = False) -> list[ImagePair]:
    """Load, resize and (for training) expand each pair by the four plane rotations."""
    out = []
    for rec in records:
        pair = load_png_pair(rec.t0, rec.t1, rec.mask).resized(tuple(resize_to))
        pair.name = f"{rec.sequence}_{pair.name}"
        out.extend([pair.rotated(k) for k in range(4)] if rotate else [pair])
    return out


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class Shape:
    """Axis-aligned rectangle or ellipse with a textured fill.

    Coverage is tested at integer pixel coordinates: a rectangle covers
    ``|y - cy| <= ry and |x - cx| <= rx``; an ellipse covers
    ``((y - cy) / ry)**2 + ((x - cx) / rx)**2 <= 1``.
    """

    ident: int
    kind: str  # rect | ellipse
    cy: float
    cx: float
    ry: float
    rx: float
    color: tuple
    texture_seed: int

    def covers(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        if self.kind == "rect":
            return (np.abs(yy - self.cy) <= self.ry) & (np.abs(xx - self.cx) <= self.rx)
        return ((yy - self.cy) / self.ry) ** 2 + ((xx - self.cx) / self.rx) ** 2 <= 1.0

    @property
    def is_strip(self) -> bool:
        a, b = 2 * self.ry + 1, 2 * self.rx + 1
        return max(a, b) / min(a, b) >= 6


def label_map(shapes: list[Shape], size: int) -> np.ndarray:
    """Identity of the topmost shape at each pixel (0 = background); later shapes are on top."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    labels = np.zeros((size, size), dtype=np.int64)
    for s in shapes:
        labels[s.covers(yy, xx)] = s.ident
    return labels


def _random_shape(rng: np.random.Generator, ident: int, size: int, strip: bool) -> Shape:
    if strip:
        thick = rng.uniform(2.0, 3.0)  # half thickness
        full = 2 * thick + 1
        lo = 6 * full  # full length >= 6x full thickness
        length = rng.uniform(lo, max(lo, 0.8 * size)) / 2
        if rng.random() < 0.5:
            ry, rx = length, thick
        else:
            ry, rx = thick, length
        kind = "rect"
    else:
        ry = rng.uniform(0.14, 0.3) * size
        rx = rng.uniform(0.14, 0.3) * size
        kind = "rect" if rng.random() < 0.5 else "ellipse"
    color = tuple(float(c) for c in rng.uniform(20, 235, size=3))
    return Shape(ident, kind, 0.0, 0.0, float(ry), float(rx), color, int(rng.integers(2**31)))


def _overlaps(a: Shape, b: Shape, margin: float = 1.0) -> bool:
    return abs(a.cy - b.cy) <= a.ry + b.ry + margin and abs(a.cx - b.cx) <= a.rx + b.rx + margin


def _place(rng: np.random.Generator, shape: Shape, size: int, taken: list[Shape], tries: int = 30) -> Shape:
    """Position ``shape`` so its bounding box avoids ``taken``; the last draw is kept if none fits."""
    for _ in range(tries):
        cy = rng.uniform(shape.ry * 0.5, size - 1 - shape.ry * 0.5)
        cx = rng.uniform(shape.rx * 0.5, size - 1 - shape.rx * 0.5)
        placed = replace(shape, cy=float(cy), cx=float(cx))
        if not any(_overlaps(placed, t) for t in taken):
            break
    return placed


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    """Blurred Gaussian noise (size, size, 3) rescaled to unit standard deviation."""
    n = gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(sigma, sigma, 0))
    return n / n.std()


def _texture(seed: int, size: int) -> np.ndarray:
    return _smooth_noise(np.random.default_rng(seed), size, 2.0)


def _render(background: np.ndarray, shapes: list[Shape]) -> np.ndarray:
    size = background.shape[0]
    img = background.copy()
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for s in shapes:
        m = s.covers(yy, xx)
        img[m] = np.asarray(s.color) + TEXTURE_CONTRAST * _texture(s.texture_seed, size)[m]
    return img


BACKGROUND_CONTRAST = 40.0
TEXTURE_CONTRAST = 40.0


def synth_pair(
    seed: int,
    index: int,
    size: int = 64,
    strip_fraction: float = 0.3,
    n_static: tuple[int, int] = (1, 4),
    n_changes: tuple[int, int] | int = (1, 3),
    brightness: float = 20.0,
    noise: float = 4.0,
) -> ImagePair:
    """One synthetic scene pair; depends only on (seed, index).

    Objects are placed without bounding-box overlap where possible, so change
    regions are whole objects rather than occlusion fragments.
    """
    if size % 32:
        raise ValueError(f"synthetic image size {size} must be divisible by 32")
    rng = np.random.default_rng([seed, index])
    bg_base = rng.uniform(60, 190, size=3)
    background = bg_base + BACKGROUND_CONTRAST * _smooth_noise(rng, size, 3.0)

    next_id = 1
    taken: list[Shape] = []

    def make(strip_p, shape=None):
        nonlocal next_id
        if shape is None:
            shape = _random_shape(rng, next_id, size, rng.random() < strip_p)
        s = _place(rng, replace(shape, ident=next_id), size, taken)
        taken.append(s)
        next_id += 1
        return s

    static = [make(strip_fraction * 0.5) for _ in range(rng.integers(n_static[0], n_static[1] + 1))]
    if isinstance(n_changes, int):
        k = n_changes
    else:
        k = int(rng.integers(n_changes[0], n_changes[1] + 1))
    removed, added, moved_old, moved_new = [], [], [], []
    for _ in range(k):
        kind = rng.choice(["remove", "add", "move"])
        if kind == "remove":
            removed.append(make(strip_fraction))
        elif kind == "add":
            added.append(make(strip_fraction))
        else:
            old = make(strip_fraction)
            moved_old.append(old)
            moved_new.append(make(strip_fraction, shape=old))

    # draw order: one z value per object, shared across both times
    shapes_t0 = static + removed + moved_old
    shapes_t1 = static + added + moved_new
    z = {s.ident: float(rng.random()) for s in shapes_t0 + shapes_t1}
    shapes_t0.sort(key=lambda s: z[s.ident])
    shapes_t1.sort(key=lambda s: z[s.ident])

    img0 = _render(background, shapes_t0)
    img1 = _render(background, shapes_t1)
    img0 = img0 + rng.normal(0, noise * 0.5, img0.shape)
    img1 = img1 + rng.uniform(-brightness, brightness) + rng.normal(0, noise, img1.shape)
    mask = (label_map(shapes_t0, size) != label_map(shapes_t1, size)).astype(np.uint8)
    return ImagePair(
        np.clip(np.round(img0), 0, 255).astype(np.uint8),
        np.clip(np.round(img1), 0, 255).astype(np.uint8),
        mask,
        name=f"{index:05d}",
        meta={"shapes_t0": shapes_t0, "shapes_t1": shapes_t1, "changed": k},
    )


def synth_generate(
    seed: int, n_pairs: int, size: int = 64, strip_fraction: float = 0.3, start: int = 0, **kwargs
) -> list[ImagePair]:
    """``n_pairs`` synthetic pairs with indices ``start .. start + n_pairs - 1``."""
    return [synth_pair(seed, i, size, strip_fraction, **kwargs) for i in range(start, start + n_pairs)]


def load_from_spec(spec: DatasetSpec) -> list[ImagePair]:
    if spec.source == "synthetic":
        if spec.root:
            return load_dataset(spec.root, spec.resize_to)
        size = spec.resize_to[0]
        start = 0 if spec.split == "train" else 1_000_000
        return synth_generate(spec.seed, spec.n_pairs, size, spec.strip_fraction, start=start)
    if spec.source in ("pcd_tsunami", "pcd_gsv"):
        subset = spec.source.split("_", 1)[1]
        n = PCD_PATCHES_PER_PAIR * len(pair_paths(Path(spec.root) / subset))
        folds = fold_assignment(n, spec.n_folds, spec.fold_seed)
        keep = folds == spec.fold if spec.split == "test" else folds != spec.fold
        # resize while streaming so only the selected split is ever held
        return [p.resized(spec.resize_to) for p, k in zip(iter_pcd_patches(spec.root, [subset]), keep) if k]
    train, test = vlcmucd_split(spec.root)
    if spec.split == "train":
        return load_records(train, spec.resize_to, rotate=True)
    return load_records(test, spec.resize_to, rotate=False)
