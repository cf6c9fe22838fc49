"""Dataset manifests, splitting, image I/O and the synthetic texture corpus."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

SPLITS = ("train", "validation", "test")
DEFAULT_RATIOS = (0.7, 0.15, 0.15)
MANIFEST_HEADER = ("path", "label_index", "label_name", "split")


class DataError(ValueError):
    """Bad dataset input: unreadable image, malformed manifest, impossible split."""


@dataclass(frozen=True)
class Record:
    path: str
    label: int
    label_name: str
    split: str = ""


@dataclass
class DatasetManifest:
    records: list[Record]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise DataError("manifest paths must be unique")
        names = {}
        for r in self.records:
            if names.setdefault(r.label, r.label_name) != r.label_name:
                raise DataError(f"label {r.label} has two names: {names[r.label]!r}, {r.label_name!r}")
        if names and sorted(names) != list(range(len(names))):
            raise DataError(f"label indices must be dense in [0, n); got {sorted(names)}")

    @property
    def class_names(self) -> list[str]:
        table = {r.label: r.label_name for r in self.records}
        return [table[i] for i in range(len(table))]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, split: str) -> list[Record]:
        return [r for r in self.records if r.split == split]

    def resolve(self, record: Record) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def counts(self) -> dict[str, int]:
        return {s: len(self.subset(s)) for s in SPLITS}


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            w.writerow((r.path, r.label, r.label_name, r.split))
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != MANIFEST_HEADER:
        raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
    records = []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise DataError(f"{path}:{n}: expected 4 fields, got {len(row)}")
        if row[3] not in SPLITS:
            raise DataError(f"{path}:{n}: unknown split {row[3]!r}")
        try:
            label = int(row[1])
        except ValueError:
            raise DataError(f"{path}:{n}: label_index {row[1]!r} is not an integer") from None
        records.append(Record(row[0], label, row[2], row[3]))
    return DatasetManifest(records, root=path.parent)


def split(items: Sequence[Record], ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0,
          root=None) -> DatasetManifest:
    """Stratified shuffle into train/validation/test.

    Per class, validation and test receive floor(n * ratio) items and train
    takes the remainder.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, item in enumerate(items):
        by_class.setdefault(item.label, []).append(i)
    assignment = [""] * len(items)
    for label in sorted(by_class):
        members = by_class[label]
        n = len(members)
        # 1e-9 guards float products such as 140 * (1/7)
        n_val = math.floor(n * ratios[1] + 1e-9)
        n_test = math.floor(n * ratios[2] + 1e-9)
        n_train = n - n_val - n_test
        if min(n_train, n_val, n_test) < 1:
            raise DataError(f"class {label} has {n} items; too few for ratios {ratios} "
                            f"(would give {n_train}/{n_val}/{n_test})")
        order = rng.permutation(n)
        for rank, j in enumerate(order):
            assignment[members[j]] = "train" if rank < n_train else (
                "validation" if rank < n_train + n_val else "test")
    records = [replace(item, split=s) for item, s in zip(items, assignment)]
    return DatasetManifest(records, root=Path(root) if root is not None else Path())


# -- images ------------------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """3 x H x W float array with values byte / 255."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode, arr = im.mode, np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    if mode != "RGB" or arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"{path}: expected a 3-channel RGB image, got mode {mode}")
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def save_image(img: np.ndarray, path) -> Path:
    """Write a 3 x H x W array (floats in [0, 1] or uint8) as PNG."""
    path = Path(path)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"save_image expects 3 x H x W, got {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(img.transpose(1, 2, 0)), mode="RGB").save(path, format="PNG")
    return path


def _interp_weights(src: int, dst: int):
    # half-pixel centres, edge clamped
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def resize(img: np.ndarray, target: int) -> np.ndarray:
    """Bilinear rescale of a C x H x W image to C x target x target."""
    if target < 1:
        raise ValueError(f"resize target must be >= 1, got {target}")
    c, h, w = img.shape
    if h == target and w == target:
        return img.copy()
    r0, r1, fr = _interp_weights(h, target)
    c0, c1, fc = _interp_weights(w, target)
    rows = img[:, r0, :] * (1 - fr)[None, :, None] + img[:, r1, :] * fr[None, :, None]
    return rows[:, :, c0] * (1 - fc) + rows[:, :, c1] * fc


def load_split(manifest: DatasetManifest, split_name: str, resolution: int,
               dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Images of one split stacked as B x 3 x R x R, plus their labels."""
    recs = manifest.subset(split_name)
    x = np.empty((len(recs), 3, resolution, resolution), dtype=dtype)
    for i, r in enumerate(recs):
        x[i] = resize(load_image(manifest.resolve(r)), resolution)
    y = np.array([r.label for r in recs], dtype=np.int64)
    return x, y


# -- synthetic corpus ------------------------------------------------------------------------


@dataclass(frozen=True)
class TextureParams:
    frequency: float  # cycles per pixel of the pass band centre
    orientation: float  # degrees
    noise: float  # amplitude of additive pixel noise


def default_textures(classes: int) -> tuple[TextureParams, ...]:
    """Log-spaced frequencies, evenly spread orientations."""
    if classes < 1:
        raise ValueError("classes must be positive")
    freqs = np.geomspace(0.08, 0.32, classes) if classes > 1 else np.array([0.1])
    return tuple(TextureParams(float(round(f, 6)), 180.0 * k / classes, 0.05)
                 for k, f in enumerate(freqs))


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 3
    per_class: int = 10
    resolution: int = 64
    seed: int = 0
    textures: tuple[TextureParams, ...] = ()
    ratios: tuple[float, float, float] = DEFAULT_RATIOS

    def __post_init__(self):
        if self.classes < 1 or self.per_class < 1 or self.resolution < 4:
            raise ValueError(f"invalid synthetic spec: {self}")
        if not self.textures:
            object.__setattr__(self, "textures", default_textures(self.classes))
        if len(self.textures) != self.classes:
            raise ValueError(f"{len(self.textures)} texture sets for {self.classes} classes")
        if len(set(self.textures)) != len(self.textures):
            raise ValueError("texture parameter sets must be pairwise distinct")


def texture(params: TextureParams, resolution: int, rng: np.random.Generator) -> np.ndarray:
    """One oriented band-limited noise image, uint8 3 x R x R."""
    n = resolution
    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.fftfreq(n)[None, :]
    radius = np.hypot(fx, fy)
    freq = params.frequency * rng.uniform(0.9, 1.1)
    theta = np.deg2rad(params.orientation + rng.uniform(-10, 10))
    band = np.exp(-0.5 * ((radius - freq) / (0.2 * freq)) ** 2)
    # angular window folded so that +theta and theta+180 both pass (real output)
    angle = np.arctan2(fy, fx)
    delta = np.angle(np.exp(2j * (angle - theta))) / 2
    wedge = np.exp(-0.5 * (delta / np.deg2rad(20)) ** 2)
    spectrum = np.fft.fft2(rng.standard_normal((n, n))) * band * wedge
    field_ = np.real(np.fft.ifft2(spectrum))
    field_ = (field_ - field_.mean()) / (field_.std() + 1e-12)
    gray = 0.5 + rng.uniform(-0.08, 0.08) + 0.17 * field_
    tint = np.array([1.0, 0.96, 0.9])[:, None, None]
    rgb = gray[None] * tint + params.noise * rng.standard_normal((3, n, n))
    return np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec, out_dir, manifest_name: str = "manifest.csv") -> DatasetManifest:
    """Write ``classes x per_class`` PNG textures plus a split manifest under ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {out_dir} is not writable: {exc}") from None
    items = []
    for c, params in enumerate(spec.textures):
        name = f"class_{c}"
        for i in range(spec.per_class):
            rng = np.random.default_rng([spec.seed, c, i])
            rel = Path("images") / name / f"{name}_{i:04d}.png"
            save_image(texture(params, spec.resolution, rng), out_dir / rel)
            items.append(Record(rel.as_posix(), c, name))
    manifest = split(items, spec.ratios, seed=spec.seed, root=out_dir)
    write_manifest(manifest, out_dir / manifest_name)
    return manifest


def iter_batches(n: int, batch_size: int, order: Iterable[int] | None = None):
    idx = np.arange(n) if order is None else np.asarray(list(order))
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]
