"""Seeded synthetic datasets.

Toy 2-D densities stand in for a generic target distribution; grayscale
phantoms (bright elliptical chambers on a dark speckled background, with
chamber masks and a 4-way class label) stand in for echo images. Every
generator is a pure function of its parameters and seed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import ndtr

from . import kernels


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Samples stacked along axis 0, with optional aligned labels and masks."""

    name: str
    samples: np.ndarray
    labels: np.ndarray | None = None
    masks: np.ndarray | None = None
    num_classes: int = 0
    metadata: dict = field(default_factory=dict)
    noisy: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.samples.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.name,
            self.samples[idx],
            None if self.labels is None else self.labels[idx],
            None if self.masks is None else self.masks[idx],
            self.num_classes,
            dict(self.metadata),
            None if self.noisy is None else self.noisy[idx],
        )

    def split(self, train_fraction: float = 0.875) -> tuple["Dataset", "Dataset"]:
        """Deterministic split by index: the first ``train_fraction`` trains."""
        cut = int(round(len(self) * train_fraction))
        return self.subset(np.arange(cut)), self.subset(np.arange(cut, len(self)))

    def audit(self) -> None:
        """Raise :class:`DatasetError` if any structural invariant is broken."""
        n = len(self)
        if n == 0:
            raise DatasetError(f"{self.name}: no samples")
        if not np.all(np.isfinite(self.samples)):
            raise DatasetError(f"{self.name}: non-finite samples")
        if self.labels is not None:
            if self.labels.shape != (n,):
                raise DatasetError(f"{self.name}: labels do not align with samples")
            if np.any(self.labels < 0) or np.any(self.labels >= max(self.num_classes, 1)):
                raise DatasetError(f"{self.name}: label outside [0, {self.num_classes})")
        if self.masks is not None:
            if self.masks.shape[0] != n:
                raise DatasetError(f"{self.name}: masks do not align with samples")
            if not np.all((self.masks == 0) | (self.masks == 1)):
                raise DatasetError(f"{self.name}: masks must be binary")
            if np.any(self.masks.reshape(n, -1).sum(1) == 0):
                raise DatasetError(f"{self.name}: empty mask")
        if self.noisy is not None and self.noisy.shape != self.samples.shape:
            raise DatasetError(f"{self.name}: noisy pairs do not align with samples")


# ---------------------------------------------------------------------------
# toy 2-D densities

TOY_NAMES = ("eight_gaussians", "two_moons", "checkerboard")


def eight_gaussian_means(radius: float = 2.0) -> np.ndarray:
    ang = 2 * np.pi * np.arange(8) / 8
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def gen_toy2d(name: str, n: int, seed: int = 0, *, sigma: float = 0.1, radius: float = 2.0) -> Dataset:
    if name not in TOY_NAMES:
        raise DatasetError(f"unknown toy dataset {name!r}; expected one of {TOY_NAMES}")
    if n < 1:
        raise DatasetError("n must be >= 1")
    rng = np.random.default_rng(seed)
    meta = {"generator": name, "n": n, "seed": seed}
    if name == "eight_gaussians":
        labels = rng.integers(0, 8, size=n)
        x = eight_gaussian_means(radius)[labels] + sigma * rng.standard_normal((n, 2))
        meta.update(sigma=sigma, radius=radius)
        return Dataset(name, x, labels, None, 8, meta)
    if name == "two_moons":
        labels = rng.integers(0, 2, size=n)
        theta = rng.uniform(0, np.pi, size=n)
        outer = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        inner = np.stack([1 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
        x = np.where(labels[:, None] == 0, outer, inner)
        # Truncated at 4 sigma so the support stays bounded.
        x = x + sigma * np.clip(rng.standard_normal((n, 2)), -4, 4)
        meta.update(sigma=sigma)
        return Dataset(name, x, labels, None, 2, meta)
    x1 = rng.uniform(-2, 2, size=n)
    x2 = rng.uniform(0, 1, size=n) - 2 * rng.integers(0, 2, size=n) + np.floor(x1) % 2
    return Dataset(name, 2 * np.stack([x1, x2], axis=1), None, None, 0, meta)


# ---------------------------------------------------------------------------
# phantoms

BACKGROUND_LEVEL = 0.12
PHANTOM_CLASSES = {0: (1, "ED"), 1: (1, "ES"), 2: (2, "ED"), 3: (2, "ES")}


def _ellipse(size, cy, cx, ry, rx):
    c = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _phantom(rng, size, label):
    chambers, phase = PHANTOM_CLASSES[label]
    shrink = 1.0 if phase == "ED" else 0.72
    mask = np.zeros((size, size), dtype=bool)
    if chambers == 1:
        cy, cx = 0.5 + rng.uniform(-0.06, 0.06, size=2)
        ry, rx = np.array([0.32, 0.22]) * shrink * (1 + rng.uniform(-0.08, 0.08, size=2))
        mask |= _ellipse(size, cy, cx, ry, rx)
    else:
        for base in (0.31, 0.69):
            cx = base + rng.uniform(-0.02, 0.02)
            cy = 0.5 + rng.uniform(-0.05, 0.05)
            ry, rx = np.array([0.30, 0.13]) * shrink * (1 + rng.uniform(-0.08, 0.08, size=2))
            mask |= _ellipse(size, cy, cx, ry, rx)
    # Gamma(4, 1/4) speckle has mean 1 and std 0.5.
    background = BACKGROUND_LEVEL * rng.gamma(4.0, 0.25, size=(size, size))
    chamber = rng.uniform(0.7, 0.85) * (1 + 0.04 * rng.standard_normal((size, size)))
    img = np.clip(np.where(mask, np.maximum(chamber, 0.6), background), 0.0, 1.0)
    return img, mask.astype(np.float64)


def gen_phantoms(n: int, size: int = 16, num_classes: int = 4, seed: int = 0) -> Dataset:
    """Speckled phantoms with 1 or 2 bright chambers in two size phases.

    Labels: 0 = one chamber large, 1 = one chamber small, 2 = two chambers
    large, 3 = two chambers small. Masks are the chamber interiors.
    """
    if n < 1:
        raise DatasetError("n must be >= 1")
    if size < 8 or size % 4:
        raise DatasetError("size must be a multiple of 4 and at least 8")
    if num_classes != 4:
        raise DatasetError("phantoms come in exactly 4 classes")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    imgs = np.empty((n, size, size))
    masks = np.empty((n, size, size))
    for i, lab in enumerate(labels):
        imgs[i], masks[i] = _phantom(rng, size, int(lab))
    meta = {"generator": "phantoms", "n": n, "size": size, "seed": seed, "background_level": BACKGROUND_LEVEL}
    return Dataset("phantoms", imgs, labels, masks, num_classes, meta)


def count_components(mask) -> int:
    _, k = ndimage.label(np.asarray(mask) > 0.5)
    return int(k)


def background_mean(dataset: Dataset) -> float:
    """Mean intensity over all non-mask pixels."""
    if dataset.masks is None:
        raise DatasetError("background mean needs masks")
    return float(dataset.samples[dataset.masks == 0].mean())


# ---------------------------------------------------------------------------
# speckle


@dataclass
class NoisePairing:
    clean: np.ndarray
    noisy: np.ndarray
    noise_power: float


def add_speckle(clean, noise_power: float, seed: int = 0) -> NoisePairing:
    """Multiplicative speckle ``clean * (1 + n)``, ``n ~ N(0, noise_power)``, clipped to [0, 1]."""
    clean = np.asarray(clean, dtype=np.float64)
    if not noise_power > 0:
        raise DatasetError("noise_power must be positive")
    if np.any(clean < 0) or np.any(clean > 1):
        raise DatasetError("clean values must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n = np.sqrt(noise_power) * rng.standard_normal(clean.shape)
    return NoisePairing(clean, np.clip(clean * (1.0 + n), 0.0, 1.0), float(noise_power))


def with_speckle(dataset: Dataset, noise_power: float, seed: int = 0) -> Dataset:
    """Copy of ``dataset`` carrying noisy versions of its samples in ``noisy``."""
    out = dataset.subset(np.arange(len(dataset)))
    out.noisy = add_speckle(dataset.samples, noise_power, seed).noisy
    out.metadata.update(noise_power=noise_power, noise_seed=seed)
    return out


# ---------------------------------------------------------------------------
# pixel intensity densities


def _pool(images) -> np.ndarray:
    if isinstance(images, np.ndarray):
        vals = images.ravel()
    else:
        vals = np.concatenate([np.asarray(getattr(im, "data", im), dtype=np.float64).ravel() for im in images]) if len(images) else np.empty(0)
    if vals.size == 0:
        raise DatasetError("no pixels")
    return vals


def pixel_kde(images, grid, bandwidth: float = 0.02) -> np.ndarray:
    """Gaussian KDE of pooled pixel intensities evaluated on ``grid``."""
    if not bandwidth > 0:
        raise DatasetError("bandwidth must be positive")
    return kernels.gaussian_kde(_pool(images), np.asarray(grid, dtype=np.float64), bandwidth)


def kde_band_mass(images, band, bandwidth: float = 0.02) -> float:
    """Exact probability mass of the pixel KDE inside ``band``."""
    lo, hi = band
    vals = _pool(images)
    return float(np.mean(ndtr((hi - vals) / bandwidth) - ndtr((lo - vals) / bandwidth)))


# ---------------------------------------------------------------------------
# files


def _write_pgm(path: Path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    h, w = img.shape
    q = np.round(np.clip(img, 0, 1) * 65535).astype(">u2")
    path.write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + q.tobytes())


def write_pgm(path, img) -> None:
    _write_pgm(Path(path), img)


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end].decode("ascii"))
        pos = end
    pos += 1
    if tokens[0] != "P5":
        raise DatasetError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(blob[pos:], dtype=dtype, count=w * h).reshape(h, w)
    return arr.astype(np.float64) / maxval


def dump_dataset(dataset: Dataset, directory) -> Path:
    """Write images (and masks / noisy pairs) as PGM files plus ``index.json``.

    Pixel values are quantised to 16 bits.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index = {
        "name": dataset.name,
        "num_classes": dataset.num_classes,
        "metadata": dataset.metadata,
        "images": [],
        "masks": None if dataset.masks is None else [],
        "noisy": None if dataset.noisy is None else [],
        "labels": None if dataset.labels is None else [int(v) for v in dataset.labels],
    }
    for i in range(len(dataset)):
        name = f"img_{i:05d}.pgm"
        _write_pgm(d / name, dataset.samples[i])
        index["images"].append(name)
        if dataset.masks is not None:
            name = f"mask_{i:05d}.pgm"
            _write_pgm(d / name, dataset.masks[i])
            index["masks"].append(name)
        if dataset.noisy is not None:
            name = f"noisy_{i:05d}.pgm"
            _write_pgm(d / name, dataset.noisy[i])
            index["noisy"].append(name)
    (d / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return d


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    index = json.loads((d / "index.json").read_text())
    imgs = np.stack([read_pgm(d / f) for f in index["images"]])
    masks = None if index.get("masks") is None else np.stack([read_pgm(d / f) for f in index["masks"]])
    noisy = None if index.get("noisy") is None else np.stack([read_pgm(d / f) for f in index["noisy"]])
    labels = None if index.get("labels") is None else np.asarray(index["labels"], dtype=np.int64)
    return Dataset(index["name"], imgs, labels, masks, index.get("num_classes", 0), index.get("metadata", {}), noisy)


def write_toy_csv(dataset: Dataset, path) -> None:
    """Columns ``x, y, label``; unlabeled points get label -1."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "label"])
        for i, (x, y) in enumerate(dataset.samples):
            lab = -1 if dataset.labels is None else int(dataset.labels[i])
            w.writerow([repr(float(x)), repr(float(y)), lab])


def read_toy_csv(path, name: str = "toy2d") -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    x = np.array([[float(r["x"]), float(r["y"])] for r in rows])
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    if np.all(labels < 0):
        return Dataset(name, x)
    return Dataset(name, x, labels, None, int(labels.max()) + 1)


def make_dataset(spec: dict) -> Dataset:
    """Build a dataset from a ``{"name": ..., "n": ..., "seed": ...}`` record."""
    spec = dict(spec)
    name = spec.pop("name")
    if name == "phantoms":
        return gen_phantoms(**spec)
    return gen_toy2d(name, **spec)
