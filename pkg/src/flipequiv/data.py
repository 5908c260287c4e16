"""Synthetic flip-invariant image sets, flip augmentation and the EQDS file format."""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from flipequiv import tensor as T

DS_MAGIC = b"EQDS"
DS_VERSION = 1

# 7x7 binary stencils.  Most are mirror-asymmetric on purpose: with only
# symmetric shapes every net would be trivially flip invariant.
_S = 7


def _stencil(rows):
    return np.array([[c == "#" for c in r] for r in rows], dtype=np.float64)


SHAPES = {
    "diagonal": _stencil(["#......", ".#.....", "..#....", "...#...", "....#..", ".....#.", "......#"]),
    "corner": _stencil(["#......", "#......", "#......", "#......", "#......", "#......", "#######"]),
    "zigzag": _stencil(["#######", ".....#.", "....#..", "...#...", "..#....", ".#.....", "#######"]),
    "ring": _stencil([".......", ".#####.", ".#...#.", ".#...#.", ".#...#.", ".#####.", "......."]),
    "blob": _stencil(["###....", "###....", "###....", ".......", ".......", ".....#.", "......."]),
    "hook": _stencil(["#####..", "....#..", "....#..", "....#..", "....#..", "..###..", "......."]),
}
DEFAULT_ORDER = ("diagonal", "corner", "zigzag", "ring", "blob", "hook")
# pairs for the cooccurrence set; neither is the mirror image of the other
COOCCUR_ORDER = ("diagonal", "hook")


@dataclass
class DataSpec:
    classes: int = 4
    per_class: int = 1500
    channels: int = 1
    height: int = 33
    width: int = 33
    noise_sigma: float = 0.1
    kind: str = "flip_invariant"
    flip_draws: bool = True

    def validate(self):
        if not 1 <= self.classes <= len(DEFAULT_ORDER):
            raise ValueError(f"classes must lie in [1, {len(DEFAULT_ORDER)}]")
        if self.per_class < 0 or self.channels < 1:
            raise ValueError("per_class must be >= 0 and channels >= 1")
        if self.width % 2 == 0:
            raise ValueError(f"width must be odd, got {self.width}")
        if self.height < _S or self.width < _S:
            raise ValueError(f"images must be at least {_S}x{_S}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float64 holding float32-representable values
    labels: np.ndarray  # [N] int64
    num_classes: int
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],):
            raise ValueError(f"inconsistent dataset shapes {self.images.shape} / {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, count: int) -> "Dataset":
        return Dataset(self.images[:count], self.labels[:count], self.num_classes, dict(self.spec))

    def flipped(self) -> "Dataset":
        return Dataset(T.hflip(self.images), self.labels.copy(), self.num_classes, dict(self.spec))


def _to_f32_grid(x):
    # values stored in files are float32; keep memory and file identical
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def template(name: str, spec: DataSpec, top: int, left: int) -> np.ndarray:
    img = np.zeros((spec.channels, spec.height, spec.width))
    img[:, top : top + _S, left : left + _S] += SHAPES[name]
    return img


def gen_flip_invariant(spec: DataSpec, seed: int) -> Dataset:
    """Oriented shapes at random offsets plus Gaussian noise.

    Each sample is mirrored with probability one half before it is stored,
    so the distribution is flip invariant in law.  Samples are grouped by
    class in generation order and then shuffled once.
    """
    spec.validate()
    rng = T.make_rng(seed)
    n = spec.classes * spec.per_class
    images = np.empty((n, spec.channels, spec.height, spec.width))
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for c in range(spec.classes):
        name = DEFAULT_ORDER[c]
        for _ in range(spec.per_class):
            top = rng.integers(0, spec.height - _S + 1)
            left = rng.integers(0, spec.width - _S + 1)
            img = template(name, spec, top, left)
            if spec.noise_sigma > 0:
                img = img + spec.noise_sigma * rng.standard_normal(img.shape)
            if spec.flip_draws and rng.random() < 0.5:
                img = img[..., ::-1]
            images[i], labels[i] = img, c
            i += 1
    order = rng.permutation(n)
    meta = {"generator": "flip_invariant", "seed": int(seed), "rng": T.RNG_ALGORITHM, **asdict(spec)}
    return Dataset(_to_f32_grid(images[order]), labels[order], spec.classes, meta)


def _place_pair(rng, spec, retries=100):
    """Two non-overlapping 7x7 boxes; raises after ``retries`` failed draws."""
    for _ in range(retries):
        a = (rng.integers(0, spec.height - _S + 1), rng.integers(0, spec.width - _S + 1))
        b = (rng.integers(0, spec.height - _S + 1), rng.integers(0, spec.width - _S + 1))
        if abs(a[0] - b[0]) >= _S or abs(a[1] - b[1]) >= _S:
            return a, b
    raise RuntimeError(f"could not place two non-overlapping shapes in {retries} attempts")


def gen_cooccurrence(spec: DataSpec, seed: int) -> tuple[Dataset, Dataset]:
    """Images that contain a class shape and its mirror image; plus a probe set.

    Returns ``(data, probes)``.  Every image in ``data`` holds the shape in
    both orientations at independent, non-overlapping positions, so its set
    of shape instances is closed under flipping.  ``probes`` hold a single
    instance in one orientation (alternating between the two).
    """
    spec.validate()
    if 2 * _S > spec.width:
        raise ValueError(f"shape width {_S} must be below half the image width {spec.width}")
    if spec.classes > len(COOCCUR_ORDER):
        raise ValueError(f"the cooccurrence set supports at most {len(COOCCUR_ORDER)} classes")
    rng = T.make_rng(seed)
    n = spec.classes * spec.per_class
    shape = (spec.channels, spec.height, spec.width)
    images, probes = np.empty((n,) + shape), np.empty((n,) + shape)
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for c in range(spec.classes):
        stencil = SHAPES[COOCCUR_ORDER[c]]
        for j in range(spec.per_class):
            (t1, l1), (t2, l2) = _place_pair(rng, spec)
            img = np.zeros(shape)
            img[:, t1 : t1 + _S, l1 : l1 + _S] += stencil
            img[:, t2 : t2 + _S, l2 : l2 + _S] += stencil[:, ::-1]
            probe = np.zeros(shape)
            t3, l3 = rng.integers(0, spec.height - _S + 1), rng.integers(0, spec.width - _S + 1)
            probe[:, t3 : t3 + _S, l3 : l3 + _S] += stencil if j % 2 == 0 else stencil[:, ::-1]
            if spec.noise_sigma > 0:
                img = img + spec.noise_sigma * rng.standard_normal(shape)
                probe = probe + spec.noise_sigma * rng.standard_normal(shape)
            images[i], probes[i], labels[i] = img, probe, c
            i += 1
    order = rng.permutation(n)
    meta = {"generator": "cooccurrence", "seed": int(seed), "rng": T.RNG_ALGORITHM, **asdict(spec)}
    data = Dataset(_to_f32_grid(images[order]), labels[order], spec.classes, meta)
    probe_set = Dataset(_to_f32_grid(probes[order]), labels[order], spec.classes, {**meta, "probes": True})
    return data, probe_set


def find_instances(image: np.ndarray, stencil: np.ndarray) -> list[tuple[int, int]]:
    """Top-left corners where ``stencil`` sits exactly in a noise-free single-channel image."""
    img = image[0]
    h, w = img.shape
    k = stencil.shape[0]
    hits = []
    for r in range(h - k + 1):
        for c in range(w - k + 1):
            if np.array_equal(img[r : r + k, c : c + k] * stencil, stencil) and img[r : r + k, c : c + k].sum() == stencil.sum():
                hits.append((r, c))
    return hits


def augment_hflip(batch, prob: float, rng: np.random.Generator) -> np.ndarray:
    """Flip each sample independently with probability ``prob``.

    One uniform draw per sample is consumed regardless of ``prob`` so the
    generator state advances identically for every setting.
    """
    if not 0.0 <= prob <= 1.0:
        raise ValueError("prob must lie in [0, 1]")
    batch = np.asarray(batch)
    flip = rng.random(batch.shape[0]) < prob
    out = batch.copy()
    out[flip] = batch[flip][..., ::-1]
    return out


# --------------------------------------------------------------------------
# EQDS files
# --------------------------------------------------------------------------


class DatasetFormatError(ValueError):
    pass


def dataset_bytes(ds: Dataset) -> bytes:
    n, c, h, w = ds.images.shape
    if ds.num_classes > 255:
        raise DatasetFormatError("label bytes hold at most 255 classes")
    head = DS_MAGIC + struct.pack("<IIIIIH", DS_VERSION, n, c, h, w, ds.num_classes)
    return head + ds.images.astype("<f4").tobytes() + ds.labels.astype(np.uint8).tobytes()


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def dataset_from_bytes(raw: bytes) -> Dataset:
    hsize = 4 + struct.calcsize("<IIIIIH")
    if len(raw) < hsize or raw[:4] != DS_MAGIC:
        raise DatasetFormatError("bad magic: not an EQDS dataset")
    version, n, c, h, w, k = struct.unpack("<IIIIIH", raw[4:hsize])
    if version != DS_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    npix = n * c * h * w
    if len(raw) != hsize + 4 * npix + n:
        raise DatasetFormatError(f"size mismatch: expected {hsize + 4 * npix + n} bytes, got {len(raw)}")
    images = np.frombuffer(raw[hsize : hsize + 4 * npix], dtype="<f4").astype(np.float64).reshape(n, c, h, w)
    labels = np.frombuffer(raw[hsize + 4 * npix :], dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, k)


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
