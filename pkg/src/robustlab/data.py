"""Deterministic synthetic dataset generators, archives and batch iteration.

Two generators:

* `gen_alphabet` -- 26 letter classes, each image a rasterized glyph from an
  embedded 7x9 bitmap font at a random offset plus uniform pixel noise.
* `gen_synth_source` -- a parameterized source task whose classes at
  difficulty level d are distinguishable only by combining at least d visual
  factors (intensity, shape, texture orientation, satellite layout).

Every generator is a pure function of its spec; the provenance record stored
on the dataset regenerates it bitwise.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile

import numpy as np

ARCHIVE_VERSION = 1


class ArchiveError(Exception):
    """Base class for archive load failures."""


class ManifestError(ArchiveError):
    """Missing or corrupt manifest."""


class TruncatedPayloadError(ArchiveError):
    """Binary payload shorter than the manifest declares."""


class ChecksumError(ArchiveError):
    """Payload checksum does not match the manifest."""


@dataclasses.dataclass
class Dataset:
    """Labeled image collection; images (n,c,h,w) float32 in [0,1]."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str
    provenance: dict

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.images.ndim != 4:
            raise ValueError(f"images must be 4d, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must be one integer per image")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values outside [0,1]")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.num_classes,
                       self.split, dict(self.provenance, subset=True))


# ---------------------------------------------------------------------------
# Embedded 7x9 glyph font (5x7 core padded by one blank row/column per side)
# ---------------------------------------------------------------------------

_FONT_5X7 = {
    "A": (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "B": ("####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."),
    "C": (".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."),
    "D": ("####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."),
    "E": ("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
    "F": ("#####", "#....", "#....", "####.", "#....", "#....", "#...."),
    "G": (".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".###."),
    "H": ("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "I": (".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "J": ("..###", "....#", "....#", "....#", "#...#", "#...#", ".###."),
    "K": ("#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"),
    "L": ("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
    "M": ("#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"),
    "N": ("#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"),
    "O": (".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "P": ("####.", "#...#", "#...#", "####.", "#....", "#....", "#...."),
    "Q": (".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"),
    "R": ("####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"),
    "S": (".####", "#....", "#....", ".###.", "....#", "....#", "####."),
    "T": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "U": ("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "V": ("#...#", "#...#", "#...#", "#...#", ".#.#.", ".#.#.", "..#.."),
    "W": ("#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"),
    "X": ("#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"),
    "Y": ("#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."),
    "Z": ("#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"),
}

LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


def _glyph_bitmap(letter):
    """7x9 bitmap: the 5x7 glyph padded by one blank row/column on each side."""
    core = np.array([[c == "#" for c in row] for row in _FONT_5X7[letter]],
                    dtype=np.float32)
    return np.pad(core, ((1, 1), (1, 1)))


def _render_alphabet_split(rng, per_class, image_size, noise_amplitude,
                           glyph_contrast, background):
    scale = image_size // 16
    glyphs = {c: np.kron(_glyph_bitmap(c), np.ones((scale, scale),
                                                   dtype=np.float32))
              for c in LETTERS}
    gh, gw = 9 * scale, 7 * scale
    n = 26 * per_class
    images = np.zeros((n, 1, image_size, image_size), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int32)
    i = 0
    for ci, letter in enumerate(LETTERS):
        for _ in range(per_class):
            top = rng.integers(0, image_size - gh + 1)
            left = rng.integers(0, image_size - gw + 1)
            img = np.full((image_size, image_size), background,
                          dtype=np.float32)
            img[top:top + gh, left:left + gw] += glyph_contrast * glyphs[letter]
            noise = rng.uniform(-noise_amplitude, noise_amplitude,
                                size=img.shape).astype(np.float32)
            images[i, 0] = np.clip(img + noise, 0.0, 1.0)
            labels[i] = ci
            i += 1
    return images, labels


def gen_alphabet(seed, train_per_class=1000, test_per_class=200,
                 image_size=32, noise_amplitude=0.1, glyph_contrast=1.0,
                 background=0.0):
    """Generate the 26-class letter dataset; returns (train, test) Datasets."""
    if train_per_class < 1 or test_per_class < 1:
        raise ValueError("per-class counts must be >= 1")
    if image_size < 16:
        raise ValueError(
            f"image_size {image_size} too small to contain a glyph (min 16)")
    if not 0.0 < glyph_contrast <= 1.0:
        raise ValueError("glyph_contrast must be in (0, 1]")
    if not 0.0 <= background <= 1.0 - glyph_contrast:
        raise ValueError("background must leave glyph headroom in [0, 1]")
    splits = []
    for split_idx, (split, per_class) in enumerate(
            [("train", train_per_class), ("test", test_per_class)]):
        rng = np.random.default_rng([seed, split_idx])
        images, labels = _render_alphabet_split(rng, per_class, image_size,
                                                noise_amplitude,
                                                glyph_contrast, background)
        prov = {
            "generator": "alphabet",
            "seed": int(seed),
            "train_per_class": int(train_per_class),
            "test_per_class": int(test_per_class),
            "image_size": int(image_size),
            "noise_amplitude": float(noise_amplitude),
            "glyph_contrast": float(glyph_contrast),
            "background": float(background),
            "split": split,
        }
        splits.append(Dataset(images, labels, 26, split, prov))
    return tuple(splits)


# ---------------------------------------------------------------------------
# Parameterized synthetic source task
# ---------------------------------------------------------------------------

_INTENSITIES = (0.15, 0.85, 0.35, 0.65)
_SHAPES = ("disc", "square", "triangle", "ring")
_TEXTURE_ANGLES = (0.0, 90.0, 45.0, 135.0)
_SATELLITES = ((-1, 0), (1, 0), (0, -1), (0, 1))  # above, below, left, right
_FACTOR_CARD = 4


@dataclasses.dataclass
class SynthSourceSpec:
    """Spec for the synthetic source task with a difficulty knob.

    At difficulty d, class identity depends on the first d factors and no
    subset of d-1 factors separates all classes.
    """

    num_classes: int
    difficulty: int
    train_per_class: int = 500
    test_per_class: int = 100
    image_size: int = 32
    seed: int = 0
    texture_amplitude: float = 0.06
    noise_amplitude: float = 0.02
    contrast: float = 1.0

    def __post_init__(self):
        if self.difficulty < 1 or self.difficulty > 4:
            raise ValueError("difficulty must be in 1..4")
        if not 0.0 < self.contrast <= 1.0:
            raise ValueError("contrast must be in (0, 1]")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")

    def max_classes(self):
        return _FACTOR_CARD ** self.difficulty


def _class_tuples(spec):
    """Deterministic class -> factor-value tuples.

    First the all-zeros tuple, then for each factor a tuple differing from it
    only in that factor (so dropping any factor collapses at least one class
    pair), then a seeded shuffle of the remaining combinations.
    """
    d, n = spec.difficulty, spec.num_classes
    if n > spec.max_classes():
        raise ValueError(
            f"num_classes {n} exceeds factor combinatorics at difficulty "
            f"{d}; maximum supported is {spec.max_classes()}")
    base = [tuple(0 for _ in range(d))]
    for j in range(d):
        t = [0] * d
        t[j] = 1
        base.append(tuple(t))
    seen = set(base)
    rest = [t for t in np.ndindex(*([_FACTOR_CARD] * d))
            if tuple(int(v) for v in t) not in seen]
    rest = [tuple(int(v) for v in t) for t in rest]
    rng = np.random.default_rng([spec.seed, 7])
    rng.shuffle(rest)
    return (base + rest)[:n]


def _shape_mask(kind, size, cy, cx, radius):
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    if kind == "disc":
        return dy * dy + dx * dx <= radius * radius
    if kind == "square":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if kind == "triangle":
        # upward triangle: below the apex, inside the slanted sides
        return (dy >= -radius) & (dy <= radius) & \
               (np.abs(dx) <= (dy + radius) / 2 + 0.5)
    if kind == "ring":
        r2 = dy * dy + dx * dx
        return (r2 <= radius * radius) & (r2 >= (radius * 0.55) ** 2)
    raise ValueError(kind)


# radius multipliers equalizing pixel area across shapes, so mean intensity
# reflects only the intensity factor and stays blind to the shape factor
_AREA_SCALE = {
    "disc": 1.0,
    "square": float(np.sqrt(np.pi) / 2),
    "triangle": float(np.sqrt(np.pi / 2)),
    "ring": float(1.0 / np.sqrt(1.0 - 0.55 ** 2)),
}


def _render_synth_image(rng, spec, factors):
    size = spec.image_size
    d = spec.difficulty
    intensity = _INTENSITIES[factors[0]]
    shape = _SHAPES[factors[1]] if d >= 2 else "disc"
    radius = (size // 5) * _AREA_SCALE[shape]
    margin = int(radius) + (8 if d >= 4 else 2)
    cy = int(rng.integers(margin, size - margin + 1))
    cx = int(rng.integers(margin, size - margin + 1))
    img = np.full((size, size), 0.5, dtype=np.float32)
    mask = _shape_mask(shape, size, cy, cx, radius)
    img[mask] = intensity
    if d >= 3:
        angle = np.deg2rad(_TEXTURE_ANGLES[factors[2]])
        yy, xx = np.mgrid[0:size, 0:size]
        phase = rng.uniform(0, 2 * np.pi)
        freq = 2 * np.pi / 4.0  # 4-pixel stripe period
        wave = np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        img[mask] += spec.texture_amplitude * wave[mask].astype(np.float32)
    if d >= 4:
        oy, ox = _SATELLITES[factors[3]]
        sy, sx = cy + oy * (int(radius) + 4), cx + ox * (int(radius) + 4)
        sat = _shape_mask("disc", size, sy, sx, 2)
        img[sat] = 1.0 - intensity
    if spec.noise_amplitude > 0:
        img += rng.uniform(-spec.noise_amplitude, spec.noise_amplitude,
                           size=img.shape).astype(np.float32)
    if spec.contrast != 1.0:
        # compress around mid-grey; class structure survives normalization
        img = 0.5 + spec.contrast * (img - 0.5)
    return np.clip(img, 0.0, 1.0)


def gen_synth_source(spec: SynthSourceSpec):
    """Generate the synthetic source task; returns (train, test) Datasets."""
    tuples = _class_tuples(spec)
    splits = []
    for split_idx, (split, per_class) in enumerate(
            [("train", spec.train_per_class), ("test", spec.test_per_class)]):
        rng = np.random.default_rng([spec.seed, split_idx, 13])
        n = spec.num_classes * per_class
        images = np.zeros((n, 1, spec.image_size, spec.image_size),
                          dtype=np.float32)
        labels = np.zeros(n, dtype=np.int32)
        i = 0
        for ci, factors in enumerate(tuples):
            for _ in range(per_class):
                images[i, 0] = _render_synth_image(rng, spec, factors)
                labels[i] = ci
                i += 1
        prov = dict(dataclasses.asdict(spec), generator="synth_source",
                    split=split)
        splits.append(Dataset(images, labels, spec.num_classes, split, prov))
    return tuple(splits)


def regenerate(provenance):
    """Rebuild a dataset split from its provenance record (bitwise identical)."""
    prov = dict(provenance)
    gen = prov.pop("generator")
    split = prov.pop("split")
    prov.pop("subset", None)
    if gen == "alphabet":
        train, test = gen_alphabet(prov["seed"], prov["train_per_class"],
                                   prov["test_per_class"], prov["image_size"],
                                   prov.get("noise_amplitude", 0.1),
                                   prov.get("glyph_contrast", 1.0),
                                   prov.get("background", 0.0))
    elif gen == "synth_source":
        train, test = gen_synth_source(SynthSourceSpec(**prov))
    else:
        raise ValueError(f"unknown generator {gen!r}")
    return train if split == "train" else test


# ---------------------------------------------------------------------------
# Archive format: manifest.json + little-endian binary blobs
# ---------------------------------------------------------------------------

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_archive(dataset: Dataset, path):
    """Write manifest.json / images.bin / labels.bin atomically under `path`."""
    path = str(path)
    images = np.ascontiguousarray(dataset.images, dtype="<f4").tobytes()
    labels = np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes()
    manifest = {
        "format_version": ARCHIVE_VERSION,
        "shape": list(dataset.images.shape),
        "dtype": "<f4",
        "label_dtype": "<i4",
        "num_classes": int(dataset.num_classes),
        "split": dataset.split,
        "provenance": dataset.provenance,
        "checksums": {"images": _sha256(images), "labels": _sha256(labels)},
    }
    parent = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(dir=parent, prefix=".archive-")
    try:
        with open(os.path.join(tmp, "images.bin"), "wb") as fh:
            fh.write(images)
        with open(os.path.join(tmp, "labels.bin"), "wb") as fh:
            fh.write(labels)
        with open(os.path.join(tmp, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        if os.path.isdir(path):
            for name in ("manifest.json", "images.bin", "labels.bin"):
                existing = os.path.join(path, name)
                if os.path.exists(existing):
                    os.remove(existing)
            for name in os.listdir(tmp):
                os.replace(os.path.join(tmp, name), os.path.join(path, name))
            os.rmdir(tmp)
        else:
            os.replace(tmp, path)
    except Exception:
        if os.path.isdir(tmp):
            for name in os.listdir(tmp):
                os.remove(os.path.join(tmp, name))
            os.rmdir(tmp)
        raise


def load_archive(path) -> Dataset:
    path = str(path)
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as e:
        raise ManifestError(f"missing manifest at {mpath}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"corrupt manifest at {mpath}: {e}") from e
    if manifest.get("format_version") != ARCHIVE_VERSION:
        raise ManifestError(
            f"unsupported archive version {manifest.get('format_version')}")
    shape = tuple(manifest["shape"])
    n = shape[0]
    with open(os.path.join(path, "images.bin"), "rb") as fh:
        raw_images = fh.read()
    with open(os.path.join(path, "labels.bin"), "rb") as fh:
        raw_labels = fh.read()
    want_img = int(np.prod(shape)) * 4
    if len(raw_images) < want_img or len(raw_labels) < n * 4:
        raise TruncatedPayloadError(
            f"payload truncated: images {len(raw_images)}/{want_img} bytes, "
            f"labels {len(raw_labels)}/{n * 4} bytes")
    if _sha256(raw_images) != manifest["checksums"]["images"]:
        raise ChecksumError("images.bin checksum mismatch")
    if _sha256(raw_labels) != manifest["checksums"]["labels"]:
        raise ChecksumError("labels.bin checksum mismatch")
    images = np.frombuffer(raw_images, dtype="<f4").reshape(shape)
    labels = np.frombuffer(raw_labels, dtype="<i4")[:n]
    return Dataset(images.copy(), labels.copy(), manifest["num_classes"],
                   manifest["split"], manifest["provenance"])


# ---------------------------------------------------------------------------
# Iteration and normalization
# ---------------------------------------------------------------------------

def batch_iter(dataset, batch_size, shuffle_seed=0, epoch=0, shuffle=True):
    """Yield (images, labels) batches; order reproducible from (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if shuffle:
        rng = np.random.default_rng([shuffle_seed, epoch, 29])
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def normalization_stats(dataset):
    """Per-channel (mean, std) over the split; std floored away from zero."""
    mean = dataset.images.mean(axis=(0, 2, 3))
    std = dataset.images.std(axis=(0, 2, 3))
    return mean.astype(np.float32), np.maximum(std, 1e-3).astype(np.float32)
