"""Synthetic image classification task with known ground truth.

Every sample plants a large informative block (most of the image, like an
aligned face crop) whose *content* encodes the class: a fixed-phase
oriented grating, so every single patch of the block identifies the class
through a linearly readable, contrast-independent signature. The block's
position is drawn per sample from a class-independent anchor list, so
geometry carries no label information. The rest of the image is dim
background noise, and samples may additionally be hit by a bright
high-variance occluder block, a loud decoy that carries no class signal.
A fraction of training labels is corrupted to a uniformly random
different class. True labels, corruption, occluder placement and the
informative patch set are all recorded per sample, so mask quality and
relabeling decisions can be audited against ground truth that the
training path never sees.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, FormatError, ShapeError

IMAGE_MAGIC = b"SYNIMG\x00\x01"
IMAGE_FORMAT_VERSION = 1
DATASET_FORMAT_VERSION = 1

BG_MEAN = 0.15
BG_STD = 0.10
BLOCK_MEAN = 0.50
STRIPE_AMPLITUDE = 0.35
STRIPE_WAVELENGTH = 4.0
PATTERN_STD = 0.04
OCCLUDER_MEAN = 0.75
OCCLUDER_STD = 0.30


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle in patch-grid coordinates."""

    top: int
    left: int
    height: int
    width: int

    def patch_indices(self, grid_w):
        out = []
        for r in range(self.top, self.top + self.height):
            for c in range(self.left, self.left + self.width):
                out.append(r * grid_w + c)
        return tuple(out)


def default_regions(classes, grid_h, grid_w):
    """Candidate informative blocks, identical for every class.

    Each block spans all but one patch row and column, so the informative
    area dominates the image the way a face dominates an aligned crop; the
    four corner anchors are shared by all classes, leaving position free
    of label information.
    """
    if grid_h < 2 or grid_w < 2:
        raise DomainError(f"patch grid {grid_h}x{grid_w} too small for default regions")
    bh, bw = grid_h - 1, grid_w - 1
    anchors = (Region(0, 0, bh, bw), Region(0, 1, bh, bw),
               Region(1, 0, bh, bw), Region(1, 1, bh, bw))
    return [anchors for _ in range(classes)]


@dataclass(frozen=True)
class DatasetSpec:
    classes: int = 4
    image_shape: tuple = (16, 16, 1)
    patch_side: int = 4
    train_per_class: tuple | int = 512
    test_per_class: int = 256
    noise_rate: float = 0.2
    occlusion_prob: float = 0.5
    occluder_side: tuple = (2, 2)       # (min, max) in patches
    informative_regions: tuple | None = None
    seed: int = 0

    def validated(self):
        h, w, c = self.image_shape
        p = self.patch_side
        if p <= 0 or h % p or w % p:
            raise ShapeError(f"image {h}x{w} not divisible by patch side {p}")
        if self.classes < 2:
            raise DomainError("need at least 2 classes")
        if not 0.0 <= self.noise_rate < 1.0:
            raise DomainError(f"noise rate must lie in [0, 1), got {self.noise_rate}")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise DomainError("occlusion probability must lie in [0, 1]")
        gh, gw = h // p, w // p
        lo, hi = self.occluder_side
        if lo < 0 or hi < lo or hi > min(gh, gw):
            raise DomainError(f"occluder side range {self.occluder_side} does not fit a {gh}x{gw} grid")
        counts = self.train_counts()
        if any(n <= 0 for n in counts) or self.test_per_class <= 0:
            raise DomainError("per-class sample counts must be positive")
        for candidates in self.regions():
            if not candidates:
                raise DomainError("each class needs at least one informative region")
            for reg in candidates:
                if (reg.top < 0 or reg.left < 0 or reg.height <= 0 or reg.width <= 0
                        or reg.top + reg.height > gh or reg.left + reg.width > gw):
                    raise DomainError(f"informative region {reg} exceeds the {gh}x{gw} patch grid")
        return self

    def train_counts(self):
        if isinstance(self.train_per_class, int):
            return tuple([self.train_per_class] * self.classes)
        counts = tuple(self.train_per_class)
        if len(counts) != self.classes:
            raise DomainError(f"{len(counts)} train counts for {self.classes} classes")
        return counts

    def regions(self):
        """Per-class tuples of candidate informative regions."""
        h, w, _ = self.image_shape
        if self.informative_regions is not None:
            out = []
            for candidates in self.informative_regions:
                out.append(tuple(r if isinstance(r, Region) else Region(*r)
                                 for r in candidates))
            if len(out) != self.classes:
                raise DomainError(f"{len(out)} region lists for {self.classes} classes")
            return out
        return default_regions(self.classes, h // self.patch_side, w // self.patch_side)

    def grid(self):
        h, w, _ = self.image_shape
        return h // self.patch_side, w // self.patch_side


@dataclass
class SyntheticSample:
    image: np.ndarray                 # [H, W, C] float32
    true_label: int                   # hidden from training paths
    observed_label: int
    occluded: bool
    occluder_patches: tuple
    informative_patches: tuple


@dataclass
class TrainView:
    """What training is allowed to see: images, mutable labels, ids."""

    images: np.ndarray                # [n, H, W, C]
    labels: np.ndarray                # [n] int64, updated in place by relabeling
    ids: np.ndarray                   # [n] int64


@dataclass
class SyntheticDataset:
    spec: DatasetSpec
    train: list
    test: list

    def train_view(self):
        return TrainView(
            images=np.stack([s.image for s in self.train]),
            labels=np.array([s.observed_label for s in self.train], dtype=np.int64),
            ids=np.arange(len(self.train), dtype=np.int64),
        )

    def train_true_labels(self):
        """Audit-only ground truth aligned with train_view ids."""
        return np.array([s.true_label for s in self.train], dtype=np.int64)

    def test_arrays(self):
        images = np.stack([s.image for s in self.test])
        labels = np.array([s.observed_label for s in self.test], dtype=np.int64)
        return images, labels

    def occluded_test_indices(self):
        return np.array([i for i, s in enumerate(self.test) if s.occluded], dtype=np.int64)


def class_pattern(label, classes, rows, cols):
    """Class-typical texture tile; every patch-sized tile identifies the class.

    The cycle is horizontal stripes, vertical stripes, checkerboard, then
    flat, all sharing the same mean so only shape separates the classes.
    """
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    row_wave = np.sin(2.0 * np.pi * rr / STRIPE_WAVELENGTH)
    col_wave = np.sin(2.0 * np.pi * cc / STRIPE_WAVELENGTH)
    kind = label % 4
    if kind == 0:
        wave = row_wave
    elif kind == 1:
        wave = col_wave
    elif kind == 2:
        wave = row_wave * col_wave
    else:
        wave = np.zeros_like(row_wave)
    return BLOCK_MEAN + STRIPE_AMPLITUDE * wave


def _render_sample(spec, label, rng, occlude_allowed=True):
    h, w, c = spec.image_shape
    p = spec.patch_side
    gh, gw = spec.grid()
    img = np.clip(rng.normal(BG_MEAN, BG_STD, size=(h, w, c)), 0.0, 1.0)
    candidates = spec.regions()[label]
    region = candidates[int(rng.integers(0, len(candidates)))] if len(candidates) > 1 \
        else candidates[0]
    r0, c0 = region.top * p, region.left * p
    r1, c1 = r0 + region.height * p, c0 + region.width * p
    pattern = class_pattern(label, spec.classes, r1 - r0, c1 - c0)
    img[r0:r1, c0:c1, :] = np.clip(
        pattern[:, :, None] + rng.normal(0.0, PATTERN_STD, size=(r1 - r0, c1 - c0, c)),
        0.0, 1.0)
    informative = region.patch_indices(gw)

    occluded = False
    occ_patches = ()
    if occlude_allowed and spec.occluder_side[1] > 0 and rng.random() < spec.occlusion_prob:
        lo, hi = spec.occluder_side
        side = int(rng.integers(lo, hi + 1)) if hi > lo else hi
        if side > 0:
            sample = SyntheticSample(img.astype(np.float32), label, label, False, (), informative)
            sample = inject_occlusion(sample, side, rng, grid=(gh, gw), patch_side=p)
            img = sample.image
            occluded = sample.occluded
            occ_patches = sample.occluder_patches

    return SyntheticSample(
        image=np.ascontiguousarray(img.astype(np.float32)),
        true_label=label, observed_label=label,
        occluded=occluded, occluder_patches=occ_patches,
        informative_patches=informative)


def inject_occlusion(sample, occluder_side, rng, grid=None, patch_side=None):
    """Overwrite a square block of patches with bright high-variance noise.

    Placement is drawn uniformly over grid positions, rejecting any that
    would cover the entire informative patch set; side 0 returns the
    sample unchanged.
    """
    if occluder_side == 0:
        return sample
    h, w, c = sample.image.shape
    if grid is None or patch_side is None:
        raise DomainError("grid and patch_side are required")
    gh, gw = grid
    if occluder_side > min(gh, gw):
        raise DomainError(f"occluder side {occluder_side} exceeds the {gh}x{gw} patch grid")
    informative = set(sample.informative_patches)
    positions = [(r, c2) for r in range(gh - occluder_side + 1)
                 for c2 in range(gw - occluder_side + 1)]
    while True:
        r, c2 = positions[int(rng.integers(0, len(positions)))]
        cover = {(r + dr) * gw + (c2 + dc)
                 for dr in range(occluder_side) for dc in range(occluder_side)}
        if informative and informative.issubset(cover):
            continue
        break
    p = patch_side
    img = sample.image.copy()
    r0, c0 = r * p, c2 * p
    r1, c1 = r0 + occluder_side * p, c0 + occluder_side * p
    img[r0:r1, c0:c1, :] = np.clip(
        rng.normal(OCCLUDER_MEAN, OCCLUDER_STD, size=(r1 - r0, c1 - c0, img.shape[2])),
        0.0, 1.0).astype(np.float32)
    return replace(sample, image=img, occluded=True,
                   occluder_patches=tuple(sorted(cover)))


def inject_label_noise(labels, noise_rate, classes, rng):
    """Corrupt exactly round(noise_rate * n) labels to random other classes.

    Returns (corrupted labels, boolean corruption mask).
    """
    if classes < 2:
        raise DomainError("label noise needs at least 2 classes")
    if not 0.0 <= noise_rate < 1.0:
        raise DomainError(f"noise rate must lie in [0, 1), got {noise_rate}")
    labels = np.asarray(labels, dtype=np.int64).copy()
    n = labels.shape[0]
    k = int(np.floor(noise_rate * n + 0.5))
    mask = np.zeros(n, dtype=bool)
    if k > 0:
        chosen = rng.choice(n, size=k, replace=False)
        offsets = rng.integers(1, classes, size=k)
        labels[chosen] = (labels[chosen] + offsets) % classes
        mask[chosen] = True
    return labels, mask


def generate_dataset(spec):
    """Deterministically render the train/test splits for `spec`."""
    spec = spec.validated()
    rng = np.random.default_rng(spec.seed)

    train = []
    for label, count in enumerate(spec.train_counts()):
        for _ in range(count):
            train.append(_render_sample(spec, label, rng))
    test = []
    for label in range(spec.classes):
        for _ in range(spec.test_per_class):
            test.append(_render_sample(spec, label, rng))

    if spec.noise_rate > 0:
        observed = np.array([s.observed_label for s in train], dtype=np.int64)
        corrupted, _ = inject_label_noise(observed, spec.noise_rate, spec.classes, rng)
        for s, lab in zip(train, corrupted):
            s.observed_label = int(lab)

    return SyntheticDataset(spec=spec, train=train, test=test)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    overall_accuracy: float
    mean_class_accuracy: float
    confusion: np.ndarray            # [K, K], rows = truth, columns = prediction
    per_epoch_test_accuracy: list | None = None


def compute_metrics(predictions, truth, classes=None):
    predictions = np.asarray(predictions, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if predictions.shape != truth.shape or predictions.ndim != 1:
        raise ShapeError(f"predictions {predictions.shape} and truth {truth.shape} must be equal-length vectors")
    if predictions.shape[0] == 0:
        raise DomainError("cannot compute metrics on an empty set")
    if classes is None:
        classes = int(max(predictions.max(), truth.max())) + 1
    if predictions.min() < 0 or truth.min() < 0 or predictions.max() >= classes or truth.max() >= classes:
        raise DomainError(f"labels out of range for {classes} classes")
    confusion = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(confusion, (truth, predictions), 1)
    overall = float(np.trace(confusion)) / predictions.shape[0]
    row_sums = confusion.sum(axis=1)
    present = row_sums > 0
    recalls = np.diag(confusion)[present] / row_sums[present]
    return Metrics(overall_accuracy=overall,
                   mean_class_accuracy=float(recalls.mean()),
                   confusion=confusion)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _write_images(path, images):
    images = np.ascontiguousarray(np.asarray(images, dtype="<f4"))
    n, h, w, c = images.shape
    header = IMAGE_MAGIC + struct.pack("<IIIII", IMAGE_FORMAT_VERSION, n, h, w, c)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(images.tobytes())
    os.replace(tmp, path)


def _read_images(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(IMAGE_MAGIC) + 20:
        raise FormatError(f"{path}: truncated header")
    if blob[:len(IMAGE_MAGIC)] != IMAGE_MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    version, n, h, w, c = struct.unpack("<IIIII", blob[len(IMAGE_MAGIC):len(IMAGE_MAGIC) + 20])
    if version != IMAGE_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported image format version {version}")
    payload = blob[len(IMAGE_MAGIC) + 20:]
    expected = n * h * w * c * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(n, h, w, c)


def _indices_to_field(indices):
    return ";".join(str(i) for i in indices)


def _field_to_indices(s):
    return tuple(int(x) for x in s.split(";")) if s else ()


def _write_labels(path, samples):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "observed_label", "true_label", "occluded",
                     "occluder_patches", "informative_patches"])
    for i, s in enumerate(samples):
        writer.writerow([i, s.observed_label, s.true_label, int(s.occluded),
                         _indices_to_field(s.occluder_patches),
                         _indices_to_field(s.informative_patches)])
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def _read_labels(path, images):
    samples = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            i = int(row["id"])
            if i >= images.shape[0]:
                raise FormatError(f"{path}: sample id {i} outside image file range")
            samples.append(SyntheticSample(
                image=np.ascontiguousarray(images[i]),
                true_label=int(row["true_label"]),
                observed_label=int(row["observed_label"]),
                occluded=bool(int(row["occluded"])),
                occluder_patches=_field_to_indices(row["occluder_patches"]),
                informative_patches=_field_to_indices(row["informative_patches"])))
    if len(samples) != images.shape[0]:
        raise FormatError(f"{path}: {len(samples)} label rows for {images.shape[0]} images")
    return samples


def save_dataset(ds, directory):
    os.makedirs(directory, exist_ok=True)
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "classes": ds.spec.classes,
        "image_shape": list(ds.spec.image_shape),
        "patch_side": ds.spec.patch_side,
        "train_per_class": list(ds.spec.train_counts()),
        "test_per_class": ds.spec.test_per_class,
        "noise_rate": ds.spec.noise_rate,
        "occlusion_prob": ds.spec.occlusion_prob,
        "occluder_side": list(ds.spec.occluder_side),
        "informative_regions": [[[r.top, r.left, r.height, r.width] for r in candidates]
                                for candidates in ds.spec.regions()],
        "seed": ds.spec.seed,
    }
    tmp = os.path.join(directory, "dataset.json.tmp")
    with open(tmp, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, os.path.join(directory, "dataset.json"))
    for split, samples in (("train", ds.train), ("test", ds.test)):
        _write_images(os.path.join(directory, f"{split}_images.bin"),
                      np.stack([s.image for s in samples]))
        _write_labels(os.path.join(directory, f"{split}_labels.csv"), samples)


def load_dataset(directory):
    meta_path = os.path.join(directory, "dataset.json")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except OSError as e:
        raise FormatError(f"cannot read {meta_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{meta_path}: invalid JSON: {e}") from e
    if meta.get("format_version") != DATASET_FORMAT_VERSION:
        raise FormatError(f"{meta_path}: unsupported dataset format version")
    spec = DatasetSpec(
        classes=int(meta["classes"]),
        image_shape=tuple(meta["image_shape"]),
        patch_side=int(meta["patch_side"]),
        train_per_class=tuple(meta["train_per_class"]),
        test_per_class=int(meta["test_per_class"]),
        noise_rate=float(meta["noise_rate"]),
        occlusion_prob=float(meta["occlusion_prob"]),
        occluder_side=tuple(meta["occluder_side"]),
        informative_regions=tuple(tuple(tuple(r) for r in candidates)
                                  for candidates in meta["informative_regions"]),
        seed=int(meta["seed"]),
    ).validated()
    splits = {}
    for split in ("train", "test"):
        images = _read_images(os.path.join(directory, f"{split}_images.bin"))
        splits[split] = _read_labels(os.path.join(directory, f"{split}_labels.csv"), images)
    return SyntheticDataset(spec=spec, train=splits["train"], test=splits["test"])
