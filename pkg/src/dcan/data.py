"""Synthetic two-domain classification data with controllable shift, plus a
bit-exact binary on-disk format.

Each class is a geometric pattern (oriented stripes, blob clusters, or rings)
rendered from analytic coordinate fields, colored from a class palette.
Source samples render clean; target samples apply the shift knobs on top of
the same class-conditional generators: a palette rotation (color_bias), extra
pixel noise (noise_sigma), a pattern rotation offset (rotation_degrees), and
low-frequency background clutter (background_clutter).  With every knob at
zero the two domains draw from the same distribution.

File layout (extension .dcn): magic "DCN1"; little-endian u32 fields
num_samples, channels, height, width, num_classes, label_present; the f32
image payload row-major; then u16 labels when present.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

MAGIC = b"DCN1"
_HEADER = struct.Struct("<6I")

# split order for seed derivation: (domain, split)
_SPLITS = (("source", "train"), ("source", "test"),
           ("target", "train"), ("target", "test"))

_BASE_NOISE = 0.02
_BACKGROUND = 0.08


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class DomainShiftSpec:
    num_classes: int = 4
    samples_per_class_train: int = 40
    samples_per_class_test: int = 20
    channels: int = 3
    height: int = 32
    width: int = 32
    color_bias: float = 0.5
    noise_sigma: float = 0.3
    rotation_degrees: float = 0.0
    background_clutter: float = 0.5
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.samples_per_class_train < 1 or self.samples_per_class_test < 1:
            raise ValueError("samples per class must be >= 1 for both splits")
        if self.channels != 3:
            raise ValueError(f"only 3-channel images are generated, got {self.channels}")
        if not 0 <= self.color_bias <= 1:
            raise ValueError(f"color_bias must lie in [0, 1], got {self.color_bias}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0 <= self.background_clutter <= 1:
            raise ValueError(
                f"background_clutter must lie in [0, 1], got {self.background_clutter}")
        for name in ("color_bias", "noise_sigma", "rotation_degrees",
                     "background_clutter"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


def no_shift_spec(seed=0, **overrides):
    """Spec with every shift knob at zero (source and target identically distributed)."""
    return replace(DomainShiftSpec(seed=seed), color_bias=0.0, noise_sigma=0.0,
                   rotation_degrees=0.0, background_clutter=0.0, **overrides)


@dataclass
class Dataset:
    images: np.ndarray          # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray | None   # (N,) uint16, None when withheld
    num_classes: int

    def __len__(self):
        return self.images.shape[0]

    def without_labels(self):
        return Dataset(images=self.images, labels=None, num_classes=self.num_classes)


@dataclass
class DomainPair:
    source_train: Dataset
    source_test: Dataset
    target_train: Dataset
    target_test: Dataset

    def for_training(self):
        """The trainer-facing view: target-train labels are withheld."""
        return DomainPair(source_train=self.source_train,
                          source_test=self.source_test,
                          target_train=self.target_train.without_labels(),
                          target_test=self.target_test)


def _class_color(k, num_classes, hue_shift=0.0):
    hue = k / num_classes + hue_shift
    phases = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0])
    return 0.35 + 0.3 * (1.0 + np.cos(2.0 * np.pi * (hue + phases)))


def _class_anchors(k, count):
    # fixed per-class blob positions, independent of the sampling stream
    rng = np.random.default_rng([97, k])
    return rng.uniform(-0.55, 0.55, size=(count, 2))


def _pattern_mask(xr, yr, k):
    family = k % 3
    variant = k // 3
    if family == 0:
        # angle cycles below 180 degrees; frequency de-aliases further variants
        angle = (variant % 4) * (np.pi / 4.0) + (variant // 4) * (np.pi / 16.0)
        freq = 2.5 + 1.1 * (variant // 4)
        phase = xr * np.cos(angle) + yr * np.sin(angle)
        m = 0.5 + 0.5 * np.cos(2.0 * np.pi * freq * phase)
        return m ** 3
    if family == 1:
        anchors = _class_anchors(k, 2 + (variant % 4))
        size = 0.03 + 0.012 * (variant // 4)
        m = np.zeros_like(xr)
        for ax, ay in anchors:
            m += np.exp(-((xr - ax) ** 2 + (yr - ay) ** 2) / (2 * size))
        return np.minimum(m, 1.0)
    radius = 0.3 + 0.18 * (variant % 3)
    width = 0.012 * (1 + (variant // 3))
    r = np.sqrt(xr ** 2 + yr ** 2)
    return np.exp(-((r - radius) ** 2) / (2 * width))


def _clutter_field(rng, xx, yy, amplitude):
    field = np.zeros_like(xx)
    for _ in range(4):
        cx, cy = rng.uniform(-0.9, 0.9, size=2)
        s = rng.uniform(0.05, 0.2)
        field += rng.uniform(0.3, 1.0) * np.exp(
            -((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s))
    field = np.minimum(field, 1.0)
    # zero-mean texture: distracts local shape cues without moving the
    # per-channel means that pooled features key on
    return amplitude * (field - field.mean())


def _render(rng, k, spec, shifted):
    h, w = spec.height, spec.width
    ys, xs = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w),
                         indexing="ij")
    cx, cy = rng.uniform(-0.15, 0.15, size=2)
    scale = rng.uniform(0.85, 1.15)
    pose = rng.uniform(-8.0, 8.0)
    theta = np.deg2rad(pose + (spec.rotation_degrees if shifted else 0.0))
    ct, st = np.cos(theta), np.sin(theta)
    xr = (ct * (xs - cx) + st * (ys - cy)) / scale
    yr = (-st * (xs - cx) + ct * (ys - cy)) / scale

    mask = np.clip(_pattern_mask(xr, yr, k), 0.0, 1.0)
    # the palette rotation is the semantic part of the shift: at full bias it
    # moves every class's color 1.2 inter-class hue steps along the palette
    hue_shift = (1.2 * spec.color_bias / spec.num_classes) if shifted else 0.0
    hue_jitter = rng.uniform(-0.3, 0.3) / spec.num_classes
    color = _class_color(k, spec.num_classes, hue_shift + hue_jitter)
    if shifted and spec.color_bias > 0:
        tint = np.array([1.15, 1.0, 0.8])
        color = color * (1.0 - 0.25 * spec.color_bias * (1.0 - tint))
    color = color * rng.uniform(0.8, 1.0)

    img = _BACKGROUND + mask[None, :, :] * color[:, None, None]
    if shifted and spec.background_clutter > 0:
        img = img + _clutter_field(rng, xs, ys, 0.3 * spec.background_clutter)
    sigma = _BASE_NOISE + (0.25 * spec.noise_sigma if shifted else 0.0)
    img = img + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _generate_split(seed_seq, spec, shifted, per_class):
    rng = np.random.default_rng(seed_seq)
    n = per_class * spec.num_classes
    images = np.empty((n, spec.channels, spec.height, spec.width), dtype=np.float32)
    labels = np.empty(n, dtype=np.uint16)
    i = 0
    for k in range(spec.num_classes):
        for _ in range(per_class):
            images[i] = _render(rng, k, spec, shifted)
            labels[i] = k
            i += 1
    return Dataset(images=images, labels=labels, num_classes=spec.num_classes)


def generate_domain_pair(spec):
    """Render all four splits deterministically from the spec seed."""
    spec.validate()
    children = np.random.SeedSequence(spec.seed).spawn(len(_SPLITS))
    splits = {}
    for (domain, split), child in zip(_SPLITS, children):
        per_class = (spec.samples_per_class_train if split == "train"
                     else spec.samples_per_class_test)
        splits[(domain, split)] = _generate_split(child, spec,
                                                  shifted=(domain == "target"),
                                                  per_class=per_class)
    return DomainPair(source_train=splits[("source", "train")],
                      source_test=splits[("source", "test")],
                      target_train=splits[("target", "train")],
                      target_test=splits[("target", "test")])


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def save(dataset, path):
    n, c, h, w = dataset.images.shape
    label_present = 1 if dataset.labels is not None else 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(n, c, h, w, dataset.num_classes, label_present))
        f.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
        if label_present:
            f.write(np.ascontiguousarray(dataset.labels, dtype="<u2").tobytes())


def load(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) or blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, expected {MAGIC!r}")
    if len(blob) < 4 + _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    n, c, h, w, num_classes, label_present = _HEADER.unpack_from(blob, 4)
    offset = 4 + _HEADER.size
    payload = n * c * h * w * 4
    expected = offset + payload + (2 * n if label_present else 0)
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload length mismatch, expected {expected} bytes, "
            f"got {len(blob)}")
    images = np.frombuffer(blob, dtype="<f4", count=n * c * h * w,
                           offset=offset).reshape(n, c, h, w).copy()
    labels = None
    if label_present:
        labels = np.frombuffer(blob, dtype="<u2", count=n,
                               offset=offset + payload).copy()
    return Dataset(images=images, labels=labels, num_classes=num_classes)


_SPLIT_FILES = {("source", "train"): "source_train.dcn",
                ("source", "test"): "source_test.dcn",
                ("target", "train"): "target_train.dcn",
                ("target", "test"): "target_test.dcn"}


def save_pair(pair, outdir):
    from pathlib import Path
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    save(pair.source_train, outdir / _SPLIT_FILES[("source", "train")])
    save(pair.source_test, outdir / _SPLIT_FILES[("source", "test")])
    save(pair.target_train, outdir / _SPLIT_FILES[("target", "train")])
    save(pair.target_test, outdir / _SPLIT_FILES[("target", "test")])


def load_pair(directory, for_training=False):
    """Load the four splits; for_training strips the target-train labels."""
    from pathlib import Path
    directory = Path(directory)
    pair = DomainPair(
        source_train=load(directory / _SPLIT_FILES[("source", "train")]),
        source_test=load(directory / _SPLIT_FILES[("source", "test")]),
        target_train=load(directory / _SPLIT_FILES[("target", "train")]),
        target_test=load(directory / _SPLIT_FILES[("target", "test")]))
    return pair.for_training() if for_training else pair


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

class BatchStream:
    """Stateless epoch-shuffled batch indices: the batch at any global step is
    a pure function of (seed, step), which is what makes checkpoint resume
    reproduce an uninterrupted run exactly."""

    def __init__(self, num_samples, batch_size, seed):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.num_samples = num_samples
        self.batch_size = min(batch_size, num_samples)
        self.seed = int(seed)
        self.steps_per_epoch = int(np.ceil(num_samples / self.batch_size))
        self._epoch = None
        self._perm = None

    def indices_at(self, step):
        epoch, slot = divmod(step, self.steps_per_epoch)
        if epoch != self._epoch:
            self._perm = np.random.default_rng(
                [self.seed, epoch]).permutation(self.num_samples)
            self._epoch = epoch
        return self._perm[slot * self.batch_size:(slot + 1) * self.batch_size]


def batch_iterator(dataset, batch_size, seed, cycle=False):
    """Yield (images, labels) batches; one shuffled epoch, or endlessly when
    cycle is set (reshuffling every epoch, final short batch kept)."""
    stream = BatchStream(len(dataset), batch_size, seed)
    step = 0
    while cycle or step < stream.steps_per_epoch:
        idx = stream.indices_at(step)
        labels = dataset.labels[idx] if dataset.labels is not None else None
        yield dataset.images[idx], labels
        step += 1
