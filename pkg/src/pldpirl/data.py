"""Synthetic 3-class texture dataset, PPM image IO, resizing and manifests.

Each image is a pink-noise tissue-like background with dark curvilinear
strokes (vessel analog) and bright blobs (inflammation analog). Stroke density
and blob intensity rise with the class index, so classes are ordinal and
differ only in texture statistics.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .jigsaw import ImageSample

SPLITS = ("train", "val", "test")
SPLIT_RATIOS = (0.8, 0.1, 0.1)


class PPMParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DataConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PPM (P6) IO
# ---------------------------------------------------------------------------
def encode_ppm(pixels: np.ndarray) -> bytes:
    """3 x H x W floats in [0, 1] -> binary P6 with maxval 255."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim != 3 or px.shape[0] != 3:
        raise ValueError(f"expected a 3 x H x W image, got {px.shape}")
    q = np.clip(np.rint(px * 255.0), 0, 255).astype(np.uint8)
    _, h, w = q.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.transpose(1, 2, 0).tobytes()


def decode_ppm(blob: bytes) -> np.ndarray:
    """Binary P6 -> 3 x H x W floats in [0, 1]."""
    pos = 0
    n = len(blob)

    def skip_space_and_comments():
        nonlocal pos
        while pos < n:
            ch = blob[pos:pos + 1]
            if ch == b"#":
                while pos < n and blob[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                return

    def read_int(what: str) -> int:
        nonlocal pos
        skip_space_and_comments()
        start = pos
        while pos < n and blob[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PPMParseError(f"expected {what}", start)
        return int(blob[start:pos])

    if blob[:2] != b"P6":
        raise PPMParseError("missing P6 magic", 0)
    pos = 2
    width = read_int("width")
    height = read_int("height")
    maxval = read_int("maxval")
    if width < 1 or height < 1:
        raise PPMParseError(f"non-positive size {width}x{height}", pos)
    if maxval != 255:
        raise PPMParseError(f"only 8-bit maxval 255 is supported, got {maxval}", pos)
    if pos >= n or not blob[pos:pos + 1].isspace():
        raise PPMParseError("expected a single whitespace byte after maxval", pos)
    pos += 1
    need = width * height * 3
    if n - pos < need:
        raise PPMParseError(f"truncated pixel data: need {need} bytes, have {n - pos}", n)
    raw = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    return raw.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def save_image(sample: Union[ImageSample, np.ndarray], path: Union[str, os.PathLike]) -> None:
    px = sample.pixels if isinstance(sample, ImageSample) else sample
    with open(path, "wb") as fh:
        fh.write(encode_ppm(px))


def load_image(path: Union[str, os.PathLike], index: int = 0, label: Optional[int] = None) -> ImageSample:
    with open(path, "rb") as fh:
        return ImageSample(decode_ppm(fh.read()), index, label)


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------
def _axis_weights(n_in: int, n_out: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centers, edges clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize(sample: Union[ImageSample, np.ndarray], out_h: int, out_w: int):
    """Bilinear resize of a C x H x W image; returns the same kind it was given."""
    if out_h < 1 or out_w < 1:
        raise DataConfigError(f"resize target must be positive, got {out_h}x{out_w}")
    px = sample.pixels if isinstance(sample, ImageSample) else np.asarray(sample, dtype=np.float64)
    _, h, w = px.shape
    if (h, w) == (out_h, out_w):
        out = px.copy()
    else:
        y0, y1, wy = _axis_weights(h, out_h)
        x0, x1, wx = _axis_weights(w, out_w)
        rows = px[:, y0, :] * (1 - wy)[None, :, None] + px[:, y1, :] * wy[None, :, None]
        out = rows[:, :, x0] * (1 - wx) + rows[:, :, x1] * wx
        out = np.clip(out, 0.0, 1.0)
    if isinstance(sample, ImageSample):
        return ImageSample(out, sample.index, sample.label)
    return out


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------
@dataclass
class SynthConfig:
    counts: Tuple[int, ...] = (250, 250, 250)
    image_size: int = 96
    line_density: Tuple[float, ...] = (5.0, 8.0, 11.0)
    blob_intensity: Tuple[float, ...] = (0.10, 0.16, 0.22)
    blob_rate: float = 3.0
    noise_std: float = 0.04
    # per-image color cast; a cheap instance cue unrelated to the class
    tint_std: float = 0.03
    seed: int = 0

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        self.line_density = tuple(float(v) for v in self.line_density)
        self.blob_intensity = tuple(float(v) for v in self.blob_intensity)
        k = len(self.counts)
        if len(self.line_density) != k or len(self.blob_intensity) != k:
            raise DataConfigError("per-class parameter lists must match the number of classes")
        if min(self.counts) < 10:
            raise DataConfigError(f"need at least 10 images per class, got {self.counts}")
        for name in ("line_density", "blob_intensity"):
            vals = getattr(self, name)
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise DataConfigError(f"{name} means must be strictly increasing across classes: {vals}")

    @property
    def n_classes(self) -> int:
        return len(self.counts)


def _pink_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    spec = np.fft.rfft2(rng.normal(size=(size, size)))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    f = np.sqrt(fx**2 + fy**2)
    f[0, 0] = 1.0
    field_ = np.fft.irfft2(spec / f, s=(size, size))
    field_ -= field_.min()
    return field_ / max(field_.max(), 1e-12)


def _stroke_map(rng: np.random.Generator, size: int, n_strokes: int) -> np.ndarray:
    """Darkness map of random curvilinear strokes (smooth-heading random walks)."""
    dark = np.zeros((size, size))
    for _ in range(n_strokes):
        length = rng.uniform(0.3, 0.8) * size
        steps = int(length * 2)
        heading = rng.uniform(0, 2 * np.pi) + np.cumsum(rng.normal(0, 0.08, size=steps))
        x = rng.uniform(0, size) + np.cumsum(0.5 * np.cos(heading))
        y = rng.uniform(0, size) + np.cumsum(0.5 * np.sin(heading))
        xi, yi = np.rint(x).astype(int), np.rint(y).astype(int)
        ok = (xi >= 0) & (xi < size) & (yi >= 0) & (yi < size)
        strength = rng.uniform(0.5, 1.0)
        np.maximum.at(dark, (yi[ok], xi[ok]), strength)
    return dark


def _blob_map(rng: np.random.Generator, size: int, n_blobs: int, intensity: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    out = np.zeros((size, size))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, size, size=2)
        sigma = rng.uniform(0.04, 0.10) * size
        amp = max(rng.normal(intensity, 0.2 * intensity), 0.0)
        out += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return out


def synth_image(config: SynthConfig, label: int, rng: np.random.Generator) -> Tuple[np.ndarray, Dict[str, int]]:
    size = config.image_size
    base = _pink_noise(rng, size)
    tint = np.array([0.85, 0.50, 0.45]) + rng.normal(0, config.tint_std, size=3)
    img = tint[:, None, None] * (0.65 + 0.35 * base)[None]

    n_strokes = int(rng.poisson(config.line_density[label]))
    dark = _stroke_map(rng, size, n_strokes)
    img = img * (1.0 - 0.45 * dark)[None] + np.array([0.05, 0.0, 0.02])[:, None, None] * dark[None]

    n_blobs = int(rng.poisson(config.blob_rate))
    bright = _blob_map(rng, size, n_blobs, config.blob_intensity[label])
    img = img + np.array([1.0, 0.85, 0.7])[:, None, None] * bright[None]

    img = img + rng.normal(0, config.noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    # quantize now so in-memory and on-disk images agree bit-for-bit
    img = np.rint(img * 255.0) / 255.0
    return img, {"n_strokes": n_strokes, "n_blobs": n_blobs}


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------
@dataclass
class ManifestEntry:
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    root: Path
    entries: List[ManifestEntry]
    image_size: int

    def split(self, name: str) -> List[Tuple[int, ManifestEntry]]:
        return [(i, e) for i, e in enumerate(self.entries) if e.split == name]

    def write(self, path: Optional[Union[str, os.PathLike]] = None) -> Path:
        path = Path(path) if path else self.root / "manifest.csv"
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["path", "label", "split"])
            for e in self.entries:
                wr.writerow([e.path, e.label, e.split])
        return path

    @classmethod
    def read(cls, path: Union[str, os.PathLike], check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows and set(rows[0]) != {"path", "label", "split"}:
            raise DataConfigError(f"{path}: manifest header must be path,label,split")
        entries = [ManifestEntry(r["path"], int(r["label"]), r["split"]) for r in rows]
        paths = [e.path for e in entries]
        if len(set(paths)) != len(paths):
            raise DataConfigError(f"{path}: duplicate image paths in manifest")
        root = path.parent
        if check_files:
            missing = [p for p in paths if not (root / p).is_file()]
            if missing:
                raise DataConfigError(f"{path}: {len(missing)} referenced files missing, e.g. {missing[0]}")
        size = load_image(root / entries[0].path).height if entries and check_files else 0
        return cls(root, entries, size)


def stratified_split(labels: Sequence[int], rng: np.random.Generator, ratios=SPLIT_RATIOS) -> List[str]:
    labels = np.asarray(labels)
    out = [""] * len(labels)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        n = len(idx)
        n_train = int(round(ratios[0] * n))
        n_val = int(round(ratios[1] * n))
        for j, i in enumerate(idx):
            out[i] = "train" if j < n_train else ("val" if j < n_train + n_val else "test")
    return out


def generate_synthetic(config: SynthConfig, root: Union[str, os.PathLike]) -> DatasetManifest:
    """Write images, ``manifest.csv`` and ``synth_meta.csv`` under ``root``."""
    root = Path(root)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset root {root}: {exc}") from exc
    labels = [c for c, n in enumerate(config.counts) for _ in range(n)]
    splits = stratified_split(labels, np.random.default_rng((config.seed, 7919)))
    entries, meta = [], []
    for i, label in enumerate(labels):
        img, info = synth_image(config, label, np.random.default_rng((config.seed, i)))
        rel = f"images/img_{i:05d}.ppm"
        save_image(img, root / rel)
        entries.append(ManifestEntry(rel, label, splits[i]))
        meta.append({"path": rel, "label": label, **info})
    manifest = DatasetManifest(root, entries, config.image_size)
    manifest.write()
    with open(root / "synth_meta.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["path", "label", "n_strokes", "n_blobs"], lineterminator="\n")
        wr.writeheader()
        wr.writerows(meta)
    return manifest


def load_split(
    manifest: DatasetManifest, split: Optional[str], image_size: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(images N x 3 x H x W, labels, manifest row indices) for one split (or all)."""
    rows = [(i, e) for i, e in enumerate(manifest.entries) if split is None or e.split == split]
    imgs, labels, idx = [], [], []
    for i, e in rows:
        s = load_image(manifest.root / e.path, i, e.label)
        if image_size and (s.height != image_size or s.width != image_size):
            s = resize(s, image_size, image_size)
        imgs.append(s.pixels)
        labels.append(e.label)
        idx.append(i)
    if not imgs:
        raise DataConfigError(f"split {split!r} is empty")
    return np.stack(imgs), np.asarray(labels, dtype=np.int64), np.asarray(idx, dtype=np.int64)


# ---------------------------------------------------------------------------
# difficulty probe
# ---------------------------------------------------------------------------
def histogram_features(images: np.ndarray, bins: int = 16) -> np.ndarray:
    n = len(images)
    feats = np.empty((n, 3 * bins))
    for i in range(n):
        for c in range(3):
            h, _ = np.histogram(images[i, c], bins=bins, range=(0.0, 1.0))
            feats[i, c * bins:(c + 1) * bins] = h / h.sum()
    return feats


def histogram_probe_accuracy(
    train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray, ridge: float = 1e-3
) -> float:
    """Test accuracy (%) of a ridge-regression linear classifier on pixel histograms."""
    k = int(max(train_y.max(), test_y.max())) + 1
    ftr = np.hstack([histogram_features(train_x), np.ones((len(train_x), 1))])
    fte = np.hstack([histogram_features(test_x), np.ones((len(test_x), 1))])
    targets = np.eye(k)[train_y]
    w = np.linalg.solve(ftr.T @ ftr + ridge * np.eye(ftr.shape[1]), ftr.T @ targets)
    return 100.0 * float(np.mean(np.argmax(fte @ w, axis=1) == test_y))
