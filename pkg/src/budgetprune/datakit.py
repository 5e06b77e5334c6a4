"""Synthetic multi-domain image suites and a small binary dataset format.

Built-in generators (all 3x32x32, 8-bit):

``shapes``   class = geometric shape (disc, square, triangle, plus, ring, diamond)
``stripes``  class = orientation bucket of a sinusoidal grating
``glyphs``   class = seven-segment digit
``colors``   class = dominant colour channel of a noisy patch texture

Dataset file layout (integers are u32 little-endian)::

    0   magic  b"MDDS"
    4   version (1)
    8   n, 12 channels, 16 height, 20 width, 24 num_classes
    28  name length L1, 32 split length L2
    36  name (utf-8, L1 bytes), split (utf-8, L2 bytes)
    ..  images: n*C*H*W u8, row-major
    ..  labels: n u32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import rng as rngmod

MAGIC = b"MDDS"
VERSION = 1
IMAGE_SHAPE = (3, 32, 32)
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


class DatasetError(ValueError):
    pass


@dataclass
class DomainDataset:
    name: str
    images: np.ndarray  # [n, C, H, W] uint8
    labels: np.ndarray  # [n] int64
    num_classes: int
    split: str = "all"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"{self.name}: images must be [n, C, H, W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetError(f"{self.name}: {self.labels.shape[0]} labels for {self.images.shape[0]} images")
        if self.num_classes < 1:
            raise DatasetError(f"{self.name}: num_classes must be positive")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"{self.name}: labels must lie in [0, {self.num_classes}), "
                               f"found range [{self.labels.min()}, {self.labels.max()}]")

    def __len__(self) -> int:
        return int(self.labels.size)

    def float_images(self, normalize: bool = False) -> np.ndarray:
        x = self.images.astype(np.float64) / 255.0
        if normalize:
            mean = x.mean(axis=(0, 2, 3), keepdims=True)
            std = x.std(axis=(0, 2, 3), keepdims=True) + 1e-8
            x = (x - mean) / std
        return x

    def subset(self, index, split: str | None = None) -> "DomainDataset":
        index = np.asarray(index)
        return DomainDataset(self.name, self.images[index], self.labels[index], self.num_classes,
                             split or self.split)


# -- generators ---------------------------------------------------------------

def _grid(size: int = 32):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return x, y


def _compose(mask: np.ndarray, fg: np.ndarray, bg: np.ndarray, noise: np.ndarray) -> np.ndarray:
    img = mask[None] * fg[:, None, None] + (1.0 - mask[None]) * bg[:, None, None] + noise
    return np.clip(img, 0.0, 1.0)


def _shape_mask(kind: int, cx: float, cy: float, r: float, angle: float) -> np.ndarray:
    x, y = _grid()
    dx, dy = x - cx, y - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == 0:  # disc
        return (u * u + v * v <= r * r).astype(float)
    if kind == 1:  # square
        return ((np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.85)).astype(float)
    if kind == 2:  # triangle
        return ((v <= r * 0.6) & (v >= -r + 1.8 * np.abs(u))).astype(float)
    if kind == 3:  # plus
        t = r * 0.3
        return (((np.abs(u) <= t) & (np.abs(v) <= r)) | ((np.abs(v) <= t) & (np.abs(u) <= r))).astype(float)
    if kind == 4:  # ring
        d2 = u * u + v * v
        return ((d2 <= r * r) & (d2 >= (0.55 * r) ** 2)).astype(float)
    return (np.abs(u) + np.abs(v) <= r).astype(float)  # diamond


def gen_shapes(gen: np.random.Generator, label: int) -> np.ndarray:
    r = gen.uniform(6.0, 10.0)
    cx, cy = gen.uniform(r + 1, 31 - r, size=2)
    mask = _shape_mask(label, cx, cy, r, gen.uniform(-0.3, 0.3))
    fg = gen.uniform(0.5, 1.0, size=3)
    bg = gen.uniform(0.0, 0.35, size=3)
    return _compose(mask, fg, bg, gen.normal(0, 0.05, size=IMAGE_SHAPE))


def gen_stripes(gen: np.random.Generator, label: int, num_classes: int) -> np.ndarray:
    width = np.pi / num_classes
    theta = (label + 0.5) * width + gen.uniform(-0.3, 0.3) * width
    freq = gen.uniform(0.5, 1.1)
    x, y = _grid()
    wave = 0.5 + 0.5 * np.sin(freq * (x * np.cos(theta) + y * np.sin(theta)) + gen.uniform(0, 2 * np.pi))
    c1, c2 = gen.uniform(0.0, 1.0, size=(2, 3))
    img = wave[None] * c1[:, None, None] + (1 - wave[None]) * c2[:, None, None]
    return np.clip(img + gen.normal(0, 0.05, size=IMAGE_SHAPE), 0.0, 1.0)


_SEGMENTS = {  # a b c d e f g
    0: "1111110", 1: "0110000", 2: "1101101", 3: "1111001", 4: "0110011",
    5: "1011011", 6: "1011111", 7: "1110000", 8: "1111111", 9: "1111011",
}


def gen_glyphs(gen: np.random.Generator, label: int) -> np.ndarray:
    x, y = _grid()
    h = gen.uniform(16, 24)
    w = h * gen.uniform(0.45, 0.6)
    t = gen.uniform(2.0, 3.5)
    x0 = gen.uniform(2, 30 - w)
    y0 = gen.uniform(2, 30 - h)
    x1, ym, y1 = x0 + w, y0 + h / 2, y0 + h

    def hbar(yc):
        return (np.abs(y - yc) <= t / 2) & (x >= x0) & (x <= x1)

    def vbar(xc, ya, yb):
        return (np.abs(x - xc) <= t / 2) & (y >= ya) & (y <= yb)

    segs = [hbar(y0), vbar(x1, y0, ym), vbar(x1, ym, y1), hbar(y1), vbar(x0, ym, y1), vbar(x0, y0, ym), hbar(ym)]
    mask = np.zeros((32, 32), dtype=bool)
    for on, seg in zip(_SEGMENTS[label], segs):
        if on == "1":
            mask |= seg
    fg = gen.uniform(0.6, 1.0, size=3)
    bg = gen.uniform(0.0, 0.3, size=3)
    return _compose(mask.astype(float), fg, bg, gen.normal(0, 0.06, size=IMAGE_SHAPE))


def gen_colors(gen: np.random.Generator, label: int) -> np.ndarray:
    coarse = gen.uniform(0.0, 0.6, size=(3, 4, 4))
    img = np.kron(coarse, np.ones((8, 8)))
    boost = np.zeros(3)
    boost[label] = gen.uniform(0.2, 0.4)
    img = img + boost[:, None, None] + gen.normal(0, 0.08, size=IMAGE_SHAPE)
    return np.clip(img, 0.0, 1.0)


GENERATORS = {
    "shapes": (6, lambda g, k, n: gen_shapes(g, k)),
    "stripes": (None, gen_stripes),
    "glyphs": (10, lambda g, k, n: gen_glyphs(g, k)),
    "colors": (3, lambda g, k, n: gen_colors(g, k)),
}


def generate_domain(seed: int, name: str, generator: str, num_classes: int, n: int) -> DomainDataset:
    if generator not in GENERATORS:
        raise DatasetError(f"unknown generator {generator!r}; choose from {sorted(GENERATORS)}")
    max_classes, fn = GENERATORS[generator]
    if num_classes < 2 or (max_classes is not None and num_classes > max_classes):
        raise DatasetError(f"{generator}: num_classes must be in [2, {max_classes or 'inf'}], got {num_classes}")
    if n < num_classes:
        raise DatasetError(f"{name}: need at least one sample per class, got n={n}")
    gen = rngmod.stream(seed, "data", name)
    labels = np.arange(n) % num_classes
    gen.shuffle(labels)
    images = np.empty((n,) + IMAGE_SHAPE, dtype=np.uint8)
    for i, k in enumerate(labels):
        images[i] = np.round(fn(gen, int(k), num_classes) * 255.0).astype(np.uint8)
    return DomainDataset(name, images, labels, num_classes)


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return n_train, n_val, n - n_train - n_val


def make_splits(ds: DomainDataset, seed: int) -> dict[str, DomainDataset]:
    """Disjoint, exhaustive 70/15/15 split."""
    order = rngmod.stream(seed, "split", ds.name).permutation(len(ds))
    n_train, n_val, _ = split_sizes(len(ds))
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return {name: ds.subset(np.sort(idx), name) for name, idx in zip(SPLITS, parts)}


def _parse_suite_spec(spec) -> list[dict]:
    domains = spec.get("domains") if isinstance(spec, dict) else spec
    if not isinstance(domains, list) or not domains:
        raise DatasetError("suite spec needs a non-empty 'domains' list")
    out, seen = [], set()
    for i, entry in enumerate(domains):
        if not isinstance(entry, dict) or "generator" not in entry:
            raise DatasetError(f"domain entry {i}: needs at least a 'generator' field")
        name = str(entry.get("name", entry["generator"]))
        if name in seen:
            raise DatasetError(f"domain entry {i}: duplicate name {name!r}")
        seen.add(name)
        gen = entry["generator"]
        default_k = {"shapes": 4, "stripes": 4, "glyphs": 10, "colors": 3}.get(gen, 2)
        out.append({"name": name, "generator": gen, "classes": int(entry.get("classes", default_k)),
                    "n": int(entry.get("n", 400))})
    return out


def generate_synthetic_suite(seed: int, spec) -> list[dict[str, DomainDataset]]:
    """Generate and split every domain of ``spec``; returns one split dict per domain."""
    suite = []
    for entry in _parse_suite_spec(spec):
        ds = generate_domain(seed, entry["name"], entry["generator"], entry["classes"], entry["n"])
        suite.append(make_splits(ds, seed))
    return suite


DEFAULT_SUITE = {"domains": [
    {"name": "shapes", "generator": "shapes", "classes": 4, "n": 400},
    {"name": "stripes", "generator": "stripes", "classes": 4, "n": 400},
    {"name": "glyphs", "generator": "glyphs", "classes": 10, "n": 400},
    {"name": "colors", "generator": "colors", "classes": 3, "n": 400},
]}


# -- batching ------------------------------------------------------------------

def iter_batches(ds: DomainDataset, batch_size: int, seed: int | None = None, epoch: int = 0,
                 shuffle: bool = True, hflip: bool = False, normalize: bool = False
                 ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(float images, labels)`` batches; the order depends only on (seed, epoch, domain)."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    n = len(ds)
    if shuffle:
        if seed is None:
            raise ValueError("shuffling needs a seed")
        order = rngmod.stream(seed, "shuffle", ds.name, epoch).permutation(n)
    else:
        order = np.arange(n)
    x_all = ds.float_images(normalize)
    flips = None
    if hflip:
        flips = rngmod.stream(seed or 0, "flip", ds.name, epoch).random(n) < 0.5
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = x_all[idx]
        if flips is not None:
            f = flips[idx]
            x[f] = x[f][..., ::-1]
        yield x, ds.labels[idx]


# -- file format -------------------------------------------------------------------

def save_idx_like(ds: DomainDataset, path) -> None:
    n, c, h, w = ds.images.shape
    name, split = ds.name.encode("utf-8"), ds.split.encode("utf-8")
    header = MAGIC + struct.pack("<8I", VERSION, n, c, h, w, ds.num_classes, len(name), len(split))
    payload = header + name + split + ds.images.tobytes() + ds.labels.astype("<u4").tobytes()
    Path(path).write_bytes(payload)


def load_idx_like(path) -> DomainDataset:
    buf = Path(path).read_bytes()
    if len(buf) < 36:
        raise DatasetError(f"{path}: header truncated, expected at least 36 bytes, got {len(buf)}")
    if buf[:4] != MAGIC:
        raise DatasetError(f"{path}: bad magic {buf[:4]!r} at offset 0, expected {MAGIC!r}")
    version, n, c, h, w, k, l1, l2 = struct.unpack_from("<8I", buf, 4)
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version} at offset 4")
    img_off = 36 + l1 + l2
    lab_off = img_off + n * c * h * w
    expected = lab_off + 4 * n
    if len(buf) != expected:
        raise DatasetError(f"{path}: length mismatch, header (n={n}, shape={c}x{h}x{w}) implies "
                           f"{expected} bytes, file has {len(buf)}")
    name = buf[36:36 + l1].decode("utf-8")
    split = buf[36 + l1:img_off].decode("utf-8")
    images = np.frombuffer(buf, dtype=np.uint8, count=n * c * h * w, offset=img_off).reshape(n, c, h, w)
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=lab_off).astype(np.int64)
    if n and labels.max() >= k:
        bad = int(np.argmax(labels >= k))
        raise DatasetError(f"{path}: label {labels[bad]} at byte offset {lab_off + 4 * bad} "
                           f"is out of range for num_classes={k}")
    return DomainDataset(name, images.copy(), labels, k, split)
