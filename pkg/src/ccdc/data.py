"""Synthetic live/spoof scenes with pseudo-depth labels, Patch Exchange, and the
baseline augmentations (horizontal flip, color jitter, Cutout).

Live faces are shaded ellipsoidal bumps whose normalised depth is the label;
spoofs are the same kind of render overlaid with a high-frequency lattice
(print/screen texture) and carry an all-zero label. Each domain has its own
color cast, illumination and lattice statistics.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from ccdc.network import OUTPUT_STRIDE
from ccdc.tensor import load, resize_to, save


@dataclass
class LabeledBatch:
    images: np.ndarray      # N x 3 x S x S in [0, 1]
    labels: np.ndarray      # N x 1 x S/8 x S/8 in [0, 1]
    is_live: np.ndarray     # N bools
    domain_id: np.ndarray   # N ints

    def __len__(self):
        return self.images.shape[0]

    def copy(self) -> "LabeledBatch":
        return LabeledBatch(self.images.copy(), self.labels.copy(),
                            self.is_live.copy(), self.domain_id.copy())

    def subset(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.images[idx], self.labels[idx], self.is_live[idx], self.domain_id[idx])

    @property
    def label_scale(self) -> int:
        return self.images.shape[-1] // self.labels.shape[-1]


def save_batch(directory, batch: LabeledBatch):
    os.makedirs(directory, exist_ok=True)
    save(os.path.join(directory, "images.t"), batch.images)
    save(os.path.join(directory, "labels.t"), batch.labels)
    meta = np.stack([batch.is_live.astype(np.float32), batch.domain_id.astype(np.float32)], axis=1)
    save(os.path.join(directory, "meta.t"), meta)


def load_batch(directory) -> LabeledBatch:
    images = load(os.path.join(directory, "images.t"))
    labels = load(os.path.join(directory, "labels.t"))
    meta_path = os.path.join(directory, "meta.t")
    if os.path.exists(meta_path):
        meta = load(meta_path)
        is_live, domain = meta[:, 0] > 0.5, meta[:, 1].astype(np.int64)
    else:
        is_live = labels.reshape(len(labels), -1).max(axis=1) > 0
        domain = np.zeros(len(labels), np.int64)
    return LabeledBatch(images, labels, is_live, domain)


# -- synthetic scenes ---------------------------------------------------------

@dataclass
class SyntheticSceneConfig:
    n_domains: int = 3
    image_size: int = 256
    noise: float = 0.03
    lattice_amplitude: tuple = (0.08, 0.16)
    lattice_period: tuple = (2.5, 4.0)   # pixels at 64 px; scaled with image size
    face_radius: tuple = (0.28, 0.40)    # fraction of the image side
    domain_seed: int = 1234

    def __post_init__(self):
        if self.image_size % OUTPUT_STRIDE:
            raise ValueError(f"data.image_size must be a multiple of {OUTPUT_STRIDE}")
        if self.n_domains < 1:
            raise ValueError("data.n_domains must be >= 1")


@dataclass
class _Domain:
    cast: np.ndarray
    gain: float
    background: np.ndarray
    lattice_amp: tuple
    lattice_period: tuple


def _domains(cfg: SyntheticSceneConfig) -> list[_Domain]:
    rng = np.random.default_rng(cfg.domain_seed)
    out = []
    for _ in range(cfg.n_domains):
        lo_a, hi_a = cfg.lattice_amplitude
        lo_p, hi_p = cfg.lattice_period
        a = rng.uniform(lo_a, hi_a)
        p = rng.uniform(lo_p, hi_p)
        out.append(_Domain(
            cast=rng.uniform(0.8, 1.2, size=3),
            gain=float(rng.uniform(0.75, 1.0)),
            background=rng.uniform(0.05, 0.5, size=3),
            lattice_amp=(0.8 * a, 1.2 * a),
            lattice_period=(0.9 * p, 1.1 * p),
        ))
    return out


def _face(rng, size, cfg):
    """Ellipsoidal depth bump in [0, 1] and its face mask."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy = size * (0.5 + rng.uniform(-0.08, 0.08))
    cx = size * (0.5 + rng.uniform(-0.08, 0.08))
    ry = size * rng.uniform(*cfg.face_radius) * 1.15
    rx = size * rng.uniform(*cfg.face_radius)
    r2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    depth = np.sqrt(np.clip(1.0 - r2, 0.0, None))
    return depth, r2 < 1.0


def _render(rng, depth, mask, dom: _Domain, shading_range):
    size = depth.shape[0]
    skin = np.array([0.85, 0.62, 0.50]) * rng.uniform(0.85, 1.1)
    lo, hi = shading_range
    shade = lo + (hi - lo) * depth
    grad = np.linspace(0.9, 1.1, size)[None, :] if rng.random() < 0.5 else np.linspace(0.9, 1.1, size)[:, None]
    face = skin[:, None, None] * shade[None] * dom.cast[:, None, None]
    bg = dom.background[:, None, None] * grad[None]
    img = np.where(mask[None], face, bg) * dom.gain
    return img


def _lattice(rng, size, dom: _Domain, image_size_ref=64):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    period = rng.uniform(*dom.lattice_period) * size / image_size_ref
    period = max(period, 2.1)
    ang = rng.uniform(0, math.pi)
    phase = rng.uniform(0, 2 * math.pi)
    amp = rng.uniform(*dom.lattice_amp)
    u = (np.cos(ang) * xx + np.sin(ang) * yy) * 2 * math.pi / period
    v = (-np.sin(ang) * xx + np.cos(ang) * yy) * 2 * math.pi / period
    return 1.0 + amp * 0.5 * (np.sin(u + phase) + np.sin(v))


def generate_item(cfg: SyntheticSceneConfig, live: bool, domain: int, rng, domains=None):
    domains = domains or _domains(cfg)
    dom = domains[domain]
    s = cfg.image_size
    depth, mask = _face(rng, s, cfg)
    if live:
        img = _render(rng, depth, mask, dom, (0.35, 1.0))
        lab = resize_to(depth[None, None], s // OUTPUT_STRIDE, s // OUTPUT_STRIDE)[0]
        lab = lab / lab.max()
    else:
        # recaptured faces: flatter shading and a moire-like lattice
        img = _render(rng, depth, mask, dom, (0.5, 0.95)) * _lattice(rng, s, dom)[None]
        lab = np.zeros((1, s // OUTPUT_STRIDE, s // OUTPUT_STRIDE))
    img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), lab.astype(np.float32)


def generate_batch(cfg: SyntheticSceneConfig, n: int, live_fraction: float, rng) -> LabeledBatch:
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= live_fraction <= 1.0:
        raise ValueError("live_fraction must lie in [0, 1]")
    domains = _domains(cfg)
    n_live = int(round(n * live_fraction))
    is_live = np.zeros(n, bool)
    is_live[:n_live] = True
    is_live = is_live[rng.permutation(n)]
    domain_id = rng.integers(0, cfg.n_domains, size=n)
    s, ls = cfg.image_size, cfg.image_size // OUTPUT_STRIDE
    images = np.empty((n, 3, s, s), np.float32)
    labels = np.empty((n, 1, ls, ls), np.float32)
    for i in range(n):
        images[i], labels[i] = generate_item(cfg, bool(is_live[i]), int(domain_id[i]), rng, domains)
    return LabeledBatch(images, labels, is_live, domain_id.astype(np.int64))


# -- Patch Exchange -----------------------------------------------------------

@dataclass
class PatchExchangeConfig:
    gamma: float = 0.5
    rho: int = 2
    patch_size_range: tuple = (1 / 8, 1 / 2)
    seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"aug.pe_gamma must lie in [0, 1], got {self.gamma}")
        if self.rho < 1:
            raise ValueError(f"aug.pe_rho must be a positive integer, got {self.rho}")
        lo, hi = self.patch_size_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"aug.pe_patch_range must satisfy 0 < min <= max <= 1, got {self.patch_size_range}")


@dataclass
class Exchange:
    target: int
    donor: int
    rect: tuple            # (y0, x0, h, w) in image pixels
    label_rect: tuple      # (y0, x0, h, w) in label cells


def label_cover(rect, scale):
    """Smallest cell-aligned label rectangle covering a pixel rectangle."""
    y0, x0, h, w = rect
    ly0, lx0 = y0 // scale, x0 // scale
    ly1, lx1 = -(-(y0 + h) // scale), -(-(x0 + w) // scale)
    return ly0, lx0, ly1 - ly0, lx1 - lx0


def random_rect(rng, size, frac_range):
    lo = max(1, math.ceil(size * frac_range[0]))
    hi = max(lo, math.floor(size * frac_range[1]))
    h = int(rng.integers(lo, hi + 1))
    w = int(rng.integers(lo, hi + 1))
    y0 = int(rng.integers(0, size - h + 1))
    x0 = int(rng.integers(0, size - w + 1))
    return y0, x0, h, w


def patch_exchange(batch: LabeledBatch, cfg: PatchExchangeConfig, rng=None,
                   log: list | None = None) -> LabeledBatch:
    """Copy random image rectangles, with their label cells, from batch mates.

    Items ``0 .. floor(gamma*N)-1`` each receive ``rho`` patches; donors are
    drawn uniformly from the whole batch (self included) and always read from
    the unmodified input, so the result does not depend on iteration order.
    ``is_live`` is left as is; the dense label carries the mixed ground truth.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n = len(batch)
    out = batch.copy()
    src_img, src_lab = batch.images, batch.labels
    size = batch.images.shape[-1]
    scale = batch.label_scale
    for i in range(int(math.floor(cfg.gamma * n))):
        for _ in range(cfg.rho):
            y0, x0, h, w = random_rect(rng, size, cfg.patch_size_range)
            j = int(rng.integers(0, n))
            out.images[i, :, y0:y0 + h, x0:x0 + w] = src_img[j, :, y0:y0 + h, x0:x0 + w]
            ly, lx, lh, lw = label_cover((y0, x0, h, w), scale)
            out.labels[i, :, ly:ly + lh, lx:lx + lw] = src_lab[j, :, ly:ly + lh, lx:lx + lw]
            if log is not None:
                log.append(Exchange(i, j, (y0, x0, h, w), (ly, lx, lh, lw)))
    return out


# -- baseline augmentations ---------------------------------------------------

def hflip(image, label):
    return np.ascontiguousarray(image[..., ::-1]), np.ascontiguousarray(label[..., ::-1])


def cutout(image, rng, size_range=(0.1, 0.3)):
    """Zero one random rectangle; side lengths are fractions of the image side."""
    if size_range[1] <= 0:
        return image.copy()
    out = image.copy()
    size = image.shape[-1]
    y0, x0, h, w = random_rect(rng, size, size_range)
    out[..., y0:y0 + h, x0:x0 + w] = 0
    return out


def color_jitter(image, rng, strength=0.1):
    if strength <= 0:
        return image.copy()
    c = image.shape[0]
    gain = rng.uniform(1 - strength, 1 + strength, size=(c, 1, 1))
    offset = rng.uniform(-strength / 2, strength / 2, size=(c, 1, 1))
    return np.clip(image * gain + offset, 0.0, 1.0).astype(image.dtype)


@dataclass
class AugConfig:
    hflip: bool = True
    color_jitter: float = 0.1
    cutout: bool = True
    cutout_range: tuple = (0.1, 0.3)
    pe: bool = True
    pe_gamma: float = 0.5
    pe_rho: int = 2
    pe_patch_range: tuple = (1 / 8, 1 / 2)

    def __post_init__(self):
        if self.color_jitter < 0:
            raise ValueError(f"aug.color_jitter must be >= 0, got {self.color_jitter}")
        lo, hi = self.cutout_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"aug.cutout_range must satisfy 0 <= min <= max <= 1, got {self.cutout_range}")
        self.pe_config()

    def pe_config(self) -> PatchExchangeConfig:
        return PatchExchangeConfig(self.pe_gamma, self.pe_rho, tuple(self.pe_patch_range))


def augment_batch(batch: LabeledBatch, cfg: AugConfig, rng) -> LabeledBatch:
    """Baseline augmentations per item, then Patch Exchange over the batch."""
    out = batch.copy()
    for i in range(len(out)):
        img, lab = out.images[i], out.labels[i]
        if cfg.hflip and rng.random() < 0.5:
            img, lab = hflip(img, lab)
        if cfg.color_jitter > 0:
            img = color_jitter(img, rng, cfg.color_jitter)
        if cfg.cutout and rng.random() < 0.5:
            img = cutout(img, rng, cfg.cutout_range)
        out.images[i], out.labels[i] = img, lab
    if cfg.pe:
        out = patch_exchange(out, cfg.pe_config(), rng)
    return out


# -- previews -----------------------------------------------------------------

def write_ppm(path, rgb: np.ndarray):
    """Write an H x W x 3 array in [0, 1] as binary PPM."""
    arr = (np.clip(rgb, 0, 1) * 255 + 0.5).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    raw = np.frombuffer(parts[4][: w * h * 3], np.uint8)
    return raw.reshape(h, w, 3).astype(np.float32) / 255


def preview_grid(before: LabeledBatch, after: LabeledBatch, pad=2) -> np.ndarray:
    """One row per item: input image, input depth, augmented image, augmented depth."""
    s = before.images.shape[-1]
    k = before.label_scale
    rows = []
    for i in range(len(before)):
        tiles = []
        for b in (before, after):
            tiles.append(b.images[i].transpose(1, 2, 0))
            d = np.kron(b.labels[i, 0], np.ones((k, k)))
            tiles.append(np.repeat(d[:, :, None], 3, axis=2))
        sep = np.ones((s, pad, 3))
        row = tiles[0]
        for t in tiles[1:]:
            row = np.concatenate([row, sep, t], axis=1)
        rows.append(row)
    grid = rows[0]
    for r in rows[1:]:
        grid = np.concatenate([grid, np.ones((pad, grid.shape[1], 3)), r], axis=0)
    return grid
