"""Synthetic multi-view identity dataset: generation, splits, batching, disk format.

Each identity is rendered as a canonical texture patch (a sum of oriented
Gabor-like blobs derived from a latent code), and each of the four views
applies a fixed affine warp plus an illumination gain to it. View identity
is therefore learnable from pixels, while the underlying identity content
is shared across views -- which is exactly the regime the confusion
mechanisms are meant to exploit.

Split tags: 0 = train, 1 = query, 2 = gallery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataFormatError, ValidationError
from .numcore import rng_stream

NUM_VIEWS = 4
VIEW_NAMES = ("front", "right", "left", "back")

TAG_TRAIN, TAG_QUERY, TAG_GALLERY = 0, 1, 2

DATASET_MAGIC = b"VCFLDS01"

# Stream-id regions; per-sample and per-identity streams are offset within
# a region so parallel generation never shares a stream.
STREAM_LATENT = 1_000_000
STREAM_SAMPLE = 2_000_000
STREAM_MIXER = 3_000_000
STREAM_SPLIT = 4_000_000


@dataclass
class GenConfig:
    num_identities: int = 32
    samples_per_view: int = 6
    height: int = 32
    width: int = 32
    latent_dim: int = 8
    num_blobs: int = 6
    # Per-view affine distortion: rotation (degrees), shear, translation (px).
    view_rotations: tuple[float, ...] = (0.0, 18.0, -18.0, 35.0)
    view_shears: tuple[float, ...] = (0.0, 0.18, -0.18, -0.30)
    view_tx: tuple[float, ...] = (0.0, 2.0, -2.0, 1.5)
    view_ty: tuple[float, ...] = (0.0, -1.0, 1.0, 2.0)
    view_gains: tuple[float, ...] = (1.0, 0.78, 1.22, 0.60)
    noise_sigma: float = 0.02
    view_label_noise: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_identities < 1 or self.samples_per_view < 1:
            raise ValidationError("num_identities and samples_per_view must be >= 1")
        if self.height < 8 or self.width < 8:
            raise ValidationError(
                f"image dims must be at least 8x8 (descriptor grid would be empty), "
                f"got {self.height}x{self.width}"
            )
        if self.latent_dim < 1 or self.num_blobs < 1:
            raise ValidationError("latent_dim and num_blobs must be >= 1")
        if not 0.0 <= self.view_label_noise <= 1.0:
            raise ValidationError(f"view_label_noise must lie in [0,1], got {self.view_label_noise}")
        for name in ("view_rotations", "view_shears", "view_tx", "view_ty", "view_gains"):
            if len(getattr(self, name)) != NUM_VIEWS:
                raise ValidationError(f"{name} must have {NUM_VIEWS} entries")


@dataclass
class Sample:
    """One observation: image patch, identity, stored view label, true camera."""

    image: np.ndarray
    identity: int
    view: int
    camera: int
    split: int = TAG_TRAIN


@dataclass
class SynthDataset:
    """Column-major storage of all samples plus split tags.

    `views` holds the stored (possibly label-noised) view labels used for
    classifier training; `cameras` holds the true generating view used for
    the evaluation exclusion rule. They coincide when label noise is zero.
    """

    images: np.ndarray      # (n, H, W) float64 in [0,1]
    identities: np.ndarray  # (n,) int64
    views: np.ndarray       # (n,) int64, stored labels
    cameras: np.ndarray     # (n,) int64, generating views
    split: np.ndarray       # (n,) uint8
    config: GenConfig | None = None

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def sample(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.identities[i]), int(self.views[i]),
                      int(self.cameras[i]), int(self.split[i]))

    def indices(self, tag: int) -> np.ndarray:
        return np.flatnonzero(self.split == tag)

    def train_indices(self) -> np.ndarray:
        return self.indices(TAG_TRAIN)

    def query_indices(self) -> np.ndarray:
        return self.indices(TAG_QUERY)

    def gallery_indices(self) -> np.ndarray:
        return self.indices(TAG_GALLERY)

    def flat_images(self, idx: np.ndarray | None = None) -> np.ndarray:
        imgs = self.images if idx is None else self.images[idx]
        return imgs.reshape(imgs.shape[0], -1)


@dataclass
class PkBatch:
    """Sample indices for one batch: P identity groups of K samples each."""

    indices: np.ndarray  # (P, K) int64 into the dataset
    p: int
    k: int

    def flat(self) -> np.ndarray:
        return self.indices.reshape(-1)


def _blob_params(latent: np.ndarray, mixer: np.ndarray, num_blobs: int,
                 height: int, width: int) -> np.ndarray:
    """Map a latent code to (num_blobs, 5) blob parameters.

    Columns: center col, center row, orientation, spatial frequency, extent.
    Smooth deterministic functions of the latent, so nearby codes render to
    nearby images.
    """
    u = mixer @ latent
    side = float(min(height, width))
    params = np.empty((num_blobs, 5))
    for g in range(num_blobs):
        a, b, c, d, e = u[5 * g: 5 * g + 5]
        params[g, 0] = width * (0.5 + 0.33 * math.tanh(a))
        params[g, 1] = height * (0.5 + 0.33 * math.tanh(b))
        params[g, 2] = math.pi * math.tanh(c)
        params[g, 3] = (2.0 * math.pi / side) * (2.0 + 1.5 * math.tanh(d))
        params[g, 4] = side * (0.10 + 0.06 / (1.0 + math.exp(-e)))
    return params


def _render_canonical(latent: np.ndarray, mixer: np.ndarray, cfg: GenConfig) -> np.ndarray:
    rows = np.arange(cfg.height, dtype=np.float64)[:, None]
    cols = np.arange(cfg.width, dtype=np.float64)[None, :]
    img = np.zeros((cfg.height, cfg.width))
    for cx, cy, theta, freq, extent in _blob_params(latent, mixer, cfg.num_blobs,
                                                    cfg.height, cfg.width):
        dx = cols - cx
        dy = rows - cy
        carrier = np.cos(freq * (dx * math.cos(theta) + dy * math.sin(theta)))
        envelope = np.exp(-(dx * dx + dy * dy) / (2.0 * extent * extent))
        img += carrier * envelope
    lo, hi = img.min(), img.max()
    if hi > lo:
        img = (img - lo) / (hi - lo)
    else:
        img = np.zeros_like(img)
    return img


def _affine_warp(img: np.ndarray, rotation_deg: float, shear: float,
                 tx: float, ty: float) -> np.ndarray:
    """Inverse-mapped affine warp with bilinear sampling, zero fill outside."""
    h, w = img.shape
    theta = math.radians(rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    # forward map: p_out = R @ S @ (p_in - center) + center + t  (x = col, y = row)
    fwd = np.array([[cos_t, -sin_t], [sin_t, cos_t]]) @ np.array([[1.0, shear], [0.0, 1.0]])
    inv = np.linalg.inv(fwd)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0

    out_c, out_r = np.meshgrid(np.arange(w, dtype=np.float64),
                               np.arange(h, dtype=np.float64))
    qx = out_c - cx - tx
    qy = out_r - cy - ty
    src_x = inv[0, 0] * qx + inv[0, 1] * qy + cx
    src_y = inv[1, 0] * qx + inv[1, 1] * qy + cy

    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = src_x - x0
    fy = src_y - y0

    def fetch(yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = np.zeros_like(src_x)
        vals[inside] = img[yy[inside], xx[inside]]
        return vals

    v00 = fetch(y0, x0)
    v01 = fetch(y0, x0 + 1)
    v10 = fetch(y0 + 1, x0)
    v11 = fetch(y0 + 1, x0 + 1)
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy


def render_sample(canonical: np.ndarray, view: int, cfg: GenConfig,
                  rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Warp a canonical image into one view and draw the stored label.

    The rng is the sample's private stream; draw order is fixed: pixel
    noise first, then the label-noise coin, then the replacement label.
    """
    img = _affine_warp(canonical, cfg.view_rotations[view], cfg.view_shears[view],
                       cfg.view_tx[view], cfg.view_ty[view])
    img = img * cfg.view_gains[view]
    img = img + cfg.noise_sigma * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0)
    stored_view = view
    if rng.uniform() < cfg.view_label_noise:
        others = [v for v in range(NUM_VIEWS) if v != view]
        stored_view = int(others[rng.integers(len(others))])
    return img, stored_view


def generate(cfg: GenConfig) -> SynthDataset:
    """Render the full dataset; deterministic given cfg (including seed)."""
    cfg.validate()
    n = cfg.num_identities * NUM_VIEWS * cfg.samples_per_view
    mixer_rng = rng_stream(cfg.seed, STREAM_MIXER)
    mixer = mixer_rng.standard_normal((5 * cfg.num_blobs, cfg.latent_dim))
    mixer /= math.sqrt(cfg.latent_dim)

    images = np.empty((n, cfg.height, cfg.width))
    identities = np.empty(n, dtype=np.int64)
    views = np.empty(n, dtype=np.int64)
    cameras = np.empty(n, dtype=np.int64)

    for identity in range(cfg.num_identities):
        latent = rng_stream(cfg.seed, STREAM_LATENT + identity).standard_normal(cfg.latent_dim)
        canonical = _render_canonical(latent, mixer, cfg)
        for view in range(NUM_VIEWS):
            for slot in range(cfg.samples_per_view):
                idx = (identity * NUM_VIEWS + view) * cfg.samples_per_view + slot
                sample_rng = rng_stream(cfg.seed, STREAM_SAMPLE + idx)
                img, stored_view = render_sample(canonical, view, cfg, sample_rng)
                images[idx] = img
                identities[idx] = identity
                views[idx] = stored_view
                cameras[idx] = view

    split = np.full(n, TAG_TRAIN, dtype=np.uint8)
    return SynthDataset(images, identities, views, cameras, split, cfg)


def split(ds: SynthDataset, rng: np.random.Generator | None = None) -> SynthDataset:
    """Assign train/query/gallery tags in place (and return the dataset).

    Per identity: hold out one sample per camera view; the held-out sample
    from one designated view becomes the query, the rest become gallery,
    everything else stays train. Every query therefore has at least one
    same-identity, different-view gallery match.
    """
    if rng is None:
        seed = ds.config.seed if ds.config is not None else 0
        rng = rng_stream(seed, STREAM_SPLIT)
    tags = np.full(len(ds), TAG_TRAIN, dtype=np.uint8)
    for identity in np.unique(ds.identities):
        mask = ds.identities == identity
        present_views = np.unique(ds.cameras[mask])
        if len(present_views) < 2:
            raise ValidationError(
                f"identity {int(identity)} appears in a single view; "
                "cannot build a cross-view query/gallery split"
            )
        held = {}
        for view in present_views:
            candidates = np.flatnonzero(mask & (ds.cameras == view))
            held[int(view)] = int(candidates[rng.integers(len(candidates))])
        query_view = int(present_views[rng.integers(len(present_views))])
        for view, idx in held.items():
            tags[idx] = TAG_QUERY if view == query_view else TAG_GALLERY
    ds.split = tags
    return ds


def sample_pk_batch(ds: SynthDataset, p: int, k: int, rng: np.random.Generator) -> PkBatch:
    """Draw P distinct train identities and K train samples for each.

    Samples are drawn without replacement when the identity has at least K
    train samples, with replacement otherwise.
    """
    if p < 1 or k < 1:
        raise ValidationError(f"P and K must be >= 1, got P={p}, K={k}")
    train_idx = ds.train_indices()
    train_ids = np.unique(ds.identities[train_idx])
    if p > len(train_ids):
        raise ValidationError(
            f"P={p} exceeds the number of train identities ({len(train_ids)})"
        )
    chosen = train_ids[rng.permutation(len(train_ids))[:p]]
    out = np.empty((p, k), dtype=np.int64)
    for row, identity in enumerate(chosen):
        pool = train_idx[ds.identities[train_idx] == identity]
        if len(pool) >= k:
            out[row] = pool[rng.permutation(len(pool))[:k]]
        else:
            out[row] = pool[rng.integers(len(pool), size=k)]
    return PkBatch(out, p, k)


def pixel_block_means(images: np.ndarray, block: int = 4) -> np.ndarray:
    """Mean intensity per block x block cell, flattened per image.

    The raw-pixel stand-in feature used to check that views are learnable
    from pixels at all (the confusion target is non-vacuous).
    """
    n, h, w = images.shape
    hb, wb = h // block, w // block
    trimmed = images[:, : hb * block, : wb * block]
    cells = trimmed.reshape(n, hb, block, wb, block).mean(axis=(2, 4))
    return cells.reshape(n, hb * wb)


def save_dataset(ds: SynthDataset, path: str) -> None:
    """Dataset file: magic, u32 counts, then per-sample records (see load)."""
    h, w = ds.image_shape
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(np.array([len(ds), h, w], dtype="<u4").tobytes())
        for i in range(len(ds)):
            f.write(np.array([ds.identities[i]], dtype="<u4").tobytes())
            f.write(np.array([ds.views[i], ds.split[i]], dtype="u1").tobytes())
            quantized = np.rint(ds.images[i] * 255.0).astype(np.uint8)
            f.write(quantized.tobytes())


def _read_exact(f, count: int, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        offset = f.tell() - len(data)
        raise DataFormatError(f"truncated dataset file: expected {count} bytes for {what} "
                              f"at byte offset {offset}")
    return data


def load_dataset(path: str) -> SynthDataset:
    """Inverse of save_dataset; intensities dequantize to value/255.

    The on-disk record does not carry the generating camera, so cameras are
    restored as the stored view labels (they coincide unless the dataset
    was generated with view-label noise).
    """
    with open(path, "rb") as f:
        magic = f.read(len(DATASET_MAGIC))
        if magic != DATASET_MAGIC:
            raise DataFormatError(
                f"bad dataset magic at byte offset 0: expected {DATASET_MAGIC!r}, got {magic!r}"
            )
        header = np.frombuffer(_read_exact(f, 12, "header"), dtype="<u4")
        n, h, w = (int(v) for v in header)
        if h < 8 or w < 8:
            raise DataFormatError(f"dataset file declares degenerate dims {h}x{w}")
        images = np.empty((n, h, w))
        identities = np.empty(n, dtype=np.int64)
        views = np.empty(n, dtype=np.int64)
        split_tags = np.empty(n, dtype=np.uint8)
        for i in range(n):
            identities[i] = int(np.frombuffer(_read_exact(f, 4, f"sample {i} identity"), dtype="<u4")[0])
            view, tag = _read_exact(f, 2, f"sample {i} labels")
            if view >= NUM_VIEWS:
                offset = f.tell() - 2
                raise DataFormatError(f"sample {i}: view label {view} out of range at byte offset {offset}")
            if tag > TAG_GALLERY:
                offset = f.tell() - 1
                raise DataFormatError(f"sample {i}: split tag {tag} out of range at byte offset {offset}")
            views[i] = view
            split_tags[i] = tag
            pixels = np.frombuffer(_read_exact(f, h * w, f"sample {i} pixels"), dtype=np.uint8)
            images[i] = pixels.reshape(h, w) / 255.0
        trailing = f.read(1)
        if trailing:
            raise DataFormatError(f"trailing bytes after {n} samples at byte offset {f.tell() - 1}")
    return SynthDataset(images, identities, views, views.copy(), split_tags, None)


def quantized_copy(ds: SynthDataset) -> SynthDataset:
    """The dataset as it would round-trip through disk (u8-quantized pixels)."""
    images = np.rint(ds.images * 255.0).astype(np.uint8) / 255.0
    return replace(ds, images=images)
