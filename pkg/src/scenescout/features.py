"""Deterministic feature extraction and similarity primitives.

The scene representation is a C x W x H tensor of per-cell patch statistics
computed on a fixed grid, so the robot and the station derive bit-identical
features from the same image bytes. Similarity comes in two flavours: plain
cosine over flattened tensors, and a translation-maximized cosine computed
with 2-D circular cross-correlation via FFT.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

# raw channels produced by the patch-statistics backbone, in order:
# RGB means, RGB standard deviations, mean gradient magnitude,
# gradient-orientation entropy
N_CHANNELS = 8

NORM_EPS = 1e-12
STANDARDIZE_EPS = 1e-8


@dataclass
class FeatureTensor:
    """C x W x H scene representation, data indexed as [c, y, x]."""

    channels: int
    width: int
    height: int
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.channels < 1 or self.width < 1 or self.height < 1:
            raise ValueError("tensor dimensions must be positive")
        self.data = np.asarray(self.data, dtype=np.float64)
        expected = (self.channels, self.height, self.width)
        if self.data.shape != expected:
            if self.data.size == self.channels * self.height * self.width:
                self.data = self.data.reshape(expected)
            else:
                raise ValueError(
                    f"data has {self.data.size} entries, expected {expected}"
                )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor entries must be finite")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> FeatureTensor:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError("expected a (C, H, W) array")
        c, h, w = arr.shape
        return cls(channels=c, width=w, height=h, data=arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def flat(self) -> np.ndarray:
        return self.data.ravel()

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in pixel coordinates, min-corner inclusive."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(np.isfinite(c) for c in coords):
            raise ValueError("box coordinates must be finite")
        if min(coords) < 0:
            raise ValueError("box coordinates must be non-negative")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("box must satisfy min < max on both axes")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass
class ProposalFeature:
    """Pooled, L2-normalized feature vector for one region proposal."""

    box: Box
    vector: np.ndarray

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=np.float64).ravel()


@dataclass(frozen=True)
class BackboneConfig:
    """Grid and statistics configuration for the patch backbone."""

    grid_w: int = 16
    grid_h: int = 16
    orientation_bins: int = 8

    @property
    def channels(self) -> int:
        return N_CHANNELS


@dataclass(frozen=True)
class AnchorConfig:
    """Deterministic anchor-grid proposal configuration."""

    scales: tuple[float, ...] = (0.25, 0.5, 0.75)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    stride_fraction: float = 1.0 / 8.0


DEFAULT_BACKBONE = BackboneConfig()
DEFAULT_ANCHORS = AnchorConfig()


def _as_rgb(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.stack([img, img, img], axis=-1)
    if img.ndim != 3 or img.shape[2] < 3:
        raise ValueError("expected an (H, W, 3) or (H, W) raster")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("image has a zero dimension")
    img = img[:, :, :3].astype(np.float64)
    if img.max() > 1.5:  # uint8-style range
        img = img / 255.0
    return img


def _cell_boundaries(n_pixels: int, n_cells: int) -> np.ndarray:
    # partition [0, n_pixels) into n_cells index ranges; cells can be empty
    # when the image is smaller than the grid
    return np.floor(np.arange(n_cells + 1) * n_pixels / n_cells).astype(np.int64)


def patch_statistics(
    image: np.ndarray, config: BackboneConfig = DEFAULT_BACKBONE
) -> FeatureTensor:
    """Raw (unstandardized) per-cell statistics of an RGB raster.

    Channels: RGB means (0..2), RGB standard deviations (3..5), mean
    gradient magnitude (6), gradient-orientation entropy in nats (7).
    Empty cells (image smaller than the grid) carry zeros.
    """
    img = _as_rgb(image)
    h, w, _ = img.shape
    gw, gh, nbins = config.grid_w, config.grid_h, config.orientation_bins

    by = _cell_boundaries(h, gh)
    bx = _cell_boundaries(w, gw)
    cell_y = np.clip(np.searchsorted(by, np.arange(h), side="right") - 1, 0, gh - 1)
    cell_x = np.clip(np.searchsorted(bx, np.arange(w), side="right") - 1, 0, gw - 1)
    cell_id = (cell_y[:, None] * gw + cell_x[None, :]).ravel()
    n_cells = gh * gw

    counts = np.bincount(cell_id, minlength=n_cells).astype(np.float64)
    safe_counts = np.maximum(counts, 1.0)

    out = np.zeros((N_CHANNELS, n_cells), dtype=np.float64)
    for c in range(3):
        vals = img[:, :, c].ravel()
        sums = np.bincount(cell_id, weights=vals, minlength=n_cells)
        sq = np.bincount(cell_id, weights=vals * vals, minlength=n_cells)
        mean = sums / safe_counts
        var = np.clip(sq / safe_counts - mean * mean, 0.0, None)
        out[c] = mean
        out[3 + c] = np.sqrt(var)

    gray = img @ np.array([0.299, 0.587, 0.114])
    if h > 1 or w > 1:
        gy, gx = np.gradient(gray)
    else:
        gy = np.zeros_like(gray)
        gx = np.zeros_like(gray)
    mag = np.hypot(gy, gx).ravel()
    out[6] = np.bincount(cell_id, weights=mag, minlength=n_cells) / safe_counts

    theta = np.arctan2(gy, gx).ravel()
    bins = np.clip(
        ((theta + np.pi) / (2 * np.pi) * nbins).astype(np.int64), 0, nbins - 1
    )
    hist = np.bincount(
        cell_id * nbins + bins, weights=mag, minlength=n_cells * nbins
    ).reshape(n_cells, nbins)
    totals = hist.sum(axis=1, keepdims=True)
    p = np.divide(hist, totals, out=np.zeros_like(hist), where=totals > NORM_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(p > 0, np.log(p), 0.0)
    out[7] = -(p * logp).sum(axis=1)

    data = out.reshape(N_CHANNELS, gh, gw)
    return FeatureTensor(channels=N_CHANNELS, width=gw, height=gh, data=data)


def extract_features(
    image: np.ndarray, config: BackboneConfig = DEFAULT_BACKBONE
) -> FeatureTensor:
    """Per-cell patch statistics, each channel standardized to zero mean
    and unit variance over the tensor. Pure in the image bytes."""
    raw = patch_statistics(image, config)
    data = raw.data.copy()
    for c in range(raw.channels):
        mu = data[c].mean()
        sigma = data[c].std()
        data[c] = (data[c] - mu) / (sigma + STANDARDIZE_EPS)
    return FeatureTensor(
        channels=raw.channels, width=raw.width, height=raw.height, data=data
    )


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two equal-length vectors; 0 when either is
    numerically zero (norm < 1e-12)."""
    av = np.asarray(a, dtype=np.float64).ravel()
    bv = np.asarray(b, dtype=np.float64).ravel()
    if av.shape != bv.shape:
        raise ValueError(f"length mismatch: {av.size} vs {bv.size}")
    na = np.linalg.norm(av)
    nb = np.linalg.norm(bv)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip(av @ bv / (na * nb), -1.0, 1.0))


def circular_corr_surface(x: FeatureTensor, m: FeatureTensor) -> np.ndarray:
    """Channel-summed circular cross-correlation: surface[dy, dx] equals
    the dot product of x with m rolled by (dy, dx)."""
    if x.shape != m.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {m.shape}")
    h, w = x.height, x.width
    xf = np.fft.rfft2(x.data, axes=(1, 2))
    mf = np.fft.rfft2(m.data, axes=(1, 2))
    return np.fft.irfft2(xf * np.conj(mf), s=(h, w), axes=(1, 2)).sum(axis=0)


def max_shift_sim(
    x: FeatureTensor, m: FeatureTensor
) -> tuple[float, tuple[int, int]]:
    """Maximum cosine similarity between x and all circular translations
    of m, with the translation-independent norm product as denominator.

    Returns (similarity, (dy, dx)) where rolling m by (dy, dx) attains the
    maximum; ties resolve to the smallest dy, then dx.
    """
    surface = circular_corr_surface(x, m)
    denom = x.norm() * m.norm()
    if denom < NORM_EPS:
        return 0.0, (0, 0)
    idx = int(np.argmax(surface))  # row-major argmax = lexicographic tie-break
    dy, dx = divmod(idx, x.width)
    s = float(np.clip(surface[dy, dx] / denom, -1.0, 1.0))
    return s, (dy, dx)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < NORM_EPS:
        return np.zeros_like(v)
    return v / n


def _subcell_edges(lo: float, hi: float, p: int, limit: int) -> tuple[np.ndarray, np.ndarray]:
    step = (hi - lo) / p
    starts = lo + step * np.arange(p)
    ends = starts + step
    i0 = np.floor(starts).astype(np.int64)
    i1 = np.ceil(ends).astype(np.int64)
    i0 = np.clip(i0, 0, limit - 1)
    i1 = np.clip(np.maximum(i1, i0 + 1), 1, limit)
    return i0, i1


def roi_pool_batch(
    t: FeatureTensor,
    boxes: list[Box],
    image_dims: tuple[int, int],
    p: int,
) -> np.ndarray:
    """Average-pool each box on a P x P sub-grid, one row per box.

    Rows are concatenated in (channel, row, col) order and L2-normalized;
    boxes are clipped to the image and rejected if degenerate afterwards.
    """
    if p < 1:
        raise ValueError("pooling grid size must be >= 1")
    img_w, img_h = image_dims
    if img_w <= 0 or img_h <= 0:
        raise ValueError("image dims must be positive")
    sx = t.width / img_w
    sy = t.height / img_h

    # prefix sums with a zero border for O(1) rectangle sums
    prefix = np.zeros((t.channels, t.height + 1, t.width + 1), dtype=np.float64)
    prefix[:, 1:, 1:] = np.cumsum(np.cumsum(t.data, axis=1), axis=2)

    d = t.channels * p * p
    out = np.empty((len(boxes), d), dtype=np.float64)
    for k, box in enumerate(boxes):
        x0 = max(0.0, min(box.x_min, float(img_w))) * sx
        x1 = max(0.0, min(box.x_max, float(img_w))) * sx
        y0 = max(0.0, min(box.y_min, float(img_h))) * sy
        y1 = max(0.0, min(box.y_max, float(img_h))) * sy
        if x1 - x0 <= 0 or y1 - y0 <= 0:
            raise ValueError("box has zero area after clipping to the image")
        r0, r1 = _subcell_edges(y0, y1, p, t.height)
        c0, c1 = _subcell_edges(x0, x1, p, t.width)
        areas = (r1 - r0)[:, None] * (c1 - c0)[None, :]
        sums = (
            prefix[:, r1[:, None], c1[None, :]]
            - prefix[:, r0[:, None], c1[None, :]]
            - prefix[:, r1[:, None], c0[None, :]]
            + prefix[:, r0[:, None], c0[None, :]]
        )
        out[k] = l2_normalize((sums / areas).ravel())
    return out


def roi_pool(
    t: FeatureTensor,
    box: Box,
    image_dims: tuple[int, int],
    p: int = 4,
) -> ProposalFeature:
    """Pool one box into a unit-norm feature vector of length C*P*P."""
    vec = roi_pool_batch(t, [box], image_dims, p)[0]
    return ProposalFeature(box=box, vector=vec)


def generate_proposals(
    image_dims: tuple[int, int], config: AnchorConfig = DEFAULT_ANCHORS
) -> list[Box]:
    """Deterministic anchor grid clipped to the image, duplicates removed.

    Anchor centers sit at (k + 0.5) * stride; each scale is a fraction of
    the shorter image side and each ratio r yields a size/sqrt(r) by
    size*sqrt(r) box of equal area.
    """
    img_w, img_h = image_dims
    if img_w <= 0 or img_h <= 0:
        return []
    min_dim = min(img_w, img_h)
    stride = config.stride_fraction * min_dim
    if stride <= 0:
        return []
    cys = []
    k = 0
    while (k + 0.5) * stride < img_h:
        cys.append((k + 0.5) * stride)
        k += 1
    cxs = []
    k = 0
    while (k + 0.5) * stride < img_w:
        cxs.append((k + 0.5) * stride)
        k += 1

    seen: set[tuple[float, float, float, float]] = set()
    boxes: list[Box] = []
    for scale in config.scales:
        size = scale * min_dim
        for ratio in config.ratios:
            bw = size / np.sqrt(ratio)
            bh = size * np.sqrt(ratio)
            for cy in cys:
                for cx in cxs:
                    x0 = max(0.0, cx - bw / 2)
                    y0 = max(0.0, cy - bh / 2)
                    x1 = min(float(img_w), cx + bw / 2)
                    y1 = min(float(img_h), cy + bh / 2)
                    if x1 - x0 <= 0 or y1 - y0 <= 0:
                        continue
                    key = (x0, y0, x1, y1)
                    if key in seen:
                        continue
                    seen.add(key)
                    boxes.append(Box(x0, y0, x1, y1))
    return boxes


_TENSOR_HEADER = struct.Struct("<3I")


def save_tensor(t: FeatureTensor, path: str) -> None:
    """Write the on-disk cache format: C,W,H as little-endian uint32
    followed by C*W*H little-endian float32 in (c, y, x) order."""
    with open(path, "wb") as f:
        f.write(_TENSOR_HEADER.pack(t.channels, t.width, t.height))
        f.write(t.data.astype("<f4").tobytes())


def load_tensor(path: str) -> FeatureTensor:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _TENSOR_HEADER.size:
        raise ValueError("tensor file truncated")
    c, w, h = _TENSOR_HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<f4", offset=_TENSOR_HEADER.size)
    if body.size != c * w * h:
        raise ValueError("tensor payload length does not match header")
    data = body.astype(np.float64).reshape(c, h, w)
    return FeatureTensor(channels=c, width=w, height=h, data=data)
