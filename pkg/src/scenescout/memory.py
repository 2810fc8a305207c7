"""Online visual memory for unsupervised interestingness scoring.

N tensor cubes store blended past scenes. Writing softly distributes a new
scene over the cubes according to cosine similarity; reading recalls a
similarity-weighted blend and scores the scene by how well the blend
matches it. Scenes the memory recalls poorly are interesting; repeated
exposure writes them in and the score decays (habituation).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .features import FeatureTensor, cosine_sim, max_shift_sim

logger = logging.getLogger(__name__)

# similarities are clamped below 1 so tan(pi/2 * s) stays finite, and at 0
# so anti-correlated cubes count as "no match"
SIM_CLAMP = 1.0 - 1e-6

DEFAULT_CUBES = 10
DEFAULT_GAIN = 5.0
INIT_NOISE_SIGMA = 0.01


@dataclass
class VisualMemory:
    """N cube tensors plus write/read gains; treat as immutable."""

    cubes: np.ndarray  # (N, C, H, W)
    gamma_w: float
    gamma_v: float
    n_writes: int = 0

    def __post_init__(self) -> None:
        self.cubes = np.asarray(self.cubes, dtype=np.float64)
        if self.cubes.ndim != 4 or self.cubes.shape[0] < 1:
            raise ValueError("cubes must be a non-empty (N, C, H, W) array")
        if not np.all(np.isfinite(self.cubes)):
            raise ValueError("cube entries must be finite")
        if self.gamma_w <= 0 or self.gamma_v <= 0:
            raise ValueError("gains must be positive")

    @property
    def n_cubes(self) -> int:
        return self.cubes.shape[0]

    @property
    def cube_shape(self) -> tuple[int, int, int]:
        return self.cubes.shape[1:]

    def cube(self, i: int) -> FeatureTensor:
        c, h, w = self.cube_shape
        return FeatureTensor(channels=c, width=w, height=h, data=self.cubes[i])


@dataclass
class InterestResult:
    """Reading outcome: score is exactly 1 - confidence."""

    score: float
    confidence: float
    recalled: FeatureTensor


def _check_shape(mem: VisualMemory, x: FeatureTensor) -> None:
    c, h, w = mem.cube_shape
    if x.shape != (c, h, w):
        raise ValueError(f"frame shape {x.shape} does not match memory {(c, h, w)}")


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _gain_weights(sims: np.ndarray, gamma: float) -> np.ndarray:
    d = np.clip(sims, 0.0, SIM_CLAMP)
    return _softmax(gamma * np.tan(np.pi / 2.0 * d))


def new_memory(
    n_cubes: int = DEFAULT_CUBES,
    shape: tuple[int, int, int] = (8, 16, 16),
    gamma_w: float = DEFAULT_GAIN,
    gamma_v: float = DEFAULT_GAIN,
    seed: int = 0,
) -> VisualMemory:
    """Fresh memory of small-amplitude Gaussian noise cubes (sigma=0.01).

    The noise scale is deliberately far below the norm of a real feature
    tensor so the very first write dominates every cube and the written
    scene is immediately recalled with high confidence.
    """
    if n_cubes < 1:
        raise ValueError("need at least one cube")
    c, w, h = shape
    if c < 1 or w < 1 or h < 1:
        raise ValueError("invalid cube shape")
    rng = np.random.default_rng(seed)
    cubes = rng.normal(0.0, INIT_NOISE_SIGMA, size=(n_cubes, c, h, w))
    return VisualMemory(cubes=cubes, gamma_w=gamma_w, gamma_v=gamma_v, n_writes=0)


def write(mem: VisualMemory, x: FeatureTensor) -> VisualMemory:
    """Blend x into every cube with softmax(gamma_w * tan(pi/2 * d)) weights,
    d being the cosine similarity of x to each cube."""
    _check_shape(mem, x)
    flat = x.flat()
    d = np.array([cosine_sim(flat, mem.cubes[i].ravel()) for i in range(mem.n_cubes)])
    w = _gain_weights(d, mem.gamma_w)
    cubes = (1.0 - w)[:, None, None, None] * mem.cubes + w[:, None, None, None] * x.data
    return VisualMemory(
        cubes=cubes,
        gamma_w=mem.gamma_w,
        gamma_v=mem.gamma_v,
        n_writes=mem.n_writes + 1,
    )


def read(mem: VisualMemory, x: FeatureTensor) -> InterestResult:
    """Recall a blend of cubes, each circularly aligned to x at its best
    translation, and score x by 1 - cosine(recalled, x).

    Using translation-maximized similarity both for the blend weights and
    (via the alignment) for the confidence makes the whole readout
    invariant to circular shifts of the input.
    """
    _check_shape(mem, x)
    c, h, w = mem.cube_shape
    sims = np.empty(mem.n_cubes)
    aligned = np.empty_like(mem.cubes)
    for i in range(mem.n_cubes):
        s, (dy, dx) = max_shift_sim(x, mem.cube(i))
        sims[i] = s
        aligned[i] = np.roll(mem.cubes[i], (dy, dx), axis=(1, 2))
    v = _gain_weights(sims, mem.gamma_v)
    f = np.tensordot(v, aligned, axes=1)
    recalled = FeatureTensor(channels=c, width=w, height=h, data=f)
    confidence = float(np.clip(cosine_sim(f.ravel(), x.flat()), 0.0, 1.0))
    return InterestResult(score=1.0 - confidence, confidence=confidence, recalled=recalled)


def process_frame(
    mem: VisualMemory, x: FeatureTensor
) -> tuple[InterestResult, VisualMemory]:
    """Write x first, then read it against the updated memory."""
    updated = write(mem, x)
    return read(updated, x), updated


def warmup(mem: VisualMemory, frames: Iterable[FeatureTensor]) -> VisualMemory:
    """Write each frame in order; produces no scores."""
    count = 0
    for frame in frames:
        mem = write(mem, frame)
        count += 1
    if count == 0:
        logger.warning("warmup called with an empty frame sequence; memory unchanged")
    return mem


_SNAPSHOT_HEADER = struct.Struct("<4I2d")


def save_memory(mem: VisualMemory, path: str) -> None:
    """Snapshot format: N,C,W,H (uint32 LE), gamma_w, gamma_v (float64 LE),
    then cube values as float64 LE so a resumed mission continues exactly."""
    n, (c, h, w) = mem.n_cubes, mem.cube_shape
    with open(path, "wb") as f:
        f.write(_SNAPSHOT_HEADER.pack(n, c, w, h, mem.gamma_w, mem.gamma_v))
        f.write(mem.cubes.astype("<f8").tobytes())


def load_memory(path: str) -> VisualMemory:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _SNAPSHOT_HEADER.size:
        raise ValueError("memory snapshot truncated")
    n, c, w, h, gamma_w, gamma_v = _SNAPSHOT_HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<f8", offset=_SNAPSHOT_HEADER.size)
    if body.size != n * c * h * w:
        raise ValueError("memory snapshot payload does not match header")
    cubes = body.reshape(n, c, h, w).copy()
    return VisualMemory(cubes=cubes, gamma_w=gamma_w, gamma_v=gamma_v, n_writes=0)
