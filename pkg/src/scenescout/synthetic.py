"""Procedural mission data: shapes on textured backgrounds.

Background frames share one per-mission texture with small per-frame
jitter, so the visual memory habituates to them during warmup. Injected
novel-object frames switch to a contrasting texture family and carry one
large novel shape, so they score as interesting on first sight. Base-class
scenes (for head initialization and evaluation) reuse the background
texture family.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .features import BackboneConfig, Box, extract_features, roi_pool
from .head import BaseShot, encode_box_delta

IMAGE_SIZE = 128

BASE_CLASSES = ("disk", "slab", "cross")
NOVEL_CLASSES = ("ring", "diamond")

_CLASS_COLORS = {
    "disk": (210, 60, 50),
    "slab": (60, 190, 80),
    "cross": (60, 90, 220),
    "ring": (230, 140, 40),
    "diamond": (170, 60, 200),
}


@dataclass
class Scene:
    frame_id: str
    image: np.ndarray  # (H, W, 3) uint8
    boxes: list[tuple[Box, str]] = field(default_factory=list)
    interesting: bool = False


def _bilinear_upscale(grid: np.ndarray, size: int) -> np.ndarray:
    src = grid.shape[0]
    xs = np.linspace(0, src - 1, size)
    i0 = np.clip(xs.astype(int), 0, src - 2)
    frac = xs - i0
    rows = grid[i0] * (1 - frac)[:, None, None] + grid[i0 + 1] * frac[:, None, None]
    cols = (
        rows[:, i0] * (1 - frac)[None, :, None] + rows[:, i0 + 1] * frac[None, :, None]
    )
    return cols


def field_texture(rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """Smooth warm-toned blobby terrain."""
    grid = rng.uniform(0.30, 0.55, size=(9, 9, 3))
    grid[:, :, 2] *= 0.8  # keep it brownish
    return _bilinear_upscale(grid, size)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


def grate_texture(rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """High-contrast striped surface, unlike anything in the field; stripe
    color and orientation vary per frame so successive novel scenes stay
    mutually dissimilar."""
    phase = rng.uniform(0, 2 * np.pi)
    period = rng.uniform(7.0, 11.0)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    axis = [xx, yy, xx + yy, xx - yy][int(rng.integers(4))]
    stripe = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * axis / period + phase))
    img = np.zeros((size, size, 3))
    dark = np.array([0.06, 0.08, 0.14]) + rng.uniform(-0.02, 0.02, 3)
    bright = _hsv_to_rgb(float(rng.uniform(0, 1)), 0.75, 0.9)
    img[:] = dark[None, None, :] + stripe[:, :, None] * (bright - dark)[None, None, :]
    return img


def checker_texture(rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """Hard-edged checkerboard, a second anomaly family so the two novel
    classes do not habituate each other."""
    cell = int(rng.integers(10, 16))
    yy, xx = np.mgrid[0:size, 0:size]
    parity = ((yy // cell) + (xx // cell)) % 2
    a = _hsv_to_rgb(float(rng.uniform(0, 1)), 0.8, 0.85)
    b = np.array([0.04, 0.05, 0.08]) + rng.uniform(0, 0.03, 3)
    img = np.where(parity[:, :, None] == 0, a[None, None, :], b[None, None, :])
    return img


NOVEL_TEXTURES = {"ring": grate_texture, "diamond": checker_texture}


def flare_texture(rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """Overexposed wash: visually anomalous but operationally uninteresting."""
    grid = rng.uniform(0.80, 0.98, size=(5, 5, 3))
    grid[:, :, 2] *= 0.92
    return _bilinear_upscale(grid, size)


def _shape_mask(shape: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if shape == "disk":
        return dx * dx + dy * dy <= r * r
    if shape == "slab":
        return (np.abs(dx) <= r) & (np.abs(dy) <= 0.45 * r)
    if shape == "cross":
        arm = 0.34 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        )
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ValueError(f"unknown shape {shape!r}")


def _mask_box(mask: np.ndarray) -> Box:
    ys, xs = np.where(mask)
    return Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def draw_shape(
    img: np.ndarray, rng: np.random.Generator, shape: str, cx: float, cy: float, r: float
) -> Box:
    mask = _shape_mask(shape, img.shape[0], cx, cy, r)
    color = np.array(_CLASS_COLORS[shape], dtype=np.float64) / 255.0
    color = np.clip(color + rng.uniform(-0.1, 0.1, 3), 0.0, 1.0)
    img[mask] = color
    # speckle so the object is not perfectly flat
    noise = rng.normal(0, 0.03, size=img.shape)
    img[mask] = np.clip(img[mask] + noise[mask], 0.0, 1.0)
    return _mask_box(mask)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def background_scene(
    frame_id: str, texture_rng: np.random.Generator, jitter_rng: np.random.Generator
) -> Scene:
    img = field_texture(texture_rng)
    img = np.clip(img + jitter_rng.normal(0, 0.012, size=img.shape), 0, 1)
    img += jitter_rng.uniform(-0.02, 0.02)
    return Scene(frame_id=frame_id, image=_to_uint8(img), interesting=False)


def object_scene(
    frame_id: str,
    rng: np.random.Generator,
    class_name: str,
    novel_style: bool = False,
    size_range: tuple[float, float] = (22.0, 34.0),
    texture_mode: str = "class",
) -> Scene:
    """One object on a texture; novel-style scenes use a contrasting
    texture family and a large shape so they read as globally new.
    texture_mode "random" decouples texture from class (harder few-shot
    setting: texture stops being class-predictive)."""
    size = IMAGE_SIZE
    if novel_style:
        if texture_mode == "random":
            texture = (grate_texture, checker_texture)[int(rng.integers(2))]
        else:
            texture = NOVEL_TEXTURES.get(class_name, grate_texture)
        img = texture(rng)
        r = rng.uniform(34.0, 50.0)
    else:
        img = field_texture(rng)
        r = rng.uniform(*size_range)
    cx = rng.uniform(r + 4, size - r - 4)
    cy = rng.uniform(r + 4, size - r - 4)
    box = draw_shape(img, rng, class_name, cx, cy, r)
    return Scene(
        frame_id=frame_id,
        image=_to_uint8(img),
        boxes=[(box, class_name)],
        interesting=True,
    )


@dataclass
class MissionData:
    warmup: list[Scene]
    frames: list[Scene]
    mission_id: str


def make_mission(
    seed: int = 0,
    n_warmup: int = 40,
    n_frames: int = 200,
    novel_period: int = 10,
    flare_period: int = 25,
) -> MissionData:
    """Background stream with novel-object frames injected every
    novel_period frames (alternating novel classes, ~10% of the stream)
    and occasional uninteresting 'flare' anomalies that exercise the
    operator-rejection path."""
    texture_rng = np.random.default_rng(seed)
    base_texture_state = texture_rng.bit_generator.state
    jitter_rng = np.random.default_rng(seed + 1)
    novel_rng = np.random.default_rng(seed + 2)
    flare_rng = np.random.default_rng(seed + 3)

    def bg(frame_id: str) -> Scene:
        texture_rng.bit_generator.state = base_texture_state  # same base pattern
        return background_scene(frame_id, texture_rng, jitter_rng)

    warmup = [bg(f"warm-{i:04d}") for i in range(n_warmup)]
    frames: list[Scene] = []
    novel_i = 0
    for i in range(n_frames):
        fid = f"frame-{i:04d}"
        if novel_period and i % novel_period == novel_period // 2:
            cls = NOVEL_CLASSES[novel_i % len(NOVEL_CLASSES)]
            novel_i += 1
            frames.append(object_scene(fid, novel_rng, cls, novel_style=True))
        elif flare_period and i % flare_period == flare_period - 1:
            img = flare_texture(flare_rng)
            frames.append(Scene(frame_id=fid, image=_to_uint8(img), interesting=False))
        else:
            frames.append(bg(fid))
    return MissionData(warmup=warmup, frames=frames, mission_id=f"synthetic-{seed}")


def make_base_scenes(seed: int = 100, per_class: int = 6) -> list[Scene]:
    rng = np.random.default_rng(seed)
    scenes = []
    for cls in BASE_CLASSES:
        for i in range(per_class):
            scenes.append(object_scene(f"base-{cls}-{i}", rng, cls))
    return scenes


def make_eval_scenes(
    seed: int = 200, per_class: int = 4, texture_mode: str = "class"
) -> list[Scene]:
    """Held-out scenes over all five classes for detection evaluation."""
    rng = np.random.default_rng(seed)
    scenes = []
    for cls in BASE_CLASSES + NOVEL_CLASSES:
        for i in range(per_class):
            novel = cls in NOVEL_CLASSES
            scenes.append(
                object_scene(
                    f"eval-{cls}-{i}", rng, cls, novel_style=novel,
                    texture_mode=texture_mode,
                )
            )
    return scenes


def sample_background_boxes(
    scene: Scene, rng: np.random.Generator, count: int, max_iou: float = 0.15
) -> list[Box]:
    """Random boxes that barely overlap any annotation; background regions
    for classifier training."""
    from .evalkit import iou as box_iou

    size = IMAGE_SIZE
    out: list[Box] = []
    attempts = 0
    while len(out) < count and attempts < 200:
        attempts += 1
        w = rng.uniform(24, 64)
        h = rng.uniform(24, 64)
        x0 = rng.uniform(0, size - w)
        y0 = rng.uniform(0, size - h)
        box = Box(x0, y0, x0 + w, y0 + h)
        if all(box_iou(box, gt) <= max_iou for gt, _ in scene.boxes):
            out.append(box)
    return out


def background_shots(
    scenes: list[Scene],
    backbone: BackboneConfig,
    pool_grid: int,
    background_id: int,
    per_scene: int = 2,
    seed: int = 17,
) -> list[BaseShot]:
    """Background training samples pooled from object-free regions."""
    rng = np.random.default_rng(seed)
    shots = []
    size = IMAGE_SIZE
    for scene in scenes:
        feats = extract_features(scene.image, backbone)
        for box in sample_background_boxes(scene, rng, per_scene):
            pf = roi_pool(feats, box, (size, size), pool_grid)
            shots.append(BaseShot(vector=pf.vector, class_id=background_id, target=None))
    return shots


def base_feature_bank(
    scenes: list[Scene],
    backbone: BackboneConfig,
    pool_grid: int,
) -> dict[str, list[np.ndarray]]:
    bank: dict[str, list[np.ndarray]] = {name: [] for name in BASE_CLASSES}
    size = IMAGE_SIZE
    for scene in scenes:
        feats = extract_features(scene.image, backbone)
        for box, name in scene.boxes:
            if name in bank:
                bank[name].append(roi_pool(feats, box, (size, size), pool_grid).vector)
    return bank


def base_shot_pool(
    scenes: list[Scene],
    backbone: BackboneConfig,
    pool_grid: int,
    class_ids: dict[str, int],
    jitter_seed: int = 7,
) -> list[BaseShot]:
    """Base training shots: features pooled at a jittered box with the
    encoded offset back to the ground truth as regression target."""
    rng = np.random.default_rng(jitter_seed)
    shots = []
    size = IMAGE_SIZE
    for scene in scenes:
        feats = extract_features(scene.image, backbone)
        for box, name in scene.boxes:
            if name not in class_ids:
                continue
            w, h = box.width, box.height
            jx = rng.uniform(-0.08, 0.08) * w
            jy = rng.uniform(-0.08, 0.08) * h
            js = rng.uniform(0.9, 1.1)
            cx, cy = box.x_min + w / 2 + jx, box.y_min + h / 2 + jy
            bw, bh = w * js / 2, h * js / 2
            jittered = Box(
                max(0.0, cx - bw), max(0.0, cy - bh),
                min(float(size), cx + bw), min(float(size), cy + bh),
            )
            pf = roi_pool(feats, jittered, (size, size), pool_grid)
            shots.append(
                BaseShot(
                    vector=pf.vector,
                    class_id=class_ids[name],
                    target=encode_box_delta(jittered, box),
                )
            )
    return shots


def bundled_head_and_pool(
    backbone: BackboneConfig,
    pool_grid: int,
    alpha: float = 20.0,
    base_seed: int = 100,
    per_class: int = 6,
    head_seed: int = 0,
):
    """The bundled base package: a head initialized from the base scenes
    and the base training shots (foreground plus background samples).
    Robot and station both build this, so their initial heads are
    bit-identical."""
    from .head import BACKGROUND, init_head

    scenes = make_base_scenes(seed=base_seed, per_class=per_class)
    bank = base_feature_bank(scenes, backbone, pool_grid)
    d = backbone.channels * pool_grid * pool_grid
    head = init_head(bank, d=d, alpha=alpha, seed=head_seed)
    class_ids = {name: i for i, name in enumerate(BASE_CLASSES)}
    shots = base_shot_pool(scenes, backbone, pool_grid, class_ids)
    shots += background_shots(scenes, backbone, pool_grid, BACKGROUND, per_scene=2)
    return head, shots


def scene_png(scene: Scene) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(scene.image).save(buf, format="PNG")
    return buf.getvalue()


def write_mission_dir(mission: MissionData, path: str) -> None:
    """Materialize the mission as an image directory (lexicographic order
    preserves warmup-then-mission ordering) plus annotations.jsonl."""
    os.makedirs(path, exist_ok=True)
    annotations = []
    for i, scene in enumerate(mission.warmup + mission.frames):
        name = f"{i:05d}-{scene.frame_id}.png"
        with open(os.path.join(path, name), "wb") as f:
            f.write(scene_png(scene))
        annotations.append(
            {
                "frame": name,
                "interesting": scene.interesting,
                "boxes": [
                    {
                        "class": cls,
                        "x": box.x_min,
                        "y": box.y_min,
                        "w": box.width,
                        "h": box.height,
                    }
                    for box, cls in scene.boxes
                ],
            }
        )
    with open(os.path.join(path, "annotations.jsonl"), "w", encoding="utf-8") as f:
        for row in annotations:
            f.write(json.dumps(row) + "\n")
