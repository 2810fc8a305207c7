"""Trainable final layer of the detector: cosine classifier plus
per-class box regression over frozen pooled features.

Only this layer ever trains. The station fine-tunes it on a weighted
mixture of base and operator-annotated novel shots and ships versioned
snapshots of the weights to the robot.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CapacityError, SyncError
from .features import Box, ProposalFeature

NOVEL_CAPACITY = 10
DEFAULT_ALPHA = 20.0
NORM_EPS = 1e-12
DELTA_CLIP = 4.0  # exp() argument bound when decoding box deltas

# stable label for background samples; the background row index itself moves
# whenever a novel class registers
BACKGROUND = -1


class NonFiniteLossError(RuntimeError):
    """Training produced a non-finite loss; the cycle must be rolled back."""


@dataclass
class HeadParams:
    """Final-layer weights. class_weights has one extra background row
    (kept last); box weights/biases exist only for real classes."""

    class_weights: np.ndarray  # (n_classes + 1, d)
    box_weights: np.ndarray  # (n_classes, 4, d)
    box_biases: np.ndarray  # (n_classes, 4)
    alpha: float
    version: int
    class_names: list[str]  # base classes first, then novel
    n_base: int

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_novel(self) -> int:
        return self.n_classes - self.n_base

    @property
    def d(self) -> int:
        return self.class_weights.shape[1]

    @property
    def background_id(self) -> int:
        return self.n_classes


@dataclass
class NovelShot:
    """One operator-annotated training example for a novel class.

    bg_vectors hold pooled features of object-free regions of the same
    frame; they enter every batch that samples this shot, the way a drawn
    training image contributes both its box and its background."""

    class_id: int
    image_ref: str
    box: Box
    pooled: ProposalFeature
    source_frame_id: str
    bg_vectors: list[np.ndarray] = field(default_factory=list)


@dataclass
class BaseShot:
    """Pre-baked non-novel example: pooled feature, label, box target.
    Background samples carry the background class id and no target."""

    vector: np.ndarray
    class_id: int
    target: np.ndarray | None  # encoded (dx, dy, dw, dh); None for background


@dataclass
class SamplePool:
    """Fine-tuning pool; novel shots are virtually duplicated r times."""

    base_shots: list[BaseShot] = field(default_factory=list)
    novel_shots: list[NovelShot] = field(default_factory=list)
    r: int = 1
    k: int = 3

    def __post_init__(self) -> None:
        if self.r < 1:
            raise ValueError("novel reuse ratio r must be >= 1")

    @property
    def virtual_size(self) -> int:
        return len(self.base_shots) + self.r * len(self.novel_shots)


@dataclass
class TrainSample:
    vector: np.ndarray
    class_id: int
    target: np.ndarray | None  # None for background samples


@dataclass(frozen=True)
class FineTuneConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    step_budget: int | None = None
    time_budget: float | None = None  # wall-clock seconds


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < NORM_EPS:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def init_head(
    base_features: dict[str, list[np.ndarray]],
    d: int,
    alpha: float = DEFAULT_ALPHA,
    seed: int = 0,
) -> HeadParams:
    """Seed base class rows from unit-normalized per-class mean features;
    the background row is a seeded random unit vector and box weights start
    at zero (identity box transform)."""
    if d < 1:
        raise ValueError("feature dimension must be positive")
    if not base_features:
        raise ValueError("need at least one base class")
    names = list(base_features.keys())
    rows = []
    for name in names:
        feats = base_features[name]
        if not feats:
            raise ValueError(f"base class {name!r} has no features")
        stacked = np.asarray(feats, dtype=np.float64)
        if stacked.shape[1] != d:
            raise ValueError(f"base class {name!r} features are not length {d}")
        rows.append(_unit(stacked.mean(axis=0)))
    rng = np.random.default_rng(seed)
    background = _unit(rng.normal(size=d))
    class_weights = np.vstack(rows + [background]).astype(np.float32)
    n = len(names)
    return HeadParams(
        class_weights=class_weights,
        box_weights=np.zeros((n, 4, d), dtype=np.float32),
        box_biases=np.zeros((n, 4), dtype=np.float32),
        alpha=alpha,
        version=1,
        class_names=names,
        n_base=n,
    )


def _row_cosines(weights: np.ndarray, f: np.ndarray) -> np.ndarray:
    fn = np.linalg.norm(f)
    wn = np.linalg.norm(weights, axis=1)
    denom = wn * fn
    out = np.zeros(weights.shape[0])
    ok = denom > NORM_EPS
    out[ok] = (weights[ok] @ f) / denom[ok]
    return np.clip(out, -1.0, 1.0)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(
    p: HeadParams, f: ProposalFeature | np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities (softmax of alpha-scaled cosine logits) and
    per-class box deltas for one pooled feature."""
    vec = f.vector if isinstance(f, ProposalFeature) else np.asarray(f, dtype=np.float64)
    vec = vec.astype(np.float64).ravel()
    if vec.size != p.d:
        raise ValueError(f"feature length {vec.size} does not match head dim {p.d}")
    logits = p.alpha * _row_cosines(p.class_weights.astype(np.float64), vec)
    scores = _softmax(logits)
    deltas = p.box_weights.astype(np.float64) @ vec + p.box_biases.astype(np.float64)
    return scores, deltas


def encode_box_delta(proposal: Box, gt: Box) -> np.ndarray:
    """Standard (dx, dy, dw, dh) parameterization of gt relative to proposal."""
    pw, ph = proposal.width, proposal.height
    pcx, pcy = proposal.x_min + pw / 2, proposal.y_min + ph / 2
    gw, gh = gt.width, gt.height
    gcx, gcy = gt.x_min + gw / 2, gt.y_min + gh / 2
    return np.array(
        [(gcx - pcx) / pw, (gcy - pcy) / ph, np.log(gw / pw), np.log(gh / ph)]
    )


def apply_box_delta(proposal: Box, delta: np.ndarray) -> Box:
    """Invert encode_box_delta; falls back to the proposal when the decoded
    box is degenerate (wild untrained deltas)."""
    pw, ph = proposal.width, proposal.height
    pcx, pcy = proposal.x_min + pw / 2, proposal.y_min + ph / 2
    dx, dy, dw, dh = np.clip(np.asarray(delta, dtype=np.float64), -DELTA_CLIP, DELTA_CLIP)
    cx = pcx + dx * pw
    cy = pcy + dy * ph
    w = pw * np.exp(dw)
    h = ph * np.exp(dh)
    x0, x1 = max(0.0, cx - w / 2), cx + w / 2
    y0, y1 = max(0.0, cy - h / 2), cy + h / 2
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return proposal
    return Box(x0, y0, x1, y1)


def _iou(a: Box, b: Box) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def detect(
    p: HeadParams,
    proposals: list[ProposalFeature],
    score_thresh: float = 0.05,
    nms_iou: float = 0.5,
) -> list[tuple[Box, int, float]]:
    """Classify proposals, keep confident non-background argmaxes, decode
    boxes, and apply per-class greedy NMS. Output sorted by score."""
    if not (0 < score_thresh < 1) or not (0 < nms_iou < 1):
        raise ValueError("thresholds must lie in (0, 1)")
    if not proposals:
        return []
    feats = np.stack([pf.vector for pf in proposals]).astype(np.float64)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    safe = np.where(norms > NORM_EPS, norms, 1.0)
    fu = feats / safe
    w = p.class_weights.astype(np.float64)
    wn = np.linalg.norm(w, axis=1, keepdims=True)
    wu = np.where(wn > NORM_EPS, w / wn, 0.0)
    logits = p.alpha * np.clip(fu @ wu.T, -1.0, 1.0)
    probs = _softmax(logits)
    cls = np.argmax(probs, axis=1)

    candidates: list[tuple[Box, int, float, int]] = []
    bw = p.box_weights.astype(np.float64)
    bb = p.box_biases.astype(np.float64)
    for i, pf in enumerate(proposals):
        c = int(cls[i])
        score = float(probs[i, c])
        if c == p.background_id or score < score_thresh:
            continue
        box = apply_box_delta(pf.box, bw[c] @ feats[i] + bb[c])
        candidates.append((box, c, score, i))

    kept: list[tuple[Box, int, float]] = []
    candidates.sort(key=lambda t: (-t[2], t[3]))
    kept_by_class: dict[int, list[Box]] = {}
    for box, c, score, _ in candidates:
        others = kept_by_class.setdefault(c, [])
        if any(_iou(box, other) >= nms_iou for other in others):
            continue
        others.append(box)
        kept.append((box, c, score))
    return kept


def sample_minibatch(
    pool: SamplePool, m: int, rng: np.random.Generator
) -> list[TrainSample]:
    """Draw m distinct slots from the virtual pool in which every novel
    shot appears r times and every base shot once. A novel shot can
    therefore repeat up to r times inside one batch; a drawn novel shot
    also contributes its frame's background samples."""
    if m < 1:
        raise ValueError("batch size must be >= 1")
    total = pool.virtual_size
    if total < m:
        raise ValueError(f"virtual pool size {total} is smaller than batch {m}")
    n_base = len(pool.base_shots)
    idx = rng.choice(total, size=m, replace=False)
    batch: list[TrainSample] = []
    for slot in idx:
        if slot < n_base:
            shot = pool.base_shots[slot]
            batch.append(TrainSample(shot.vector, shot.class_id, shot.target))
        else:
            novel = pool.novel_shots[(slot - n_base) % len(pool.novel_shots)]
            batch.append(
                TrainSample(novel.pooled.vector, novel.class_id, np.zeros(4))
            )
            batch.extend(
                TrainSample(vec, BACKGROUND, None) for vec in novel.bg_vectors
            )
    return batch


def _smooth_l1(e: np.ndarray, beta: float = 1.0) -> tuple[float, np.ndarray]:
    a = np.abs(e)
    quad = a < beta
    loss = np.where(quad, 0.5 * e * e / beta, a - 0.5 * beta).sum()
    grad = np.where(quad, e / beta, np.sign(e))
    return float(loss), grad


def loss_and_grad(
    p: HeadParams, batch: list[TrainSample]
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch plus mean smooth-L1 (beta=1,
    summed over the 4 coordinates) over foreground samples. Gradients flow
    only to class weights, box weights, and biases."""
    if not batch:
        raise ValueError("batch is empty")
    w = p.class_weights.astype(np.float64)
    bw = p.box_weights.astype(np.float64)
    bb = p.box_biases.astype(np.float64)
    n_rows = w.shape[0]
    g_w = np.zeros_like(w)
    g_bw = np.zeros_like(bw)
    g_bb = np.zeros_like(bb)

    ce_total = 0.0
    box_total = 0.0
    n = len(batch)
    n_fg = sum(
        1
        for s in batch
        if s.class_id not in (BACKGROUND, p.background_id) and s.target is not None
    )

    for sample in batch:
        y = p.background_id if sample.class_id == BACKGROUND else sample.class_id
        if not (0 <= y <= p.background_id):
            raise ValueError(f"unregistered class id {sample.class_id}")
        f = np.asarray(sample.vector, dtype=np.float64).ravel()
        fn = np.linalg.norm(f)
        wn = np.linalg.norm(w, axis=1)
        denom = wn * fn
        cos = np.zeros(n_rows)
        ok = denom > NORM_EPS
        cos[ok] = (w[ok] @ f) / denom[ok]
        z = p.alpha * cos
        prob = _softmax(z)
        ce_total += -np.log(max(prob[y], 1e-300))
        gz = (prob - np.eye(n_rows)[y]) / n  # dCE/dz, batch-mean scaled
        for j in range(n_rows):
            if not ok[j]:
                continue
            dcos = f / denom[j] - cos[j] * w[j] / (wn[j] ** 2)
            g_w[j] += gz[j] * p.alpha * dcos

        if y != p.background_id and sample.target is not None and n_fg > 0:
            pred = bw[y] @ f + bb[y]
            loss_b, grad_b = _smooth_l1(pred - np.asarray(sample.target, dtype=np.float64))
            box_total += loss_b / n_fg
            g_bw[y] += np.outer(grad_b, f) / n_fg
            g_bb[y] += grad_b / n_fg

    loss = ce_total / n + box_total
    return loss, {"class_weights": g_w, "box_weights": g_bw, "box_biases": g_bb}


def fine_tune(
    p: HeadParams,
    pool: SamplePool,
    config: FineTuneConfig,
    rng: np.random.Generator,
) -> HeadParams:
    """SGD with momentum over sampled minibatches until the step or time
    budget expires. Returns new params with version + 1; a zero-step run
    returns the input unchanged."""
    if pool.virtual_size == 0:
        return p
    if config.step_budget is None and config.time_budget is None:
        raise ValueError("need a step or time budget")
    m = min(config.batch_size, pool.virtual_size)

    w = p.class_weights.astype(np.float64)
    bw = p.box_weights.astype(np.float64)
    bb = p.box_biases.astype(np.float64)
    vel = {
        "class_weights": np.zeros_like(w),
        "box_weights": np.zeros_like(bw),
        "box_biases": np.zeros_like(bb),
    }
    work = replace(p, class_weights=w, box_weights=bw, box_biases=bb)

    deadline = None if config.time_budget is None else time.monotonic() + config.time_budget
    steps = 0
    while True:
        if config.step_budget is not None and steps >= config.step_budget:
            break
        if deadline is not None and time.monotonic() >= deadline:
            break
        batch = sample_minibatch(pool, m, rng)
        loss, grads = loss_and_grad(work, batch)
        if not np.isfinite(loss):
            raise NonFiniteLossError(f"loss became non-finite at step {steps}")
        for key, g in grads.items():
            vel[key] = config.momentum * vel[key] + g
        w -= config.lr * vel["class_weights"]
        bw -= config.lr * vel["box_weights"]
        bb -= config.lr * vel["box_biases"]
        steps += 1

    if steps == 0:
        return p
    return replace(
        p,
        class_weights=w.astype(np.float32),
        box_weights=bw.astype(np.float32),
        box_biases=bb.astype(np.float32),
        version=p.version + 1,
        class_names=list(p.class_names),
    )


def register_novel_class(
    p: HeadParams, name: str, first_shot: NovelShot
) -> tuple[HeadParams, int]:
    """Append a novel class row initialized to the first shot's unit
    feature. Re-registering a name returns the existing id unchanged."""
    if name in p.class_names:
        return p, p.class_names.index(name)
    if p.n_novel >= NOVEL_CAPACITY:
        raise CapacityError(
            f"novel capacity {NOVEL_CAPACITY} exhausted; cannot register {name!r}"
        )
    row = _unit(np.asarray(first_shot.pooled.vector, dtype=np.float64)).astype(np.float32)
    n = p.n_classes
    class_weights = np.vstack([p.class_weights[:n], row[None, :], p.class_weights[n:]])
    box_weights = np.concatenate(
        [p.box_weights, np.zeros((1, 4, p.d), dtype=np.float32)], axis=0
    )
    box_biases = np.concatenate([p.box_biases, np.zeros((1, 4), dtype=np.float32)], axis=0)
    updated = replace(
        p,
        class_weights=class_weights.astype(np.float32),
        box_weights=box_weights,
        box_biases=box_biases,
        version=p.version + 1,
        class_names=p.class_names + [name],
    )
    return updated, n


@dataclass
class ParamDelta:
    """Versioned snapshot of the full final layer."""

    version: int
    class_names: list[str]
    n_base: int
    d: int
    class_weights: np.ndarray
    box_weights: np.ndarray
    box_biases: np.ndarray


def snapshot_delta(p: HeadParams) -> ParamDelta:
    return ParamDelta(
        version=p.version,
        class_names=list(p.class_names),
        n_base=p.n_base,
        d=p.d,
        class_weights=p.class_weights.astype(np.float32).copy(),
        box_weights=p.box_weights.astype(np.float32).copy(),
        box_biases=p.box_biases.astype(np.float32).copy(),
    )


def apply_delta(p: HeadParams, delta: ParamDelta) -> HeadParams:
    """Adopt the snapshot if it is newer; stale or same-version deltas are
    ignored. Dimension mismatches raise SyncError and leave p untouched."""
    if delta.version <= p.version:
        return p
    if delta.d != p.d:
        raise SyncError(f"delta dim {delta.d} does not match local head dim {p.d}")
    n = len(delta.class_names)
    if delta.class_weights.shape != (n + 1, delta.d):
        raise SyncError("delta class weight shape is inconsistent")
    return replace(
        p,
        class_weights=delta.class_weights.copy(),
        box_weights=delta.box_weights.copy(),
        box_biases=delta.box_biases.copy(),
        version=delta.version,
        class_names=list(delta.class_names),
        n_base=delta.n_base,
    )


def encode_delta(delta: ParamDelta) -> bytes:
    """Wire form: UTF-8 JSON header {version, n_classes, d, class_names,
    n_base, blob_len} + '\\n' + float32 LE blob (class weights row-major,
    then box weights, then biases)."""
    blob = (
        delta.class_weights.astype("<f4").tobytes()
        + delta.box_weights.astype("<f4").tobytes()
        + delta.box_biases.astype("<f4").tobytes()
    )
    header = {
        "version": delta.version,
        "n_classes": len(delta.class_names),
        "d": delta.d,
        "class_names": delta.class_names,
        "n_base": delta.n_base,
        "blob_len": len(blob),
    }
    return json.dumps(header, ensure_ascii=True).encode("utf-8") + b"\n" + blob


def decode_delta(raw: bytes) -> ParamDelta:
    sep = raw.find(b"\n")
    if sep < 0:
        raise ValueError("delta payload has no header terminator")
    header = json.loads(raw[:sep].decode("utf-8"))
    blob = raw[sep + 1 :]
    if len(blob) != header["blob_len"]:
        raise ValueError("delta blob length does not match header")
    n = header["n_classes"]
    d = header["d"]
    sizes = ((n + 1) * d, n * 4 * d, n * 4)
    if len(blob) != 4 * sum(sizes):
        raise ValueError("delta blob size inconsistent with dimensions")
    flat = np.frombuffer(blob, dtype="<f4")
    cw = flat[: sizes[0]].reshape(n + 1, d).copy()
    bw = flat[sizes[0] : sizes[0] + sizes[1]].reshape(n, 4, d).copy()
    bb = flat[sizes[0] + sizes[1] :].reshape(n, 4).copy()
    return ParamDelta(
        version=header["version"],
        class_names=list(header["class_names"]),
        n_base=header["n_base"],
        d=d,
        class_weights=cw,
        box_weights=bw,
        box_biases=bb,
    )


def save_shot_pool(shots: list[NovelShot], path: str) -> None:
    """One shot per JSONL line; images stay referenced by path while the
    pooled vectors are embedded as base64 float32."""
    import base64

    with open(path, "w", encoding="utf-8") as f:
        for s in shots:
            row = {
                "class_id": s.class_id,
                "image_ref": s.image_ref,
                "box": list(s.box.as_tuple()),
                "source_frame_id": s.source_frame_id,
                "vector": base64.b64encode(
                    np.asarray(s.pooled.vector, dtype="<f4").tobytes()
                ).decode("ascii"),
                "bg_vectors": [
                    base64.b64encode(np.asarray(v, dtype="<f4").tobytes()).decode("ascii")
                    for v in s.bg_vectors
                ],
            }
            f.write(json.dumps(row) + "\n")


def load_shot_pool(path: str) -> list[NovelShot]:
    import base64

    def vec(b64: str) -> np.ndarray:
        return np.frombuffer(base64.b64decode(b64), dtype="<f4").astype(np.float64)

    shots = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            box = Box(*row["box"])
            v = vec(row["vector"])
            shots.append(
                NovelShot(
                    class_id=row["class_id"],
                    image_ref=row["image_ref"],
                    box=box,
                    pooled=ProposalFeature(box=box, vector=v),
                    source_frame_id=row["source_frame_id"],
                    bg_vectors=[vec(b) for b in row.get("bg_vectors", [])],
                )
            )
    return shots


def params_equal(a: HeadParams, b: HeadParams) -> bool:
    """Bitwise equality of the synchronized state."""
    return (
        a.version == b.version
        and a.class_names == b.class_names
        and a.n_base == b.n_base
        and a.class_weights.tobytes() == b.class_weights.tobytes()
        and a.box_weights.tobytes() == b.box_weights.tobytes()
        and a.box_biases.tobytes() == b.box_biases.tobytes()
    )
