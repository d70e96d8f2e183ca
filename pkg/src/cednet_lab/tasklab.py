"""Toy dense-prediction lab: synthetic shape scenes, training, metrics, saliency."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .executor import ParamStore, forward, init_params
from .graph import ArchConfig, ArchGraph, GraphBuilder, build_cednet_into, config_to_dict
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

CLASS_NAMES = ("background", "circle", "rectangle", "triangle")
NUM_CLASSES = len(CLASS_NAMES)
CLASS_COLORS = {1: (0.85, 0.25, 0.2), 2: (0.25, 0.8, 0.3), 3: (0.25, 0.35, 0.9)}


class DivergenceError(RuntimeError):
    pass


# ------------------------------------------------------------------ scenes


@dataclass(frozen=True)
class SceneSpec:
    min_shapes: int = 1
    max_shapes: int = 3
    min_size: int = 8
    max_size: int = 20
    noise: float = 0.03
    supersample: int = 4
    palette: str = "class"  # "class": per-class colour bands; "random": any colour
    jitter: float = 0.15

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticScene:
    image: np.ndarray  # (3, H, W) float in [0, 1]
    mask: np.ndarray  # (H, W) int64 labels
    seed: int
    shapes: list  # [(class id, params dict)]


def _inside(cls: int, p: dict, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    if cls == 1:
        return (yy - p["cy"]) ** 2 + (xx - p["cx"]) ** 2 <= p["r"] ** 2
    if cls == 2:
        return (np.abs(yy - p["cy"]) <= p["hh"]) & (np.abs(xx - p["cx"]) <= p["hw"])
    (ay, ax), (by, bx), (cy, cx) = p["verts"]

    def edge(y0, x0, y1, x1):
        return (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)

    d1, d2, d3 = edge(ay, ax, by, bx), edge(by, bx, cy, cx), edge(cy, cx, ay, ax)
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def generate_scene(seed: int, height: int, width: int, spec: SceneSpec = SceneSpec()) -> SyntheticScene:
    """Random circles/rectangles/triangles on a smooth background.

    The image is anti-aliased by supersampling; the mask takes the class of
    the topmost shape covering each pixel centre.
    """
    if height % 32 or width % 32:
        raise ValueError(f"scene size {height}x{width} must be divisible by 32")
    if 2 * spec.max_size > min(height, width):
        raise ValueError(f"max_size {spec.max_size} too large for a {height}x{width} canvas")
    if spec.min_size < 1 or spec.min_size > spec.max_size or spec.min_shapes > spec.max_shapes:
        raise ValueError("invalid size or count range in scene spec")
    rng = np.random.default_rng(seed)
    s = spec.supersample
    ys = (np.arange(height * s) + 0.5) / s - 0.5
    xs = (np.arange(width * s) + 0.5) / s - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    py, px = np.meshgrid(np.arange(height, dtype=float), np.arange(width, dtype=float), indexing="ij")

    if spec.palette not in ("class", "random"):
        raise ValueError(f"unknown palette {spec.palette!r}")
    if spec.palette == "class":
        # low-saturation background so the colour bands stay separable
        c0, c1 = rng.uniform(0.3, 0.7, size=(2, 1)) + rng.uniform(-0.05, 0.05, size=(2, 3))
    else:
        c0, c1 = rng.uniform(0.0, 1.0, size=(2, 3))
    ramp = (yy / (height * 1.0))[None]
    canvas = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    mask = np.zeros((height, width), dtype=np.int64)
    shapes = []
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    for _ in range(n):
        cls = int(rng.integers(1, NUM_CLASSES))
        size = rng.uniform(spec.min_size, spec.max_size)
        cy = rng.uniform(size, height - size)
        cx = rng.uniform(size, width - size)
        if cls == 1:
            p = {"cy": cy, "cx": cx, "r": size}
        elif cls == 2:
            aspect = rng.uniform(0.5, 1.0)
            hh, hw = (size, size * aspect) if rng.random() < 0.5 else (size * aspect, size)
            p = {"cy": cy, "cx": cx, "hh": hh, "hw": hw}
        else:
            rot = rng.uniform(0, 2 * np.pi)
            angles = rot + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
            p = {"verts": [(cy + size * np.sin(a), cx + size * np.cos(a)) for a in angles]}
        if spec.palette == "class":
            color = np.clip(np.array(CLASS_COLORS[cls]) + rng.uniform(-spec.jitter, spec.jitter, 3), 0, 1)
        else:
            color = rng.uniform(0.0, 1.0, size=3)
        cover = _inside(cls, p, yy, xx).astype(float)
        cover = cover.reshape(height, s, width, s).mean(axis=(1, 3))
        up = np.repeat(np.repeat(cover, s, 0), s, 1)[None]
        canvas = canvas * (1 - up) + color[:, None, None] * up
        mask[_inside(cls, p, py, px)] = cls
        shapes.append((cls, p))
    image = canvas.reshape(3, height, s, width, s).mean(axis=(2, 4))
    if spec.noise > 0:
        image = image + rng.normal(0, spec.noise, size=image.shape)
    return SyntheticScene(np.clip(image, 0.0, 1.0), mask, seed, shapes)


@dataclass(frozen=True)
class DataSpec:
    height: int = 64
    width: int = 64
    n_train: int = 256
    n_val: int = 32
    seed: int = 0
    scene: SceneSpec = field(default_factory=SceneSpec)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene"] = self.scene.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DataSpec":
        d = dict(d)
        known = {"height", "width", "n_train", "n_val", "seed", "scene"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown data spec field {sorted(unknown)[0]!r}")
        scene = SceneSpec(**d.pop("scene", {}))
        return cls(scene=scene, **d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DataSpec":
        return cls.from_dict(json.loads(text))


def make_split(spec: DataSpec, split: str) -> tuple:
    """(images (N,3,H,W) float32, masks (N,H,W) int64) for 'train' or 'val'."""
    n, offset = (spec.n_train, 0) if split == "train" else (spec.n_val, 1_000_000)
    scenes = [
        generate_scene(spec.seed * 10_000_019 + offset + i, spec.height, spec.width, spec.scene)
        for i in range(n)
    ]
    images = np.stack([s.image for s in scenes]).astype(np.float32)
    masks = np.stack([s.mask for s in scenes])
    return images, masks


# ------------------------------------------------------------------ model


def attach_seg_head(b: GraphBuilder, taps: dict, num_classes: int, width: int) -> str:
    """1x1 convs to ``width`` per level, upsample to stride 8, sum, classify, upsample x8."""
    with b.scope("seghead"):
        h8 = b.conv(taps["p8"], width, 1, name="proj8")
        h16 = b.upsample(b.conv(taps["p16"], width, 1, name="proj16"), 2, "up16")
        h32 = b.upsample(b.conv(taps["p32"], width, 1, name="proj32"), 4, "up32")
        h = b.add(b.add(h8, h16, "sum16"), h32, "sum32")
        logits = b.conv(h, num_classes, 1, name="classify")
        return b.upsample(logits, 8, "up_logits")


def build_seg_model(config: ArchConfig, num_classes: int = NUM_CLASSES, head_width: Optional[int] = None) -> ArchGraph:
    head_width = head_width or config.channels[1]
    b = GraphBuilder()
    taps = build_cednet_into(b, config)
    logits = attach_seg_head(b, taps, num_classes, head_width)
    meta = {
        "arch": "cednet",
        "mode": "segmentation",
        "config": config_to_dict(config),
        "num_classes": num_classes,
        "head_width": head_width,
    }
    return b.finish({"logits": logits}, meta)


def seg_loss(graph: ArchGraph, store: ParamStore, images: np.ndarray, masks: np.ndarray) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(images.astype(_store_dtype(store)))
    logits = forward(graph, store, x)["logits"]
    return T.softmax_cross_entropy(logits, masks)


def predict(graph: ArchGraph, store: ParamStore, images: np.ndarray, batch: int = 16) -> np.ndarray:
    preds = []
    dtype = _store_dtype(store)
    for i in range(0, len(images), batch):
        logits = forward(graph, store, Tensor(images[i : i + batch].astype(dtype)))["logits"]
        preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds)


def _store_dtype(store: ParamStore):
    for t in store.tensors.values():
        return t.dtype
    return np.float32


# ------------------------------------------------------------------ metrics


def confusion(pred: np.ndarray, target: np.ndarray, num_classes: int) -> np.ndarray:
    idx = target.reshape(-1) * num_classes + pred.reshape(-1)
    return np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)


def segmentation_metrics(pred: np.ndarray, target: np.ndarray, num_classes: int = NUM_CLASSES) -> dict:
    """Pixel accuracy and per-class IoU = TP / (TP + FP + FN); absent classes give NaN."""
    cm = confusion(pred, target, num_classes).astype(np.float64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    return {
        "pixel_acc": float(tp.sum() / cm.sum()),
        "iou": [float(v) for v in iou],
        "miou": float(np.nanmean(iou)) if np.any(union > 0) else float("nan"),
    }


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    steps: int = 500
    batch_size: int = 8
    seed: int = 0
    warmup: int = 20
    eval_every: int = 100
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class TrainRun:
    config: TrainConfig
    loss_history: list = field(default_factory=list)
    metric_history: list = field(default_factory=list)  # dicts: step, pixel_acc, miou
    checkpoint: Optional[str] = None
    store: Optional[ParamStore] = field(default=None, repr=False)

    @property
    def initial_loss(self) -> float:
        return self.loss_history[0]

    @property
    def final_loss(self) -> float:
        # mean of the last 10 steps smooths batch-to-batch noise
        tail = self.loss_history[-10:]
        return float(np.mean(tail))


class AdamW:
    """Adam with decoupled weight decay (matrices/kernels only)."""

    def __init__(self, params: dict, lr: float, weight_decay: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if p.ndim > 1 and self.weight_decay:
                p.data -= (lr * self.weight_decay) * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to zero."""
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(1, cfg.steps - cfg.warmup)
    prog = min(1.0, (step - cfg.warmup) / span)
    return cfg.lr * 0.5 * (1 + math.cos(math.pi * prog))


def train(
    graph: ArchGraph,
    data: DataSpec,
    cfg: TrainConfig,
    store: Optional[ParamStore] = None,
    val: Optional[tuple] = None,
    callback=None,
) -> TrainRun:
    """Seeded AdamW training of ``graph`` (a segmentation model) on synthetic scenes."""
    if cfg.batch_size < 1 or cfg.steps < 1 or cfg.lr < 0:
        raise ValueError("invalid train config")
    images, masks = make_split(data, "train")
    if val is None and cfg.eval_every:
        val = make_split(data, "val")
    store = store or init_params(graph, seed=cfg.seed)
    store.requires_grad_(True)
    opt = AdamW(store.tensors, cfg.lr, cfg.weight_decay, cfg.betas, cfg.eps)
    rng = np.random.default_rng(cfg.seed + 1)
    run = TrainRun(cfg, store=store)
    order = np.empty(0, dtype=int)
    n = len(images)
    for step in range(cfg.steps):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        idx = np.sort(order[: cfg.batch_size])
        order = order[cfg.batch_size :]
        store.zero_grad()
        with Tape():
            loss = seg_loss(graph, store, images[idx], masks[idx])
        T.backward(loss)
        value = loss.item()
        if not math.isfinite(value) or (run.loss_history and value > 10 * run.loss_history[0]):
            raise DivergenceError(
                f"loss diverged at step {step}: {value:.4g} (initial {run.loss_history[0] if run.loss_history else value:.4g})"
            )
        run.loss_history.append(value)
        opt.step(lr_at(step, cfg))
        last = step == cfg.steps - 1
        if val is not None and cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or last):
            m = segmentation_metrics(predict(graph, store, val[0]), val[1])
            run.metric_history.append({"step": step + 1, "pixel_acc": m["pixel_acc"], "miou": m["miou"]})
            log.info("step %d loss %.4f acc %.3f miou %.3f", step + 1, value, m["pixel_acc"], m["miou"])
        if callback is not None:
            callback(step, value)
    store.requires_grad_(False)
    store.meta.update({"graph_meta": graph.meta, "train": cfg.to_dict(), "data": data.to_dict()})
    return run


def evaluate(graph: ArchGraph, store: ParamStore, images: np.ndarray, masks: np.ndarray) -> dict:
    return segmentation_metrics(predict(graph, store, images), masks)


def constant_baseline(masks: np.ndarray, label: int = 0) -> dict:
    return segmentation_metrics(np.full_like(masks, label), masks)


# ------------------------------------------------------------------ saliency


@dataclass
class SaliencyResult:
    grad_map: np.ndarray  # (H, W)
    thresholds: list
    areas: list

    def to_csv(self) -> str:
        lines = ["threshold,area"]
        lines += [f"{t!r},{a!r}" for t, a in zip(self.thresholds, self.areas)]
        return "\n".join(lines) + "\n"


def important_region_area(grad_map: np.ndarray, thresholds: Sequence[float]) -> list:
    """Fraction of pixels whose gradient magnitude exceeds each threshold."""
    total = grad_map.size
    return [float((grad_map > t).sum() / total) for t in thresholds]


def saliency(graph: ArchGraph, store: ParamStore, scene: SyntheticScene, thresholds: Sequence[float]) -> SaliencyResult:
    """Input-gradient map of the scene's segmentation loss and region areas per threshold."""
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted ascending")
    x = Tensor(scene.image[None].astype(_store_dtype(store)), requires_grad=True)
    with Tape():
        loss = seg_loss(graph, store, x, scene.mask[None])
    T.backward(loss)
    gmap = np.abs(x.grad[0]).max(axis=0)
    return SaliencyResult(gmap, thresholds, important_region_area(gmap, thresholds))
