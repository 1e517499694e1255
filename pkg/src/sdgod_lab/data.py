"""Synthetic source domain and multi-region text-image selection."""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corruptions import load_png, save_png, value_noise
from .structures import DetectionSample, box_iou_matrix

CATEGORY_NAMES = ("car", "person", "bicycle", "truck", "bus", "rider", "train", "motorcycle")
SHAPES = ("square", "bar", "disk", "triangle", "ring", "cross", "diamond", "hbar")
HUES = (0.0, 0.33, 0.62, 0.12, 0.8, 0.48, 0.22, 0.92)


@dataclass
class SynthConfig:
    n_images: int = 200
    image_size: int = 64
    n_categories: int = 3
    objects_per_image: tuple = (1, 4)
    size_range: tuple = (11, 24)       # object extent, px
    min_box_area: float = 64.0
    max_overlap_iou: float = 0.1
    max_retries: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_categories < 2:
            raise ValueError("need at least 2 categories")
        if self.n_categories > len(SHAPES):
            raise ValueError(f"at most {len(SHAPES)} categories are available")
        if self.image_size < 48:
            raise ValueError("image_size must be >= 48")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"bad objects_per_image {self.objects_per_image}")

    @property
    def category_names(self):
        return list(CATEGORY_NAMES[: self.n_categories])


def _shape_mask(shape, yy, xx, cy, cx, size, angle, aspect):
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    r = size / 2
    if shape == "disk":
        return u * u + v * v <= r * r
    if shape == "ring":
        d = u * u + v * v
        return (d <= r * r) & (d >= (0.55 * r) ** 2)
    if shape == "square":
        return (np.abs(u) <= r) & (np.abs(v) <= r / aspect)
    if shape == "bar":
        return (np.abs(u) <= r / 3) & (np.abs(v) <= r)
    if shape == "hbar":
        return (np.abs(u) <= r) & (np.abs(v) <= r / 3)
    if shape == "cross":
        return ((np.abs(u) <= r) & (np.abs(v) <= r / 4)) | ((np.abs(u) <= r / 4) & (np.abs(v) <= r))
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= r
    if shape == "triangle":
        # apex up, base down
        return (v <= r * 0.8) & (v >= -r + 1.8 * np.abs(u))
    raise ValueError(shape)


def _background(h, w, rng):
    base = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.25), rng.uniform(0.3, 0.55)))
    tex = value_noise((h, w), rng, octaves=4, base=4)
    tint = rng.uniform(-0.06, 0.06, size=3)
    return np.clip(base + (tex[..., None] - 0.5) * 0.3 + tint, 0, 1)


def _render_sample(cfg, rng, n_objects, index):
    s = cfg.image_size
    img = _background(s, s, rng)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    boxes, labels = [], []
    for _ in range(n_objects):
        for _attempt in range(cfg.max_retries):
            cat = int(rng.integers(cfg.n_categories))
            size = rng.uniform(*cfg.size_range)
            cy, cx = rng.uniform(size / 2 + 1, s - size / 2 - 1, size=2)
            angle = rng.uniform(-0.35, 0.35)
            aspect = rng.uniform(0.8, 1.25)
            mask = _shape_mask(SHAPES[cat], yy, xx, cy, cx, size, angle, aspect)
            ys, xs = np.nonzero(mask)
            if ys.size == 0:
                continue
            box = np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)
            if (box[2] - box[0]) * (box[3] - box[1]) < cfg.min_box_area:
                continue
            if boxes and box_iou_matrix(box[None], np.array(boxes)).max() > cfg.max_overlap_iou:
                continue
            break
        else:
            return None
        hue = (HUES[cat] + rng.uniform(-0.04, 0.04)) % 1.0
        color = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 0.9), rng.uniform(0.65, 0.95)))
        shade = 0.85 + 0.15 * (yy[..., None] < cy) + rng.uniform(-0.03, 0.03, size=(s, s, 1))
        img = np.where(mask[..., None], np.clip(color * shade, 0, 1), img)
        boxes.append(box)
        labels.append(cat)
    return DetectionSample(img, np.array(boxes).reshape(-1, 4), np.array(labels, dtype=np.int64), index)


def generate_sample(cfg: SynthConfig, index: int) -> DetectionSample:
    rng = np.random.default_rng([cfg.seed, index])
    lo, hi = cfg.objects_per_image
    n = int(rng.integers(lo, hi + 1))
    while True:
        sample = _render_sample(cfg, rng, n, index)
        if sample is not None:
            return sample
        n = max(1, n - 1)


def generate_dataset(cfg: SynthConfig, start_index: int = 0) -> list[DetectionSample]:
    return [generate_sample(cfg, start_index + i) for i in range(cfg.n_images)]


# ------------------------------------------------------------------ prompts


@dataclass(frozen=True)
class PromptTemplates:
    original: str = "a photo of a {} in clear conditions"
    augmented: str = "a photo of a {} in adverse conditions"

    def get(self, condition):
        if condition == "original":
            return self.original
        if condition == "augmented":
            return self.augmented
        raise ValueError(f"condition must be 'original' or 'augmented', got {condition!r}")


def render_prompts(categories, condition, templates: PromptTemplates | None = None) -> list[str]:
    if not categories:
        raise ValueError("no categories to render")
    tpl = (templates or PromptTemplates()).get(condition)
    return [tpl.format(c) for c in categories]


# ---------------------------------------------------------------- selection


def crop_resize(image, boxes, size):
    """Bilinear crops of (N, 4) xyxy ``boxes`` from an (H, W, 3) image, each resized to size x size."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    h, w, _ = image.shape
    # sample between the centers of the first and last pixel inside the box
    t = np.linspace(0.0, 1.0, size)
    ys = boxes[:, 1:2] + t[None] * np.maximum(boxes[:, 3:4] - boxes[:, 1:2] - 1, 0)
    xs = boxes[:, 0:1] + t[None] * np.maximum(boxes[:, 2:3] - boxes[:, 0:1] - 1, 0)
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.minimum(np.floor(ys).astype(int), h - 2 if h > 1 else 0)
    x0 = np.minimum(np.floor(xs).astype(int), w - 2 if w > 1 else 0)
    fy = (ys - y0)[:, :, None, None]
    fx = (xs - x0)[:, None, :, None]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    g = lambda yi, xi: image[yi[:, :, None], xi[:, None, :]]
    return ((1 - fy) * (1 - fx) * g(y0, x0) + (1 - fy) * fx * g(y0, x1)
            + fy * (1 - fx) * g(y1, x0) + fy * fx * g(y1, x1))


def select_representatives(boxes, labels):
    """Index of one instance per unique category: largest area, ties to lowest (y1, x1)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    chosen = []
    for c in dict.fromkeys(int(l) for l in labels):
        idx = [i for i, l in enumerate(labels) if l == c]
        chosen.append(min(idx, key=lambda i: (-areas[i], boxes[i, 1], boxes[i, 0])))
    return chosen


def sample_background(sample, rng, max_iou=0.05, attempts=64, side_frac=(0.25, 0.5)):
    """Square window avoiding the GT boxes; returns (box, max_iou, fallback_used)."""
    h, w = sample.height, sample.width
    best = None
    for _ in range(attempts):
        side = rng.uniform(*side_frac) * min(h, w)
        x1 = rng.uniform(0, w - side)
        y1 = rng.uniform(0, h - side)
        box = np.array([x1, y1, x1 + side, y1 + side])
        overlap = box_iou_matrix(box[None], sample.boxes).max() if len(sample.boxes) else 0.0
        if overlap <= max_iou:
            return box, float(overlap), False
        if best is None or overlap < best[1]:
            best = (box, float(overlap))
    return best[0], best[1], True


@dataclass
class SelectionOutput:
    obj_crops: np.ndarray
    obj_boxes: np.ndarray
    obj_image_index: np.ndarray
    obj_labels: np.ndarray
    bg_crops: np.ndarray
    bg_boxes: np.ndarray
    bg_max_iou: np.ndarray
    bg_fallback: np.ndarray
    c_obj: list
    c_bg: list
    prompts_obj: dict = field(default_factory=dict)
    prompts_bg: dict = field(default_factory=dict)
    crop_size: int = 32

    @property
    def n_obj(self):
        return len(self.c_obj)

    @property
    def n_bg(self):
        return len(self.c_bg)

    def recrop(self, images):
        """Crops at the same coordinates from another view (e.g. the augmented images)."""
        obj = [crop_resize(images[i], self.obj_boxes[self.obj_image_index == i], self.crop_size)
               for i in range(len(images))]
        bg = [crop_resize(images[i], self.bg_boxes[i:i + 1], self.crop_size) for i in range(len(images))]
        return np.concatenate(obj), np.concatenate(bg)


def select_regions(batch, crop_size=32, seed=0, category_names=None, templates=None,
                   max_iou=0.05, attempts=64) -> SelectionOutput:
    rng = np.random.default_rng(seed)
    names = category_names or list(CATEGORY_NAMES)
    obj_crops, obj_boxes, obj_idx, obj_labels = [], [], [], []
    bg_boxes, bg_iou, bg_flag = [], [], []
    for i, sample in enumerate(batch):
        if len(sample.boxes) == 0:
            raise ValueError(f"sample {sample.image_id} has no objects")
        reps = select_representatives(sample.boxes, sample.labels)
        boxes = sample.boxes[reps]
        obj_crops.append(crop_resize(sample.image, boxes, crop_size))
        obj_boxes.append(boxes)
        obj_idx.extend([i] * len(reps))
        obj_labels.extend(int(sample.labels[r]) for r in reps)
        box, overlap, fallback = sample_background(sample, rng, max_iou, attempts)
        bg_boxes.append(box)
        bg_iou.append(overlap)
        bg_flag.append(fallback)
    bg_boxes = np.array(bg_boxes)
    c_obj = [names[l] for l in obj_labels]
    c_bg = ["background"] * len(batch)
    return SelectionOutput(
        obj_crops=np.concatenate(obj_crops),
        obj_boxes=np.concatenate(obj_boxes),
        obj_image_index=np.array(obj_idx, dtype=np.int64),
        obj_labels=np.array(obj_labels, dtype=np.int64),
        bg_crops=np.concatenate([crop_resize(s.image, b[None], crop_size) for s, b in zip(batch, bg_boxes)]),
        bg_boxes=bg_boxes,
        bg_max_iou=np.array(bg_iou),
        bg_fallback=np.array(bg_flag, dtype=bool),
        c_obj=c_obj,
        c_bg=c_bg,
        prompts_obj={cond: render_prompts(c_obj, cond, templates) for cond in ("original", "augmented")},
        prompts_bg={cond: render_prompts(c_bg, cond, templates) for cond in ("original", "augmented")},
        crop_size=crop_size,
    )


# ---------------------------------------------------------------------- I/O


def save_dataset(ds, out_dir, split, category_names):
    out_dir = Path(out_dir)
    img_dir = out_dir / split
    img_dir.mkdir(parents=True, exist_ok=True)
    doc = {"images": [], "annotations": [],
           "categories": [{"id": i, "name": n} for i, n in enumerate(category_names)]}
    for s in ds:
        fname = f"{split}/{s.image_id}.png"
        save_png(out_dir / fname, s.image)
        doc["images"].append({"id": int(s.image_id), "file": fname, "width": s.width, "height": s.height})
        for b, l in zip(s.boxes, s.labels):
            doc["annotations"].append({"image_id": int(s.image_id), "bbox": [float(v) for v in b],
                                       "category_id": int(l)})
    (out_dir / f"{split}.json").write_text(json.dumps(doc, indent=1))
    return out_dir / f"{split}.json"


def load_dataset(root, split):
    root = Path(root)
    path = root / f"{split}.json"
    if not path.exists():
        raise FileNotFoundError(f"no annotation file {path}")
    doc = json.loads(path.read_text())
    anns = {}
    for a in doc["annotations"]:
        anns.setdefault(a["image_id"], []).append(a)
    ds = []
    for im in doc["images"]:
        rows = anns.get(im["id"], [])
        ds.append(DetectionSample(load_png(root / im["file"]),
                                  np.array([r["bbox"] for r in rows], dtype=np.float64).reshape(-1, 4),
                                  np.array([r["category_id"] for r in rows], dtype=np.int64),
                                  int(im["id"])))
    names = [c["name"] for c in sorted(doc["categories"], key=lambda c: c["id"])]
    return ds, names
