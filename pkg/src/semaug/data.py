"""Synthetic multi-domain detection scenes, COCO-style I/O and random crops.

Every scene is rendered in the clear domain first and the domain transform is
applied afterwards, so two domains generated from the same seed share their
object geometry exactly. Pixels are quantised to the 8-bit grid at generation
time, which makes PNG round trips lossless.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import InvalidInputError, LoadError

TOY_CLASSES = ("circle", "square", "triangle")
DOMAINS = ("clear", "fog", "night", "rain", "dusk_rain")
TARGET_DOMAINS = ("fog", "night", "rain", "dusk_rain")
FOG_GRAY = 0.6


@dataclass(frozen=True)
class DomainSpec:
    """Parametric appearance shift applied on top of a clear-domain render.

    ``fog_alpha`` blends toward uniform gray, ``blur_sigma`` is the Gaussian
    blur radius (pixels), ``brightness`` scales intensities, ``rain_density``
    is the number of streaks per 100 pixels. Transform order: rain, fog, blur,
    brightness.
    """

    name: str = "clear"
    fog_alpha: float = 0.0
    blur_sigma: float = 0.0
    brightness: float = 1.0
    rain_density: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fog_alpha <= 1.0:
            raise InvalidInputError(f"fog_alpha {self.fog_alpha} outside [0, 1]")
        if self.blur_sigma < 0.0 or self.rain_density < 0.0:
            raise InvalidInputError("blur_sigma and rain_density must be non-negative")
        if not 0.0 < self.brightness <= 1.0:
            raise InvalidInputError(f"brightness {self.brightness} outside (0, 1]")

    @property
    def is_identity(self) -> bool:
        return (self.fog_alpha == 0.0 and self.blur_sigma == 0.0
                and self.brightness == 1.0 and self.rain_density == 0.0)


PRESETS = {
    "clear": DomainSpec("clear"),
    "fog": DomainSpec("fog", fog_alpha=0.55, blur_sigma=1.0),
    "night": DomainSpec("night", brightness=0.3),
    "rain": DomainSpec("rain", rain_density=2.5),
    "dusk_rain": DomainSpec("dusk_rain", brightness=0.5, rain_density=2.5),
}


def domain_spec(name: str, seed: int = 0) -> DomainSpec:
    try:
        return replace(PRESETS[name], seed=seed)
    except KeyError:
        raise InvalidInputError(f"unknown domain {name!r}; expected one of {sorted(PRESETS)}") from None


@dataclass
class SceneSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    boxes: np.ndarray  # (n, 4) corner form, pixels
    labels: np.ndarray  # (n,) class ids in 1..K
    domain: str = "clear"
    file_name: str = ""


@dataclass
class DetectionDataset:
    samples: list[SceneSample]
    class_names: list[str]
    domain: str = "clear"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    grid = torch.from_numpy(rng.random((1, 1, cells, cells)))
    up = F.interpolate(grid, size=(size, size), mode="bilinear", align_corners=True)
    return up[0, 0].numpy()


def _shape_mask(cls: str, box, yy, xx) -> np.ndarray:
    x0, y0, x1, y1 = box
    if cls == "square":
        return (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
    if cls == "circle":
        cx, cy, r = (x0 + x1) / 2, (y0 + y1) / 2, (x1 - x0) / 2
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if cls == "triangle":
        # apex at top centre, base along the bottom edge
        cx = (x0 + x1) / 2
        half = (x1 - x0) / 2
        t = (yy - y0) / max(y1 - y0, 1e-6)
        return (yy >= y0) & (yy < y1) & (np.abs(xx - cx) <= half * t)
    raise InvalidInputError(f"unknown shape class {cls!r}")


def render_scene(rng: np.random.Generator, image_size: int, class_set: Sequence[str],
                 n_objects: tuple[int, int] = (1, 5), object_size: tuple[float, float] = (12.0, 26.0)):
    """Render one clear-domain scene; returns (image, boxes, labels)."""
    s = image_size
    base = rng.uniform(0.25, 0.75, size=3)
    tint = rng.uniform(-0.15, 0.15, size=3)
    texture = _smooth_noise(rng, s, 6)
    ramp = np.linspace(-0.5, 0.5, s)[None, :] if rng.random() < 0.5 else np.linspace(-0.5, 0.5, s)[:, None]
    img = base[None, None, :] + 0.25 * (texture - 0.5)[..., None] + ramp[..., None] * tint[None, None, :]
    img = np.clip(img, 0.0, 1.0)

    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    boxes: list[list[float]] = []
    labels: list[int] = []
    count = int(rng.integers(n_objects[0], n_objects[1] + 1))
    for _ in range(count):
        for _attempt in range(20):
            side = float(rng.uniform(*object_size))
            x0 = float(rng.uniform(0, s - side))
            y0 = float(rng.uniform(0, s - side))
            box = [x0, y0, x0 + side, y0 + side]
            if all(_overlap(box, b) <= 0.2 for b in boxes):
                break
        else:
            continue
        k = int(rng.integers(len(class_set)))
        mask = _shape_mask(class_set[k], box, yy, xx)
        if not mask.any():
            continue
        local = img[mask].mean(axis=0)
        colour = rng.uniform(0.0, 1.0, size=3)
        for _attempt in range(20):
            if np.abs(colour - local).sum() >= 0.9:
                break
            colour = rng.uniform(0.0, 1.0, size=3)
        colour = np.clip(colour + rng.normal(0.0, 0.03, size=3), 0.0, 1.0)
        img[mask] = colour
        boxes.append(box)
        labels.append(k + 1)
    return (
        _quantize(img),
        np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        np.asarray(labels, dtype=np.int64),
    )


def _overlap(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _rain(img: np.ndarray, density: float, rng: np.random.Generator) -> np.ndarray:
    h, w, _ = img.shape
    n = int(round(density * h * w / 100.0))
    out = img.copy()
    angle = np.deg2rad(rng.uniform(70, 80))
    for _ in range(n):
        length = rng.uniform(5, 10)
        x, y = rng.uniform(0, w), rng.uniform(0, h)
        steps = int(np.ceil(length))
        for t in range(steps):
            px = int(x + t * np.cos(angle) * 0.35)
            py = int(y + t * np.sin(angle))
            if 0 <= px < w and 0 <= py < h:
                out[py, px] = 0.4 * out[py, px] + 0.6 * 0.9
    return out


def apply_domain(image: np.ndarray, spec: DomainSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply ``spec`` to a clear-domain image; output stays in [0, 1]."""
    if spec.is_identity:
        return image.copy()
    out = image.astype(np.float64)
    if spec.rain_density > 0:
        out = _rain(out, spec.rain_density, rng if rng is not None else np.random.default_rng(spec.seed))
    if spec.fog_alpha > 0:
        out = (1.0 - spec.fog_alpha) * out + spec.fog_alpha * FOG_GRAY
    if spec.blur_sigma > 0:
        out = gaussian_filter(out, sigma=(spec.blur_sigma, spec.blur_sigma, 0), mode="nearest")
    if spec.brightness != 1.0:
        out = out * spec.brightness
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def generate_synthetic_domain(spec: DomainSpec, n_images: int, image_size: int = 64,
                              class_set: Sequence[str] = TOY_CLASSES, seed: int = 0) -> DetectionDataset:
    """Render ``n_images`` scenes and shift them into ``spec``'s domain.

    Scene geometry depends only on ``seed`` and the image index, so every
    domain generated with the same seed carries identical annotations.
    """
    if n_images < 1:
        raise InvalidInputError("n_images must be >= 1")
    if not class_set:
        raise InvalidInputError("class_set must be non-empty")
    samples = []
    for i in range(n_images):
        img, boxes, labels = render_scene(_stream(seed, i), image_size, class_set)
        noise = _stream(seed, i, _name_key(spec.name), spec.seed)
        img = _quantize(apply_domain(img, spec, noise))
        samples.append(SceneSample(img, boxes, labels, spec.name, f"{i:06d}.png"))
    return DetectionDataset(samples, list(class_set), spec.name,
                            meta={"seed": seed, "image_size": image_size, "spec": spec.__dict__.copy()})


def save_dataset(dataset: DetectionDataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for idx, sample in enumerate(dataset.samples, start=1):
        name = sample.file_name or f"{idx - 1:06d}.png"
        h, w, _ = sample.image.shape
        pixels = np.round(np.clip(sample.image, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(pixels).save(out / "images" / name, format="PNG", optimize=False)
        images.append({"id": idx, "file_name": name, "width": w, "height": h})
        for box, label in zip(sample.boxes, sample.labels):
            x0, y0, x1, y1 = (float(v) for v in box)
            annotations.append({
                "id": ann_id, "image_id": idx, "category_id": int(label),
                "bbox": [x0, y0, x1 - x0, y1 - y0], "area": (x1 - x0) * (y1 - y0), "iscrowd": 0,
            })
            ann_id += 1
    coco = {
        "info": {"domain": dataset.domain, **{k: v for k, v in dataset.meta.items() if k != "spec"}},
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i + 1, "name": n} for i, n in enumerate(dataset.class_names)],
    }
    path = out / "annotations.json"
    path.write_text(json.dumps(coco, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_dataset(annotation_path: str | Path, image_dir: str | Path | None = None) -> DetectionDataset:
    annotation_path = Path(annotation_path)
    image_dir = Path(image_dir) if image_dir is not None else annotation_path.parent / "images"
    try:
        coco = json.loads(annotation_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"{annotation_path}: {exc}") from exc
    try:
        categories = sorted(coco["categories"], key=lambda c: c["id"])
        images = coco["images"]
        anns = coco["annotations"]
    except (KeyError, TypeError) as exc:
        raise LoadError(f"{annotation_path}: missing key {exc}") from exc
    cat_map = {c["id"]: i + 1 for i, c in enumerate(categories)}
    by_image: dict[int, list] = {img["id"]: [] for img in images}
    for ann in anns:
        if ann.get("image_id") not in by_image:
            raise LoadError(f"annotation {ann.get('id')}: unknown image id {ann.get('image_id')!r}")
        if ann.get("category_id") not in cat_map:
            raise LoadError(f"annotation {ann.get('id')}: unknown category id {ann.get('category_id')!r}")
        by_image[ann["image_id"]].append(ann)
    samples = []
    for img in images:
        path = image_dir / img["file_name"]
        if not path.is_file():
            raise LoadError(f"image {img['id']}: missing file {path}")
        pixels = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        h, w, _ = pixels.shape
        boxes, labels = [], []
        for ann in by_image[img["id"]]:
            x, y, bw, bh = (float(v) for v in ann["bbox"])
            if bw <= 0 or bh <= 0 or x < -1e-6 or y < -1e-6 or x + bw > w + 1e-6 or y + bh > h + 1e-6:
                raise LoadError(f"annotation {ann.get('id')}: bbox {ann['bbox']} outside {w}x{h} image {img['id']}")
            boxes.append([x, y, x + bw, y + bh])
            labels.append(cat_map[ann["category_id"]])
        samples.append(SceneSample(
            pixels, np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
            np.asarray(labels, dtype=np.int64), coco.get("info", {}).get("domain", ""), img["file_name"],
        ))
    domain = coco.get("info", {}).get("domain", annotation_path.parent.name)
    return DetectionDataset(samples, [c["name"] for c in categories], domain, meta=dict(coco.get("info", {})))


def load_domains(root: str | Path) -> dict[str, DetectionDataset]:
    """Load ``root`` itself or every ``root/<domain>/annotations.json`` below it."""
    root = Path(root)
    if (root / "annotations.json").is_file():
        ds = load_dataset(root / "annotations.json")
        return {ds.domain or root.name: ds}
    found = {}
    for sub in sorted(p for p in root.iterdir() if (p / "annotations.json").is_file()):
        found[sub.name] = load_dataset(sub / "annotations.json")
    if not found:
        raise LoadError(f"{root}: no annotations.json found")
    ordered = {d: found[d] for d in DOMAINS if d in found}
    ordered.update({k: v for k, v in found.items() if k not in ordered})
    return ordered


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def random_crops(image: np.ndarray, size: int, n: int, rng: np.random.Generator,
                 min_frac: float = 0.5, max_frac: float = 1.0) -> list[np.ndarray]:
    """``n`` random square crops covering ``min_frac``..``max_frac`` of the
    shorter side, each resized to ``size`` x ``size``."""
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    h, w = image.shape[:2]
    short = min(h, w)
    crops = []
    for _ in range(n):
        side = int(round(rng.uniform(min_frac, max_frac) * short))
        side = min(max(side, 1), short)
        y0 = int(rng.integers(0, h - side + 1))
        x0 = int(rng.integers(0, w - side + 1))
        crops.append(resize_bilinear(image[y0:y0 + side, x0:x0 + side], size))
    return crops


# ---------------------------------------------------------------------------
# captioned corpus for the toy joint-embedding pretraining

WEATHER_WORDS = ("sunshine", "fog", "cloudy", "rain", "stormy", "snow")
TIME_WORDS = ("day", "evening", "night")
_CAPTION_TEMPLATES = (
    "a photo of a {cls} taken on a {weather} {time}",
    "an image taken on a {weather} {time} of a {cls}",
    "an image of a {cls} on a {weather} {time}",
)
_SOURCE_TEMPLATE = "an image of a {cls} taken during the {time}"
_CONTENT_TEMPLATES = ("a photo of a {cls}", "an image of a {cls}")


def _speckle(img: np.ndarray, density: float, rng: np.random.Generator) -> np.ndarray:
    h, w, _ = img.shape
    mask = rng.random((h, w)) < density
    out = img.copy()
    out[mask] = 0.3 * out[mask] + 0.7 * 0.95
    return out


def render_condition(img: np.ndarray, weather: str, time: str, rng: np.random.Generator) -> np.ndarray:
    """Randomised rendering of a (weather, time of day) concept pair."""
    fog = blur = rain = 0.0
    bright = 1.0
    out = img
    if weather == "fog":
        fog, blur = rng.uniform(0.35, 0.7), rng.uniform(0.5, 1.5)
    elif weather == "cloudy":
        fog, bright = rng.uniform(0.15, 0.3), rng.uniform(0.75, 0.9)
    elif weather == "rain":
        rain = rng.uniform(1.5, 3.5)
    elif weather == "stormy":
        rain, fog, bright = rng.uniform(3.0, 5.0), rng.uniform(0.1, 0.25), rng.uniform(0.6, 0.8)
    elif weather == "snow":
        out = _speckle(out, rng.uniform(0.03, 0.08), rng)
        fog = rng.uniform(0.05, 0.2)
    elif weather != "sunshine":
        raise InvalidInputError(f"unknown weather {weather!r}")
    if time == "evening":
        bright *= rng.uniform(0.45, 0.7)
    elif time == "night":
        bright *= rng.uniform(0.2, 0.4)
    elif time != "day":
        raise InvalidInputError(f"unknown time {time!r}")
    spec = DomainSpec("pretrain", fog_alpha=fog, blur_sigma=blur, brightness=bright, rain_density=rain)
    return apply_domain(out, spec, rng)


@dataclass
class CaptionedImage:
    image: np.ndarray
    caption: str
    class_name: str
    weather: str
    time: str


def generate_caption_corpus(n_images: int, image_size: int = 64, class_set: Sequence[str] = TOY_CLASSES,
                            seed: int = 0, object_size: tuple[float, float] = (12.0, 26.0),
                            condition_prob: float = 0.5) -> list[CaptionedImage]:
    """Single-object scenes under random weather/time conditions.

    Every caption names the class; with probability ``condition_prob`` it
    also names the weather and time of day, otherwise it describes content only.
    """
    if n_images < 1:
        raise InvalidInputError("n_images must be >= 1")
    if not 0.0 <= condition_prob <= 1.0:
        raise InvalidInputError("condition_prob must be in [0, 1]")
    rng = _stream(seed, 0xC0FFEE)
    out = []
    for i in range(n_images):
        img, _, labels = render_scene(_stream(seed, 0xC0FFEE, i), image_size, class_set,
                                      n_objects=(1, 1), object_size=object_size)
        if len(labels) == 0:
            continue
        cls = class_set[int(labels[0]) - 1]
        weather = WEATHER_WORDS[int(rng.integers(len(WEATHER_WORDS)))]
        time = TIME_WORDS[int(rng.integers(len(TIME_WORDS)))]
        img = _quantize(render_condition(img, weather, time, rng))
        template = _CAPTION_TEMPLATES[int(rng.integers(len(_CAPTION_TEMPLATES)))]
        if weather == "sunshine" and rng.random() < 0.5:
            template = _SOURCE_TEMPLATE
        if rng.random() >= condition_prob:
            template = _CONTENT_TEMPLATES[int(rng.integers(len(_CONTENT_TEMPLATES)))]
        out.append(CaptionedImage(img, template.format(cls=cls, weather=weather, time=time), cls, weather, time))
    return out
