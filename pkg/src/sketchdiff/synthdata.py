"""Synthetic paired dataset: parametric "photos" (filled, textured shapes),
"sketches" (outline strokes with a continuous abstraction knob), structured
captions, and deterministic manifests.

The abstraction knob monotonically increases stroke jitter, stroke dropout,
and vertex simplification; knob=0 renders the photo's exact outline
(the edgemap).
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .conditioning import CLASS_NAMES, COLOR_NAMES, SIZE_NAMES, TEXTURE_NAMES, caption_ids
from .errors import ConfigurationError, InputError

RESOLUTION = 32
SUPERSAMPLE = 4
OUTLINE_POINTS = 64
STROKE_LEN = 8          # vertices per sketch stroke
MAX_DROPOUT = 0.45
MAX_JITTER = 1.6        # pixels at final resolution
MANIFEST_SCHEMA = 1

COLOR_RGB = {
    "red": (202, 62, 56),
    "green": (76, 166, 80),
    "blue": (64, 112, 198),
    "yellow": (228, 198, 66),
    "purple": (148, 84, 188),
    "orange": (234, 140, 52),
}
SIZE_RADIUS = {"small": 5.0, "medium": 7.5, "large": 10.0}


@dataclass(frozen=True)
class ShapeSpec:
    """Fully determines one photo and all of its sketches."""

    class_id: int
    color_id: int
    size_id: int
    position: tuple[float, float]   # centre in [0,1]^2 canvas units
    rotation: float                 # radians
    texture_id: int
    seed: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["position"] = list(self.position)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ShapeSpec":
        return ShapeSpec(
            class_id=d["class_id"], color_id=d["color_id"], size_id=d["size_id"],
            position=(d["position"][0], d["position"][1]), rotation=d["rotation"],
            texture_id=d["texture_id"], seed=d["seed"],
        )


@dataclass
class PairedSample:
    photo: torch.Tensor        # [3, 32, 32] in [-1, 1]
    sketch: torch.Tensor       # [1, 32, 32] in [0, 1]
    abstraction_knob: float
    caption: list[int]
    label: int


# ---------------------------------------------------------------------------
# outline geometry

def _resample_closed(pts: np.ndarray, n: int) -> np.ndarray:
    closed = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, cum[-1], n, endpoint=False)
    x = np.interp(targets, cum, closed[:, 0])
    y = np.interp(targets, cum, closed[:, 1])
    return np.stack([x, y], axis=1)


def _circle() -> np.ndarray:
    th = np.linspace(0, 2 * math.pi, OUTLINE_POINTS, endpoint=False)
    return np.stack([np.cos(th), np.sin(th)], axis=1)


def _square() -> np.ndarray:
    c = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=float) * 0.85
    return c


def _triangle() -> np.ndarray:
    th = np.deg2rad([90, 210, 330])
    return np.stack([np.cos(th), np.sin(th)], axis=1)


def _star() -> np.ndarray:
    th = np.deg2rad(90 + 36 * np.arange(10))
    r = np.where(np.arange(10) % 2 == 0, 1.0, 0.45)
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=1)


def _cross() -> np.ndarray:
    a = 0.35
    return np.array([
        (a, 1), (-a, 1), (-a, a), (-1, a), (-1, -a), (-a, -a),
        (-a, -1), (a, -1), (a, -a), (1, -a), (1, a), (a, a),
    ], dtype=float)


def _crescent() -> np.ndarray:
    alpha = 0.9
    c, = (0.55,)
    p0 = np.array([math.cos(alpha), math.sin(alpha)])
    r2 = math.hypot(p0[0] - c, p0[1])
    outer = np.linspace(alpha, 2 * math.pi - alpha, 40)
    outer_pts = np.stack([np.cos(outer), np.sin(outer)], axis=1)
    phi1 = math.atan2(-p0[1], p0[0] - c)
    sweep = 2 * math.pi - 2 * abs(phi1)
    inner = phi1 - np.linspace(0.0, sweep, 24)
    inner_pts = np.stack([c + r2 * np.cos(inner), r2 * np.sin(inner)], axis=1)
    return np.vstack([outer_pts, inner_pts])


def _heart() -> np.ndarray:
    t = np.linspace(0, 2 * math.pi, OUTLINE_POINTS, endpoint=False)
    x = np.sin(t) ** 3
    y = (13 * np.cos(t) - 5 * np.cos(2 * t) - 2 * np.cos(3 * t) - np.cos(4 * t)) / 16
    return np.stack([x, y / 1.05], axis=1)


def _arrow() -> np.ndarray:
    return np.array([
        (1, 0), (0.3, 0.6), (0.3, 0.25), (-1, 0.25),
        (-1, -0.25), (0.3, -0.25), (0.3, -0.6),
    ], dtype=float)


_OUTLINES = {
    "circle": _circle, "square": _square, "triangle": _triangle, "star": _star,
    "cross": _cross, "crescent": _crescent, "heart": _heart, "arrow": _arrow,
}


def outline_points(spec: ShapeSpec) -> np.ndarray:
    """Closed outline of the shape in pixel coordinates, OUTLINE_POINTS long."""
    base = _resample_closed(_OUTLINES[CLASS_NAMES[spec.class_id]](), OUTLINE_POINTS)
    r = SIZE_RADIUS[SIZE_NAMES[spec.size_id]]
    cr, sr = math.cos(spec.rotation), math.sin(spec.rotation)
    rot = base @ np.array([[cr, sr], [-sr, cr]])
    centre = np.array(spec.position) * RESOLUTION
    return rot * r + centre


# ---------------------------------------------------------------------------
# rasterization

def _downsample(img: Image.Image) -> Image.Image:
    return img.resize((RESOLUTION, RESOLUTION), Image.LANCZOS)


def rasterize_strokes(strokes: list[np.ndarray], width: float = 0.9) -> np.ndarray:
    """Anti-aliased polylines on a white canvas; coordinates in pixels at the
    final resolution. Returns a [32, 32] float array in [0, 1] (1 = paper)."""
    ss = RESOLUTION * SUPERSAMPLE
    img = Image.new("L", (ss, ss), 255)
    draw = ImageDraw.Draw(img)
    w = max(1, int(round(width * SUPERSAMPLE)))
    for pts in strokes:
        if len(pts) < 2:
            continue
        xy = [(float(x) * SUPERSAMPLE, float(y) * SUPERSAMPLE) for x, y in pts]
        draw.line(xy, fill=0, width=w, joint="curve")
    return np.asarray(_downsample(img), dtype=np.float32) / 255.0


def _polygon_mask(pts: np.ndarray, ss: int) -> np.ndarray:
    img = Image.new("L", (ss, ss), 0)
    ImageDraw.Draw(img).polygon([(float(x) * SUPERSAMPLE, float(y) * SUPERSAMPLE) for x, y in pts], fill=255)
    return np.asarray(img) > 0


def render_photo_uint8(spec: ShapeSpec) -> np.ndarray:
    """[32, 32, 3] uint8 photo: filled, textured shape on a light background."""
    rng = np.random.default_rng((spec.seed, 101))
    ss = RESOLUTION * SUPERSAMPLE
    bg = int(rng.integers(226, 246))
    canvas = np.full((ss, ss, 3), bg, dtype=np.float64)

    pts = outline_points(spec)
    mask = _polygon_mask(pts, ss)
    color = np.array(COLOR_RGB[COLOR_NAMES[spec.color_id]], dtype=np.float64)
    canvas[mask] = color

    texture = TEXTURE_NAMES[spec.texture_id]
    if texture != "plain":
        yy, xx = np.mgrid[0:ss, 0:ss].astype(np.float64) / SUPERSAMPLE
        cr, sr = math.cos(spec.rotation), math.sin(spec.rotation)
        u = (xx - spec.position[0] * RESOLUTION) * cr + (yy - spec.position[1] * RESOLUTION) * sr
        v = -(xx - spec.position[0] * RESOLUTION) * sr + (yy - spec.position[1] * RESOLUTION) * cr
        if texture == "striped":
            band = np.floor(u / 2.2).astype(int) % 2 == 0
            dark = mask & band
        else:  # dotted
            g = 3.0
            dark = mask & (((u % g) - g / 2) ** 2 + ((v % g) - g / 2) ** 2 < 1.1)
        canvas[dark] *= 0.62

    img = Image.fromarray(canvas.clip(0, 255).astype(np.uint8), "RGB")
    return np.asarray(_downsample(img), dtype=np.uint8)


def render_sketch_strokes(spec: ShapeSpec, knob: float) -> list[np.ndarray]:
    """Outline split into strokes with knob-scaled simplification, jitter,
    and dropout; knob=0 reproduces the full outline exactly."""
    pts = outline_points(spec)
    closed = np.vstack([pts, pts[:1]])

    if knob > 0:
        rng = np.random.default_rng((spec.seed, int(round(knob * 1_000_000)), 202))
        keep = max(8, int(round(OUTLINE_POINTS * (1.0 - 0.75 * knob))))
        idx = np.linspace(0, OUTLINE_POINTS, keep, endpoint=False).astype(int)
        closed = np.vstack([pts[idx], pts[idx][:1]])
        closed = closed + rng.normal(0.0, MAX_JITTER * knob, closed.shape)

    strokes = [closed[i:i + STROKE_LEN + 1] for i in range(0, len(closed) - 1, STROKE_LEN)]
    if knob > 0:
        kept = [s for s in strokes if rng.random() >= MAX_DROPOUT * knob]
        strokes = kept if kept else strokes[:1]
    return strokes


def render_sketch_uint8(spec: ShapeSpec, knob: float) -> np.ndarray:
    """[32, 32] uint8 sketch raster (255 = paper)."""
    field = rasterize_strokes(render_sketch_strokes(spec, knob))
    return np.round(field * 255.0).astype(np.uint8)


def photo_to_tensor(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1) / 255.0 * 2.0 - 1.0


def sketch_to_tensor(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32)).unsqueeze(0) / 255.0


def caption_for(spec: ShapeSpec, length: int = 16) -> list[int]:
    return caption_ids(spec.class_id, spec.color_id, spec.size_id, spec.texture_id, length)


def render_pair(spec: ShapeSpec, knob: float) -> PairedSample:
    """Deterministic photo/sketch pair for one spec at one abstraction knob."""
    if not (0.0 <= knob <= 1.0):
        raise InputError(f"knob must lie in [0, 1], got {knob}")
    return PairedSample(
        photo=photo_to_tensor(render_photo_uint8(spec)),
        sketch=sketch_to_tensor(render_sketch_uint8(spec, knob)),
        abstraction_knob=knob,
        caption=caption_for(spec),
        label=spec.class_id,
    )


def ink_count(sketch: torch.Tensor | np.ndarray, threshold: float = 0.5) -> int:
    """Number of ink (dark) pixels; a trivial edge-count statistic."""
    arr = sketch.numpy() if torch.is_tensor(sketch) else np.asarray(sketch)
    return int((arr < threshold).sum())


# ---------------------------------------------------------------------------
# dataset builder and manifest

def _png_bytes(arr: np.ndarray, mode: str) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode).save(buf, format="PNG")
    return buf.getvalue()


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class Manifest:
    meta: dict
    samples: list[dict]

    def to_json(self) -> str:
        return _canonical_json({"meta": self.meta, "samples": self.samples})

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path) -> "Manifest":
        doc = json.loads(Path(path).read_text())
        return Manifest(meta=doc["meta"], samples=doc["samples"])


def build_dataset(n: int, split_ratio: float, seed: int, out_dir,
                  sketches_per_photo: int = 5) -> Manifest:
    """Render n photos (each with `sketches_per_photo` sketches, the first at
    knob=0) plus a manifest; deterministic under a fixed seed."""
    if n < 10:
        raise ConfigurationError(f"n must be >= 10, got {n}")
    if not (0.0 < split_ratio < 1.0):
        raise ConfigurationError(f"split_ratio must lie in (0, 1), got {split_ratio}")
    out = Path(out_dir)
    (out / "photos").mkdir(parents=True, exist_ok=True)
    (out / "sketches").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    n_train = int(round(n * split_ratio))
    split_order = rng.permutation(n)
    split = np.empty(n, dtype=object)
    split[split_order[:n_train]] = "train"
    split[split_order[n_train:]] = "eval"

    samples = []
    for i in range(n):
        spec = ShapeSpec(
            class_id=int(rng.integers(len(CLASS_NAMES))),
            color_id=int(rng.integers(len(COLOR_NAMES))),
            size_id=int(rng.integers(len(SIZE_NAMES))),
            position=(float(rng.uniform(0.35, 0.65)), float(rng.uniform(0.35, 0.65))),
            rotation=float(rng.uniform(0.0, 2 * math.pi)),
            texture_id=int(rng.integers(len(TEXTURE_NAMES))),
            seed=int(rng.integers(2**31)),
        )
        knobs = [0.0] + [float(rng.uniform(0.0, 1.0)) for _ in range(sketches_per_photo - 1)]
        pid = f"p{i:05d}"
        photo_file = f"photos/{pid}.png"
        (out / photo_file).write_bytes(_png_bytes(render_photo_uint8(spec), "RGB"))
        sketches = []
        for k, knob in enumerate(knobs):
            sk_file = f"sketches/{pid}_{k}.png"
            (out / sk_file).write_bytes(_png_bytes(render_sketch_uint8(spec, knob), "L"))
            sketches.append({"k": k, "knob": knob, "file": sk_file})
        samples.append({
            "id": pid,
            "spec": spec.to_dict(),
            "caption": caption_for(spec),
            "split": str(split[i]),
            "photo": photo_file,
            "sketches": sketches,
        })

    manifest = Manifest(
        meta={
            "schema": MANIFEST_SCHEMA, "n": n, "split_ratio": split_ratio,
            "seed": seed, "sketches_per_photo": sketches_per_photo,
            "resolution": RESOLUTION, "classes": list(CLASS_NAMES),
        },
        samples=samples,
    )
    manifest.save(out / "manifest.json")
    return manifest


class SynthDataset:
    """Tensor views over a rendered dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = Manifest.load(self.root / "manifest.json")

    def _rows(self, split: str) -> list[dict]:
        return [s for s in self.manifest.samples if s["split"] == split]

    def photos(self, split: str):
        """(photos [N,3,32,32], labels [N], captions [N,L]) for a split."""
        rows = self._rows(split)
        photos = torch.stack([
            photo_to_tensor(np.asarray(Image.open(self.root / r["photo"]), dtype=np.uint8))
            for r in rows
        ])
        labels = torch.tensor([r["spec"]["class_id"] for r in rows], dtype=torch.long)
        captions = torch.tensor([r["caption"] for r in rows], dtype=torch.long)
        return photos, labels, captions

    def sketches(self, split: str):
        """(sketches [M,1,32,32], photo_row [M], knobs [M], labels [M]); the
        photo_row indexes the split's photo tensor."""
        rows = self._rows(split)
        sketches, photo_row, knobs, labels = [], [], [], []
        for row_idx, r in enumerate(rows):
            for sk in r["sketches"]:
                arr = np.asarray(Image.open(self.root / sk["file"]), dtype=np.uint8)
                sketches.append(sketch_to_tensor(arr))
                photo_row.append(row_idx)
                knobs.append(sk["knob"])
                labels.append(r["spec"]["class_id"])
        return (torch.stack(sketches), torch.tensor(photo_row, dtype=torch.long),
                torch.tensor(knobs, dtype=torch.float32), torch.tensor(labels, dtype=torch.long))
