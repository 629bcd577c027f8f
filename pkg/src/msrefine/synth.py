"""Procedural textures, brush-stroke masks, metrics and the on-disk dataset format.

Texture geometry (periods, edge positions) is expressed in pixels of the
rendered image. ``random_texture_spec`` samples periods as fractions of the
image size, so the same spec family rendered at 2x resolution has 2x longer
periods, the way a photo's content scales with its resolution.

Dataset directories hold ``manifest.txt`` plus ``image_XXXX.png`` (8-bit RGB)
and ``mask_XXXX.png`` (8-bit gray, 255 = hole). Each manifest line is a
space-separated list of ``key=value`` pairs::

    id=0 image=image_0000.png mask=mask_0000.png size=256 kind=grating
    period=23.5 angle=0.61 phase=1.2 colors=0.1,0.5,0.9;0.8,0.2,0.3
    texture_seed=17 mask_class=thick mask_seed=18

(one line per sample; wrapped here for width). Lines starting with ``#`` are
comments.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DegenerateMaskError

TEXTURE_KINDS = ("grating", "checkerboard", "stripes", "gradient_edges")
MASK_CLASSES = ("thin", "medium", "thick")

# stroke widths in px at 256x256, scaled linearly with resolution
BRUSH_WIDTHS = {"thin": (4, 8), "medium": (12, 24), "thick": (32, 64)}
BRUSH_STROKES = {"thin": (3, 6), "medium": (2, 4), "thick": (1, 3)}
_BRUSH_REF = 256
PSNR_CAP = 99.0


# ---------------------------------------------------------------- textures


@dataclass
class TextureSpec:
    kind: str
    period: float
    angle: float = 0.0
    phase: float = 0.0
    colors: tuple = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TEXTURE_KINDS:
            raise ValueError(f"unknown texture kind {self.kind!r}")
        if not self.period > 0:
            raise ValueError("period must be positive")
        self.colors = tuple(tuple(float(v) for v in c) for c in self.colors)


def random_texture_spec(rng, size, kind=None):
    kind = kind or TEXTURE_KINDS[rng.integers(len(TEXTURE_KINDS))]
    period = float(size * rng.uniform(0.08, 0.25))
    colors = tuple(tuple(float(v) for v in rng.uniform(0.05, 0.95, 3)) for _ in range(2))
    return TextureSpec(kind=kind, period=round(period, 4), angle=round(float(rng.uniform(0, math.pi)), 6),
                       phase=round(float(rng.uniform(0, 2 * math.pi)), 6), colors=colors,
                       seed=int(rng.integers(2**31)))


def _blend(t, colors):
    c0 = np.asarray(colors[0])[:, None, None]
    c1 = np.asarray(colors[1])[:, None, None]
    return c0 + (c1 - c0) * t[None]


def generate_texture(spec, h, w):
    """Render ``spec`` as a 3 x h x w float32 image in [0, 1]."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u = xx * math.cos(spec.angle) + yy * math.sin(spec.angle)
    v = -xx * math.sin(spec.angle) + yy * math.cos(spec.angle)
    two_pi = 2 * math.pi
    rng = np.random.default_rng(spec.seed)

    if spec.kind == "grating":
        t = 0.5 + 0.5 * np.sin(two_pi * u / spec.period + spec.phase)
        img = _blend(t, spec.colors)
    elif spec.kind == "checkerboard":
        off = spec.phase / two_pi
        cells = np.floor(u / spec.period + off) + np.floor(v / spec.period + off)
        t = (cells.astype(np.int64) % 2).astype(np.float64)
        img = np.where(t[None] > 0, np.asarray(spec.colors[1])[:, None, None],
                       np.asarray(spec.colors[0])[:, None, None])
    elif spec.kind == "stripes":
        # a coarse square wave plus a fine sinusoid at a third of its period
        coarse = (np.sin(two_pi * u / spec.period + spec.phase) > 0).astype(np.float64)
        fine = 0.5 + 0.5 * np.sin(two_pi * v / (spec.period / 3.0) + 2 * spec.phase)
        t = 0.7 * coarse + 0.3 * fine
        img = _blend(t, spec.colors)
    else:  # gradient_edges
        t = (u - u.min()) / max(np.ptp(u), 1e-9)
        img = _blend(t, spec.colors)
        n_edges = int(rng.integers(2, 5))
        for _ in range(n_edges):
            a = rng.uniform(0, math.pi)
            d = rng.uniform(0.2, 0.8) * (h * abs(math.sin(a)) + w * abs(math.cos(a)))
            side = (xx * math.cos(a) + yy * math.sin(a)) > d
            shift = rng.uniform(-0.3, 0.3, 3)[:, None, None]
            img = img + shift * side[None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ------------------------------------------------------------------ masks


@dataclass
class BrushMaskSpec:
    mask_class: str
    seed: int = 0
    width_range: tuple = field(default=None)
    stroke_range: tuple = field(default=None)

    def __post_init__(self):
        if self.mask_class not in MASK_CLASSES:
            raise ValueError(f"unknown mask class {self.mask_class!r}")
        self.width_range = tuple(self.width_range or BRUSH_WIDTHS[self.mask_class])
        self.stroke_range = tuple(self.stroke_range or BRUSH_STROKES[self.mask_class])


def _segment_distance(yy, xx, p0, p1):
    d = p1 - p0
    len2 = float(d @ d)
    if len2 == 0:
        return np.hypot(yy - p0[0], xx - p0[1])
    t = ((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / len2
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))


def _draw_strokes(rng, spec, h, w):
    size = min(h, w)
    scale = size / _BRUSH_REF
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.zeros((h, w), dtype=bool)
    n_strokes = int(rng.integers(spec.stroke_range[0], spec.stroke_range[1] + 1))
    for _ in range(n_strokes):
        width = rng.uniform(*spec.width_range) * scale
        radius = max(width / 2.0, 0.75)
        n_vertices = int(rng.integers(3, 7))
        p = np.array([rng.uniform(0, h), rng.uniform(0, w)])
        heading = rng.uniform(0, 2 * math.pi)
        for _ in range(n_vertices):
            heading += rng.uniform(-1.2, 1.2)
            step = rng.uniform(0.1, 0.3) * size
            q = p + step * np.array([math.sin(heading), math.cos(heading)])
            q = np.clip(q, [0, 0], [h - 1, w - 1])
            mask |= _segment_distance(yy, xx, p, q) <= radius
            p = q
    return mask


def generate_brush_mask(spec, h, w):
    """Union of random-walk brush strokes; 1 = hole.

    Stroke widths are drawn from ``spec.width_range`` (px at 256x256, scaled by
    ``min(h, w) / 256``). Draws that cover nothing or >= 90% of the image are
    rejected and redrawn from the same generator, so the result stays a pure
    function of the seed.
    """
    rng = np.random.default_rng(spec.seed)
    for _ in range(100):
        mask = _draw_strokes(rng, spec, h, w)
        cov = mask.mean()
        if 0 < cov < 0.9:
            return mask.astype(np.uint8)
    raise RuntimeError(f"could not draw a valid {spec.mask_class} mask at {h}x{w}")


def coverage(mask):
    return float(np.mean(np.asarray(mask) > 0))


# ---------------------------------------------------------------- metrics


def masked_l1(pred, truth, mask):
    m = np.asarray(mask) > 0
    if not m.any():
        raise DegenerateMaskError("evaluation mask is empty")
    diff = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64))
    return float(diff[:, m].mean())


def masked_psnr(pred, truth, mask):
    m = np.asarray(mask) > 0
    if not m.any():
        raise DegenerateMaskError("evaluation mask is empty")
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    mse = float(np.mean(diff[:, m] ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 20 * math.log10(1.0 / math.sqrt(mse)))


def evaluate(pred, truth, mask):
    """Masked L1 and PSNR (dB, capped at 99) of ``pred`` against ``truth``."""
    if np.shape(pred) != np.shape(truth) or np.shape(mask) != np.shape(pred)[-2:]:
        raise ValueError("pred, truth and mask must be congruent")
    return {"masked_l1": masked_l1(pred, truth, mask), "masked_psnr": masked_psnr(pred, truth, mask)}


# ---------------------------------------------------------------- samples


@dataclass
class Sample:
    id: int
    size: int
    texture: TextureSpec
    mask: BrushMaskSpec

    def render(self):
        img = generate_texture(self.texture, self.size, self.size)
        m = generate_brush_mask(self.mask, self.size, self.size)
        return img, m


def make_samples(count, size, mask_class="all", seed=0):
    """Deterministic list of sample specs; ``mask_class='all'`` cycles thin/medium/thick."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(count):
        tex = random_texture_spec(rng, size)
        cls = MASK_CLASSES[i % 3] if mask_class == "all" else mask_class
        samples.append(Sample(i, size, tex, BrushMaskSpec(cls, seed=int(rng.integers(2**31)))))
    return samples


class SyntheticDataset:
    """Indexable ``(masked_image, mask, truth)`` triples, rendered lazily and cached."""

    def __init__(self, samples):
        self.samples = list(samples)
        self._cache = {}

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        if i not in self._cache:
            img, m = self.samples[i].render()
            self._cache[i] = (img * (1 - m[None]).astype(np.float32), m, img)
        return self._cache[i]


# ---------------------------------------------------------- manifest + PNG


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def manifest_line(sample, image_name, mask_name):
    t = sample.texture
    colors = ";".join(",".join(_fmt(c) for c in col) for col in t.colors)
    fields = [
        ("id", sample.id), ("image", image_name), ("mask", mask_name), ("size", sample.size),
        ("kind", t.kind), ("period", _fmt(t.period)), ("angle", _fmt(t.angle)),
        ("phase", _fmt(t.phase)), ("colors", colors), ("texture_seed", t.seed),
        ("mask_class", sample.mask.mask_class), ("mask_seed", sample.mask.seed),
    ]
    return " ".join(f"{k}={v}" for k, v in fields)


def parse_manifest_line(line):
    rec = dict(tok.split("=", 1) for tok in line.split())
    colors = tuple(tuple(float(c) for c in col.split(",")) for col in rec["colors"].split(";"))
    tex = TextureSpec(kind=rec["kind"], period=float(rec["period"]), angle=float(rec["angle"]),
                      phase=float(rec["phase"]), colors=colors, seed=int(rec["texture_seed"]))
    sample = Sample(int(rec["id"]), int(rec["size"]), tex,
                    BrushMaskSpec(rec["mask_class"], seed=int(rec["mask_seed"])))
    return sample, rec["image"], rec["mask"]


def read_manifest(path):
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                entries.append(parse_manifest_line(line))
    return entries


def write_dataset(out_dir, samples):
    os.makedirs(out_dir, exist_ok=True)
    lines = ["# msrefine synthetic dataset manifest v1"]
    for s in samples:
        img, m = s.render()
        image_name, mask_name = f"image_{s.id:04d}.png", f"mask_{s.id:04d}.png"
        save_image_png(os.path.join(out_dir, image_name), img)
        save_mask_png(os.path.join(out_dir, mask_name), m)
        lines.append(manifest_line(s, image_name, mask_name))
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(data_dir):
    """Read a dataset directory into ``(sample, image, mask)`` triples from its PNGs."""
    out = []
    for sample, image_name, mask_name in read_manifest(os.path.join(data_dir, "manifest.txt")):
        img = load_image_png(os.path.join(data_dir, image_name))
        m = load_mask_png(os.path.join(data_dir, mask_name))
        out.append((sample, img, m))
    return out


def to_uint8(img):
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image_png(path, img):
    """Write a 3 x H x W image in [0, 1] as 8-bit RGB."""
    Image.fromarray(to_uint8(img).transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def save_mask_png(path, mask):
    arr = np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_image_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_mask_png(path):
    """Gray values >= 128 are holes."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)
