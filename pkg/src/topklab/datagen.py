"""Procedural cue-conflict dataset.

Eight shape classes are rendered as binary masks, filled with one of
eight procedural texture families and composited over a low-contrast
noise background. In the training split texture class always equals
shape class (congruent cues); the cue-conflict split pairs each shape
with a uniformly chosen *other* texture class; the stylized split does
the same but renders textures with held-out parameters.

Every sample is reproducible in isolation: its RNG is seeded from
hash(seed, split, index).
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from scipy import ndimage

SHAPE_NAMES = ("circle", "square", "triangle", "star5", "cross", "ring",
               "ellipse", "diamond")
TEXTURE_NAMES = ("stripes", "checker", "dots", "noise", "grad", "zigzag",
                 "rings", "blotch")
N_CLASSES = 8
SPLITS = ("train", "clean", "cueconflict", "stylized")

COVERAGE_MIN, COVERAGE_MAX = 0.15, 0.60

# canonical circumradius per shape (unit frame, centered)
_CIRCUMRADIUS = {
    "circle": 0.35, "square": 0.36 * np.sqrt(2.0), "triangle": 0.52,
    "star5": 0.48, "cross": np.hypot(0.45, 0.12), "ring": 0.45,
    "ellipse": 0.45, "diamond": 0.48,
}
# foreground area fraction at scale 1 (used by the coverage fallback)
_BASE_AREA = {
    "circle": np.pi * 0.35 ** 2, "square": 0.72 ** 2,
    "triangle": 3 * np.sqrt(3) / 4 * 0.52 ** 2,
    "star5": 5 * 0.48 * 0.22 * np.sin(np.pi / 5),
    "cross": 2 * 0.9 * 0.24 - 0.24 ** 2,
    "ring": np.pi * (0.45 ** 2 - 0.26 ** 2),
    "ellipse": np.pi * 0.45 * 0.28, "diamond": 2 * 0.48 ** 2,
}


class FrameError(ValueError):
    """Transform pushes the shape outside the image frame."""


@dataclass(frozen=True)
class ShapeTransform:
    rotation: float = 0.0   # radians
    scale: float = 1.0
    tx: float = 0.0         # fraction of the frame, |t| <= 0.1
    ty: float = 0.0


@dataclass(frozen=True)
class TextureParams:
    frequency: float = 8.0   # cycles (or cells) per frame
    phase: float = 0.0
    orientation: float = 0.0
    seed: int = 0            # for the stochastic families


def _grid(size: int):
    c = (np.arange(size) + 0.5) / size - 0.5
    return np.meshgrid(c, c, indexing="xy")  # x varies along columns


def _polygon_vertices(name: str) -> np.ndarray:
    if name == "square":
        s = 0.36
        return np.array([(-s, -s), (s, -s), (s, s), (-s, s)])
    if name == "triangle":
        r = 0.52
        ang = np.array([np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3])
        return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
    if name == "star5":
        ro, ri = 0.48, 0.22
        ang = np.pi / 2 + np.arange(10) * np.pi / 5
        rad = np.where(np.arange(10) % 2 == 0, ro, ri)
        return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    if name == "cross":
        a, b = 0.45, 0.12  # arm half-length, half-width
        return np.array([
            (-b, -a), (b, -a), (b, -b), (a, -b), (a, b), (b, b),
            (b, a), (-b, a), (-b, b), (-a, b), (-a, -b), (-b, -b)])
    if name == "diamond":
        d = 0.48
        return np.array([(0, -d), (d, 0), (0, d), (-d, 0)])
    raise ValueError(f"{name} is not a polygon shape")


def _point_in_polygon(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        cond = (y1 > py) != (y2 > py)
        if y2 != y1:
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            inside ^= cond & (px < xint)
    return inside


def render_shape(class_id: int, transform: ShapeTransform, size: int) -> np.ndarray:
    """Binary (size, size) mask; deterministic given its inputs."""
    name = SHAPE_NAMES[class_id]
    t = transform
    if not (0 < t.scale <= 1.0) or abs(t.tx) > 0.1 + 1e-12 or abs(t.ty) > 0.1 + 1e-12:
        raise FrameError(f"transform out of bounds: {t}")
    if _CIRCUMRADIUS[name] * t.scale + np.hypot(t.tx, t.ty) > 0.5:
        raise FrameError(f"shape {name} leaves the frame under {t}")
    x, y = _grid(size)
    # map image coords back to the canonical shape frame
    xs, ys = (x - t.tx), (y - t.ty)
    cr, sr = np.cos(t.rotation), np.sin(t.rotation)
    qx = (cr * xs + sr * ys) / t.scale
    qy = (-sr * xs + cr * ys) / t.scale
    if name == "circle":
        inside = qx ** 2 + qy ** 2 <= 0.35 ** 2
    elif name == "ring":
        r2 = qx ** 2 + qy ** 2
        inside = (r2 <= 0.45 ** 2) & (r2 >= 0.26 ** 2)
    elif name == "ellipse":
        inside = (qx / 0.45) ** 2 + (qy / 0.28) ** 2 <= 1.0
    else:
        inside = _point_in_polygon(qx, qy, _polygon_vertices(name))
    return inside.astype(np.float64)


def render_texture(class_id: int, params: TextureParams, size: int) -> np.ndarray:
    """(3, size, size) texture in [0, 1]; gray-level patterns on all channels."""
    name = TEXTURE_NAMES[class_id]
    p = params
    x, y = _grid(size)
    u = x * np.cos(p.orientation) + y * np.sin(p.orientation)
    v = -x * np.sin(p.orientation) + y * np.cos(p.orientation)
    if name == "stripes":
        plane = 0.5 + 0.45 * np.sin(2 * np.pi * p.frequency * u + p.phase)
    elif name == "checker":
        cell = max(2, int(round(size / (2 * p.frequency))))
        jj, ii = np.meshgrid(np.arange(size), np.arange(size), indexing="xy")
        off = int(round(p.phase)) % (2 * cell)
        plane = np.where(((jj + off) // cell + (ii + off) // cell) % 2 == 0, 0.2, 0.8)
    elif name == "dots":
        pitch = 1.0 / p.frequency
        du = (u + p.phase * pitch) % pitch - pitch / 2
        dv = (v + p.phase * pitch) % pitch - pitch / 2
        plane = np.where(du ** 2 + dv ** 2 <= (0.3 * pitch) ** 2, 0.85, 0.15)
    elif name == "noise":
        rng = np.random.default_rng(p.seed)
        block = max(1, int(round(p.frequency)))
        n = -(-size // block)
        coarse = rng.uniform(0, 1, (n, n))
        plane = np.repeat(np.repeat(coarse, block, 0), block, 1)[:size, :size]
    elif name == "grad":
        umin, umax = u.min(), u.max()
        plane = (u - umin) / (umax - umin)
    elif name == "zigzag":
        tri = 2 * np.abs((v * p.frequency) % 1.0 - 0.5)
        band = (u * p.frequency + 0.6 * tri + p.phase) % 1.0
        plane = np.where(band < 0.5, 0.2, 0.8)
    elif name == "rings":
        r = np.hypot(x, y)
        plane = 0.5 + 0.45 * np.sin(2 * np.pi * p.frequency * r + p.phase)
    elif name == "blotch":
        rng = np.random.default_rng(p.seed)
        raw = rng.uniform(0, 1, (size, size))
        sigma = size / (10.0 * p.frequency)
        sm = ndimage.gaussian_filter(raw, sigma=sigma, mode="wrap")
        lo, hi = sm.min(), sm.max()
        plane = 0.2 + 0.6 * (sm - lo) / max(hi - lo, 1e-12)
    else:
        raise ValueError(name)
    return np.broadcast_to(plane, (3, size, size)).astype(np.float64).copy()


def background(size: int, rng: np.random.Generator) -> np.ndarray:
    """Low-contrast gray noise so texture cues are not threshold-segmentable."""
    return 0.5 + 0.08 * rng.uniform(-1, 1, (3, size, size))


def compose(shape_mask: np.ndarray, fg: np.ndarray, bg: np.ndarray) -> np.ndarray:
    if fg.shape != bg.shape or fg.shape[-2:] != shape_mask.shape:
        raise ValueError("compose: size mismatch")
    return shape_mask * fg + (1.0 - shape_mask) * bg


# ---------------------------------------------------------------------------
# parameter sampling

_TRAIN_FREQ = {"stripes": (6.0, 10.0), "checker": (3.0, 5.0), "dots": (6.0, 10.0),
               "noise": (1.0, 1.0), "grad": (1.0, 1.0), "zigzag": (5.0, 9.0),
               "rings": (6.0, 10.0), "blotch": (3.0, 5.0)}
_HOLDOUT_FREQ = {"stripes": (13.0, 18.0), "checker": (6.5, 8.0), "dots": (12.0, 16.0),
                 "noise": (3.0, 3.0), "grad": (1.0, 1.0), "zigzag": (12.0, 16.0),
                 "rings": (13.0, 18.0), "blotch": (7.0, 9.0)}


def sample_texture_params(class_id: int, rng: np.random.Generator,
                          holdout: bool = False) -> TextureParams:
    name = TEXTURE_NAMES[class_id]
    lo, hi = (_HOLDOUT_FREQ if holdout else _TRAIN_FREQ)[name]
    freq = float(rng.uniform(lo, hi)) if hi > lo else lo
    phase = float(rng.uniform(0, 2 * np.pi))
    orient = float(rng.uniform(0, np.pi))
    seed = int(rng.integers(0, 2 ** 31))
    return TextureParams(freq, phase, orient, seed)


def sample_transform(class_id: int, rng: np.random.Generator, size: int) -> ShapeTransform:
    """Transform with coverage kept inside [COVERAGE_MIN, COVERAGE_MAX]."""
    name = SHAPE_NAMES[class_id]
    base = _BASE_AREA[name]
    smin = max(0.5, np.sqrt(COVERAGE_MIN / base) + 0.02)
    smax = min(0.9, np.sqrt(COVERAGE_MAX / base) - 0.02)
    for _ in range(40):
        scale = float(rng.uniform(smin, smax))
        rot = float(rng.uniform(0, 2 * np.pi))
        tmax = min(0.1, (0.5 - _CIRCUMRADIUS[name] * scale) / np.sqrt(2.0))
        tmax = max(tmax, 0.0)
        tx = float(rng.uniform(-tmax, tmax))
        ty = float(rng.uniform(-tmax, tmax))
        t = ShapeTransform(rot, scale, tx, ty)
        cov = render_shape(class_id, t, size).mean()
        if COVERAGE_MIN <= cov <= COVERAGE_MAX:
            return t
    return ShapeTransform(0.0, (smin + smax) / 2, 0.0, 0.0)


# ---------------------------------------------------------------------------
# dataset generation

@dataclass
class DatasetConfig:
    out_dir: str = "data"
    image_size: int = 64
    train_count: int = 4000
    clean_count: int = 800
    cueconflict_count: int = 800
    stylized_count: int = 800

    def count(self, split: str) -> int:
        return {"train": self.train_count, "clean": self.clean_count,
                "cueconflict": self.cueconflict_count,
                "stylized": self.stylized_count}[split]


@dataclass
class SampleRecord:
    path: str
    shape_label: int
    texture_label: int
    split: str
    transform: ShapeTransform = field(default=ShapeTransform())
    texture: TextureParams = field(default=TextureParams())


@dataclass
class DatasetManifest:
    seed: int
    image_size: int
    records: list

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]


def sample_seed(seed: int, split: str, index: int) -> int:
    digest = hashlib.sha256(f"{seed}:{split}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_sample(seed: int, split: str, index: int, size: int) -> tuple:
    """Fully reproduce one sample from (seed, split, index)."""
    rng = np.random.default_rng(sample_seed(seed, split, index))
    shape_id = index % N_CLASSES
    if split in ("train", "clean"):
        texture_id = shape_id
    else:
        others = [c for c in range(N_CLASSES) if c != shape_id]
        texture_id = int(others[rng.integers(0, N_CLASSES - 1)])
    holdout = split == "stylized"
    transform = sample_transform(shape_id, rng, size)
    tex_params = sample_texture_params(texture_id, rng, holdout=holdout)
    mask = render_shape(shape_id, transform, size)
    fg = render_texture(texture_id, tex_params, size)
    bg = background(size, rng)
    image = compose(mask, fg, bg)
    return image, shape_id, texture_id, transform, tex_params


def save_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def generate_dataset(config: DatasetConfig, seed: int) -> DatasetManifest:
    out = Path(config.out_dir)
    records: list[SampleRecord] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for split in SPLITS:
            (out / split).mkdir(exist_ok=True)
            for index in range(config.count(split)):
                img, sid, tid, tf, tp = make_sample(seed, split, index,
                                                    config.image_size)
                rel = f"{split}/{index:05d}.png"
                save_png(out / rel, img)
                records.append(SampleRecord(rel, sid, tid, split, tf, tp))
        manifest = DatasetManifest(seed, config.image_size, records)
        write_manifest(out, manifest)
    except OSError as e:
        raise IOError(f"cannot write dataset to {out}: {e}") from e
    return manifest


def write_manifest(out_dir, manifest: DatasetManifest) -> None:
    out = Path(out_dir)
    with open(out / "manifest.tsv", "w", encoding="utf-8") as f:
        for r in manifest.records:
            f.write(f"{r.path}\t{r.shape_label}\t{r.texture_label}\t{r.split}\n")
    with open(out / "transforms.tsv", "w", encoding="utf-8") as f:
        f.write(f"# seed={manifest.seed} image_size={manifest.image_size}\n")
        for r in manifest.records:
            t, p = r.transform, r.texture
            f.write(f"{r.path}\t{t.rotation:.12g}\t{t.scale:.12g}\t{t.tx:.12g}"
                    f"\t{t.ty:.12g}\t{p.frequency:.12g}\t{p.phase:.12g}"
                    f"\t{p.orientation:.12g}\t{p.seed}\n")


def load_manifest(dataset_dir) -> DatasetManifest:
    root = Path(dataset_dir)
    records = []
    with open(root / "manifest.tsv", encoding="utf-8") as f:
        for line in f:
            path, sid, tid, split = line.rstrip("\n").split("\t")
            records.append(SampleRecord(path, int(sid), int(tid), split))
    seed, size = -1, 64
    meta = root / "transforms.tsv"
    if meta.exists():
        with open(meta, encoding="utf-8") as f:
            head = f.readline().strip()
        if head.startswith("#"):
            kv = dict(tok.split("=") for tok in head[1:].split())
            seed, size = int(kv.get("seed", -1)), int(kv.get("image_size", 64))
    return DatasetManifest(seed, size, records)


def load_split(dataset_dir, split: str, dtype=np.float32):
    """Load one split fully into memory: (images, shape_labels, texture_labels)."""
    root = Path(dataset_dir)
    manifest = load_manifest(root)
    recs = manifest.split(split)
    if not recs:
        raise ValueError(f"split {split!r} is empty or unknown")
    images = np.stack([load_png(root / r.path) for r in recs]).astype(dtype)
    shapes = np.array([r.shape_label for r in recs], dtype=np.int64)
    textures = np.array([r.texture_label for r in recs], dtype=np.int64)
    return images, shapes, textures
