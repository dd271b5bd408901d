"""Synthetic degradations and toy dataset generation.

Every operator maps a clean [0,1] image to a degraded observation and is
exactly reproducible from its spec and seed.  The procedural clean-image
generator (gradients, sinusoidal textures, soft shapes) removes any need for
external data.  Images on disk are 8-bit RGB PNG; a JSON manifest makes a
saved pair set self-describing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import RngState, ShapeError, Tensor

VALID_KINDS = ("gaussian", "haze", "rain", "composite")


class DataError(RuntimeError):
    """Unreadable or inconsistent image data on disk."""


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    parts: tuple = ()

    def validate(self):
        if self.kind not in VALID_KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        p = self.params
        if self.kind == "gaussian":
            if not p.get("sigma", 0) > 0:
                raise ValueError(f"gaussian sigma must be > 0, got {p.get('sigma')}")
        elif self.kind == "haze":
            if not 0 < p.get("t", 0) <= 1:
                raise ValueError(f"haze transmission must be in (0, 1], got {p.get('t')}")
            if not 0 <= p.get("a", -1) <= 1:
                raise ValueError(f"haze airlight must be in [0, 1], got {p.get('a')}")
        elif self.kind == "rain":
            if p.get("count", 0) < 1 or p.get("length", 0) < 1:
                raise ValueError("rain needs count >= 1 and length >= 1")
            if not p.get("intensity", 0) > 0:
                raise ValueError("rain intensity must be > 0")
        elif self.kind == "composite":
            if not self.parts:
                raise ValueError("composite needs at least one part")
            for part in self.parts:
                part.validate()

    def reseeded(self, offset: int) -> "DegradationSpec":
        """Derive a per-item spec; nested parts shift with the same offset."""
        return replace(self, seed=self.seed + offset,
                       parts=tuple(p.reseeded(offset) for p in self.parts))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "params": dict(self.params), "seed": self.seed}
        if self.kind == "composite":
            d["parts"] = [p.to_dict() for p in self.parts]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        spec = cls(kind=d["kind"], params=dict(d.get("params", {})),
                   seed=int(d.get("seed", 0)),
                   parts=tuple(cls.from_dict(p) for p in d.get("parts", ())))
        spec.validate()
        return spec


def gaussian_noise(sigma: float = 25.0 / 255.0, seed: int = 0) -> DegradationSpec:
    spec = DegradationSpec("gaussian", {"sigma": float(sigma)}, seed)
    spec.validate()
    return spec


def haze(t: float = 0.6, a: float = 0.9, seed: int = 0) -> DegradationSpec:
    spec = DegradationSpec("haze", {"t": float(t), "a": float(a)}, seed)
    spec.validate()
    return spec


def rain(count: int = 60, length: int = 9, angle: float = -0.4,
         intensity: float = 0.35, seed: int = 0) -> DegradationSpec:
    spec = DegradationSpec("rain", {"count": int(count), "length": int(length),
                                    "angle": float(angle),
                                    "intensity": float(intensity)}, seed)
    spec.validate()
    return spec


def composite(parts, seed: int = 0) -> DegradationSpec:
    spec = DegradationSpec("composite", {}, seed, tuple(parts))
    spec.validate()
    return spec


def _check_image(x: Tensor):
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected an [N,3,H,W] image, got shape {tuple(x.shape)}")


def rain_mask(h: int, w: int, params: dict, gen) -> np.ndarray:
    """Additive streak field: seeded line segments of positive intensity."""
    mask = np.zeros((h, w), dtype=np.float32)
    angle = params["angle"]
    for _ in range(params["count"]):
        y0 = gen.uniform(0, h)
        x0 = gen.uniform(0, w)
        jitter = gen.uniform(-0.1, 0.1)
        dy = math.cos(angle + jitter)
        dx = math.sin(angle + jitter)
        amp = params["intensity"] * gen.uniform(0.6, 1.0)
        for s in range(params["length"]):
            yi = int(round(y0 + s * dy))
            xi = int(round(x0 + s * dx))
            if 0 <= yi < h and 0 <= xi < w:
                mask[yi, xi] += amp
    return mask


def degrade(x: Tensor, spec: DegradationSpec) -> Tensor:
    """Apply spec to a clean [0,1] image; deterministic given (x, spec)."""
    _check_image(x)
    spec.validate()
    data = x.data.astype(np.float32, copy=True)
    if spec.kind == "gaussian":
        gen = RngState(spec.seed).generator("degrade", "gaussian")
        noise = gen.normal(0.0, spec.params["sigma"], size=data.shape)
        out = np.clip(data + noise.astype(np.float32), 0.0, 1.0)
    elif spec.kind == "haze":
        t, a = spec.params["t"], spec.params["a"]
        out = data * t + a * (1.0 - t)
    elif spec.kind == "rain":
        gen = RngState(spec.seed).generator("degrade", "rain")
        mask = rain_mask(data.shape[2], data.shape[3], spec.params, gen)
        out = np.clip(data + mask[None, None], 0.0, 1.0)
    else:  # composite
        y = Tensor(data)
        for part in spec.parts:
            y = degrade(y, part)
        out = y.data
    return Tensor(out.astype(np.float32))


# ---------------------------------------------------------------------------
# Procedural clean images
# ---------------------------------------------------------------------------

def procedural_clean(size: int, seed: int, index: int = 0) -> Tensor:
    """Deterministic texture image: gradients + sinusoids + soft shapes."""
    gen = RngState(seed).generator("clean", index)
    ys, xs = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size),
                         indexing="ij")
    img = np.zeros((3, size, size), dtype=np.float64)
    for c in range(3):
        gx, gy = gen.uniform(-1, 1, 2)
        img[c] = 0.5 + 0.25 * (gx * xs + gy * ys)
        for _ in range(3):
            fx, fy = gen.uniform(1.0, 6.0, 2)
            phase = gen.uniform(0, 2 * math.pi)
            img[c] += 0.12 * np.sin(2 * math.pi * (fx * xs + fy * ys) + phase)
    for _ in range(4):
        cy, cx = gen.uniform(0.1, 0.9, 2)
        radius = gen.uniform(0.05, 0.25)
        tint = gen.uniform(-0.3, 0.3, 3)
        dist2 = (ys - cy) ** 2 + (xs - cx) ** 2
        bump = np.exp(-dist2 / (2 * radius * radius))
        img += tint[:, None, None] * bump
    img = np.clip(img, 0.0, 1.0)
    return Tensor(img[None].astype(np.float32))


# ---------------------------------------------------------------------------
# Pair sets
# ---------------------------------------------------------------------------

@dataclass
class PairSet:
    clean: list       # of float32 arrays [1,3,c,c]
    degraded: list
    spec: DegradationSpec
    split: str = "train"

    def __len__(self):
        return len(self.clean)


def save_png(path, arr) -> None:
    a = np.asarray(getattr(arr, "data", arr), dtype=np.float64)
    if a.ndim == 4:
        a = a[0]
    data = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(np.moveaxis(data, 0, 2), mode="RGB").save(path)


def load_png(path) -> Tensor:
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            data = np.asarray(rgb, dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise DataError(f"{path}: cannot read image: {e}") from e
    return Tensor(np.moveaxis(data, 2, 0)[None].copy())


def make_pairs(clean_source, spec: DegradationSpec, count: int, crop: int,
               split: str = "train") -> PairSet:
    """Build `count` (clean, degraded) crops; deterministic given spec.seed."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if crop % 8 != 0:
        raise ValueError(f"crop {crop} must be divisible by 8")
    spec.validate()
    crop_gen = RngState(spec.seed).generator("crop", split)

    if clean_source is None or clean_source == "procedural":
        cleans = [procedural_clean(crop, spec.seed, i) for i in range(count)]
    else:
        root = Path(clean_source)
        files = sorted(root.glob("*.png"))
        if not files:
            raise DataError(f"{root}: no .png files found")
        cleans = []
        for i in range(count):
            path = files[i % len(files)]
            img = load_png(path)
            h, w = img.shape[2], img.shape[3]
            if h < crop or w < crop:
                raise DataError(f"{path}: image {h}x{w} smaller than crop {crop}")
            oy = int(crop_gen.integers(0, h - crop + 1))
            ox = int(crop_gen.integers(0, w - crop + 1))
            cleans.append(Tensor(img.data[:, :, oy:oy + crop, ox:ox + crop].copy()))

    clean_arrs, degraded_arrs = [], []
    for i, img in enumerate(cleans):
        item_spec = spec.reseeded(1000 * i + 1) if i else spec
        clean_arrs.append(img.data)
        degraded_arrs.append(degrade(img, item_spec).data)
    return PairSet(clean_arrs, degraded_arrs, spec, split)


def save_pairset(ps: PairSet, out_dir) -> None:
    root = Path(out_dir) / ps.split
    root.mkdir(parents=True, exist_ok=True)
    items = []
    for i, (c, d) in enumerate(zip(ps.clean, ps.degraded)):
        cname, dname = f"clean_{i:04d}.png", f"degraded_{i:04d}.png"
        save_png(root / cname, c)
        save_png(root / dname, d)
        items.append({"clean": cname, "degraded": dname})
    manifest = {"split": ps.split, "spec": ps.spec.to_dict(), "items": items}
    (root / "pairs.json").write_text(json.dumps(manifest, indent=2))


def load_pairset(root_dir, split: str = "train") -> PairSet:
    root = Path(root_dir) / split
    manifest_path = root / "pairs.json"
    if not manifest_path.is_file():
        raise DataError(f"{manifest_path}: manifest not found")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{manifest_path}: corrupt manifest: {e}") from e
    spec = DegradationSpec.from_dict(manifest["spec"])
    clean, degraded = [], []
    for item in manifest["items"]:
        clean.append(load_png(root / item["clean"]).data)
        degraded.append(load_png(root / item["degraded"]).data)
    if not clean:
        raise DataError(f"{manifest_path}: empty pair set")
    return PairSet(clean, degraded, spec, manifest.get("split", split))
