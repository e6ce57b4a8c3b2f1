"""Procedural scene generator: textured backgrounds with a single shaped,
contrasting foreground object and its exact binary mask.

Backgrounds are smooth and low-frequency so the inpainter can predict them
from context; foregrounds carry their own texture so a fully masked object
cannot be recovered.  Generation is fully determined by (global seed, index).
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_VERSION = 1
MIN_AREA_FRAC = 0.08
MAX_AREA_FRAC = 0.35
MARGIN = 2

BACKGROUND_KINDS = ("grating", "gradient", "value-noise")
SHAPES = ("ellipse", "rectangle", "triangle")


@dataclass
class SceneSpec:
    background: str
    shape: str
    seed: int


@dataclass
class Sample:
    image: np.ndarray       # [3,H,W] float32 in [0,1]
    gt_mask: np.ndarray     # [H,W] uint8 in {0,1}
    spec: SceneSpec


@dataclass
class DatasetManifest:
    version: int
    count: int
    image_size: int
    seed: int
    entries: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "version": self.version,
            "count": self.count,
            "image_size": self.image_size,
            "seed": self.seed,
            "entries": self.entries,
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        if d.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {d.get('version')}")
        return cls(version=d["version"], count=d["count"],
                   image_size=d["image_size"], seed=d["seed"],
                   entries=d["entries"])


def _palette(rng: np.random.Generator, muted: bool) -> np.ndarray:
    """Per-channel base colors; muted ones stay mid-range for backgrounds."""
    if muted:
        return rng.uniform(0.30, 0.70, size=3)
    return rng.uniform(0.0, 1.0, size=3)


def gen_background(rng: np.random.Generator, kind: str | None = None,
                   size: int = 64) -> np.ndarray:
    """Smooth low-frequency texture, values in [0.1, 0.9], shape [3,H,W]."""
    if kind is None:
        kind = BACKGROUND_KINDS[rng.integers(len(BACKGROUND_KINDS))]
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    base = _palette(rng, muted=True)
    def plaid(lo: float, hi: float) -> np.ndarray:
        # two near-orthogonal waves: a single grating is invariant to
        # shifts along its stripes, a plaid leaves a seam for any shift.
        # A smooth random phase warp makes the texture extrapolable only
        # over short ranges: small regions can be inferred exactly from
        # their surroundings while distant texture cannot be guessed,
        # which keeps the image locally predictable but not globally.
        theta = rng.uniform(0, np.pi)
        out = np.zeros((size, size))
        for ang in (theta, theta + np.pi / 2 + rng.uniform(-0.3, 0.3)):
            cycles = rng.uniform(lo, hi)
            phase = rng.uniform(0, 2 * np.pi)
            warp = _bilinear_upsample(rng.uniform(-1.0, 1.0, size=(3, 3)),
                                      size)
            out = out + np.sin(2 * np.pi * cycles / size
                               * (np.cos(ang) * xx + np.sin(ang) * yy)
                               + phase + 0.9 * warp)
        return out

    if kind == "grating":
        # the upper end of the allowed band: near-4-cycle waves are
        # maximally sensitive to the 1/8-image training shifts
        amp = rng.uniform(0.15, 0.22)
        img = base[:, None, None] + amp * plaid(3.0, 4.0)[None]
    elif kind == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(theta) * xx + np.sin(theta) * yy) / size
        ramp = ramp - ramp.mean()
        amp = rng.uniform(0.2, 0.4)
        # a pure ramp is locally shift-invariant; superimpose a plaid
        # so displaced patches leave a visible seam
        img = base[:, None, None] + amp * ramp[None] \
            + rng.uniform(0.08, 0.12) * plaid(3.0, 4.0)[None] \
            + rng.uniform(-0.05, 0.05, size=(3, 1, 1))
    elif kind == "value-noise":
        # a coarse lattice keeps the random field inferable from context
        # (fine lattices have irreducible reconstruction error); the plaid
        # supplies shift sensitivity that the smooth field lacks
        cells = 4
        coarse = rng.uniform(-1, 1, size=(3, cells, cells))
        img = np.empty((3, size, size))
        for c in range(3):
            img[c] = _bilinear_upsample(coarse[c], size)
        img = base[:, None, None] + 0.30 * img \
            + rng.uniform(0.08, 0.12) * plaid(3.0, 4.0)[None]
    else:
        raise ValueError(f"unknown background kind {kind!r}")
    return np.clip(img, 0.1, 0.9).astype(np.float32)


def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    h, w = grid.shape
    ys = np.linspace(0, h - 1, size)
    xs = np.linspace(0, w - 1, size)
    y0 = np.floor(ys).astype(int).clip(0, h - 2)
    x0 = np.floor(xs).astype(int).clip(0, w - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, x0 + 1)]
    c = grid[np.ix_(y0 + 1, x0)]
    d = grid[np.ix_(y0 + 1, x0 + 1)]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


def _shape_mask(rng: np.random.Generator, shape: str, size: int) -> np.ndarray:
    """Rasterize one shape with area fraction in [MIN, MAX] and a margin."""
    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5,
                         indexing="ij")
    for _ in range(64):
        target = rng.uniform(MIN_AREA_FRAC, MAX_AREA_FRAC) * size * size
        rot = rng.uniform(0, np.pi)
        if shape == "ellipse":
            ratio = rng.uniform(0.5, 1.0)
            a = np.sqrt(target / (np.pi * ratio))
            b = a * ratio
            half_y = a * abs(np.sin(rot)) + b * abs(np.cos(rot))
            half_x = a * abs(np.cos(rot)) + b * abs(np.sin(rot))
        elif shape == "rectangle":
            ratio = rng.uniform(0.4, 1.0)
            a = np.sqrt(target / ratio) / 2
            b = a * ratio
            half_y = a * abs(np.sin(rot)) + b * abs(np.cos(rot))
            half_x = a * abs(np.cos(rot)) + b * abs(np.sin(rot))
        else:  # triangle: equilateral of matching area
            a = np.sqrt(target * 4 / np.sqrt(3)) / 2
            half_y = half_x = a
        lo_y, hi_y = MARGIN + half_y, size - MARGIN - half_y
        lo_x, hi_x = MARGIN + half_x, size - MARGIN - half_x
        if lo_y >= hi_y or lo_x >= hi_x:
            continue
        cy = rng.uniform(lo_y, hi_y)
        cx = rng.uniform(lo_x, hi_x)
        u = np.cos(rot) * (xx - cx) + np.sin(rot) * (yy - cy)
        v = -np.sin(rot) * (xx - cx) + np.cos(rot) * (yy - cy)
        if shape == "ellipse":
            mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        elif shape == "rectangle":
            mask = (np.abs(u) <= a) & (np.abs(v) <= b)
        else:
            h = a * np.sqrt(3)
            mask = (v >= -h / 3) & (np.abs(u) * np.sqrt(3) <= (2 * h / 3 - v))
        frac = mask.mean()
        if MIN_AREA_FRAC <= frac <= MAX_AREA_FRAC:
            ys, xs = np.nonzero(mask)
            if ys.min() >= MARGIN and ys.max() < size - MARGIN \
                    and xs.min() >= MARGIN and xs.max() < size - MARGIN:
                return mask.astype(np.uint8)
    raise RuntimeError("could not place a foreground shape")


def gen_foreground(rng: np.random.Generator, size: int = 64,
                   shape: str | None = None
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Binary shape mask plus a textured, saturated fill image [3,H,W]."""
    if shape is None:
        shape = SHAPES[rng.integers(len(SHAPES))]
    mask = _shape_mask(rng, shape, size)
    # saturated colors sit far from the muted background palette
    hi = rng.uniform(0.75, 1.0, size=3)
    lo = rng.uniform(0.0, 0.25, size=3)
    if rng.random() < 0.5:
        hi, lo = lo, hi
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    freq = rng.uniform(6.0, 12.0)
    theta = rng.uniform(0, np.pi)
    stripes = 0.5 + 0.5 * np.sin(
        2 * np.pi * freq / size * (np.cos(theta) * xx + np.sin(theta) * yy)
        + rng.uniform(0, 2 * np.pi))
    fill = lo[:, None, None] + (hi - lo)[:, None, None] * stripes[None]
    return mask, np.clip(fill, 0.0, 1.0).astype(np.float32)


def compose_scene(bg: np.ndarray, fg_mask: np.ndarray, fg_fill: np.ndarray,
                  spec: SceneSpec) -> Sample:
    m = fg_mask.astype(np.float32)[None]
    image = (fg_fill * m + bg * (1.0 - m)).astype(np.float32)
    return Sample(image=image, gt_mask=fg_mask, spec=spec)


def generate_sample(global_seed: int, index: int, size: int = 64) -> Sample:
    rng = np.random.default_rng(np.random.SeedSequence((global_seed, index)))
    bg_kind = BACKGROUND_KINDS[rng.integers(len(BACKGROUND_KINDS))]
    shape = SHAPES[rng.integers(len(SHAPES))]
    spec = SceneSpec(background=bg_kind, shape=shape, seed=index)
    bg = gen_background(rng, bg_kind, size)
    fg_mask, fg_fill = gen_foreground(rng, size, shape)
    return compose_scene(bg, fg_mask, fg_fill, spec)


def generate_background_plates(global_seed: int, n: int,
                               size: int = 64) -> np.ndarray:
    """Foreground-free background images, [n,3,H,W] float32.

    The inpainter is pretrained on these plates rather than on full scenes,
    so that it can only ever fill a masked region with background texture —
    an inpainter that has learned to regenerate foreground objects from
    partial context would paint the object back into its own hole and defeat
    the training signal.
    """
    out = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        rng = np.random.default_rng(
            np.random.SeedSequence((global_seed, i, 1)))
        out[i] = gen_background(rng, None, size)
    return out


# -- persistence -------------------------------------------------------------

def save_image_png(image: np.ndarray, path: Path) -> None:
    """Quantize [3,H,W] float to 8-bit RGB (error <= 1/510 per channel)."""
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def save_mask_png(mask: np.ndarray, path: Path) -> None:
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(path)


def load_image_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_mask_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)


def gen_dataset(n: int, seed: int, out_dir: Path,
                size: int = 64) -> DatasetManifest:
    """Write n samples (image + mask PNGs) and a manifest; fully seeded."""
    if n <= 0:
        raise ValueError("dataset size must be positive")
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out_dir}: {e}") from e
    manifest = DatasetManifest(version=MANIFEST_VERSION, count=n,
                               image_size=size, seed=seed)
    for i in range(n):
        s = generate_sample(seed, i, size)
        img_rel = f"images/{i:05d}.png"
        msk_rel = f"masks/{i:05d}.png"
        try:
            save_image_png(s.image, out_dir / img_rel)
            save_mask_png(s.gt_mask, out_dir / msk_rel)
        except OSError as e:
            raise OSError(f"failed writing sample {i} under {out_dir}: "
                          f"{e}") from e
        manifest.entries.append({
            "image": img_rel, "mask": msk_rel, "seed": i,
            "background": s.spec.background, "shape": s.spec.shape,
        })
    (out_dir / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return DatasetManifest.from_json(path.read_text())


def load_dataset(manifest_path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Load all images [N,3,H,W] and masks [N,H,W] listed in a manifest."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = load_manifest(path)
    root = path.parent
    images = np.stack([load_image_png(root / e["image"])
                       for e in manifest.entries])
    masks = np.stack([load_mask_png(root / e["mask"])
                      for e in manifest.entries])
    return images, masks


def dataset_checksum(out_dir: Path) -> int:
    """CRC32 over every PNG payload plus the manifest, for determinism tests."""
    out_dir = Path(out_dir)
    crc = 0
    for p in sorted(out_dir.rglob("*.png")) + [out_dir / "manifest.json"]:
        crc = zlib.crc32(p.read_bytes(), crc)
    return crc
