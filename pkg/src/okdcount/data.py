"""Synthetic crowd scenes, Gaussian density targets, augmentation, dataset io.

Scenes are (3, H, W) float64 images in [0, 1] with head annotations as
pixel-center (x, y) coordinates. Targets live on the /downsample grid; each
head contributes a unit-mass truncated Gaussian, so a density map sums to
the head count.

On disk a scene is a binary image file (magic ``OKDI``) plus a JSON sidecar
with the point list; density maps are recomputed on load.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

IMG_MAGIC = b"OKDI"


@dataclass
class SceneParams:
    size: int = 64
    count_min: int = 5
    count_max: int = 80
    blob_radius: tuple = (1.5, 3.5)
    noise: float = 0.08
    distractors: float = 0.0

    def validate(self):
        if self.size < 8:
            raise ConfigError(f"scene size must be >= 8, got {self.size}")
        if self.count_min < 0 or self.count_max < self.count_min:
            raise ConfigError(
                f"invalid count range [{self.count_min}, {self.count_max}]"
            )
        if self.distractors < 0:
            raise ConfigError(f"distractors must be >= 0, got {self.distractors}")
        return self


@dataclass
class AnnotatedScene:
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    points: np.ndarray  # (N, 2) float64 (x, y)
    density: np.ndarray  # (1, H/ds, W/ds) float64

    @property
    def count(self) -> int:
        return len(self.points)


def density_from_points(points, height, width, sigma=2.0, downsample=8):
    """Unit-mass Gaussian splat per point on the /downsample grid.

    Kernels use sigma in grid units, truncate at 4 sigma, and are
    renormalized so every point contributes exactly mass 1.
    """
    if height % downsample or width % downsample:
        raise ShapeError(f"scene {height}x{width} not divisible by downsample {downsample}")
    gh, gw = height // downsample, width // downsample
    den = np.zeros((1, gh, gw))
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    rad = 4.0 * sigma
    for k, (x, y) in enumerate(pts):
        if not (0.0 <= x <= width - 1 and 0.0 <= y <= height - 1):
            raise ValueError(f"point {k} at ({x}, {y}) lies outside a {width}x{height} image")
        gx = (x + 0.5) / downsample - 0.5
        gy = (y + 0.5) / downsample - 0.5
        r0 = max(0, math.ceil(gy - rad))
        r1 = min(gh - 1, math.floor(gy + rad))
        c0 = max(0, math.ceil(gx - rad))
        c1 = min(gw - 1, math.floor(gx + rad))
        rows = np.arange(r0, r1 + 1, dtype=np.float64)
        cols = np.arange(c0, c1 + 1, dtype=np.float64)
        kern = np.exp(
            -(((rows - gy) ** 2)[:, None] + (cols - gx) ** 2) / (2.0 * sigma * sigma)
        )
        den[0, r0 : r1 + 1, c0 : c1 + 1] += kern / kern.sum()
    return den


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pixel-center-aligned bilinear resize of a (C, H, W) array."""
    _, h, w = img.shape
    if (out_h, out_w) == (h, w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    a = img[:, y0[:, None], x0[None, :]]
    b = img[:, y0[:, None], x1[None, :]]
    c = img[:, y1[:, None], x0[None, :]]
    d = img[:, y1[:, None], x1[None, :]]
    top = a * (1.0 - wx) + b * wx
    bot = c * (1.0 - wx) + d * wx
    return top * (1.0 - wy) + bot * wy


# -- synthesis -------------------------------------------------------------------


def _sample_points(rng, n, n_px):
    """Clustered head positions: 75% around shared centers, the rest uniform."""
    pts = []
    if n:
        n_clusters = max(1, n // 15)
        centers = rng.uniform(2.0, n_px - 3.0, (n_clusters, 2))
        for _ in range(n):
            if rng.random() < 0.75:
                c = centers[int(rng.integers(0, n_clusters))]
                p = c + rng.normal(0.0, n_px / 10.0, 2)
            else:
                p = rng.uniform(1.0, n_px - 2.0, 2)
            pts.append(np.clip(p, 1.0, n_px - 2.0))
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def _render_blobs(img, points, rng, params, sign):
    """Soft circular bumps added (+1) or subtracted (-1) at the given points."""
    n_px = img.shape[1]
    for x, y in points:
        r = rng.uniform(*params.blob_radius)
        amp = rng.uniform(0.3, 0.55)
        tint = rng.uniform(0.7, 1.0, 3)
        half = int(math.ceil(3.0 * r))
        x0, x1 = max(0, int(x) - half), min(n_px - 1, int(x) + half)
        y0, y1 = max(0, int(y) - half), min(n_px - 1, int(y) + half)
        yy = np.arange(y0, y1 + 1, dtype=np.float64)[:, None]
        xx = np.arange(x0, x1 + 1, dtype=np.float64)[None, :]
        bump = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * (r / 1.6) ** 2))
        img[:, y0 : y1 + 1, x0 : x1 + 1] += sign * amp * tint[:, None, None] * bump


def synth_scene(params: SceneParams, rng, sigma=2.0, downsample=8) -> AnnotatedScene:
    """One textured scene with clustered soft blobs at the annotated points.

    With ``distractors == 0`` (the default) every scene has dark heads on a
    free-ranging background. With ``distractors > 0`` the scene also carries
    an independent number of opposite-polarity blobs that are not annotated,
    and which polarity is the head class is keyed by the global background
    brightness (bright scene -> dark heads, dark scene -> bright heads).
    Counting then requires reading a scene-level cue, not just detecting
    blobs: any polarity-blind strategy mixes in the distractor count, which
    is drawn independently of the head count.
    """
    params.validate()
    n_px = params.size
    if params.distractors > 0:
        heads_dark = bool(rng.random() < 0.5)
        lo, hi = (0.58, 0.75) if heads_dark else (0.35, 0.52)
        base = rng.uniform(lo, hi, 3)
    else:
        heads_dark = True
        base = rng.uniform(0.35, 0.75, 3)
    coarse = rng.normal(0.0, 1.0, (3, 4, 4))
    img = base[:, None, None] + params.noise * 1.5 * _resize_bilinear(coarse, n_px, n_px)
    img = img + rng.normal(0.0, params.noise * 0.4, (3, n_px, n_px))

    n = int(rng.integers(params.count_min, params.count_max + 1))
    points = _sample_points(rng, n, n_px)
    head_sign = -1.0 if heads_dark else 1.0
    _render_blobs(img, points, rng, params, head_sign)
    if params.distractors > 0:
        m = int(round(params.distractors * rng.integers(params.count_min, params.count_max + 1)))
        _render_blobs(img, _sample_points(rng, m, n_px), rng, params, -head_sign)

    img = np.clip(img, 0.0, 1.0)
    density = density_from_points(points, n_px, n_px, sigma=sigma, downsample=downsample)
    return AnnotatedScene(np.ascontiguousarray(img), points, density)


def make_dataset(params: SceneParams, n_scenes: int, seed: int = 0, sigma=2.0, downsample=8):
    """n scenes with per-scene generators derived from (seed, index)."""
    scenes = []
    for i in range(n_scenes):
        rng = np.random.default_rng([seed, i])
        scenes.append(synth_scene(params, rng, sigma=sigma, downsample=downsample))
    return scenes


# -- augmentation ----------------------------------------------------------------


@dataclass(frozen=True)
class AugmentDraw:
    """The random choices of one augmentation, applied deterministically."""

    scale: float
    crop_x: int
    crop_y: int
    flip: bool
    gamma: float


def apply_augment(scene: AnnotatedScene, draw: AugmentDraw, crop: int,
                  sigma=2.0, downsample=8) -> AnnotatedScene:
    _, h, w = scene.image.shape
    nh = max(crop, int(round(h * draw.scale)))
    nw = max(crop, int(round(w * draw.scale)))
    img = _resize_bilinear(scene.image, nh, nw)
    pts = np.array(scene.points, dtype=np.float64).reshape(-1, 2)
    if len(pts):
        pts[:, 0] = np.clip((pts[:, 0] + 0.5) * (nw / w) - 0.5, 0.0, nw - 1.0)
        pts[:, 1] = np.clip((pts[:, 1] + 0.5) * (nh / h) - 0.5, 0.0, nh - 1.0)
    x0, y0 = draw.crop_x, draw.crop_y
    if not (0 <= x0 <= nw - crop and 0 <= y0 <= nh - crop):
        raise ValueError(f"crop origin ({x0}, {y0}) outside a {nw}x{nh} image for crop {crop}")
    img = img[:, y0 : y0 + crop, x0 : x0 + crop]
    if len(pts):
        keep = (
            (pts[:, 0] >= x0)
            & (pts[:, 0] <= x0 + crop - 1)
            & (pts[:, 1] >= y0)
            & (pts[:, 1] <= y0 + crop - 1)
        )
        pts = pts[keep] - np.array([x0, y0], dtype=np.float64)
    if draw.flip:
        img = img[:, :, ::-1]
        if len(pts):
            pts[:, 0] = (crop - 1) - pts[:, 0]
    if draw.gamma != 1.0:
        img = np.clip(img, 0.0, 1.0) ** draw.gamma
    density = density_from_points(pts, crop, crop, sigma=sigma, downsample=downsample)
    return AnnotatedScene(np.ascontiguousarray(img), pts, density)


def augment(scene: AnnotatedScene, rng, crop: int = 64,
            scale_range=(0.8, 1.2), gamma_range=(0.7, 1.4),
            sigma=2.0, downsample=8) -> AnnotatedScene:
    """Random scale/crop/flip/gamma. The scale draw is clamped up so the
    resized scene always fits the crop; draw order is fixed for replay."""
    _, h, w = scene.image.shape
    u = float(rng.uniform(*scale_range))
    u = max(u, crop / h, crop / w)
    nh = max(crop, int(round(h * u)))
    nw = max(crop, int(round(w * u)))
    x0 = int(rng.integers(0, nw - crop + 1))
    y0 = int(rng.integers(0, nh - crop + 1))
    flip = bool(rng.random() < 0.5)
    gamma = float(rng.uniform(*gamma_range))
    return apply_augment(
        scene, AugmentDraw(u, x0, y0, flip, gamma), crop, sigma=sigma, downsample=downsample
    )


# -- dataset io ------------------------------------------------------------------


def save_scene(scene: AnnotatedScene, path):
    """Write ``<path>`` (binary image) and ``<path stem>.json`` (points)."""
    path = Path(path)
    c, h, w = scene.image.shape
    if c != 3:
        raise ShapeError(f"scenes are 3-channel, got {c}")
    with open(path, "wb") as fh:
        fh.write(IMG_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(scene.image.astype("<f8").tobytes())
    sidecar = path.with_suffix(".json")
    payload = {"points": [[float(x), float(y)] for x, y in scene.points]}
    sidecar.write_text(json.dumps(payload, sort_keys=True))


def load_scene(path, sigma=2.0, downsample=8) -> AnnotatedScene:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:4] != IMG_MAGIC:
        raise FormatError(f"{path}: not a scene file (bad magic)")
    h, w = struct.unpack_from("<II", blob, 4)
    expected = 12 + 3 * h * w * 8
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for a {h}x{w} scene, found {len(blob)}")
    img = np.frombuffer(blob, dtype="<f8", offset=12).reshape(3, h, w).copy()
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise FormatError(f"{sidecar}: missing annotation sidecar")
    try:
        meta = json.loads(sidecar.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{sidecar}: malformed JSON ({e})") from e
    if not isinstance(meta, dict) or "points" not in meta:
        raise FormatError(f"{sidecar}: annotation sidecar lacks a 'points' list")
    pts = np.asarray(meta["points"], dtype=np.float64).reshape(-1, 2)
    density = density_from_points(pts, h, w, sigma=sigma, downsample=downsample)
    return AnnotatedScene(img, pts, density)


def save_dataset(scenes, dir_path) -> list:
    """Write scene_00000.okdi, scene_00001.okdi, ... plus sidecars."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:05d}.okdi"
        save_scene(scene, d / name)
        names.append(name)
    return names


def load_dataset(dir_path, sigma=2.0, downsample=8):
    """All scenes under a directory, sorted by filename. Empty dir -> []."""
    d = Path(dir_path)
    if not d.is_dir():
        raise FormatError(f"{d}: not a directory")
    return [
        load_scene(p, sigma=sigma, downsample=downsample)
        for p in sorted(d.glob("*.okdi"))
    ]
