"""Synthetic multi-subject corpus, frozen toy encoders and proxy metrics.

Content images hold 1-4 non-overlapping geometric subjects (disk, square,
triangle) with striped fills over a low-contrast textured background, and
carry exact boolean masks.  A :class:`StyleSpec` recolors a layout into its
stylized target and renders a texture swatch used as the style reference.

The encoders are fixed random linear projections of hand-computed image
statistics; their projection matrices come from constant seeds and are never
exposed as parameters.

Metrics are transparent proxies, not FID:

* structure alignment -- IoU of binarized edge maps
* style distance -- L2 between per-channel (mean, std) vectors
* subject match -- normalized cross-correlation of edge maps inside each
  subject's (1-pixel dilated) mask
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "SyntheticImage",
    "StyleSpec",
    "CorpusItem",
    "PlacementError",
    "gen_content",
    "gen_style",
    "render_style_reference",
    "stylize",
    "make_corpus",
    "flip_horizontal",
    "color_jitter",
    "encode_content",
    "encode_style",
    "encode_structure",
    "encode_latent",
    "edge_map",
    "binary_iou",
    "metric_structure_alignment",
    "metric_style_distance",
    "metric_subject_match",
    "write_ppm",
    "read_ppm",
    "write_pgm",
    "read_pgm",
    "corpus_manifest",
]

IMAGE_SIZE = 32
LATENT_GRID = 8
STRUCTURE_CHANNELS = 4
EDGE_THRESHOLD = 0.1
JITTER_AMPLITUDE = 0.05
SUBJECT_RETENTION = 0.5

SHAPES = ("disk", "square", "triangle")
# saturated, mutually distinct subject colors
SUBJECT_COLORS = np.array(
    [
        [0.90, 0.20, 0.20],
        [0.20, 0.75, 0.25],
        [0.20, 0.35, 0.90],
        [0.95, 0.80, 0.15],
        [0.80, 0.25, 0.85],
        [0.15, 0.80, 0.85],
    ]
)

_CONTENT_PROJ_SEED = 0x1CA5_C0
_STYLE_PROJ_SEED = 0x1CA5_57


class PlacementError(RuntimeError):
    """Subjects could not be placed without overlap."""


@dataclass
class SyntheticImage:
    pixels: np.ndarray  # H x W x 3 in [0, 1]
    subject_masks: tuple[np.ndarray, ...] = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"pixels must be H x W x 3, got {px.shape}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = px
        masks = tuple(np.asarray(m, dtype=bool) for m in self.subject_masks)
        for m in masks:
            if m.shape != px.shape[:2]:
                raise ValueError(f"mask shape {m.shape} does not match image {px.shape[:2]}")
        self.subject_masks = masks

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    @property
    def n_subjects(self) -> int:
        return len(self.subject_masks)


@dataclass(frozen=True)
class StyleSpec:
    palette: tuple[tuple[float, float, float], ...]  # background, subject A, subject B
    frequency: float
    contrast: float
    seed: int

    def palette_array(self) -> np.ndarray:
        return np.asarray(self.palette, dtype=np.float64)


@dataclass
class CorpusItem:
    image_id: str
    content: SyntheticImage
    style: StyleSpec
    style_ref: SyntheticImage
    target: SyntheticImage


# ---------------------------------------------------------------------------
# generation


def _shape_mask(kind: str, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    if kind == "triangle":
        # apex up; rows widen linearly from apex to base
        top, bottom = cy - r, cy + r * 0.8
        frac = (yy - top) / (bottom - top)
        return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= frac * r)
    raise ValueError(f"unknown shape {kind!r}")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.35, 0.6, 3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    fy, fx, ph = rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0), rng.uniform(0, 2 * np.pi)
    tex = 0.04 * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
    return np.clip(base[None, None, :] + tex[..., None], 0.0, 1.0)


def _stripes(size: int, period: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period))


def gen_content(seed: int, n_subjects: int, size: int = IMAGE_SIZE, max_tries: int = 200) -> SyntheticImage:
    if not 1 <= n_subjects <= 4:
        raise ValueError(f"n_subjects must be in 1..4, got {n_subjects}")
    rng = np.random.default_rng(seed)
    pixels = _background(rng, size)
    occupied = np.zeros((size, size), dtype=bool)
    color_idx = rng.permutation(len(SUBJECT_COLORS))[:n_subjects]
    masks, subjects = [], []
    lo, hi = (0.14, 0.2) if n_subjects <= 2 else (0.1, 0.14)
    for j in range(n_subjects):
        for _ in range(max_tries):
            kind = SHAPES[int(rng.integers(len(SHAPES)))]
            r = float(rng.uniform(lo, hi) * size)
            cy, cx = rng.uniform(r + 1, size - r - 1, 2)
            mask = _shape_mask(kind, cy, cx, r, size)
            # one-pixel guard band keeps subject outlines separate
            grown = _dilate(mask)
            if mask.sum() > 0 and not (grown & occupied).any():
                break
        else:
            raise PlacementError(f"could not place subject {j + 1} of {n_subjects} after {max_tries} tries")
        occupied |= mask
        color = SUBJECT_COLORS[color_idx[j]]
        stripes = _stripes(size, period=float(rng.uniform(3.0, 5.0)), angle=float(rng.uniform(0, np.pi)))
        fill = color[None, None, :] * (0.7 + 0.3 * stripes[..., None])
        pixels = np.where(mask[..., None], fill, pixels)
        masks.append(mask)
        subjects.append({"kind": kind, "center": [float(cy), float(cx)], "radius": r, "color": color.tolist()})
    meta = {"seed": int(seed), "n_subjects": n_subjects, "subjects": subjects}
    return SyntheticImage(np.clip(pixels, 0.0, 1.0), tuple(masks), meta)


def gen_style(seed: int) -> StyleSpec:
    rng = np.random.default_rng(seed)
    hue = rng.uniform(0, 1)
    palette = []
    for offset, light in ((0.0, 0.3), (0.33, 0.75), (0.66, 0.55)):
        palette.append(tuple(float(v) for v in _hsv_to_rgb((hue + offset) % 1.0, 0.7, light)))
    return StyleSpec(
        palette=tuple(palette),
        frequency=float(rng.uniform(2.0, 6.0)),
        contrast=float(rng.uniform(0.05, 0.15)),
        seed=int(seed),
    )


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _style_texture(style: StyleSpec, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    return np.sin(2 * np.pi * style.frequency * xx) * np.sin(2 * np.pi * style.frequency * yy)


def render_style_reference(style: StyleSpec, size: int = IMAGE_SIZE) -> SyntheticImage:
    """Texture swatch mixing the palette colors; deterministic in ``style``."""
    pal = style.palette_array()
    tex = _style_texture(style, size)
    yy, xx = np.mgrid[0:size, 0:size] / size
    w1 = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + 0.5 * yy) * 1.5)
    w2 = 0.5 + 0.5 * np.cos(2 * np.pi * (yy - 0.3 * xx) * 1.5)
    mix = pal[0] * (1 - w1[..., None]) + pal[1] * (w1 * (1 - w2))[..., None] + pal[2] * (w1 * w2)[..., None]
    px = np.clip(mix + style.contrast * tex[..., None], 0.0, 1.0)
    return SyntheticImage(px, (), {"style_seed": style.seed})


def _masked_mean(pixels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    sel = np.asarray(mask, dtype=bool)
    return pixels[sel].mean(axis=0) if sel.any() else pixels.reshape(-1, 3).mean(axis=0)


def stylize(content: SyntheticImage, style: StyleSpec) -> SyntheticImage:
    """Repaint a content layout with the style palette (the training target).

    Subjects keep part of their own color so that the target still depends
    on which subject sits where, not only on the layout.
    """
    pal = style.palette_array()
    h, w = content.size
    tex = 0.25 * style.contrast * _style_texture(style, h)[..., None]
    px = np.broadcast_to(pal[0], (h, w, 3)) + tex
    subjects = content.metadata.get("subjects", [])
    for j, mask in enumerate(content.subject_masks):
        own = np.asarray(subjects[j]["color"]) if j < len(subjects) else _masked_mean(content.pixels, mask)
        tint = (1.0 - SUBJECT_RETENTION) * pal[1 + j % 2] + SUBJECT_RETENTION * own
        px = np.where(mask[..., None], tint + tex, px)
    meta = dict(content.metadata, style_seed=style.seed)
    return SyntheticImage(np.clip(px, 0.0, 1.0), content.subject_masks, meta)


def make_corpus(seed: int, size: int, n_subjects: int, n_styles: int = 4) -> list[CorpusItem]:
    """Corpus item ``i`` uses content seed ``seed*10007+i`` and style ``i mod n_styles``."""
    styles = [gen_style(seed * 7919 + 100_003 + s) for s in range(n_styles)]
    refs = [render_style_reference(s) for s in styles]
    items = []
    for i in range(size):
        content = gen_content(seed * 10007 + i, n_subjects)
        st = styles[i % n_styles]
        items.append(CorpusItem(f"img{i:03d}", content, st, refs[i % n_styles], stylize(content, st)))
    return items


def corpus_manifest(items: Sequence[CorpusItem]) -> dict:
    return {
        "items": [
            {
                "image_id": it.image_id,
                "content_seed": it.content.metadata["seed"],
                "style_seed": it.style.seed,
                "subjects": it.content.metadata["subjects"],
            }
            for it in items
        ]
    }


def flip_horizontal(image: SyntheticImage) -> SyntheticImage:
    masks = tuple(m[:, ::-1].copy() for m in image.subject_masks)
    return SyntheticImage(image.pixels[:, ::-1, :].copy(), masks, dict(image.metadata, flipped=True))


def color_jitter(image: SyntheticImage, rng: np.random.Generator, amplitude: float = JITTER_AMPLITUDE) -> SyntheticImage:
    shift = rng.uniform(-amplitude, amplitude, 3)
    gain = 1.0 + rng.uniform(-amplitude, amplitude, 3)
    px = np.clip(image.pixels * gain + shift, 0.0, 1.0)
    return SyntheticImage(px, image.subject_masks, dict(image.metadata))


# ---------------------------------------------------------------------------
# frozen encoders


def _pixels(image) -> np.ndarray:
    return image.pixels if isinstance(image, SyntheticImage) else np.asarray(image, dtype=np.float64)


def _gray(px: np.ndarray) -> np.ndarray:
    return px.mean(axis=2)


def _gradients(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gy, gx = np.gradient(gray)
    return gx, gy


def _orientation_hist(gx: np.ndarray, gy: np.ndarray, sel: np.ndarray, bins: int = 4) -> np.ndarray:
    # unsigned, mirror-folded orientation so a horizontal flip leaves it unchanged
    mag = np.hypot(gx, gy)[sel]
    ang = np.arctan2(np.abs(gy), np.abs(gx))[sel]
    idx = np.minimum((ang / (np.pi / 2) * bins).astype(int), bins - 1)
    hist = np.bincount(idx, weights=mag, minlength=bins)
    return hist / max(sel.sum(), 1)


def _content_stats(px: np.ndarray, mask: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    sel = mask if mask.any() else np.ones_like(mask)
    region = px[sel]
    gx, gy = _gradients(_gray(px))
    ys, xs = np.nonzero(sel)
    centroid = np.array([(ys.mean() + 0.5) / h * 2 - 1, (xs.mean() + 0.5) / w * 2 - 1])
    area = np.sqrt(sel.mean())
    return np.concatenate(
        [
            region.mean(axis=0) - 0.5,
            region.std(axis=0),
            _orientation_hist(gx, gy, sel),
            centroid,
            [area - 0.5, np.hypot(gx, gy)[sel].mean()],
        ]
    )


def _style_stats(px: np.ndarray) -> np.ndarray:
    flat = px.reshape(-1, 3)
    gx, gy = _gradients(_gray(px))
    sel = np.ones(px.shape[:2], dtype=bool)
    quantiles = np.quantile(flat, [0.1, 0.5, 0.9], axis=0).reshape(-1) - 0.5
    return np.concatenate(
        [
            flat.mean(axis=0) - 0.5,
            flat.std(axis=0),
            quantiles,
            _orientation_hist(gx, gy, sel),
            [np.hypot(gx, gy).mean()],
        ]
    )


@lru_cache(maxsize=None)
def _projection(seed: int, n_in: int, d: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    proj = rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, d))
    proj.setflags(write=False)
    return proj


def encode_content(image, mask: np.ndarray | None = None, d: int = 16) -> np.ndarray:
    """Content embedding of the whole image, or of the region under ``mask``."""
    px = _pixels(image)
    mask = np.ones(px.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    stats = _content_stats(px, mask)
    return stats @ _projection(_CONTENT_PROJ_SEED, stats.size, d)


def encode_style(image, d: int = 16) -> np.ndarray:
    stats = _style_stats(_pixels(image))
    return stats @ _projection(_STYLE_PROJ_SEED, stats.size, d)


def _pool(arr: np.ndarray, grid: int) -> np.ndarray:
    h, w = arr.shape[:2]
    if h % grid or w % grid:
        raise ValueError(f"image {h}x{w} is not divisible into a {grid}x{grid} grid")
    fy, fx = h // grid, w // grid
    return arr.reshape(grid, fy, grid, fx, *arr.shape[2:]).mean(axis=(1, 3))


def encode_structure(image, grid: int = LATENT_GRID) -> np.ndarray:
    """``grid x grid x 4`` map: edge magnitude, |dx|, |dy|, deviation from median gray; each in [0, 1]."""
    px = _pixels(image)
    gray = _gray(px)
    gx, gy = _gradients(gray)
    chans = [np.hypot(gx, gy), np.abs(gx), np.abs(gy), np.abs(gray - np.median(gray))]
    out = np.stack([_pool(c, grid) for c in chans], axis=-1)
    peak = out.max(axis=(0, 1))
    return np.divide(out, peak, out=np.zeros_like(out), where=peak > 0)


_LATENT_MIX_SEED = 0x1CA5_1A


def latent_mixing(d: int) -> np.ndarray:
    """Fixed ``3 x d`` map from centered RGB to latent channels; identity on the first three."""
    mix = np.zeros((3, d))
    mix[:, :3] = np.eye(3)
    if d > 3:
        rng = np.random.default_rng(_LATENT_MIX_SEED)
        mix[:, 3:] = rng.normal(0.0, 1.0 / np.sqrt(3), (3, d - 3))
    return mix


def encode_latent(image, d: int = 16, grid: int = LATENT_GRID) -> np.ndarray:
    """Clean latent ``(grid*grid) x d``.

    Pooled RGB is rescaled to [-1, 1]; the first three channels hold it
    verbatim and the rest hold fixed linear mixtures of it.
    """
    if d < 3:
        raise ValueError("latent width must be at least 3")
    rgb = _pool(_pixels(image), grid).reshape(-1, 3)
    return (2.0 * rgb - 1.0) @ latent_mixing(d)


# ---------------------------------------------------------------------------
# metrics


def edge_map(image) -> np.ndarray:
    gx, gy = _gradients(_gray(_pixels(image)))
    return np.hypot(gx, gy)


def binarize_edges(edges: np.ndarray, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    peak = edges.max()
    if peak <= 0:
        return np.zeros(edges.shape, dtype=bool)
    return edges > threshold * peak


def binary_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def metric_structure_alignment(a, b) -> float:
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise ValueError(f"structure alignment needs equal sizes, got {pa.shape} and {pb.shape}")
    return binary_iou(binarize_edges(edge_map(pa)), binarize_edges(edge_map(pb)))


def _channel_stats(px: np.ndarray) -> np.ndarray:
    flat = px.reshape(-1, 3)
    return np.concatenate([flat.mean(axis=0), flat.std(axis=0)])


def metric_style_distance(output, style_ref) -> float:
    return float(np.linalg.norm(_channel_stats(_pixels(output)) - _channel_stats(_pixels(style_ref))))


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    if np.array_equal(a, b):
        return 1.0
    a, b = a - a.mean(), b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    if den <= 0:
        return 0.0
    return float(np.clip((a * b).sum() / den, 0.0, 1.0))


def metric_subject_match(output, content: SyntheticImage) -> list[float]:
    """Per-subject edge correlation; the mask is grown by one pixel to take in the outline."""
    if not content.subject_masks:
        raise ValueError("content image carries no subject masks")
    eo, ec = edge_map(output), edge_map(content)
    scores = []
    for j, m in enumerate(content.subject_masks):
        if not m.any():
            raise ValueError(f"subject {j} has an empty mask")
        sel = _dilate(m)
        scores.append(_ncc(ec[sel], eo[sel]))
    return scores


# ---------------------------------------------------------------------------
# netpbm I/O


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def write_ppm(path, pixels: np.ndarray) -> None:
    px = np.asarray(pixels, dtype=np.float64)
    data = np.round(np.clip(px, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = data.shape[:2]
    _atomic_write(Path(path), f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    h, w = data.shape
    _atomic_write(Path(path), f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def _read_netpbm(path, magic: bytes) -> tuple[np.ndarray, int, int]:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} header, found {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit files are supported")
    return np.frombuffer(raw[pos + 1 :], dtype=np.uint8), w, h


def read_ppm(path) -> np.ndarray:
    data, w, h = _read_netpbm(path, b"P6")
    return data[: w * h * 3].reshape(h, w, 3) / 255.0


def read_pgm(path) -> np.ndarray:
    data, w, h = _read_netpbm(path, b"P5")
    return data[: w * h].reshape(h, w) > 127


def write_manifest(path, items: Sequence[CorpusItem]) -> None:
    _atomic_write(Path(path), (json.dumps(corpus_manifest(items), indent=2, sort_keys=True) + "\n").encode())
