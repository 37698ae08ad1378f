"""Image preprocessing and augmentation: flips/rotation/shear/zoom/shift,
randomized CLAHE, Gaussian noise, standardization, Lanczos downscaling.

Images are 2D float numpy arrays, shape (height, width), intensities
nominally in [0, 1] until standardization. The augmentation pipeline
order is fixed: geometry, CLAHE, noise, standardize.

CLAHE grid size and clip limit are themselves augmented:

    g = round(k + a),  a ~ Uniform(-log2 k, +log2 k),  clamped to g >= 2
    c = l + a',        a' ~ Uniform(-log2 l, +log2 l), clamped to c >= 0.01

so the nominal grid k=8 yields g in [5, 11]. Every function is pure and
deterministic for a given seed; nothing depends on thread scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AugmentSpec",
    "GeometryParams",
    "draw_geometry_params",
    "apply_affine",
    "augment_geometry",
    "draw_clahe_params",
    "clahe_params",
    "clip_histogram",
    "clahe",
    "gaussian_noise",
    "standardize",
    "standardize_with",
    "lanczos_downscale",
    "full_pipeline",
    "shannon_entropy",
    "write_pgm",
    "read_pgm",
]

CLIP_LIMIT_FLOOR = 0.01
_NBINS = 256


@dataclass(frozen=True)
class AugmentSpec:
    """Augmentation ranges. Zero maxima / disabled flags switch a transform off."""

    allow_hflip: bool = True
    allow_vflip: bool = True
    max_rotation: float = 20.0
    max_shear: float = 0.20
    max_zoom: float = 0.20
    max_shift: float = 0.20
    clahe_grid: int = 8
    clahe_clip: float = 2.0
    apply_clahe: bool = True
    noise_sigma: float = 0.01

    def __post_init__(self) -> None:
        for name in ("max_rotation", "max_shear", "max_zoom", "max_shift", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.clahe_grid < 2:
            raise ValueError("clahe_grid must be >= 2")
        if self.clahe_clip <= 0:
            raise ValueError("clahe_clip must be > 0")

    @property
    def geometry_enabled(self) -> bool:
        return (
            self.allow_hflip
            or self.allow_vflip
            or self.max_rotation > 0
            or self.max_shear > 0
            or self.max_zoom > 0
            or self.max_shift > 0
        )


@dataclass(frozen=True)
class GeometryParams:
    hflip: bool = False
    vflip: bool = False
    rotation_deg: float = 0.0
    shear: float = 0.0
    zoom: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)  # (dx, dy) in pixels


def _validate_image(img) -> np.ndarray:
    a = np.asarray(img, dtype=float)
    if a.ndim != 2 or a.size == 0:
        raise ValueError("image must be a non-empty 2D array")
    if not np.all(np.isfinite(a)):
        raise ValueError("image must be finite")
    return a


def draw_geometry_params(spec: AugmentSpec, rng: np.random.Generator, shape: tuple[int, int]) -> GeometryParams:
    """One independent uniform draw per enabled transform, in a fixed order."""
    h, w = shape
    hflip = bool(rng.uniform() < 0.5) if spec.allow_hflip else False
    vflip = bool(rng.uniform() < 0.5) if spec.allow_vflip else False
    rot = float(rng.uniform(-spec.max_rotation, spec.max_rotation)) if spec.max_rotation > 0 else 0.0
    shear = float(rng.uniform(-spec.max_shear, spec.max_shear)) if spec.max_shear > 0 else 0.0
    zoom = float(rng.uniform(1 - spec.max_zoom, 1 + spec.max_zoom)) if spec.max_zoom > 0 else 1.0
    if spec.max_shift > 0:
        dx = float(rng.uniform(-spec.max_shift, spec.max_shift)) * w
        dy = float(rng.uniform(-spec.max_shift, spec.max_shift)) * h
    else:
        dx = dy = 0.0
    return GeometryParams(hflip, vflip, rot, shear, zoom, (dx, dy))


def apply_affine(img, params: GeometryParams, fill: float | None = None) -> np.ndarray:
    """Resample through the affine map flips -> rotation -> shear -> zoom -> shift,
    about the image center, bilinear, out-of-bounds filled with the image mean."""
    a = _validate_image(img)
    h, w = a.shape
    if fill is None:
        fill = float(a.mean())

    theta = math.radians(params.rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    flip = np.array([[-1.0 if params.hflip else 1.0, 0.0], [0.0, -1.0 if params.vflip else 1.0]])
    rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]])
    sh = np.array([[1.0, params.shear], [0.0, 1.0]])
    zm = np.array([[params.zoom, 0.0], [0.0, params.zoom]])
    fwd = zm @ sh @ rot @ flip
    inv = np.linalg.inv(fwd)

    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    xs = np.arange(w) - cx - params.shift[0]
    ys = np.arange(h) - cy - params.shift[1]
    gx, gy = np.meshgrid(xs, ys)
    sx = inv[0, 0] * gx + inv[0, 1] * gy + cx
    sy = inv[1, 0] * gx + inv[1, 1] * gy + cy

    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx = sx - x0
    fy = sy - y0

    out = np.zeros_like(a)
    for dy_i, dx_i, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi = x0 + dx_i
        yi = y0 + dy_i
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        vals = np.where(valid, a[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)], fill)
        out += wgt * vals
    return out


def augment_geometry(img, spec: AugmentSpec, seed: int) -> np.ndarray:
    a = _validate_image(img)
    rng = np.random.default_rng(seed)
    params = draw_geometry_params(spec, rng, a.shape)
    return apply_affine(a, params)


def draw_clahe_params(k: int, l: float, rng: np.random.Generator) -> tuple[int, float]:
    if k < 2:
        raise ValueError("nominal grid k must be >= 2")
    if l <= 0:
        raise ValueError("nominal clip l must be > 0")
    half_g = math.log2(k)
    a = rng.uniform(-half_g, half_g)
    g = max(2, round(k + a))
    half_c = math.log2(l)
    lo, hi = sorted((-half_c, half_c))
    a2 = rng.uniform(lo, hi)
    c = max(CLIP_LIMIT_FLOOR, l + a2)
    return int(g), float(c)


def clahe_params(k: int, l: float, seed: int) -> tuple[int, float]:
    """Randomized CLAHE parameters (g, c) for nominal grid k and clip limit l."""
    return draw_clahe_params(k, l, np.random.default_rng(seed))


def clip_histogram(hist: np.ndarray, ceiling: int) -> tuple[np.ndarray, float]:
    """Clip bins at ceiling and return (clipped histogram, total excess)."""
    clipped = np.minimum(hist, ceiling)
    excess = float(hist.sum() - clipped.sum())
    return clipped, excess


def clahe(img, grid: int, clip: float) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    The image is divided into grid x grid tiles; each tile's 256-bin
    histogram is clipped at ceiling = max(1, round(clip * tile_pixels / 256)),
    the excess redistributed equally, and the tile mapping is its CDF.
    Pixels are remapped by bilinear interpolation between the four
    surrounding tile mappings.
    """
    a = _validate_image(img)
    h, w = a.shape
    if grid < 2:
        raise ValueError("grid must be >= 2")
    if clip <= 0:
        raise ValueError("clip must be > 0")
    if h < grid or w < grid:
        raise ValueError(f"image {a.shape} smaller than {grid}x{grid} grid")

    bins = np.minimum((np.clip(a, 0.0, 1.0) * _NBINS).astype(int), _NBINS - 1)
    row_edges = np.linspace(0, h, grid + 1).astype(int)
    col_edges = np.linspace(0, w, grid + 1).astype(int)
    centers_y = (row_edges[:-1] + row_edges[1:] - 1) / 2.0
    centers_x = (col_edges[:-1] + col_edges[1:] - 1) / 2.0

    # All tile histograms in one bincount: key = tile_id * 256 + pixel bin.
    tile_row = np.searchsorted(row_edges, np.arange(h), side="right") - 1
    tile_col = np.searchsorted(col_edges, np.arange(w), side="right") - 1
    tile_id = tile_row[:, None] * grid + tile_col[None, :]
    hists = np.bincount(
        (tile_id * _NBINS + bins).ravel(), minlength=grid * grid * _NBINS
    ).reshape(grid * grid, _NBINS).astype(float)
    npix = hists.sum(axis=1)
    ceilings = np.maximum(1, np.round(clip * npix / _NBINS))
    clipped = np.minimum(hists, ceilings[:, None])
    excess = hists.sum(axis=1) - clipped.sum(axis=1)
    clipped += (excess / _NBINS)[:, None]
    luts = (np.cumsum(clipped, axis=1) / npix[:, None]).reshape(grid, grid, _NBINS)

    # Bilinear interpolation between tile-center mappings.
    ridx = np.arange(h)
    cidx = np.arange(w)
    i1 = np.clip(np.searchsorted(centers_y, ridx), 0, grid - 1)
    i0 = np.clip(i1 - 1, 0, grid - 1)
    j1 = np.clip(np.searchsorted(centers_x, cidx), 0, grid - 1)
    j0 = np.clip(j1 - 1, 0, grid - 1)
    dy = centers_y[i1] - centers_y[i0]
    wy = np.where(dy > 0, np.clip((ridx - centers_y[i0]) / np.where(dy > 0, dy, 1.0), 0.0, 1.0), 0.0)
    dx = centers_x[j1] - centers_x[j0]
    wx = np.where(dx > 0, np.clip((cidx - centers_x[j0]) / np.where(dx > 0, dx, 1.0), 0.0, 1.0), 0.0)

    wy_col = wy[:, None]
    wx_row = wx[None, :]
    i0c, i1c = i0[:, None], i1[:, None]
    j0r, j1r = j0[None, :], j1[None, :]
    out = (
        (1 - wy_col) * (1 - wx_row) * luts[i0c, j0r, bins]
        + (1 - wy_col) * wx_row * luts[i0c, j1r, bins]
        + wy_col * (1 - wx_row) * luts[i1c, j0r, bins]
        + wy_col * wx_row * luts[i1c, j1r, bins]
    )
    return np.clip(out, 0.0, 1.0)


def gaussian_noise(img, sigma: float, seed: int | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    a = _validate_image(img)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return a.copy()
    if rng is None:
        rng = np.random.default_rng(seed)
    return a + rng.normal(0.0, sigma, size=a.shape)


def standardize(img) -> np.ndarray:
    """Zero-mean unit-variance per image; constant images map to zeros."""
    a = _validate_image(img)
    sd = float(a.std())
    if sd < 1e-12:
        return np.zeros_like(a)
    return (a - a.mean()) / sd


def standardize_with(img, mean: float, std: float) -> np.ndarray:
    """Dataset-level standardization with precomputed statistics."""
    a = _validate_image(img)
    if std <= 0:
        raise ValueError("std must be > 0")
    return (a - mean) / std


def _lanczos3_weights(n_in: int, factor: int) -> np.ndarray:
    """Row-normalized (n_out, n_in) Lanczos-3 resampling matrix, edge-clamped."""
    n_out = n_in // factor
    support = 3.0 * factor
    mat = np.zeros((n_out, n_in))
    for o in range(n_out):
        center = (o + 0.5) * factor - 0.5
        lo = int(math.ceil(center - support))
        hi = int(math.floor(center + support))
        for i in range(lo, hi + 1):
            t = (i - center) / factor
            if abs(t) >= 3.0:
                continue
            lz = np.sinc(t) * np.sinc(t / 3.0)
            mat[o, min(max(i, 0), n_in - 1)] += lz
    mat /= mat.sum(axis=1, keepdims=True)
    return mat


def lanczos_downscale(img, factor: int) -> np.ndarray:
    """Separable Lanczos-3 downscale by an integer factor dividing both dims."""
    a = _validate_image(img)
    h, w = a.shape
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide image dims {a.shape}")
    if factor == 1:
        return a.copy()
    wy = _lanczos3_weights(h, factor)
    wx = _lanczos3_weights(w, factor)
    return wy @ a @ wx.T


def full_pipeline(img, spec: AugmentSpec, seed: int) -> np.ndarray:
    """Geometry -> CLAHE -> Gaussian noise -> standardize, one rng stream."""
    a = _validate_image(img)
    rng = np.random.default_rng(seed)
    if spec.geometry_enabled:
        a = apply_affine(a, draw_geometry_params(spec, rng, a.shape))
    if spec.apply_clahe:
        g, c = draw_clahe_params(spec.clahe_grid, spec.clahe_clip, rng)
        a = clahe(a, g, c)
    if spec.noise_sigma > 0:
        a = gaussian_noise(a, spec.noise_sigma, rng=rng)
    return standardize(a)


def shannon_entropy(img, bins: int = _NBINS) -> float:
    a = _validate_image(img)
    hist, _ = np.histogram(np.clip(a, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    p = hist[hist > 0] / a.size
    return float(-np.sum(p * np.log2(p)))


def write_pgm(path, img) -> None:
    """8-bit binary PGM (P5); intensities in [0,1] quantized to 0..255."""
    a = _validate_image(img)
    q = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM back to float intensities in [0,1]."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # Header: magic, width, height, maxval; '#' comments allowed between tokens.
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    raw = data[pos : pos + w * h]
    if len(raw) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(float) / 255.0
