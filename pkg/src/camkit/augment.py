"""Training-time view generation: square random crops, flips and
thin-plate-spline warps applied identically to every channel."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np


class TPSSolverError(np.linalg.LinAlgError):
    pass


class ImageSizeError(ValueError):
    pass


@dataclass
class AugmentConfig:
    crop_min: float = 0.8
    crop_max: float = 1.0
    hflip: float = 0.5
    vflip: float = 0.5
    tps_grid: int = 4
    tps_sigma: float = 0.05
    out_size: tuple[int, int] | None = None
    min_crop: int = 4

    def __post_init__(self):
        if not (0 < self.crop_min <= self.crop_max <= 1):
            raise ValueError(f"crop fractions must satisfy 0 < min <= max <= 1, got {self.crop_min}, {self.crop_max}")
        if self.tps_sigma < 0:
            raise ValueError("augment.tps_sigma must be >= 0")
        if self.tps_grid < 2:
            raise ValueError("augment.tps_grid must be >= 2")
        for p in (self.hflip, self.vflip):
            if not 0 <= p <= 1:
                raise ValueError("flip probabilities must lie in [0, 1]")


def derive_seed(global_seed: int, image_id: str, epoch: int) -> int:
    h = hashlib.blake2b(f"{global_seed}|{image_id}|{epoch}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def bilinear_sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample [C,H,W] at fractional pixel coordinates; zero outside the image."""
    c, h, w = img.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros((c,) + rows.shape, dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            wgt = np.where(ok, wr * wc, 0.0)
            vals = img[:, np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]
            out += vals * wgt
    return out


def _axis(n_out: int, n_in: int) -> np.ndarray:
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resize(img: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with corner alignment (identity when sizes match)."""
    c, h, w = img.shape
    oh, ow = out_size
    if (oh, ow) == (h, w):
        return np.array(img, dtype=np.float64)
    rows, cols = np.meshgrid(_axis(oh, h), _axis(ow, w), indexing="ij")
    return bilinear_sample(np.asarray(img, dtype=np.float64), rows, cols)


# ---------------------------------------------------------------------------
# thin-plate splines
# ---------------------------------------------------------------------------

def control_grid(g: int) -> np.ndarray:
    """g*g control points (x, y) on a regular grid spanning [-1, 1]^2."""
    t = np.linspace(-1.0, 1.0, g)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def tps_kernel(r2: np.ndarray) -> np.ndarray:
    """U(r) = r^2 log r^2, with U(0) = 0."""
    safe = np.where(r2 > 0, r2, 1.0)
    return np.where(r2 > 0, r2 * np.log(safe), 0.0)


def tps_fit(ctrl: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Radial weights [n,m] and affine part [3,m] interpolating ``values``."""
    n = ctrl.shape[0]
    d2 = ((ctrl[:, None, :] - ctrl[None, :, :]) ** 2).sum(-1)
    p = np.hstack([np.ones((n, 1)), ctrl])
    a = np.zeros((n + 3, n + 3))
    a[:n, :n] = tps_kernel(d2)
    a[:n, n:] = p
    a[n:, :n] = p.T
    rhs = np.zeros((n + 3, values.shape[1]))
    rhs[:n] = values
    if np.linalg.cond(a) > 1e12:
        raise TPSSolverError("singular thin-plate-spline system (degenerate control points)")
    sol = np.linalg.solve(a, rhs)
    return sol[:n], sol[n:]


def tps_field(ctrl: np.ndarray, displacements: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Evaluate the spline interpolating ``displacements`` at ``points`` [m,2]."""
    w, aff = tps_fit(ctrl, displacements)
    d2 = ((points[:, None, :] - ctrl[None, :, :]) ** 2).sum(-1)
    return tps_kernel(d2) @ w + aff[0] + points @ aff[1:]


def tps_warp(img, displacements: np.ndarray, out_size: tuple[int, int] | None = None):
    """Warp so content near control point i moves by ``displacements[i]``.

    Coordinates are normalised to [-1, 1] (x = columns, y = rows). The output
    pixel at p samples the input at p - field(p); every channel shares the
    same field.
    """
    data = np.asarray(img.data, dtype=np.float64)
    displacements = np.asarray(displacements, dtype=np.float64)
    if not np.isfinite(displacements).all():
        raise ValueError("non-finite TPS displacements")
    g = int(round(np.sqrt(displacements.shape[0])))
    if g * g != displacements.shape[0] or displacements.shape[1:] != (2,):
        raise ValueError(f"displacements must be [g*g, 2], got {displacements.shape}")
    _, h, w = data.shape
    oh, ow = out_size or (h, w)
    ys = np.linspace(-1.0, 1.0, oh) if oh > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, ow) if ow > 1 else np.zeros(1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    src = pts - tps_field(control_grid(g), displacements, pts)
    cols = (src[:, 0] + 1.0) * 0.5 * (w - 1)
    rows = (src[:, 1] + 1.0) * 0.5 * (h - 1)
    out = bilinear_sample(data, rows.reshape(oh, ow), cols.reshape(oh, ow))
    return replace(img, data=out)


# ---------------------------------------------------------------------------
# views
# ---------------------------------------------------------------------------

def augment_view(img, cfg: AugmentConfig, rng: np.random.Generator):
    data = np.asarray(img.data, dtype=np.float64)
    _, h, w = data.shape
    out_size = cfg.out_size or (h, w)
    short = min(h, w)
    if int(round(cfg.crop_min * short)) < cfg.min_crop:
        raise ImageSizeError(f"image {h}x{w} smaller than the minimum crop window of {cfg.min_crop}px")
    frac = rng.uniform(cfg.crop_min, cfg.crop_max) if cfg.crop_max > cfg.crop_min else cfg.crop_max
    side = max(cfg.min_crop, int(round(frac * short)))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    if side == h == w:
        view = data
    else:
        view = data[:, top : top + side, left : left + side]
    view = resize(view, out_size)
    if rng.random() < cfg.hflip:
        view = view[:, :, ::-1]
    if rng.random() < cfg.vflip:
        view = view[:, ::-1, :]
    view = np.ascontiguousarray(view)
    out = replace(img, data=view)
    if cfg.tps_sigma > 0:
        disp = rng.uniform(-cfg.tps_sigma, cfg.tps_sigma, size=(cfg.tps_grid**2, 2))
        out = tps_warp(out, disp)
    return out


def make_view_pair(img, cfg: AugmentConfig, rng_seed: int):
    """Two independently augmented views of ``img``, deterministic in the seed."""
    rng = np.random.default_rng(rng_seed)
    return augment_view(img, cfg, rng), augment_view(img, cfg, rng)
