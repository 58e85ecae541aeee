"""Fractal-rough cross sections and channels, rasterized to binary masks.

Masks are ``uint8`` arrays of shape ``(h, w)``: 0 marks fluid, 1 marks
everything else (wall and exterior). Pixel ``(i, j)`` has its center at
``x = j + 0.5, y = i + 0.5``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateRadius,
    DisconnectedFluid,
    EmptyFluid,
    ExhaustedRetries,
    InvalidParams,
    OutOfCanvas,
)

HEIGHT = 128
WIDTH = 256
CURVE_VERTICES = 4096
MIN_VERTICES = 64
MIN_RADIUS_FRACTION = 0.15
MAX_RETRIES = 100


@dataclass(frozen=True)
class WMParams:
    base_radius: float
    amplitude: float
    fractal_dim: float
    spectral_exp: float
    n_terms: int
    scale_const: float = 1.0

    def validate(self) -> None:
        if not 1.0 < self.fractal_dim < 2.0:
            raise InvalidParams(f"fractal_dim must lie in (1, 2), got {self.fractal_dim}")
        if not self.spectral_exp > 1.0:
            raise InvalidParams(f"spectral_exp must exceed 1, got {self.spectral_exp}")
        if self.n_terms < 1:
            raise InvalidParams(f"n_terms must be >= 1, got {self.n_terms}")
        if not self.scale_const > 0:
            raise InvalidParams(f"scale_const must be positive, got {self.scale_const}")
        if not self.base_radius > 0:
            raise InvalidParams(f"base_radius must be positive, got {self.base_radius}")
        if not 0 <= self.amplitude < self.base_radius:
            raise InvalidParams("amplitude must satisfy 0 <= amplitude < base_radius")

    @property
    def decay_ratio(self) -> float:
        """Amplitude ratio between consecutive series terms."""
        return self.spectral_exp ** (-(2.0 - self.fractal_dim))


@dataclass(frozen=True)
class ParamRanges:
    fractal_dim: tuple[float, float] = (1.2, 1.8)
    spectral_exp: tuple[float, float] = (1.3, 2.5)
    n_terms: tuple[int, int] = (4, 12)
    amplitude_ratio: tuple[float, float] = (0.05, 0.25)
    base_radius: tuple[float, float] = (34.0, 44.0)
    scale_const: tuple[float, float] = (1.0, 1.0)


@dataclass
class ClosedCurve:
    vertices: np.ndarray  # (m, 2) columns x, y
    closed: bool = True

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2 or len(self.vertices) < 3:
            raise InvalidParams("a closed curve needs at least 3 (x, y) vertices")


@dataclass
class ChannelProfile:
    """Open channel between two sampled walls, inlet at column 0."""

    length: int
    top_wall: np.ndarray
    bottom_wall: np.ndarray
    half_height: float
    params: WMParams | None = field(default=None, compare=False)

    def __post_init__(self):
        self.top_wall = np.asarray(self.top_wall, dtype=np.float64)
        self.bottom_wall = np.asarray(self.bottom_wall, dtype=np.float64)
        if self.top_wall.shape != (self.length,) or self.bottom_wall.shape != (self.length,):
            raise InvalidParams("wall samples must have one value per column")
        if np.any(self.top_wall <= self.bottom_wall + 2.0):
            raise InvalidParams("channel closes: top wall must stay 2 px above bottom wall")


def default_n_terms(spectral_exp: float, width: int = WIDTH) -> int:
    """Smallest N with gamma**N >= width/2, capped at 32."""
    if spectral_exp <= 1.0:
        raise InvalidParams("spectral_exp must exceed 1")
    n = math.ceil(math.log(width / 2.0) / math.log(spectral_exp))
    return int(min(32, max(1, n)))


def wm_series(phi, params: WMParams):
    """Truncated Weierstrass-Mandelbrot series at ``phi`` (period 1).

    Evaluated on the fractional part of ``phi`` so that the closed curve
    is single valued for any real spectral exponent.
    """
    params.validate()
    phi = np.asarray(phi, dtype=np.float64)
    frac = phi - np.floor(phi)
    n = np.arange(params.n_terms, dtype=np.float64)
    weights = params.spectral_exp ** (-(2.0 - params.fractal_dim) * n)
    freqs = params.spectral_exp ** n
    terms = weights * np.cos(2.0 * np.pi * freqs * frac[..., None])
    out = params.scale_const ** (params.fractal_dim - 1.0) * terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def radius_at(params: WMParams, t):
    r = params.base_radius + params.amplitude * wm_series(np.asarray(t) / (2.0 * np.pi), params)
    if np.any(np.asarray(r) < MIN_RADIUS_FRACTION * params.base_radius):
        raise DegenerateRadius(
            f"radius drops below {MIN_RADIUS_FRACTION} * base_radius ({float(np.min(r)):.3f})"
        )
    return r


def sample_curve(params: WMParams, m_vertices: int = CURVE_VERTICES,
                 center: tuple[float, float] = (WIDTH / 2, HEIGHT / 2)) -> ClosedCurve:
    if m_vertices < MIN_VERTICES:
        raise InvalidParams(f"need at least {MIN_VERTICES} vertices, got {m_vertices}")
    t = 2.0 * np.pi * np.arange(m_vertices) / m_vertices
    r = radius_at(params, t)
    xy = np.stack([center[0] + r * np.cos(t), center[1] + r * np.sin(t)], axis=1)
    return ClosedCurve(xy)


def channel_profile(params: WMParams, width: int = WIDTH, center_y: float = HEIGHT / 2,
                    phase: float = 0.5) -> ChannelProfile:
    """Straight channel of half-height ``base_radius`` with W-M perturbed walls.

    The bottom wall uses the same series shifted by ``phase`` so the two
    walls are not mirror images.
    """
    x = (np.arange(width) + 0.5) / width
    h = params.base_radius
    top = center_y + h + params.amplitude * np.asarray(wm_series(x, params))
    bottom = center_y - h - params.amplitude * np.asarray(wm_series(x + phase, params))
    return ChannelProfile(width, top, bottom, h, params)


def _rasterize_polygon(vertices: np.ndarray, h: int, w: int) -> np.ndarray:
    x1, y1 = vertices[:, 0], vertices[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    xc = np.arange(w) + 0.5
    fluid = np.zeros((h, w), dtype=bool)
    for i in range(h):
        yc = i + 0.5
        hit = (y1 <= yc) != (y2 <= yc)
        if not hit.any():
            continue
        xa, ya, xb, yb = x1[hit], y1[hit], x2[hit], y2[hit]
        xs = np.sort(xa + (yc - ya) * (xb - xa) / (yb - ya))
        left = np.searchsorted(xs, xc, side="left")
        fluid[i] = (left % 2) == 1
    return fluid


def rasterize(shape: ClosedCurve | ChannelProfile, h: int = HEIGHT, w: int = WIDTH) -> np.ndarray:
    """Even-odd fill; pixel centers inside the fluid region get 0, others 1."""
    if isinstance(shape, ClosedCurve):
        v = shape.vertices
        if np.any(v[:, 0] < 0) or np.any(v[:, 0] >= w) or np.any(v[:, 1] < 0) or np.any(v[:, 1] >= h):
            raise OutOfCanvas("curve vertices fall outside the canvas")
        fluid = _rasterize_polygon(v, h, w)
    elif isinstance(shape, ChannelProfile):
        if shape.length != w:
            raise OutOfCanvas(f"profile length {shape.length} does not match canvas width {w}")
        if np.any(shape.bottom_wall < 0) or np.any(shape.top_wall >= h):
            raise OutOfCanvas("channel walls leave the canvas")
        yc = np.arange(h)[:, None] + 0.5
        fluid = (yc > shape.bottom_wall[None, :]) & (yc < shape.top_wall[None, :])
    else:
        raise TypeError(f"cannot rasterize {type(shape).__name__}")
    if not fluid.any():
        raise EmptyFluid("no pixel center falls inside the fluid region")
    return np.where(fluid, 0, 1).astype(np.uint8)


def fluid_components(mask: np.ndarray) -> int:
    _, n = ndimage.label(np.asarray(mask) == 0)  # default structure is 4-connected
    return int(n)


def validate_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype != np.uint8 or not np.isin(mask, (0, 1)).all():
        raise InvalidParams("mask must be uint8 with values in {0, 1}")
    n = fluid_components(mask)
    if n == 0:
        raise EmptyFluid("mask has no fluid pixels")
    if n > 1:
        raise DisconnectedFluid(f"fluid region splits into {n} 4-connected components")
    return mask


def _fits_canvas(params: WMParams, h: int, w: int, margin: float = 2.0) -> bool:
    t = 2.0 * np.pi * np.arange(CURVE_VERTICES) / CURVE_VERTICES
    r = params.base_radius + params.amplitude * wm_series(t / (2.0 * np.pi), params)
    return float(r.max()) <= min(h, w) / 2.0 - margin


def sample_params(seed: int, ranges: ParamRanges = ParamRanges(),
                  h: int = HEIGHT, w: int = WIDTH) -> WMParams:
    """Draw parameters from ``ranges``, rejecting degenerate or oversized curves."""
    rng = np.random.default_rng(seed)
    for _ in range(MAX_RETRIES):
        d = rng.uniform(*ranges.fractal_dim)
        g = rng.uniform(*ranges.spectral_exp)
        n = int(rng.integers(ranges.n_terms[0], ranges.n_terms[1] + 1))
        ratio = rng.uniform(*ranges.amplitude_ratio)
        r0 = rng.uniform(*ranges.base_radius)
        a = rng.uniform(*ranges.scale_const)
        params = WMParams(
            base_radius=float(r0),
            amplitude=float(ratio * r0),
            fractal_dim=float(d),
            spectral_exp=float(g),
            n_terms=min(n, default_n_terms(g, w)),
            scale_const=float(a),
        )
        try:
            params.validate()
            radius_at(params, 2.0 * np.pi * np.arange(CURVE_VERTICES) / CURVE_VERTICES)
        except (InvalidParams, DegenerateRadius):
            continue
        if _fits_canvas(params, h, w):
            return params
    raise ExhaustedRetries(f"no valid parameters after {MAX_RETRIES} draws (seed={seed})")


def write_pgm(mask: np.ndarray, path) -> None:
    """Binary PGM: fluid black (0), everything else white (255)."""
    mask = np.asarray(mask, dtype=np.uint8)
    h, w = mask.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + (mask * 255).astype(np.uint8).tobytes())
