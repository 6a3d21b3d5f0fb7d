# ======================================================
# backend/shape.py
# Contact geometry from frame colours
#
#   RGB → Lambertian three-light inversion → NormalMap
#   NormalMap → gradients → Poisson (red-black SOR) → HeightMap
#
# Image frame: x = column (right), y = row (down),
# z = toward the camera. Flat surface normal is (0, 0, 1).
# ======================================================

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from backend.errors import ConvergenceError, LightConfigError
from backend.imageproc import Frame, LUMA

log = logging.getLogger(__name__)


# ======================================================
# TYPES
# ======================================================

@dataclass(frozen=True)
class LightConfig:
    directions: np.ndarray     # (3, 3) rows: unit vector toward the R, G, B light
    gains: np.ndarray          # (3,)
    ambient: np.ndarray        # (3,)

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=float).reshape(3, 3)
        norms = np.linalg.norm(d, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise LightConfigError("light directions must be unit vectors", key="shape.light_azimuths_deg")
        gains = np.asarray(self.gains, dtype=float).reshape(3)
        if np.any(gains <= 0):
            raise LightConfigError("light gains must be positive", key="shape.gains")
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "ambient", np.asarray(self.ambient, dtype=float).reshape(3))
        if not np.isfinite(self.condition_number) or self.condition_number > 1e8:
            raise LightConfigError(
                f"light direction matrix is singular (cond={self.condition_number:.3e})",
                key="shape.light_azimuths_deg",
            )

    @classmethod
    def from_angles(cls, elevation_deg: float, azimuths_deg, gains, ambient) -> "LightConfig":
        e = np.radians(elevation_deg)
        a = np.radians(np.asarray(azimuths_deg, dtype=float))
        dirs = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.full(3, np.sin(e))], axis=1)
        return cls(dirs, gains, ambient)

    @classmethod
    def from_config(cls, shape_cfg) -> "LightConfig":
        return cls.from_angles(
            shape_cfg.light_elevation_deg,
            shape_cfg.light_azimuths_deg,
            shape_cfg.gains,
            shape_cfg.ambient,
        )

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.directions))

    @property
    def flat_level(self) -> np.ndarray:
        """Channel levels of an undeformed (0, 0, 1) surface."""
        return self.gains * np.maximum(self.directions[:, 2], 0.0) + self.ambient


@dataclass
class NormalMap:
    normals: np.ndarray     # (H, W, 3)
    valid: np.ndarray       # (H, W) bool

    @property
    def shape(self) -> Tuple[int, int]:
        return self.valid.shape

    @classmethod
    def flat(cls, height: int, width: int) -> "NormalMap":
        n = np.zeros((height, width, 3))
        n[..., 2] = 1.0
        return cls(n, np.ones((height, width), dtype=bool))


@dataclass
class HeightMap:
    height: np.ndarray      # (h, w) mm, mean zero over valid
    pitch: float            # mm per grid cell
    valid: np.ndarray       # (h, w) bool
    stride: int = 1         # full-resolution pixels per grid cell

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height.shape

    def peak(self) -> float:
        """Height of the highest valid cell above the median (flat) level."""
        if not self.valid.any():
            return 0.0
        v = self.height[self.valid]
        return float(v.max() - np.median(v))


# ======================================================
# FORWARD MODEL
# ======================================================

def normals_from_height(height: np.ndarray, pitch: float) -> np.ndarray:
    """Unit normals (H, W, 3) of a height field sampled at ``pitch`` mm."""
    gy, gx = np.gradient(np.asarray(height, dtype=float), pitch)
    n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def render_shading(normals: np.ndarray, lights: LightConfig) -> np.ndarray:
    """I_c = gain_c · max(0, n·l_c) + ambient_c, float (H, W, 3)."""
    dots = np.asarray(normals, dtype=float) @ lights.directions.T
    return lights.gains * np.maximum(dots, 0.0) + lights.ambient


# ======================================================
# INVERSE MODEL
# ======================================================

def normals_from_rgb(f: Union[Frame, np.ndarray], lights: LightConfig,
                     saturation: float = 250, min_norm: float = 0.1,
                     marker_bounds: Optional[Tuple[float, float]] = None,
                     dilation: int = 0) -> NormalMap:
    """
    Per-pixel inversion of the Lambertian model with the clamp inactive.

    Invalid where a channel is saturated or at the shadow clamp, where the
    unnormalized solution is shorter than ``min_norm``, and (with
    ``marker_bounds`` = (t_low, t_high)) where the luminance marks a marker.
    The invalid mask is grown by ``dilation`` pixels.
    """
    rgb = f.pixels if isinstance(f, Frame) else f
    rgb = np.asarray(rgb, dtype=float)

    inv = np.linalg.inv(lights.directions)
    shifted = (rgb - lights.ambient) / lights.gains
    raw = shifted @ inv.T
    length = np.linalg.norm(raw, axis=-1)

    invalid = np.any(rgb >= saturation, axis=-1)
    invalid |= np.any(rgb <= lights.ambient, axis=-1)
    invalid |= length < min_norm
    if marker_bounds is not None:
        gray = rgb @ LUMA
        invalid |= (gray < marker_bounds[0]) | (gray > marker_bounds[1])
    if dilation > 0:
        invalid = ndimage.binary_dilation(invalid, iterations=int(dilation))

    normals = np.zeros_like(raw)
    ok = ~invalid
    normals[ok] = raw[ok] / length[ok, None]
    normals[~ok] = (0.0, 0.0, 1.0)
    return NormalMap(normals, ok)


def fill_invalid(n: NormalMap, radius: int = 3) -> NormalMap:
    """
    Inverse-distance fill of invalid pixels from valid pixels within
    ``radius``. Pixels with no valid neighbour stay invalid.
    """
    if radius <= 0 or n.valid.all():
        return n

    h, w = n.valid.shape
    r = int(radius)
    pad_n = np.pad(n.normals * n.valid[..., None], ((r, r), (r, r), (0, 0)))
    pad_v = np.pad(n.valid.astype(float), r)

    acc = np.zeros((h, w, 3))
    wsum = np.zeros((h, w))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            d = np.hypot(dx, dy)
            if d == 0 or d > r:
                continue
            wt = 1.0 / d
            acc += wt * pad_n[r + dy:r + dy + h, r + dx:r + dx + w]
            wsum += wt * pad_v[r + dy:r + dy + h, r + dx:r + dx + w]

    fill = (~n.valid) & (wsum > 0)
    out = n.normals.copy()
    vec = acc[fill] / wsum[fill, None]
    norm = np.linalg.norm(vec, axis=-1, keepdims=True)
    good = norm[:, 0] > 1e-9
    vec[good] /= norm[good]
    idx = np.argwhere(fill)[good]
    out[idx[:, 0], idx[:, 1]] = vec[good]

    valid = n.valid.copy()
    valid[idx[:, 0], idx[:, 1]] = True
    log.debug("Filled %d of %d invalid normals", len(idx), int((~n.valid).sum()))
    return NormalMap(out, valid)


def gradients_from_normals(n: NormalMap, min_nz: float = 1e-6):
    """(p, q, valid) with p = −nx/nz, q = −ny/nz."""
    nz = n.normals[..., 2]
    valid = n.valid & (nz > min_nz)
    safe = np.where(valid, nz, 1.0)
    p = np.where(valid, -n.normals[..., 0] / safe, 0.0)
    q = np.where(valid, -n.normals[..., 1] / safe, 0.0)
    return p, q, valid


def block_average(p: np.ndarray, q: np.ndarray, valid: np.ndarray, stride: int):
    """Mean gradients over stride×stride blocks; a block needs a quarter of its pixels valid."""
    if stride == 1:
        return p, q, valid
    h, w = valid.shape
    hb, wb = h // stride, w // stride
    crop = (slice(0, hb * stride), slice(0, wb * stride))

    def blocks(a):
        return a[crop].reshape(hb, stride, wb, stride).sum(axis=(1, 3))

    v = valid.astype(float)
    count = blocks(v)
    ok = count >= 0.25 * stride * stride
    safe = np.where(ok, count, 1.0)
    return (
        np.where(ok, blocks(p * v) / safe, 0.0),
        np.where(ok, blocks(q * v) / safe, 0.0),
        ok,
    )


# ======================================================
# POISSON INTEGRATION
# ======================================================

class _EdgeGraph:
    """
    4-neighbour edges between valid cells. Edge targets are the
    trapezoid integrals of the gradient along the edge.
    """

    def __init__(self, p: np.ndarray, q: np.ndarray, mask: np.ndarray, pitch: float):
        self.eh = (mask[:, :-1] & mask[:, 1:]).astype(float)
        self.ev = (mask[:-1, :] & mask[1:, :]).astype(float)
        gh = pitch * 0.5 * (p[:, :-1] + p[:, 1:]) * self.eh
        gv = pitch * 0.5 * (q[:-1, :] + q[1:, :]) * self.ev

        deg = np.zeros(mask.shape)
        deg[:, :-1] += self.eh
        deg[:, 1:] += self.eh
        deg[:-1, :] += self.ev
        deg[1:, :] += self.ev
        self.deg = deg

        # incoming minus outgoing
        d = np.zeros(mask.shape)
        d[:, 1:] += gh
        d[:, :-1] -= gh
        d[1:, :] += gv
        d[:-1, :] -= gv
        self.d = d

    def neighbour_sum(self, z: np.ndarray) -> np.ndarray:
        s = np.zeros_like(z)
        s[:, :-1] += self.eh * z[:, 1:]
        s[:, 1:] += self.eh * z[:, :-1]
        s[:-1, :] += self.ev * z[1:, :]
        s[1:, :] += self.ev * z[:-1, :]
        return s

    def residual(self, z: np.ndarray) -> np.ndarray:
        return self.d - (self.deg * z - self.neighbour_sum(z))


def discrete_divergence(p, q, mask, pitch: float) -> np.ndarray:
    """∂p/∂x + ∂q/∂y on the masked edge graph (outgoing minus incoming edge flux per unit area)."""
    return -_EdgeGraph(p, q, mask, pitch).d / pitch ** 2


def poisson_residual(z, p, q, mask, pitch: float) -> np.ndarray:
    """Laplacian of z minus the discrete divergence of (p, q) (zero off-mask)."""
    g = _EdgeGraph(p, q, mask, pitch)
    return np.where(mask, g.residual(z), 0.0) / pitch ** 2


def solve_poisson(p, q, mask, pitch: float, omega: float = 1.9,
                  tolerance: float = 1e-8, max_sweeps: int = 20000,
                  check_every: int = 10) -> np.ndarray:
    """
    Red-black SOR on the masked graph Laplacian. Stops when the residual
    norm drops below ``tolerance`` relative to the right-hand side.
    Returns z with zero mean over the mask.
    """
    g = _EdgeGraph(p, q, mask, pitch)
    z = np.zeros(mask.shape)
    rhs = float(np.linalg.norm(g.d))
    if rhs == 0.0:
        return z

    active = mask & (g.deg > 0)
    yy, xx = np.indices(mask.shape)
    red = active & ((yy + xx) % 2 == 0)
    black = active & ((yy + xx) % 2 == 1)
    safe_deg = np.where(active, g.deg, 1.0)

    rel = np.inf
    for sweep in range(1, max_sweeps + 1):
        for colour in (red, black):
            target = (g.neighbour_sum(z) + g.d) / safe_deg
            z = np.where(colour, z + omega * (target - z), z)

        if sweep % check_every == 0 or sweep == max_sweeps:
            rel = float(np.linalg.norm(np.where(active, g.residual(z), 0.0))) / rhs
            if rel < tolerance:
                log.debug("Poisson converged in %d sweeps (rel residual %.2e)", sweep, rel)
                break
    else:
        z = z - z[mask].mean()
        raise ConvergenceError(
            f"Poisson relaxation did not converge in {max_sweeps} sweeps",
            best=z, residual=rel,
        )

    return np.where(mask, z - z[mask].mean(), 0.0)


def integrate_normals(n: NormalMap, pitch: float, omega: float = 1.9,
                      tolerance: float = 1e-8, max_sweeps: int = 20000,
                      stride: int = 1) -> HeightMap:
    """
    Height map from normals. With ``stride`` > 1 the gradients are
    block-averaged first and the returned pitch is pitch·stride.
    """
    p, q, valid = gradients_from_normals(n)
    p, q, valid = block_average(p, q, valid, stride)
    cell = pitch * stride
    z = solve_poisson(p, q, valid, cell, omega, tolerance, max_sweeps)
    return HeightMap(z, cell, valid, stride)


def contact_area(hm: HeightMap, threshold_mm: float) -> float:
    """Full-resolution px² of cells raised more than ``threshold_mm`` above the flat level."""
    if not hm.valid.any():
        return 0.0
    base = np.median(hm.height[hm.valid])
    raised = hm.valid & (hm.height - base > threshold_mm)
    return float(raised.sum() * hm.stride * hm.stride)


def recover_height(f: Union[Frame, np.ndarray], lights: LightConfig, shape_cfg, pitch: float,
                   marker_bounds: Optional[Tuple[float, float]] = None) -> HeightMap:
    """normals_from_rgb → fill_invalid → integrate_normals with config settings."""
    n = normals_from_rgb(
        f, lights,
        saturation=shape_cfg.saturation,
        min_norm=shape_cfg.min_norm,
        marker_bounds=marker_bounds,
        dilation=shape_cfg.invalid_dilation,
    )
    n = fill_invalid(n, shape_cfg.fill_radius)
    return integrate_normals(
        n, pitch,
        omega=shape_cfg.omega,
        tolerance=shape_cfg.tolerance,
        max_sweeps=shape_cfg.max_sweeps,
        stride=shape_cfg.stride,
    )
