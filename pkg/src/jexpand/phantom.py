"""Synthetic paired data: smooth 2D deformation fields, their Jacobian maps,
and expiration-like slices statistically coupled to the expansion map.

Ground truth comes from analytic fields rather than registration, so the
Jacobian operator has an exact oracle: central differences reproduce affine
determinants to machine precision, and smooth fields admit a fine-step
numerical reference through the continuous blob interpolant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

BACKGROUND_HU = -1024.0
BACKGROUND_J = 1.0
_HU_LO, _HU_HI = -950.0, 50.0       # fixed monotone J -> HU map endpoints
_J_REF_LO, _J_REF_HI = 0.05, 3.4    # reference J range for that map
_MIN_J = 0.05
_TEXTURE_SD_HU = 20.0
_VD_GRADIENT_SPAN = 0.15            # relative ventral-dorsal J modulation

# severity in [0, 1] maps linearly onto these in-lung J statistics,
# mirroring the monotone decay of global stats with disease stage
SEVERITY_MEAN_RANGE = (1.9, 1.1)
SEVERITY_SD_RANGE = (0.5, 0.15)


class PhantomGenerationError(RuntimeError):
    """The field scaler could not reach min J > 0.05 within its halving budget."""


@dataclass
class PhantomSpec:
    """Knobs for one synthetic pair; a pure function of ``seed``."""

    size: tuple = (64, 64)
    severity: float = 0.5
    num_blobs: int = 8
    smoothness_scale: float = 8.0
    noise_sd: float = 25.0
    seed: int = 0

    def __post_init__(self):
        h, w = self.size
        if h < 16 or w < 16:
            raise ValueError(f"phantom size {self.size} below minimum 16x16")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"severity {self.severity} outside [0, 1]")
        if self.num_blobs < 0:
            raise ValueError("num_blobs must be >= 0")
        if self.smoothness_scale <= 0:
            raise ValueError("smoothness_scale must be positive")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")


@dataclass
class DeformationField:
    """Displacement field u over an (H, W) grid; phi(p) = p + u(p).

    ``kind`` is "analytic-affine" (u(p) = (A - I) p + t, exactly) or
    "smooth-random" (sum of Gaussian-windowed vector bumps). Both store their
    analytic parameters so the continuous map can be evaluated off-grid.
    """

    grid_shape: tuple
    kind: str
    affine: np.ndarray | None = None        # 2x2 matrix A
    translation: np.ndarray | None = None   # length-2 t
    blob_centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    blob_amps: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    blob_width: float = 1.0

    def displacement_at(self, points):
        """Continuous displacement at float (..., 2) grid coordinates."""
        p = np.asarray(points, dtype=np.float64)
        if self.kind == "analytic-affine":
            A = np.asarray(self.affine, dtype=np.float64)
            t = np.asarray(self.translation, dtype=np.float64)
            return p @ (A - np.eye(2)).T + t
        u = np.zeros_like(p)
        w2 = 2.0 * self.blob_width ** 2
        for c, a in zip(self.blob_centers, self.blob_amps):
            d2 = ((p - c) ** 2).sum(axis=-1)
            u += np.exp(-d2 / w2)[..., None] * a
        return u

    def displacement_grid(self):
        """(H, W, 2) displacement sampled at integer grid points."""
        h, w = self.grid_shape
        rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
        pts = np.stack([rr, cc], axis=-1)
        u = self.displacement_at(pts)
        if not np.all(np.isfinite(u)):
            raise ValueError("deformation field has non-finite displacement")
        return u


def affine_field(grid_shape, A, t=(0.0, 0.0)):
    return DeformationField(grid_shape=tuple(grid_shape), kind="analytic-affine",
                            affine=np.asarray(A, np.float64),
                            translation=np.asarray(t, np.float64))


def identity_field(grid_shape):
    return affine_field(grid_shape, np.eye(2), (0.0, 0.0))


@dataclass
class JacobianMap:
    """Per-voxel local volume-change ratio of a deformation field."""

    grid_shape: tuple
    values: np.ndarray
    num_nonpositive: int = 0

    @property
    def orientation_preserving(self):
        return self.num_nonpositive == 0


def jacobian_determinant(f):
    """det(d phi / dp) via central differences (one-sided at the boundary).

    Central differences are exact for affine maps, which anchors correctness;
    phi(p) = p + u(p), so J = det(I + grad u).
    """
    h, w = f.grid_shape
    if h < 3 or w < 3:
        raise ValueError(f"jacobian_determinant: grid {f.grid_shape} below 3x3")
    u = f.displacement_grid()
    du0_d0, du0_d1 = np.gradient(u[..., 0], edge_order=1)
    du1_d0, du1_d1 = np.gradient(u[..., 1], edge_order=1)
    jac = (1.0 + du0_d0) * (1.0 + du1_d1) - du0_d1 * du1_d0
    return JacobianMap(grid_shape=f.grid_shape, values=jac,
                       num_nonpositive=int(np.count_nonzero(jac <= 0.0)))


def make_smooth_field(spec):
    """Random sum-of-bumps field, rescaled so min J > 0.05; pure in ``spec.seed``."""
    h, w = spec.size
    rng = np.random.default_rng([int(spec.seed), 0x5F1E1D])
    n = int(spec.num_blobs)
    if n == 0:
        return DeformationField(grid_shape=(h, w), kind="smooth-random",
                                blob_width=float(spec.smoothness_scale))
    centers = np.column_stack([
        rng.uniform(0.1 * h, 0.9 * h, size=n),
        rng.uniform(0.1 * w, 0.9 * w, size=n),
    ])
    amps = rng.normal(0.0, 0.45 * spec.smoothness_scale, size=(n, 2))
    for _ in range(20):
        cand = DeformationField(grid_shape=(h, w), kind="smooth-random",
                                blob_centers=centers, blob_amps=amps,
                                blob_width=float(spec.smoothness_scale))
        if jacobian_determinant(cand).values.min() > _MIN_J:
            return cand
        amps = amps * 0.5
    raise PhantomGenerationError(
        f"could not reach min J > {_MIN_J} within 20 amplitude halvings (seed {spec.seed})")


def lung_mask(size, rng):
    """Elliptical in-lung region with mild per-phantom jitter."""
    h, w = size
    cy = h / 2.0 + rng.uniform(-0.02, 0.02) * h
    cx = w / 2.0 + rng.uniform(-0.02, 0.02) * w
    ay = 0.42 * h * (1.0 + rng.uniform(-0.05, 0.05))
    ax = 0.38 * w * (1.0 + rng.uniform(-0.05, 0.05))
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return (((rr - cy) / ay) ** 2 + ((cc - cx) / ax) ** 2) <= 1.0


def intensity_from_j(j):
    """Fixed monotone (decreasing) map from J to HU-like intensity."""
    t = np.clip((np.asarray(j, np.float64) - _J_REF_LO) / (_J_REF_HI - _J_REF_LO), 0.0, 1.0)
    return _HU_HI - (_HU_HI - _HU_LO) * t


def make_phantom_pair(spec):
    """One (image in HU, JacobianMap) pair.

    The raw Jacobian of a smooth random field gets a ventral-dorsal linear
    gradient and is then affinely renormalized (over the lung mask) to the
    severity-controlled mean/SD targets and floored at 0.05. The image is a
    fixed monotone function of J plus smooth texture and white noise; outside
    the lung the image is exactly -1024 HU and J is exactly 1, so the mask is
    recoverable downstream. Degenerate constant fields (num_blobs = 0) skip
    the modulation and keep J = 1.
    """
    h, w = spec.size
    rng = np.random.default_rng([int(spec.seed), 0xA11CE])
    mask = lung_mask(spec.size, rng)

    fld = make_smooth_field(spec)
    j = jacobian_determinant(fld).values.copy()

    if np.std(j) > 1e-12:
        rows = (np.arange(h, dtype=np.float64) / max(h - 1, 1))[:, None]
        j = j * (1.0 + _VD_GRADIENT_SPAN * (rows - 0.5))
        target_mean = SEVERITY_MEAN_RANGE[0] + spec.severity * (
            SEVERITY_MEAN_RANGE[1] - SEVERITY_MEAN_RANGE[0])
        target_sd = SEVERITY_SD_RANGE[0] + spec.severity * (
            SEVERITY_SD_RANGE[1] - SEVERITY_SD_RANGE[0])
        mu, sd = float(j[mask].mean()), float(j[mask].std())
        j = (j - mu) / max(sd, 1e-12) * target_sd + target_mean
        j = np.maximum(j, _MIN_J)

    j = np.where(mask, j, BACKGROUND_J)

    texture = gaussian_filter(rng.standard_normal((h, w)), sigma=2.0)
    texture = texture / max(float(texture.std()), 1e-12) * _TEXTURE_SD_HU
    noise = rng.normal(0.0, spec.noise_sd, size=(h, w)) if spec.noise_sd > 0 else 0.0

    img = intensity_from_j(j) + texture + noise
    img = np.clip(img, -1000.0, 100.0)
    img = np.where(mask, img, BACKGROUND_HU)

    jmap = JacobianMap(grid_shape=(h, w), values=j,
                       num_nonpositive=int(np.count_nonzero(j <= 0.0)))
    return img.astype(np.float32), jmap
