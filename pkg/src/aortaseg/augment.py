"""Divergence-transformation and random affine augmentation.

A divergence warp displaces pixels radially around an in-plane center,
weighted by a 2D Gaussian, so an axial slice is locally stretched
(divergent) or compressed (congruent). One field is built per augmentation
and applied identically to every axial slice, keeping image and mask
co-registered. Each patient gets 10 augmentations: 5 Gaussian placements
on a ring around the aorta, each in both modes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import AIR_HU, BACKGROUND_LABEL, LabelMask, Volume3D

RING_RADIUS_FACTOR = 1.5
RING_ANGLES_DEG = (0.0, 72.0, 144.0, 216.0, 288.0)


@dataclass(frozen=True)
class DivergenceSpec:
    center: tuple[float, float]
    sigma: float
    amplitude: float
    mode: str = "divergent"  # or "congruent"

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")
        if self.mode not in ("divergent", "congruent"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class DisplacementField2D:
    dx: np.ndarray
    dy: np.ndarray

    @property
    def dims(self) -> tuple[int, int]:
        return self.dx.shape

    def __neg__(self) -> "DisplacementField2D":
        return DisplacementField2D(-self.dx, -self.dy)


@dataclass(frozen=True)
class AffineSpec:
    rotation_deg: float
    scale: float
    translation: tuple[float, float]

    def __post_init__(self):
        if not 0.0 <= self.rotation_deg <= 15.0:
            raise ValueError("rotation must be in [0, 15] degrees")
        if not 0.7 <= self.scale <= 1.3:
            raise ValueError("scale must be in [0.7, 1.3]")


def gaussian_weight(i, j, spec: DivergenceSpec):
    """exp(-((i-ic)^2 + (j-jc)^2) / (2 sigma^2)); 1 at the center."""
    ic, jc = spec.center
    d2 = (np.asarray(i, dtype=np.float64) - ic) ** 2 + \
         (np.asarray(j, dtype=np.float64) - jc) ** 2
    return np.exp(-d2 / (2.0 * spec.sigma ** 2))


def build_divergence_field(dims: tuple[int, int],
                           spec: DivergenceSpec) -> DisplacementField2D:
    """Radial displacement amplitude * g(p) * unit(p - center), signed by mode."""
    nx, ny = dims
    ii, jj = np.meshgrid(np.arange(nx, dtype=np.float64),
                         np.arange(ny, dtype=np.float64), indexing="ij")
    ic, jc = spec.center
    ri, rj = ii - ic, jj - jc
    r = np.hypot(ri, rj)
    w = gaussian_weight(ii, jj, spec)
    sign = 1.0 if spec.mode == "divergent" else -1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        ui = np.where(r > 0, ri / r, 0.0)
        uj = np.where(r > 0, rj / r, 0.0)
    mag = sign * spec.amplitude * w
    return DisplacementField2D(mag * ui, mag * uj)


def warp_slice(src: np.ndarray, field: DisplacementField2D,
               order: int = 1, cval: float = AIR_HU) -> np.ndarray:
    """Backward warp one 2-D slice in double precision: out(p) = in(p - d(p))."""
    nx, ny = src.shape
    if field.dims != (nx, ny):
        raise ValueError(f"field dims {field.dims} do not match slice dims {(nx, ny)}")
    ii, jj = np.meshgrid(np.arange(nx, dtype=np.float64),
                         np.arange(ny, dtype=np.float64), indexing="ij")
    coords = np.stack([ii - field.dx, jj - field.dy])
    return ndimage.map_coordinates(src.astype(np.float64), coords, order=order,
                                   mode="constant", cval=cval)


def warp_slicewise(vol, field: DisplacementField2D, interp: str = "trilinear"):
    """Backward warp each axial slice: out(p) = in(p - d(p)).

    Images interpolate bilinearly in-plane; masks must use nearest.
    """
    is_mask = isinstance(vol, LabelMask)
    if is_mask and interp != "nearest":
        raise ValueError("mask warping requires interp='nearest'")
    if interp not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interp {interp!r}")
    nx, ny, _ = vol.dims
    if field.dims != (nx, ny):
        raise ValueError(f"field dims {field.dims} do not match in-plane dims {(nx, ny)}")
    cval = BACKGROUND_LABEL if is_mask else AIR_HU
    order = 0 if interp == "nearest" else 1
    src = vol.data.astype(np.float64)
    out = np.empty_like(src)
    for k in range(vol.dims[2]):
        out[:, :, k] = warp_slice(src[:, :, k], field, order=order, cval=cval)
    if is_mask:
        return LabelMask(np.rint(out).astype(np.int16), vol.spacing, vol.origin,
                         class_set=vol.class_set)
    return Volume3D(out.astype(np.float32), vol.spacing, vol.origin)


def _aorta_ring_centers(mask: LabelMask) -> list[tuple[float, float]]:
    """5 in-plane points on a ring around the aorta at its widest slice.

    Ring radius is RING_RADIUS_FACTOR times the mean in-plane radius of the
    foreground at the axial slice with the largest foreground area.
    """
    fg = mask.labels > 0
    per_slice = fg.sum(axis=(0, 1))
    if per_slice.max() == 0:
        raise ValueError("cannot place augmentation centers: empty mask")
    k = int(per_slice.argmax())
    pts = np.argwhere(fg[:, :, k])
    ci, cj = pts.mean(axis=0)
    mean_r = float(np.hypot(pts[:, 0] - ci, pts[:, 1] - cj).mean())
    ring = max(RING_RADIUS_FACTOR * mean_r, 1.0)
    return [(ci + ring * math.cos(math.radians(a)),
             cj + ring * math.sin(math.radians(a))) for a in RING_ANGLES_DEG]


def augment_patient(vol: Volume3D, mask: LabelMask, sigma: float = 30.0,
                    amplitude: float = 12.0) -> list[tuple[Volume3D, LabelMask]]:
    """All 10 divergence augmentations of one patient: 5 centers x 2 modes.

    Deterministic given the inputs; the caller adds the original scan to
    reach the 11-scans-per-patient total.
    """
    if vol.dims != mask.dims:
        raise ValueError("volume and mask are not co-registered")
    centers = _aorta_ring_centers(mask)
    out = []
    for center in centers:
        for mode in ("divergent", "congruent"):
            spec = DivergenceSpec(center=center, sigma=sigma,
                                  amplitude=amplitude, mode=mode)
            field = build_divergence_field(vol.dims[:2], spec)
            out.append((warp_slicewise(vol, field, "trilinear"),
                        warp_slicewise(mask, field, "nearest")))
    return out


def sample_affine(dims: tuple[int, int], rng: np.random.Generator) -> AffineSpec:
    """Draw rotation 0-15 deg, scale 0.7-1.3, translation +-10% of extent."""
    tmax = (0.1 * dims[0], 0.1 * dims[1])
    return AffineSpec(
        rotation_deg=float(rng.uniform(0.0, 15.0)),
        scale=float(rng.uniform(0.7, 1.3)),
        translation=(float(rng.uniform(-tmax[0], tmax[0])),
                     float(rng.uniform(-tmax[1], tmax[1]))),
    )


def apply_affine(vol, spec: AffineSpec):
    """Apply the same in-plane rotation/scale/translation to every slice.

    Rotation and scaling are about the slice center. Backward mapping:
    source = center + R(-theta)/s * (dest - center - t).
    """
    is_mask = isinstance(vol, LabelMask)
    nx, ny, nz = vol.dims
    ci, cj = (nx - 1) / 2.0, (ny - 1) / 2.0
    th = math.radians(spec.rotation_deg)
    cos_t, sin_t = math.cos(th), math.sin(th)
    inv = np.array([[cos_t, sin_t], [-sin_t, cos_t]]) / spec.scale
    ii, jj = np.meshgrid(np.arange(nx, dtype=np.float64),
                         np.arange(ny, dtype=np.float64), indexing="ij")
    pi = ii - ci - spec.translation[0]
    pj = jj - cj - spec.translation[1]
    si = inv[0, 0] * pi + inv[0, 1] * pj + ci
    sj = inv[1, 0] * pi + inv[1, 1] * pj + cj
    cval = BACKGROUND_LABEL if is_mask else AIR_HU
    order = 0 if is_mask else 1
    src = vol.data.astype(np.float64)
    out = np.empty_like(src)
    coords = np.stack([si, sj])
    for k in range(nz):
        out[:, :, k] = ndimage.map_coordinates(src[:, :, k], coords,
                                               order=order, mode="constant",
                                               cval=cval)
    if is_mask:
        return LabelMask(np.rint(out).astype(np.int16), vol.spacing, vol.origin,
                         class_set=vol.class_set)
    return Volume3D(out.astype(np.float32), vol.spacing, vol.origin)


def random_affine(vol: Volume3D, mask: LabelMask,
                  rng: np.random.Generator) -> tuple[Volume3D, LabelMask]:
    """Sample one AffineSpec and apply it to both image and mask."""
    if vol.dims != mask.dims:
        raise ValueError("volume and mask are not co-registered")
    spec = sample_affine(vol.dims[:2], rng)
    return apply_affine(vol, spec), apply_affine(mask, spec)
