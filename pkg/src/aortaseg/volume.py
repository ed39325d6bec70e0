"""Core volumetric data types and geometry operations.

Conventions used throughout the package:

* Arrays are indexed ``data[i, j, k]`` with i along x (fastest on disk),
  j along y, k along z (slowest). Axial slices are ``data[:, :, k]``.
* Voxel centers sit at ``origin + index * spacing`` in world millimetres.
* Bounding boxes use inclusive voxel indices on both ends, so a
  single-voxel box has ``lo == hi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

# Pad values for out-of-bounds samples: air for CT images, background for masks.
AIR_HU = -1024.0
BACKGROUND_LABEL = 0


class EmptyMaskError(ValueError):
    """Raised when an operation requires a nonempty foreground."""


def _check_geometry(dims, spacing):
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise ValueError(f"dims must be three positive ints, got {dims}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be three positive floats, got {spacing}")


@dataclass(frozen=True)
class Volume3D:
    """A 3D scalar grid of Hounsfield units with physical voxel geometry."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        _check_geometry(data.shape, self.spacing)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite HU values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def world_coords(self, index: Sequence[float]) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(index) * np.asarray(self.spacing)


@dataclass(frozen=True)
class LabelMask:
    """Co-registered integer label grid. Labels are mutually exclusive."""

    labels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    class_set: frozenset[int] = frozenset({0, 1, 2})

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("labels must be integer-valued")
        labels = labels.astype(np.int16, copy=False)
        _check_geometry(labels.shape, self.spacing)
        class_set = frozenset(int(c) for c in self.class_set)
        present = set(np.unique(labels).tolist())
        if not present <= class_set:
            raise ValueError(f"labels {present - class_set} outside class_set {sorted(class_set)}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "class_set", class_set)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def data(self) -> np.ndarray:
        return self.labels

    def binarize(self) -> "LabelMask":
        """Collapse all foreground classes to 1."""
        return LabelMask((self.labels > 0).astype(np.int16), self.spacing,
                         self.origin, class_set=frozenset({0, 1}))


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in voxel indices, inclusive on both ends."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]
    frame: str = ""

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"box lo {lo} exceeds hi {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    @property
    def centroid(self) -> tuple[float, float, float]:
        return tuple((l + h) / 2.0 for l, h in zip(self.lo, self.hi))

    def contains(self, other: "BoundingBox") -> bool:
        return all(sl <= ol and oh <= sh for sl, ol, oh, sh
                   in zip(self.lo, other.lo, other.hi, other.hi))


@dataclass(frozen=True)
class HuStats:
    p25: float
    mean: float
    p75: float
    std: float
    voxel_spacing: tuple[float, float, float]

    def __post_init__(self):
        if self.p25 > self.p75:
            raise ValueError("p25 exceeds p75")
        if self.std < 0:
            raise ValueError("negative std")


def _round_half_away(x: float) -> int:
    return int(np.floor(x + 0.5)) if x >= 0 else -int(np.floor(-x + 0.5))


def _resample_to_grid(data: np.ndarray, in_spacing, out_dims, out_spacing,
                      order: int, cval: float) -> np.ndarray:
    """Backward-map output voxel centers into input index space and interpolate.

    Both grids are aligned at the physical corner of voxel (0,0,0), so the
    physical extent is preserved up to the rounding of out_dims.
    """
    out = data.astype(np.float64)
    for ax in range(3):
        t, s = out_spacing[ax], in_spacing[ax]
        n_in = data.shape[ax]
        # edge-clamp: keeps interpolation a convex combination of real samples
        idx = np.clip((np.arange(out_dims[ax]) + 0.5) * t / s - 0.5, 0, n_in - 1)
        if order == 0:
            out = np.take(out, np.rint(idx).astype(np.intp), axis=ax)
        else:
            lo = np.floor(idx).astype(np.intp)
            hi = np.minimum(lo + 1, n_in - 1)
            w = idx - lo
            shape = [1, 1, 1]
            shape[ax] = len(idx)
            w = w.reshape(shape)
            out = np.take(out, lo, axis=ax) * (1.0 - w) + \
                np.take(out, hi, axis=ax) * w
    return out


def resample_isotropic(vol, target_spacing: float, interp: str = "trilinear"):
    """Resample a Volume3D or LabelMask to isotropic voxels of target_spacing mm.

    Output dims are round(dim_in * spacing_in / target) per axis (min 1),
    preserving the physical extent to within one voxel.
    """
    if target_spacing <= 0:
        raise ValueError(f"target_spacing must be positive, got {target_spacing}")
    is_mask = isinstance(vol, LabelMask)
    if is_mask and interp != "nearest":
        raise ValueError("LabelMask resampling requires interp='nearest'")
    if interp not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interp {interp!r}")
    t = float(target_spacing)
    out_dims = tuple(max(1, _round_half_away(d * s / t))
                     for d, s in zip(vol.dims, vol.spacing))
    out_spacing = (t, t, t)
    order = 0 if interp == "nearest" else 1
    cval = BACKGROUND_LABEL if is_mask else AIR_HU
    out = _resample_to_grid(vol.data, vol.spacing, out_dims, out_spacing, order, cval)
    # new origin keeps the corner of voxel (0,0,0) fixed in world space
    new_origin = tuple(o - s / 2 + t / 2 for o, s in zip(vol.origin, vol.spacing))
    if is_mask:
        return LabelMask(np.rint(out).astype(np.int16), out_spacing, new_origin,
                         class_set=vol.class_set)
    return Volume3D(out.astype(np.float32), out_spacing, new_origin)


def downsample_inplane(vol, factor: float = 3.2):
    """Divide in-plane dims by `factor` (rounded), leaving the z axis unchanged."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    is_mask = isinstance(vol, LabelMask)
    nx, ny, nz = vol.dims
    sx, sy, sz = vol.spacing
    out_dims = (max(1, _round_half_away(nx / factor)),
                max(1, _round_half_away(ny / factor)), nz)
    out_spacing = (sx * factor, sy * factor, sz)
    order = 0 if is_mask else 1
    cval = BACKGROUND_LABEL if is_mask else AIR_HU
    out = _resample_to_grid(vol.data, vol.spacing, out_dims, out_spacing, order, cval)
    new_origin = (vol.origin[0] - sx / 2 + out_spacing[0] / 2,
                  vol.origin[1] - sy / 2 + out_spacing[1] / 2,
                  vol.origin[2])
    if is_mask:
        return LabelMask(np.rint(out).astype(np.int16), out_spacing, new_origin,
                         class_set=vol.class_set)
    return Volume3D(out.astype(np.float32), out_spacing, new_origin)


def crop_roi(vol, box: BoundingBox, out_xy: int = 144, pad_value=None):
    """Crop an out_xy x out_xy x Z window centered on the box centroid in-plane.

    Z extent follows the box. Out-of-bounds voxels are filled with pad_value
    (air for images, background for masks). Returns (cropped, placement) where
    placement records the window position in the source frame; out-of-frame
    parts of the window are reflected by a placement extending past the dims,
    so it is clipped by the caller when pasting.
    """
    if out_xy < 1:
        raise ValueError("out_xy must be >= 1")
    z_lo, z_hi = box.lo[2], box.hi[2]
    if z_hi < z_lo:
        raise ValueError("box has empty z extent")
    is_mask = isinstance(vol, LabelMask)
    if pad_value is None:
        pad_value = BACKGROUND_LABEL if is_mask else AIR_HU
    cx, cy, _ = box.centroid
    half = out_xy / 2.0
    x0 = _round_half_away(cx - half)  # window [x0, x0+out_xy)
    y0 = _round_half_away(cy - half)
    nz_out = z_hi - z_lo + 1
    shape = (out_xy, out_xy, nz_out)
    src = vol.data
    if is_mask:
        out = np.full(shape, int(pad_value), dtype=np.int16)
    else:
        out = np.full(shape, float(pad_value), dtype=np.float32)
    # overlap of the window with the source array
    sx0, sx1 = max(x0, 0), min(x0 + out_xy, vol.dims[0])
    sy0, sy1 = max(y0, 0), min(y0 + out_xy, vol.dims[1])
    sz0, sz1 = max(z_lo, 0), min(z_hi + 1, vol.dims[2])
    if sx0 < sx1 and sy0 < sy1 and sz0 < sz1:
        out[sx0 - x0:sx1 - x0, sy0 - y0:sy1 - y0, sz0 - z_lo:sz1 - z_lo] = \
            src[sx0:sx1, sy0:sy1, sz0:sz1]
    placement = BoundingBox((x0, y0, z_lo),
                            (x0 + out_xy - 1, y0 + out_xy - 1, z_hi),
                            frame=box.frame)
    new_origin = tuple(o + l * s for o, l, s in
                       zip(vol.origin, placement.lo, vol.spacing))
    if is_mask:
        cls = vol.class_set | {int(pad_value)}
        cropped = LabelMask(out, vol.spacing, new_origin, class_set=frozenset(cls))
    else:
        cropped = Volume3D(out, vol.spacing, new_origin)
    return cropped, placement


_STRUCTS = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


def connected_components(mask: LabelMask, connectivity: int = 26,
                         keep_k: int | None = None) -> list[LabelMask]:
    """Split a binary mask into components, largest first."""
    if connectivity not in _STRUCTS:
        raise ValueError("connectivity must be 6 or 26")
    fg = mask.labels > 0
    if not set(np.unique(mask.labels)) <= {0, 1}:
        raise ValueError("connected_components requires a binary mask")
    labeled, n = ndimage.label(fg, structure=_STRUCTS[connectivity])
    if n == 0:
        return []
    counts = np.bincount(labeled.ravel())[1:]
    order = np.argsort(-counts, kind="stable") + 1
    if keep_k is not None:
        order = order[:keep_k]
    out = []
    for lab in order:
        out.append(LabelMask((labeled == lab).astype(np.int16), mask.spacing,
                             mask.origin, class_set=frozenset({0, 1})))
    return out


def mask_to_bounding_box(mask: LabelMask, margin: int = 0,
                         frame: str = "") -> BoundingBox:
    """Tightest box around the foreground, expanded by margin, clamped to dims."""
    fg = np.argwhere(mask.labels > 0)
    if fg.size == 0:
        raise EmptyMaskError("cannot box an empty mask")
    lo = np.maximum(fg.min(axis=0) - margin, 0)
    hi = np.minimum(fg.max(axis=0) + margin, np.asarray(mask.dims) - 1)
    return BoundingBox(tuple(lo.tolist()), tuple(hi.tolist()), frame=frame)


def hu_statistics(vol: Volume3D) -> HuStats:
    """Percentiles (linear interpolation), mean, and population std over all voxels."""
    flat = vol.data.astype(np.float64).ravel()
    if flat.size == 0:
        raise ValueError("empty volume")
    p25, p75 = np.percentile(flat, [25, 75], method="linear")
    return HuStats(float(p25), float(flat.mean()), float(p75),
                   float(flat.std()), vol.spacing)


def paste(canvas: np.ndarray, part: np.ndarray, placement: BoundingBox) -> None:
    """Paste `part` into `canvas` at `placement`, clipping to canvas bounds."""
    lo, hi = placement.lo, placement.hi
    src_lo = [max(0, -l) for l in lo]
    dst_lo = [max(0, l) for l in lo]
    dst_hi = [min(h + 1, d) for h, d in zip(hi, canvas.shape)]
    spans = [dh - dl for dl, dh in zip(dst_lo, dst_hi)]
    if any(s <= 0 for s in spans):
        return
    canvas[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
        part[src_lo[0]:src_lo[0] + spans[0],
             src_lo[1]:src_lo[1] + spans[1],
             src_lo[2]:src_lo[2] + spans[2]]
