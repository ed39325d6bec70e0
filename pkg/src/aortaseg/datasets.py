"""Builders turning phantom cohorts into training samples.

Two sample flavours mirror the two cascade stages: low-resolution
whole-scan samples for ROI detection, and fixed-size cubes centered on
the aorta for region segmentation.
"""

from __future__ import annotations

import numpy as np

from .network import DEFAULT_WINDOW, normalize_input
from .phantom import PhantomSample
from .training import Sample
from .volume import (BoundingBox, LabelMask, Volume3D, crop_roi,
                     downsample_inplane, mask_to_bounding_box,
                     resample_isotropic)


def _mask_to_grid(mask: LabelMask, like) -> np.ndarray:
    """Nearest-resample mask labels onto another volume's grid via world coords."""
    from scipy import ndimage
    coords = []
    for ax in range(3):
        world = like.origin[ax] + np.arange(like.dims[ax]) * like.spacing[ax]
        coords.append((world - mask.origin[ax]) / mask.spacing[ax])
    grid = np.meshgrid(*coords, indexing="ij")
    return ndimage.map_coordinates(mask.labels, np.stack(grid), order=0,
                                   mode="constant", cval=0).astype(np.int16)


def cube_roi_sample(patient_id: str, vol: Volume3D, gt: LabelMask, size: int,
                    binary: bool = False, window=DEFAULT_WINDOW) -> Sample:
    """A size^3 cube centered on the ground-truth centroid."""
    fg = np.argwhere(gt.labels > 0)
    if fg.size == 0:
        raise ValueError("empty ground truth")
    ci, cj, ck = fg.mean(axis=0)
    z0 = int(round(ck - size / 2))
    box = BoundingBox((int(round(ci)), int(round(cj)), z0),
                      (int(round(ci)), int(round(cj)), z0 + size - 1))
    crop, _ = crop_roi(vol, box, out_xy=size)
    gt_crop, _ = crop_roi(gt, box, out_xy=size)
    labels = gt_crop.labels
    if binary:
        labels = (labels > 0).astype(np.int16)
    return Sample(patient_id, normalize_input(crop, window), labels)


def lowres_sample(patient_id: str, vol: Volume3D, gt: LabelMask,
                  factor: float = 3.2, iso_spacing: float | None = None,
                  window=DEFAULT_WINDOW) -> Sample:
    """Whole-scan low-resolution sample with a binary aorta target."""
    iso = resample_isotropic(vol, iso_spacing or vol.spacing[0], "trilinear")
    low = downsample_inplane(iso, factor)
    labels = (_mask_to_grid(gt, low) > 0).astype(np.int16)
    return Sample(patient_id, normalize_input(low, window), labels)


def region_samples_from_phantoms(samples: list[PhantomSample], size: int,
                                 modality: str = "contrast") -> list[Sample]:
    """One aorta-centered cube per phantom patient."""
    out = []
    for s in samples:
        if modality == "contrast":
            out.append(cube_roi_sample(s.patient_id, s.cta, s.gt, size))
        else:
            out.append(cube_roi_sample(s.patient_id, s.nc, s.gt_nc, size,
                                       binary=True))
    return out


def roi_samples_from_phantoms(samples: list[PhantomSample], factor: float,
                              modality: str = "contrast") -> list[Sample]:
    out = []
    for s in samples:
        if modality == "contrast":
            out.append(lowres_sample(s.patient_id, s.cta, s.gt, factor))
        else:
            out.append(lowres_sample(s.patient_id, s.nc, s.gt_nc, factor,
                                     iso_spacing=s.nc.spacing[0]))
    return out
