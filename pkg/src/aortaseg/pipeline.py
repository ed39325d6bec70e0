"""Two-stage coarse-to-fine aortic segmentation cascade.

Stage 1 (ROI detection): resample the scan isotropically, downsample
in-plane by 3.2, segment the whole aorta at low resolution, keep the
largest connected component and derive bounding boxes — two for contrast
scans (arch + descending) and one for non-contrast. Stage 2: crop a
144 x 144 x Z region per box from the high-resolution isotropic frame,
segment it with the region model, and merge region predictions back into
a full-volume mask on the original scan grid.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import network
from .volume import (BoundingBox, LabelMask, Volume3D, connected_components,
                     crop_roi, downsample_inplane, mask_to_bounding_box, paste,
                     resample_isotropic)


class NoAortaFoundError(RuntimeError):
    """Stage-1 model produced an empty aorta prediction."""


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class PipelineConfig:
    stage1_factor: float = 3.2
    roi_out_xy: int = 144
    box_margin: int = 12
    iso_spacing: float | None = None   # None: use the scan's in-plane spacing
    keep_components: int = 1


class SegmentationModel:
    """Interface: per-voxel class probabilities for a Volume3D."""

    num_classes: int

    def predict_proba(self, vol: Volume3D) -> np.ndarray:
        raise NotImplementedError


class TorchSegModel(SegmentationModel):
    def __init__(self, model: "network.UNet3D", window=network.DEFAULT_WINDOW):
        self.model = model
        self.window = window
        self.num_classes = model.spec.num_classes

    def predict_proba(self, vol: Volume3D) -> np.ndarray:
        return network.unet_forward(self.model,
                                    network.normalize_input(vol, self.window))


class OracleSegModel(SegmentationModel):
    """Ground-truth passthrough: one-hot probabilities sampled (nearest) from
    a reference mask via world coordinates. Used for closure tests."""

    def __init__(self, reference: LabelMask, num_classes: int | None = None):
        self.reference = reference
        self.num_classes = num_classes or (max(reference.class_set) + 1)

    def predict_proba(self, vol: Volume3D) -> np.ndarray:
        coords = []
        for ax in range(3):
            world = vol.origin[ax] + np.arange(vol.dims[ax]) * vol.spacing[ax]
            coords.append((world - self.reference.origin[ax])
                          / self.reference.spacing[ax])
        grid = np.meshgrid(*coords, indexing="ij")
        labels = ndimage.map_coordinates(self.reference.labels, np.stack(grid),
                                         order=0, mode="constant", cval=0)
        probs = np.zeros((self.num_classes,) + vol.dims, dtype=np.float32)
        for c in range(self.num_classes):
            probs[c] = labels == c
        return probs


@dataclass(frozen=True)
class ModelBundle:
    modality: str                      # "contrast" or "non_contrast"
    roi_model: SegmentationModel
    region_models: dict[str, SegmentationModel]

    def __post_init__(self):
        if self.modality not in ("contrast", "non_contrast"):
            raise ValueError(f"unknown modality {self.modality!r}")
        expected = {"arch", "descending"} if self.modality == "contrast" \
            else {"descending"}
        if set(self.region_models) != expected:
            raise ValueError(f"{self.modality} bundle needs region models "
                             f"{sorted(expected)}, got {sorted(self.region_models)}")

    @property
    def class_set(self) -> frozenset[int]:
        return frozenset({0, 1, 2}) if self.modality == "contrast" \
            else frozenset({0, 1})


@dataclass
class PipelineResult:
    full_mask: LabelMask
    boxes: list[tuple[str, BoundingBox]]
    region_masks: dict[str, LabelMask]
    timing: dict[str, float] = field(default_factory=dict)


def _lowres_to_highres_box(box: BoundingBox, low, high,
                           margin: int) -> BoundingBox:
    """Map a stage-1 box into high-res frame indices via world coordinates."""
    lo, hi = [], []
    for ax in range(3):
        w_lo = low.origin[ax] + (box.lo[ax] - 0.5) * low.spacing[ax]
        w_hi = low.origin[ax] + (box.hi[ax] + 0.5) * low.spacing[ax]
        i_lo = int(np.floor((w_lo - high.origin[ax]) / high.spacing[ax] + 0.5))
        i_hi = int(np.ceil((w_hi - high.origin[ax]) / high.spacing[ax] - 0.5))
        lo.append(max(i_lo - margin, 0))
        hi.append(min(i_hi + margin, high.dims[ax] - 1))
    return BoundingBox(tuple(lo), tuple(hi), frame="highres")


def _split_arch_descending(aorta: LabelMask) -> tuple[BoundingBox, BoundingBox | None]:
    """Split the stage-1 aorta mask into descending and arch boxes.

    Axial slices where the aorta shows >= 2 in-plane components, and all
    slices above the lowest such slice, belong to the arch; the rest form
    the descending box. Returns (descending, arch-or-None).
    """
    fg = aorta.labels > 0
    struct = ndimage.generate_binary_structure(2, 2)
    multi = [k for k in range(fg.shape[2])
             if ndimage.label(fg[:, :, k], structure=struct)[1] >= 2]
    if not multi:
        return mask_to_bounding_box(aorta, 0, frame="lowres"), None
    k_split = min(multi)
    desc = np.zeros_like(aorta.labels)
    desc[:, :, :k_split] = aorta.labels[:, :, :k_split]
    arch = np.zeros_like(aorta.labels)
    arch[:, :, k_split:] = aorta.labels[:, :, k_split:]
    make = lambda arr: LabelMask(arr, aorta.spacing, aorta.origin,
                                 class_set=frozenset({0, 1}))
    desc_box = mask_to_bounding_box(make(desc), 0, frame="lowres") \
        if desc.any() else None
    arch_box = mask_to_bounding_box(make(arch), 0, frame="lowres")
    if desc_box is None:
        return arch_box, None
    return desc_box, arch_box


def detect_roi(vol: Volume3D, roi_model: SegmentationModel, modality: str,
               cfg: PipelineConfig = PipelineConfig()
               ) -> tuple[list[tuple[str, BoundingBox]], Volume3D]:
    """Stage 1. Returns (region, box) pairs in the high-res isotropic frame,
    plus the high-res isotropic volume used by stage 2."""
    iso_spacing = cfg.iso_spacing or vol.spacing[0]
    highres = resample_isotropic(vol, iso_spacing, "trilinear")
    lowres = downsample_inplane(highres, cfg.stage1_factor)
    probs = roi_model.predict_proba(lowres)
    pred = (probs.argmax(axis=0) > 0).astype(np.int16)
    pred_mask = LabelMask(pred, lowres.spacing, lowres.origin,
                          class_set=frozenset({0, 1}))
    comps = connected_components(pred_mask, 26, keep_k=cfg.keep_components)
    if not comps:
        raise NoAortaFoundError(
            f"stage-1 model predicted no aorta (modality={modality}, "
            f"lowres dims={lowres.dims}, foreground=0)")
    aorta = comps[0]
    boxes: list[tuple[str, BoundingBox]] = []
    if modality == "contrast":
        desc_box, arch_box = _split_arch_descending(aorta)
        if arch_box is not None:
            boxes.append(("arch", _lowres_to_highres_box(
                arch_box, lowres, highres, cfg.box_margin)))
        boxes.append(("descending", _lowres_to_highres_box(
            desc_box, lowres, highres, cfg.box_margin)))
    else:
        box = mask_to_bounding_box(aorta, 0, frame="lowres")
        boxes.append(("descending", _lowres_to_highres_box(
            box, lowres, highres, cfg.box_margin)))
    return boxes, highres


def segment_region(vol_highres: Volume3D, box: BoundingBox,
                   model: SegmentationModel,
                   cfg: PipelineConfig = PipelineConfig()
                   ) -> tuple[LabelMask, BoundingBox, np.ndarray]:
    """Stage 2 on one ROI: crop, segment, return (mask, placement, probs)."""
    if box.hi[2] < box.lo[2]:
        raise ValueError("degenerate box: empty z extent")
    crop, placement = crop_roi(vol_highres, box, out_xy=cfg.roi_out_xy)
    probs = model.predict_proba(crop)
    labels = probs.argmax(axis=0).astype(np.int16)
    mask = LabelMask(labels, crop.spacing, crop.origin,
                     class_set=frozenset(range(model.num_classes)))
    return mask, placement, probs


def merge_predictions(frame_dims: tuple[int, int, int],
                      parts: list[tuple[BoundingBox, LabelMask, np.ndarray | None]],
                      num_classes: int) -> np.ndarray:
    """Combine region predictions on a background canvas.

    Where parts overlap, the per-voxel class with the highest probability
    across parts wins (background included). Parts without probabilities
    are treated as one-hot.
    """
    labels = np.zeros(frame_dims, dtype=np.int16)
    best = np.zeros(frame_dims, dtype=np.float32)
    for placement, mask, probs in parts:
        if all(l >= d or h < 0 for l, h, d
               in zip(placement.lo, placement.hi, frame_dims)):
            raise ValueError(f"placement {placement.lo}..{placement.hi} "
                             f"outside frame {frame_dims}")
        if probs is None:
            part_best = np.ones(mask.dims, dtype=np.float32)
            part_lab = mask.labels
        else:
            part_best = probs.max(axis=0).astype(np.float32)
            part_lab = probs.argmax(axis=0).astype(np.int16)
        sub_best = np.zeros(frame_dims, dtype=np.float32)
        sub_lab = np.zeros(frame_dims, dtype=np.int16)
        paste(sub_best, part_best, placement)
        paste(sub_lab, part_lab, placement)
        take = sub_best > best
        labels[take] = sub_lab[take]
        best[take] = sub_best[take]
    return labels


def _resample_labels_to_frame(labels: np.ndarray, src: Volume3D,
                              target: Volume3D) -> np.ndarray:
    """Nearest-neighbour resample of a label grid onto target's voxel grid."""
    coords = []
    for ax in range(3):
        world = target.origin[ax] + np.arange(target.dims[ax]) * target.spacing[ax]
        coords.append((world - src.origin[ax]) / src.spacing[ax])
    grid = np.meshgrid(*coords, indexing="ij")
    return ndimage.map_coordinates(labels, np.stack(grid), order=0,
                                   mode="constant", cval=0).astype(np.int16)


def run_pipeline(vol: Volume3D, bundle: ModelBundle,
                 cfg: PipelineConfig = PipelineConfig()) -> PipelineResult:
    """Full cascade: detect ROIs, segment each, merge to the scan grid."""
    timing = {}
    t0 = time.perf_counter()
    try:
        boxes, highres = detect_roi(vol, bundle.roi_model, bundle.modality, cfg)
    except NoAortaFoundError:
        raise
    except Exception as exc:
        raise PipelineStageError("detect_roi", exc) from exc
    timing["detect_roi"] = time.perf_counter() - t0

    parts = []
    region_masks = {}
    t0 = time.perf_counter()
    for region, box in boxes:
        try:
            model = bundle.region_models[region]
            mask, placement, probs = segment_region(highres, box, model, cfg)
        except Exception as exc:
            raise PipelineStageError(f"segment_region:{region}", exc) from exc
        region_masks[region] = mask
        parts.append((placement, mask, probs))
    timing["segment_regions"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        num_classes = max(bundle.class_set) + 1
        merged = merge_predictions(highres.dims, parts, num_classes)
        out_labels = _resample_labels_to_frame(merged, highres, vol)
    except Exception as exc:
        raise PipelineStageError("merge_predictions", exc) from exc
    timing["merge"] = time.perf_counter() - t0
    full_mask = LabelMask(out_labels, vol.spacing, vol.origin,
                          class_set=bundle.class_set)
    return PipelineResult(full_mask, boxes, region_masks, timing)


def load_bundle(path) -> ModelBundle:
    """Bundle descriptor: JSON with modality and checkpoint paths per role."""
    path = Path(path)
    blob = json.loads(path.read_text())
    base = path.parent

    def load(rel):
        model, _ = network.load_checkpoint(base / rel)
        return TorchSegModel(model)

    return ModelBundle(
        modality=blob["modality"],
        roi_model=load(blob["roi_model"]),
        region_models={k: load(v) for k, v in blob["region_models"].items()},
    )
