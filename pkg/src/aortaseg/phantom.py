"""Synthetic CT phantoms with analytic ground-truth masks.

Each phantom patient is a paired contrast (CTA) and non-contrast volume
over the same aortic geometry: a descending tube along z with a Gaussian
aneurysmal bulge of the outer wall and a crescent of thrombus between
lumen and wall. The CTA additionally carries an arch segment (ascending
limb plus a connecting top tube) so slices near the top show two in-plane
aorta cross-sections. Masks are rasterized by voxel-center inclusion in
the analytic geometry, so they are exact by construction.

Labels: 0 background, 1 inner lumen, 2 outer wall + thrombus. The
non-contrast ground truth is binary (entire aorta) in the non-contrast
frame, which has coarser z spacing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nifti
from .volume import LabelMask, Volume3D

DEFAULT_HU = {
    "air": -1000.0,
    "soft_tissue": 30.0,
    "thrombus": 40.0,
    "wall": 50.0,
    "lumen_contrast": 300.0,
    "lumen_noncontrast": 45.0,
    "bone": 700.0,
}


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 72)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.25)
    nc_z_spacing: float = 2.5
    lumen_radius: float = 6.0           # mm
    wall_thickness: float = 2.0         # mm, outer wall beyond lumen (no bulge)
    bulge_amplitude: float = 6.0        # mm, peak extra outer radius
    bulge_center_frac: float = 0.35     # of z extent
    bulge_sigma: float = 12.0           # mm along z
    crescent_extent_deg: float = 200.0  # thrombus angular span inside the wall
    wall_shell_mm: float = 1.5          # outer shell labeled/valued as wall tissue
    axis_offset: tuple[float, float] = (0.0, 0.0)   # mm from body center
    with_arch: bool = True              # arch rendered on the CTA only
    arch_offset_mm: float = 22.0        # ascending limb x offset
    arch_z_frac: float = 0.75           # arch limbs exist above this fraction
    hu_table: dict = field(default_factory=lambda: dict(DEFAULT_HU))
    noise_sigma: float = 20.0
    bone_distractor: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lumen_radius <= 0:
            raise ValueError("lumen_radius must be positive")
        if self.wall_thickness < 0 or self.bulge_amplitude < 0:
            raise ValueError("radii offsets must be non-negative")
        if any(not math.isfinite(v) for v in self.hu_table.values()):
            raise ValueError("hu_table values must be finite")

    def outer_radius(self, z_mm: float) -> float:
        z0 = self.bulge_center_frac * self.extent_z
        bulge = self.bulge_amplitude * math.exp(-((z_mm - z0) ** 2)
                                                / (2.0 * self.bulge_sigma ** 2))
        return self.lumen_radius + self.wall_thickness + bulge

    @property
    def extent_z(self) -> float:
        return self.dims[2] * self.spacing[2]


def _grid_mm(dims, spacing):
    axes = [np.arange(d, dtype=np.float64) * s for d, s in zip(dims, spacing)]
    return np.meshgrid(*axes, indexing="ij")


def _aorta_masks(spec: PhantomSpec, dims, spacing, with_arch: bool):
    """(lumen, outer) boolean grids for the analytic geometry at voxel centers."""
    xx, yy, zz = _grid_mm(dims, spacing)
    cx = dims[0] * spacing[0] / 2.0 + spec.axis_offset[0]
    cy = dims[1] * spacing[1] / 2.0 + spec.axis_offset[1]
    r_in = np.hypot(xx - cx, yy - cy)
    z0 = spec.bulge_center_frac * spec.extent_z
    bulge = spec.bulge_amplitude * np.exp(-((zz - z0) ** 2)
                                          / (2.0 * spec.bulge_sigma ** 2))
    r_out_profile = spec.lumen_radius + spec.wall_thickness + bulge
    lumen = r_in <= spec.lumen_radius
    outer = r_in <= r_out_profile
    if with_arch:
        zj = spec.arch_z_frac * spec.extent_z
        r_l, r_o = spec.lumen_radius, spec.lumen_radius + spec.wall_thickness
        # ascending limb: vertical tube above the junction height
        ax = cx + spec.arch_offset_mm
        r_asc = np.hypot(xx - ax, yy - cy)
        limb = zz >= zj
        lumen |= limb & (r_asc <= r_l)
        outer |= limb & (r_asc <= r_o)
        # connector: horizontal tube along x near the top, between the limbs
        z_top = spec.extent_z - r_o - spacing[2]
        r_conn = np.hypot(yy - cy, zz - z_top)
        span = (xx >= min(cx, ax)) & (xx <= max(cx, ax))
        lumen |= span & (r_conn <= r_l)
        outer |= span & (r_conn <= r_o)
    return lumen, outer


def _fill_hu(spec: PhantomSpec, dims, spacing, lumen, outer, lumen_hu: float,
             rng: np.random.Generator) -> np.ndarray:
    hu = spec.hu_table
    xx, yy, zz = _grid_mm(dims, spacing)
    cx = dims[0] * spacing[0] / 2.0
    cy = dims[1] * spacing[1] / 2.0
    ex = dims[0] * spacing[0] * 0.42
    ey = dims[1] * spacing[1] * 0.42
    body = ((xx - cx) / ex) ** 2 + ((yy - cy) / ey) ** 2 <= 1.0
    img = np.full(dims, hu["air"], dtype=np.float64)
    img[body] = hu["soft_tissue"]
    if spec.bone_distractor:
        bx, by = cx, cy + 0.30 * dims[1] * spacing[1]
        bone = np.hypot(xx - bx, yy - by) <= 5.0
        img[bone & body] = hu["bone"]
    wall_region = outer & ~lumen
    # crescent of thrombus inside the wall band; the rest is wall tissue
    acx = cx + spec.axis_offset[0]
    acy = cy + spec.axis_offset[1]
    ang = np.degrees(np.arctan2(yy - acy, xx - acx)) % 360.0
    crescent = ang <= spec.crescent_extent_deg
    img[wall_region] = hu["wall"]
    img[wall_region & crescent] = hu["thrombus"]
    img[lumen] = lumen_hu
    if spec.noise_sigma > 0:
        img += rng.normal(0.0, spec.noise_sigma, size=dims)
    return img.astype(np.float32)


@dataclass(frozen=True)
class PhantomSample:
    patient_id: str
    cta: Volume3D
    nc: Volume3D
    gt: LabelMask       # CTA frame, labels {0, 1, 2}
    gt_nc: LabelMask    # non-contrast frame, labels {0, 1}


def generate_phantom(spec: PhantomSpec, patient_id: str = "phantom000") -> PhantomSample:
    rng = np.random.default_rng(spec.seed)
    dims, spacing = spec.dims, spec.spacing
    lumen, outer = _aorta_masks(spec, dims, spacing, with_arch=spec.with_arch)
    gt = np.zeros(dims, dtype=np.int16)
    gt[outer] = 2
    gt[lumen] = 1
    cta = Volume3D(_fill_hu(spec, dims, spacing, lumen, outer,
                            spec.hu_table["lumen_contrast"], rng),
                   spacing)
    # non-contrast: same descending geometry, no arch, coarser z
    nc_dims = (dims[0], dims[1],
               max(1, round(dims[2] * spacing[2] / spec.nc_z_spacing)))
    nc_spacing = (spacing[0], spacing[1], spec.nc_z_spacing)
    lumen_nc, outer_nc = _aorta_masks(spec, nc_dims, nc_spacing, with_arch=False)
    nc = Volume3D(_fill_hu(spec, nc_dims, nc_spacing, lumen_nc, outer_nc,
                           spec.hu_table["lumen_noncontrast"], rng),
                  nc_spacing)
    gt_nc = LabelMask(outer_nc.astype(np.int16), nc_spacing,
                      class_set=frozenset({0, 1}))
    return PhantomSample(patient_id, cta, nc,
                         LabelMask(gt, spacing, class_set=frozenset({0, 1, 2})),
                         gt_nc)


def jittered_spec(base: PhantomSpec, rng: np.random.Generator) -> PhantomSpec:
    """Per-patient geometry variation around a base spec."""
    return replace(
        base,
        lumen_radius=base.lumen_radius * rng.uniform(0.85, 1.15),
        bulge_amplitude=base.bulge_amplitude * rng.uniform(0.7, 1.3),
        bulge_center_frac=float(np.clip(
            base.bulge_center_frac + rng.uniform(-0.08, 0.08), 0.15, 0.6)),
        crescent_extent_deg=float(rng.uniform(120.0, 300.0)),
        axis_offset=(base.axis_offset[0] + rng.uniform(-3.0, 3.0),
                     base.axis_offset[1] + rng.uniform(-3.0, 3.0)),
        seed=int(rng.integers(0, 2 ** 31 - 1)),
    )


def cohort_specs(n_patients: int, base: PhantomSpec, seed: int) -> list[PhantomSpec]:
    if n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    rng = np.random.default_rng(seed)
    return [jittered_spec(base, rng) for _ in range(n_patients)]


def generate_cohort(n_patients: int, out_dir, base: PhantomSpec | None = None,
                    seed: int = 0) -> dict:
    """Write n paired cta/nc/gt phantoms plus a manifest JSON; returns the manifest."""
    base = base or PhantomSpec()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, spec in enumerate(cohort_specs(n_patients, base, seed)):
        pid = f"phantom{idx:03d}"
        sample = generate_phantom(spec, pid)
        paths = {
            "cta": f"{pid}_cta.nii.gz",
            "nc": f"{pid}_nc.nii.gz",
            "gt": f"{pid}_gt.nii.gz",
            "gt_nc": f"{pid}_gt_nc.nii.gz",
        }
        nifti.write_volume(out_dir / paths["cta"], sample.cta)
        nifti.write_volume(out_dir / paths["nc"], sample.nc)
        nifti.write_mask(out_dir / paths["gt"], sample.gt)
        nifti.write_mask(out_dir / paths["gt_nc"], sample.gt_nc)
        entries.append({"patient_id": pid, "paths": paths})
    manifest = {"schema_version": 1, "seed": seed, "n_patients": n_patients,
                "entries": entries}
    (out_dir / "cohort.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
