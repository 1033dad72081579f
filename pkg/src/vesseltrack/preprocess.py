"""Noise reduction, soft-tissue thresholding and airway-wall removal."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .volgrid import AIR_HU, Mask, Volume, ball_offsets, require_same_geometry

SOFT_TISSUE_LEVEL = -400
AIRWAY_DILATION_MM = 2.0


def median_filter_3x3(volume: Volume) -> Volume:
    """In-plane 3x3 median of every axial slice, with replicated borders."""
    out = ndimage.median_filter(volume.values, size=(3, 3, 1), mode="nearest")
    return volume.with_values(out)


def threshold_soft_tissue(volume: Volume, level: float = SOFT_TISSUE_LEVEL) -> Mask:
    return Mask.like(volume, volume.values > level)


def dilate_mask(mask: Mask, radius_mm: float = AIRWAY_DILATION_MM) -> Mask:
    """Dilate by a ball measured in world millimetres (voxel-center inclusion)."""
    if radius_mm < 0:
        raise ValueError("radius_mm must be >= 0")
    structure = ball_offsets(mask.spacing, radius_mm)
    if structure.size == 1 or not mask.values.any():
        return Mask.like(mask, mask.values)
    out = ndimage.binary_dilation(mask.values, structure=structure)
    return Mask.like(mask, out)


def remove_airway_walls(tissue: Mask, airway_lumen: Mask,
                        radius_mm: float = AIRWAY_DILATION_MM) -> Mask:
    """Drop tissue voxels within ``radius_mm`` of the airway lumen."""
    require_same_geometry(tissue, airway_lumen)
    grown = dilate_mask(airway_lumen, radius_mm)
    return Mask.like(tissue, tissue.values & ~grown.values)


def suppress_airway(volume: Volume, airway_lumen: Mask,
                    radius_mm: float = AIRWAY_DILATION_MM) -> Volume:
    """Set the dilated airway to air in an intensity volume.

    This is the intensity-domain counterpart of :func:`remove_airway_walls`,
    used when the ROI around an airway is resampled for seeding.
    """
    require_same_geometry(volume, airway_lumen)
    grown = dilate_mask(airway_lumen, radius_mm).values
    values = np.where(grown, np.int16(AIR_HU), volume.values)
    return volume.with_values(values)


def working_mask(volume: Volume, airway_lumen: Mask | None = None,
                 level: float = SOFT_TISSUE_LEVEL) -> tuple[Volume, Mask]:
    """Median filter, threshold and (optionally) airway removal, in that order.

    Returns the filtered volume alongside the binary tracking mask.
    """
    filtered = median_filter_3x3(volume)
    tissue = threshold_soft_tissue(filtered, level)
    if airway_lumen is not None:
        tissue = remove_airway_walls(tissue, airway_lumen)
    return filtered, tissue
