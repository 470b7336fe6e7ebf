"""Molecular-empowered learning: registration, synthetic corpora, corrective segmentation loss."""

from mel.core import (
    AffineTransform2D,
    Condition,
    DatasetSplit,
    ImagePlane,
    Modality,
    PatchSample,
    TilePlan,
    apply_affine,
    compose_affine,
    plan_tiles,
    split_dataset,
)

__version__ = "0.1.0"
