"""Pixel F1 grouped by condition and cell type, and Fleiss' kappa across raters."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from mel.core import CLASS_NAMES, Condition, ImagePlane, PatchSample, load_image_png, load_mask_png, read_manifest
from mel.errors import InsufficientData, ShapeError, UndefinedKappa


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @classmethod
    def from_masks(cls, pred, gt) -> "ConfusionCounts":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction shape {pred.shape} != reference shape {gt.shape}")
        p = pred.astype(bool)
        g = gt.astype(bool)
        tp = int(np.count_nonzero(p & g))
        fp = int(np.count_nonzero(p & ~g))
        fn = int(np.count_nonzero(~p & g))
        return cls(tp, fp, fn, p.size - tp - fp - fn)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else 2 * self.tp / denom


def f1_score(pred, gt) -> float:
    """Balanced F-score 2TP / (2TP + FP + FN); 1.0 when both masks are empty."""
    return ConfusionCounts.from_masks(pred, gt).f1


@dataclass
class RaterPanel:
    masks: list
    rater_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.masks = [np.asarray(m) for m in self.masks]
        if len(self.masks) < 2:
            raise ValueError("a panel needs at least two raters")
        shape = self.masks[0].shape
        for m in self.masks:
            if m.shape != shape:
                raise ShapeError("all rater masks must share one shape")
            if not np.isin(m, (0, 1)).all():
                raise ValueError("rater masks must be binary")
        if not self.rater_ids:
            self.rater_ids = [f"rater{i}" for i in range(len(self.masks))]


def rating_counts(panel: RaterPanel, sample_stride: int = 4) -> np.ndarray:
    """(items, 2) matrix of how many raters chose background / foreground per sampled pixel."""
    if sample_stride < 1:
        raise ValueError("sample_stride must be >= 1")
    stacked = np.stack([m.reshape(-1)[::sample_stride] for m in panel.masks]).astype(np.int64)
    ones = stacked.sum(axis=0)
    return np.stack([len(panel.masks) - ones, ones], axis=1)


def fleiss_kappa_counts(counts: np.ndarray) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[0] < 1:
        raise InsufficientData("need at least one rated item")
    n = counts.sum(axis=1)
    if not np.all(n == n[0]) or n[0] < 2:
        raise ValueError("every item needs the same number (>= 2) of ratings")
    r = n[0]
    p_j = counts.sum(axis=0) / counts.sum()
    p_i = (np.sum(counts * counts, axis=1) - r) / (r * (r - 1))
    p_bar = p_i.mean()
    p_e = float(np.sum(p_j * p_j))
    if np.isclose(p_e, 1.0, rtol=0.0, atol=1e-15):
        raise UndefinedKappa("all raters chose one category for every item")
    return float((p_bar - p_e) / (1.0 - p_e))


def fleiss_kappa(panel: RaterPanel, sample_stride: int = 4) -> float:
    """Fleiss' kappa over pixels subsampled row-major at ``sample_stride``."""
    return fleiss_kappa_counts(rating_counts(panel, sample_stride))


# --------------------------------------------------------------------------- #
# Model evaluation
# --------------------------------------------------------------------------- #

CONDITIONS = (Condition.INJURED.value, Condition.NORMAL.value)


@dataclass
class MetricsReport:
    """Per-(condition, cell type) mean patch F1 in long format."""

    rows: list  # dicts: condition, cell_type, f1, n_patches
    per_patch: list = field(default_factory=list)

    def f1(self, condition: str, cell_type: str) -> float:
        for r in self.rows:
            if r["condition"] == condition and r["cell_type"] == cell_type:
                return r["f1"]
        raise KeyError((condition, cell_type))

    @property
    def average_f1(self) -> float:
        vals = [r["f1"] for r in self.rows if r["condition"] == "average" and not np.isnan(r["f1"])]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["condition", "cell_type", "f1", "n_patches"])
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "f1": f"{r['f1']:.6f}"})


def build_report(scores: Sequence[tuple[str, int, float]], n_classes: int = 2) -> MetricsReport:
    """Aggregate (condition, class_id, f1) patch scores into report rows."""
    names = [CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"class{c}" for c in range(n_classes)]
    rows = []
    for cond in CONDITIONS:
        for c in range(n_classes):
            vals = [f for cd, k, f in scores if cd == cond and k == c]
            rows.append(
                {"condition": cond, "cell_type": names[c], "f1": float(np.mean(vals)) if vals else float("nan"), "n_patches": len(vals)}
            )
    for c in range(n_classes):
        vals = [f for _, k, f in scores if k == c]
        rows.append(
            {"condition": "average", "cell_type": names[c], "f1": float(np.mean(vals)) if vals else float("nan"), "n_patches": len(vals)}
        )
    return MetricsReport(rows, list(scores))


def load_samples(manifest_path, split: str | None = "test", is_gold: bool = True) -> list[PatchSample]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    out = []
    for row in read_manifest(manifest_path):
        if split is not None and row.split != split:
            continue
        img = load_image_png(root / row.patch_path)
        if img.shape[2] == 4:
            img = ImagePlane(img.data[:, :, :3], img.mpp, img.modality)
        mask = load_mask_png(root / row.mask_path)
        out.append(PatchSample(img, row.class_id, mask, row.condition, row.wsi_id, is_gold))
    return out


def evaluate_model(
    model,
    gold_manifest,
    split: str = "test",
    threshold: float = 0.5,
    n_classes: int = 2,
) -> MetricsReport:
    """Mean pixel F1 of thresholded predictions against gold masks.

    ``model`` is a :class:`mel.model.SegModel` or any callable mapping a
    :class:`PatchSample` to an H x W foreground-probability array.
    """
    samples = gold_manifest if isinstance(gold_manifest, list) else load_samples(gold_manifest, split)
    if not samples:
        raise InsufficientData(f"no patches in the {split!r} split")
    predict = _as_predictor(model)
    scores = []
    for s in samples:
        prob = np.asarray(predict(s))
        scores.append((s.condition.value, s.class_id, f1_score(prob > threshold, s.mask)))
    return build_report(scores, n_classes)


def _as_predictor(model) -> Callable[[PatchSample], np.ndarray]:
    from mel.model import SegModel, predict_foreground

    if isinstance(model, SegModel):
        return lambda s: predict_foreground(model, s.image.data, s.class_id)
    if callable(model):
        return model
    raise TypeError(f"cannot evaluate {type(model).__name__}")
