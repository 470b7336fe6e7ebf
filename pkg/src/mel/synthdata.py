"""Synthetic paired PAS-like / IF-like glomerulus patches and a lay-annotator noise model.

Cells of the two classes look the same in the PAS rendering; only their
location inside the tuft (podocytes on the periphery, mesangial cells in the
interior) and the IF channels tell them apart.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from mel.core import (
    AffineTransform2D,
    Condition,
    ImagePlane,
    ManifestRow,
    Modality,
    apply_affine,
    dump_kv,
    save_image_png,
    save_mask_png,
    split_dataset,
    write_manifest,
)
from mel.errors import PackingFailure

log = logging.getLogger(__name__)

_REFERENCE_RADIUS = 12.0
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class SynthParams:
    n_wsis: int = 10
    glomeruli_per_wsi: int = 10
    injured_fraction: float = 0.5
    cells_per_class: tuple = (8, 14)
    cell_radius_px: tuple = (9.0, 15.0)
    texture_seed: int = 0
    patch_size: int = 512
    n_classes: int = 2
    tuft_radius_frac: float = 0.4
    mpp: float = 0.5

    def __post_init__(self):
        self.cells_per_class = tuple(int(v) for v in self.cells_per_class)
        self.cell_radius_px = tuple(float(v) for v in self.cell_radius_px)
        if not 0.0 <= self.injured_fraction <= 1.0:
            raise ValueError("injured_fraction must lie in [0, 1]")
        lo, hi = self.cell_radius_px
        if not 0 < lo <= hi:
            raise ValueError("cell radii must be positive and ordered")
        if not 1 <= self.cells_per_class[0] <= self.cells_per_class[1]:
            raise ValueError("cells_per_class must be an ordered pair >= 1")
        if self.patch_size < 32:
            raise ValueError("patch_size must be >= 32")
        if not 1 <= self.n_classes <= 3:
            raise ValueError("n_classes must be 1, 2 or 3")

    @property
    def mean_radius(self) -> float:
        return 0.5 * sum(self.cell_radius_px)


@dataclass
class NoiseParams:
    boundary_jitter_px: float = 0.0
    drop_rate: float = 0.0
    spurious_rate: float = 0.0
    confusion_rate: float = 0.0
    jitter_correlation_px: float = 6.0
    spurious_radius_px: tuple | None = None

    def __post_init__(self):
        if self.boundary_jitter_px < 0 or self.spurious_rate < 0:
            raise ValueError("jitter and spurious rate must be non-negative")
        for name in ("drop_rate", "confusion_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.spurious_radius_px is not None:
            self.spurious_radius_px = tuple(float(v) for v in self.spurious_radius_px)

    @property
    def is_zero(self) -> bool:
        return (
            self.boundary_jitter_px == 0
            and self.drop_rate == 0
            and self.spurious_rate == 0
            and self.confusion_rate == 0
        )


_PRESETS = {
    "clean": dict(boundary_jitter_px=0.0, drop_rate=0.0, spurious_rate=0.0, confusion_rate=0.0),
    "lay": dict(boundary_jitter_px=3.0, drop_rate=0.07, spurious_rate=1.0, confusion_rate=0.04),
    "harsh": dict(boundary_jitter_px=5.0, drop_rate=0.30, spurious_rate=3.0, confusion_rate=0.25),
}


def noise_preset(name: str, params: SynthParams | None = None) -> NoiseParams:
    """Named noise level; lengths are scaled to the cell size of ``params``.

    The pixel values are tuned for the default 12 px mean cell radius.
    """
    try:
        base = dict(_PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown noise preset {name!r} (choose from {sorted(_PRESETS)})") from None
    scale = 1.0 if params is None else params.mean_radius / _REFERENCE_RADIUS
    base["boundary_jitter_px"] *= scale
    base["jitter_correlation_px"] = NoiseParams.jitter_correlation_px * scale
    if params is not None:
        base["spurious_radius_px"] = params.cell_radius_px
    return NoiseParams(**base)


@dataclass(eq=False)
class Glomerulus:
    pas: ImagePlane
    if_img: ImagePlane
    gold_masks: np.ndarray  # (n_classes, H, W) uint8
    tuft: np.ndarray  # (H, W) bool
    condition: Condition
    n_cells: tuple = field(default_factory=tuple)


# --------------------------------------------------------------------------- #
# Geometry helpers
# --------------------------------------------------------------------------- #


def _ellipse(shape, cy, cx, a, b, theta):
    """Boolean raster of a filled ellipse plus its bounding-box slice."""
    h, w = shape
    r = math.ceil(max(a, b)) + 1
    y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 2)
    x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 2)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return (u * u + v * v) <= 1.0, (slice(y0, y1), slice(x0, x1))


def _smooth_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    sd = f.std()
    return f / sd if sd > 0 else f


def _tuft_mask(rng, size, radius, injured):
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    ang = np.arctan2(yy - c, xx - c)
    dist = np.hypot(yy - c, xx - c)
    boundary = np.full_like(ang, radius)
    if injured:
        # lobulated, shrunken tuft outline
        boundary = boundary * 0.9
        for k in (2, 3, 5):
            boundary = boundary * (1.0 + rng.uniform(0.04, 0.08) * np.sin(k * ang + rng.uniform(0, 2 * np.pi)))
    return dist <= boundary, dist / boundary


# --------------------------------------------------------------------------- #
# Rendering
# --------------------------------------------------------------------------- #

_PAS_BG = np.array([0.96, 0.95, 0.96])
_PAS_TISSUE = np.array([0.86, 0.62, 0.76])
_PAS_CAPSULE = np.array([0.80, 0.55, 0.72])
_PAS_NUCLEUS = np.array([0.42, 0.28, 0.58])
_PAS_MATRIX = np.array([0.76, 0.48, 0.68])


def _render_pas(rng, tissue, capsule, masks, blur, rel):
    h, w = tissue.shape
    tex = _smooth_field(rng, (h, w), max(1.0, h / 40.0))
    img = np.broadcast_to(_PAS_BG, (h, w, 3)).copy()
    img[capsule] = _PAS_CAPSULE
    # PAS-positive mesangial matrix fades out towards the capillary periphery
    matrix = np.clip((0.65 - rel) / 0.2, 0.0, 1.0)[:, :, None]
    tissue_col = (1.0 - matrix) * _PAS_TISSUE + matrix * _PAS_MATRIX
    tissue_col = tissue_col * (1.0 + 0.05 * tex[:, :, None])
    img = np.where(tissue[:, :, None], tissue_col, img)
    any_cell = masks.max(axis=0) > 0
    labels, n = ndimage.label(any_cell, structure=_EIGHT)
    # per-cell stain strength drawn from one distribution for every class
    strength = np.concatenate([[1.0], rng.uniform(0.9, 1.1, size=n)])
    nuc = _PAS_NUCLEUS[None, None, :] * strength[labels][:, :, None]
    grain = 0.04 * rng.standard_normal((h, w))[:, :, None]
    img = np.where(any_cell[:, :, None], nuc + grain, img)
    img = ndimage.gaussian_filter(img, (blur, blur, 0))
    img = img + 0.02 * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def _render_if(rng, tissue, masks, blur):
    k, h, w = masks.shape
    n_ch = 3 if k <= 2 else 4
    img = np.zeros((h, w, n_ch))
    for ch in range(k):
        labels, n = ndimage.label(masks[ch], structure=_EIGHT)
        level = np.concatenate([[0.0], rng.uniform(0.85, 1.0, size=n)])
        img[:, :, ch] = ndimage.gaussian_filter(level[labels], blur)
    tex = _smooth_field(rng, (h, w), max(1.0, h / 40.0))
    auto = np.where(tissue, 0.14 + 0.03 * tex, 0.02)
    img[:, :, n_ch - 1] = np.maximum(img[:, :, n_ch - 1], ndimage.gaussian_filter(auto, blur))
    img *= 1.0 + 0.08 * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def _class_bands(n_classes):
    if n_classes == 1:
        return [(0.0, 0.92)]
    if n_classes == 2:
        return [(0.62, 0.92), (0.0, 0.55)]
    return [(0.62, 0.92), (0.0, 0.3), (0.3, 0.55)]


def generate_glomerulus(seed: int, params: SynthParams, condition=Condition.NORMAL) -> Glomerulus:
    """Render one paired PAS/IF glomerulus patch with exact per-class gold masks."""
    condition = Condition(condition)
    rng = np.random.default_rng(seed)
    size = params.patch_size
    injured = condition is Condition.INJURED
    radius = params.tuft_radius_frac * size
    tuft, rel = _tuft_mask(rng, size, radius, injured)
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.hypot(yy - c, xx - c)
    capsule = (dist >= 1.06 * radius) & (dist <= 1.06 * radius + max(2.0, size / 64.0))

    counts = [int(rng.integers(params.cells_per_class[0], params.cells_per_class[1] + 1)) for _ in range(params.n_classes)]
    if injured:
        # podocyte loss
        counts[0] = max(1, math.floor(0.6 * counts[0]))
    bands = _class_bands(params.n_classes)
    gap = max(1.0, params.cell_radius_px[0] / 4.0)
    masks = _place_cells_rel(rng, tuft, rel, counts, params.cell_radius_px, bands, gap)
    blur = max(0.6, size / 512.0)
    pas = _render_pas(rng, tuft, capsule, masks, blur, rel)
    if_img = _render_if(rng, tuft, masks, blur)
    return Glomerulus(
        ImagePlane(pas, params.mpp, Modality.PAS),
        ImagePlane(if_img, params.mpp, Modality.IF),
        masks,
        tuft,
        condition,
        tuple(counts),
    )


def _place_cells_rel(rng, tuft, rel, counts, radius_range, bands, gap):
    """Rejection-sample non-overlapping ellipses whose centres fall in a radial band."""
    size = tuft.shape[0]
    occupied = np.zeros(tuft.shape, dtype=bool)
    masks = np.zeros((len(counts),) + tuft.shape, dtype=np.uint8)
    inner = ndimage.binary_erosion(tuft, iterations=max(1, int(round(gap))))
    for k, n in enumerate(counts):
        lo_band, hi_band = bands[k]
        candidates = np.flatnonzero(inner & (rel >= lo_band) & (rel <= hi_band))
        if candidates.size == 0:
            raise PackingFailure(f"no room for class {k} cells")
        placed = 0
        attempts = 0
        while placed < n:
            attempts += 1
            if attempts > 500 * n:
                raise PackingFailure(f"could not place {n} cells of class {k} (placed {placed})")
            idx = candidates[rng.integers(candidates.size)]
            cy, cx = divmod(int(idx), size)
            cy += rng.uniform(-0.5, 0.5)
            cx += rng.uniform(-0.5, 0.5)
            a = rng.uniform(*radius_range)
            b = a * rng.uniform(0.7, 1.0)
            theta = rng.uniform(0, np.pi)
            ell, sl = _ellipse(tuft.shape, cy, cx, a, b, theta)
            if not ell.any() or not inner[sl][ell].all() or occupied[sl][ell].any():
                continue
            masks[k][sl][ell] = 1
            grown, gsl = _ellipse(tuft.shape, cy, cx, a + gap, b + gap, theta)
            occupied[gsl] |= grown
            placed += 1
    return masks


# --------------------------------------------------------------------------- #
# Slide-scale pairs for registration experiments
# --------------------------------------------------------------------------- #


def generate_slide_pair(seed: int, height: int, width: int, mpp: float = 0.5, cell_radius=(3.0, 7.0), density=0.004):
    """Aligned PAS/IF canvases with tissue texture and scattered cells everywhere."""
    rng = np.random.default_rng(seed)
    shape = (height, width)
    tissue_field = _smooth_field(rng, shape, max(4.0, min(shape) / 25.0))
    tissue = tissue_field > -0.9
    masks = np.zeros((2,) + shape, dtype=np.uint8)
    n = int(density * height * width)
    for _ in range(n):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        a = rng.uniform(*cell_radius)
        ell, sl = _ellipse(shape, cy, cx, a, a * rng.uniform(0.6, 1.0), rng.uniform(0, np.pi))
        k = int(rng.integers(2))
        masks[k][sl][ell] = 1
        masks[1 - k][sl][ell] = 0
    capsule = np.zeros(shape, dtype=bool)
    pas = _render_pas(rng, tissue, capsule, masks, 0.8, np.ones(tissue.shape))
    if_img = _render_if(rng, tissue, masks, 0.8)
    return ImagePlane(pas, mpp, Modality.PAS), ImagePlane(if_img, mpp, Modality.IF)


def make_registration_case(seed: int, size: int, truth: AffineTransform2D, margin: int | None = None, mpp: float = 0.5):
    """Fixed PAS plane and an IF plane whose content is displaced by ``truth`` (moving -> fixed)."""
    margin = size // 4 if margin is None else margin
    canvas = size + 2 * margin
    pas_c, if_c = generate_slide_pair(seed, canvas, canvas, mpp)
    fixed = ImagePlane(pas_c.data[margin : margin + size, margin : margin + size], mpp, Modality.PAS)
    to_canvas = AffineTransform2D.translation(margin, margin)
    moving_to_canvas = AffineTransform2D.from_matrix3(to_canvas.matrix3 @ truth.matrix3)
    moving = apply_affine(if_c, moving_to_canvas.inverse(), size, size)
    return fixed, moving


# --------------------------------------------------------------------------- #
# Lay-annotator noise
# --------------------------------------------------------------------------- #


def _signed_distance(mask: np.ndarray) -> np.ndarray:
    inside = ndimage.distance_transform_edt(mask)
    outside = ndimage.distance_transform_edt(~mask)
    return np.where(mask, -(inside - 0.5), outside - 0.5)


def corrupt_annotation(
    gold: np.ndarray,
    noise: NoiseParams,
    seed: int,
    region: np.ndarray | None = None,
) -> np.ndarray:
    """Simulate a lay annotator's per-class masks from the gold mask set.

    Errors act per connected component: a cell may be missed, attributed to
    another class, or traced with a wobbly outline; phantom cells appear in
    ``region`` (the tuft) where there is no real cell.
    """
    gold = np.asarray(gold).astype(np.uint8)
    if gold.ndim == 2:
        gold = gold[None]
    if noise.is_zero:
        return gold.copy()
    k, h, w = gold.shape
    rng = np.random.default_rng(seed)
    out = np.zeros_like(gold, dtype=bool)

    radii = []
    for c in range(k):
        labels, n = ndimage.label(gold[c] > 0, structure=_EIGHT)
        if n == 0:
            continue
        areas = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
        radii.extend(np.sqrt(areas / np.pi).tolist())
        objects = ndimage.find_objects(labels)
        for i, sl in enumerate(objects, start=1):
            u_drop, u_conf, u_target = rng.random(3)
            if u_drop < noise.drop_rate:
                continue
            target = c
            if k > 1 and u_conf < noise.confusion_rate:
                others = [j for j in range(k) if j != c]
                target = others[min(int(u_target * len(others)), len(others) - 1)]
            out[target][sl] |= labels[sl] == i

    if noise.boundary_jitter_px > 0:
        for c in range(k):
            field_ = _smooth_field(rng, (h, w), noise.jitter_correlation_px)
            # amplitude is the peak boundary displacement
            field_ *= noise.boundary_jitter_px / max(np.abs(field_).max(), 1e-12)
            if out[c].any():
                out[c] = _signed_distance(out[c]) < field_

    if noise.spurious_rate > 0:
        n_fake = int(rng.poisson(noise.spurious_rate))
        if noise.spurious_radius_px is not None:
            rlo, rhi = noise.spurious_radius_px
        elif radii:
            rlo, rhi = float(np.min(radii)), float(np.max(radii))
        else:
            rlo, rhi = 3.0, 6.0
        allowed = np.ones((h, w), dtype=bool) if region is None else np.asarray(region, dtype=bool)
        taken = ndimage.binary_dilation(out.any(axis=0) | (gold.max(axis=0) > 0), iterations=2)
        free = np.flatnonzero(allowed & ~taken)
        for _ in range(n_fake):
            c = int(rng.integers(k))
            a = rng.uniform(rlo, rhi)
            b = a * rng.uniform(0.7, 1.0)
            theta = rng.uniform(0, np.pi)
            for _attempt in range(30):
                if free.size == 0:
                    break
                cy, cx = divmod(int(free[rng.integers(free.size)]), w)
                ell, sl = _ellipse((h, w), cy, cx, a, b, theta)
                if allowed[sl][ell].all() and not taken[sl][ell].any():
                    out[c][sl] |= ell
                    taken[sl] |= ell
                    break
    return out.astype(np.uint8)


# --------------------------------------------------------------------------- #
# Corpus
# --------------------------------------------------------------------------- #


@dataclass
class Corpus:
    root: Path
    gold_manifest: Path
    noisy_manifest: Path
    rows_gold: list
    rows_noisy: list
    class_counts: dict


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def wsi_conditions(params: SynthParams) -> dict[str, Condition]:
    n_inj = int(round(params.n_wsis * params.injured_fraction))
    order = np.random.default_rng(_derive_seed(params.texture_seed, 7919)).permutation(params.n_wsis)
    injured = set(order[:n_inj].tolist())
    return {
        f"wsi{w:03d}": Condition.INJURED if w in injured else Condition.NORMAL for w in range(params.n_wsis)
    }


def generate_corpus(params: SynthParams, noise: NoiseParams, out_dir, workers: int = 1) -> Corpus:
    """Write PAS/IF patches, gold and noisy masks, and two manifests with a WSI-level split."""
    root = Path(out_dir)
    try:
        for sub in ("patches", "masks"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {root}: {exc}") from exc

    conditions = wsi_conditions(params)
    split = split_dataset(sorted(conditions.items()), (6, 1, 3), seed=params.texture_seed).as_dict()
    jobs = [(wsi, w, g) for w, wsi in enumerate(sorted(conditions)) for g in range(params.glomeruli_per_wsi)]

    def work(job):
        wsi, w, g = job
        glom = generate_glomerulus(_derive_seed(params.texture_seed, w, g), params, conditions[wsi])
        noisy = corrupt_annotation(glom.gold_masks, noise, _derive_seed(params.texture_seed, w, g, 1), glom.tuft)
        stem = f"{wsi}_g{g:03d}"
        pas_rel = f"patches/{stem}_pas.png"
        _write(save_image_png, glom.pas, root / pas_rel)
        _write(save_image_png, glom.if_img, root / f"patches/{stem}_if.png")
        gold_rows, noisy_rows = [], []
        for c in range(params.n_classes):
            if not glom.gold_masks[c].any():
                continue
            gold_rel = f"masks/{stem}_c{c}_gold.png"
            noisy_rel = f"masks/{stem}_c{c}_noisy.png"
            _write(save_mask_png, glom.gold_masks[c], root / gold_rel)
            _write(save_mask_png, noisy[c], root / noisy_rel)
            cond = conditions[wsi].value
            gold_rows.append(ManifestRow(wsi, pas_rel, gold_rel, c, cond, split[wsi]))
            noisy_rows.append(ManifestRow(wsi, pas_rel, noisy_rel, c, cond, split[wsi]))
        return gold_rows, noisy_rows

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]

    rows_gold = [r for g, _ in results for r in g]
    rows_noisy = [r for _, n in results for r in n]
    gold_path = root / "manifest_gold.csv"
    noisy_path = root / "manifest_noisy.csv"
    write_manifest(rows_gold, gold_path)
    write_manifest(rows_noisy, noisy_path)
    counts = {c: sum(1 for r in rows_gold if r.class_id == c) for c in range(params.n_classes)}
    meta = {"synth": _plain(asdict(params)), "noise": _plain(asdict(noise)), "class_counts": counts}
    (root / "corpus.yaml").write_text(dump_kv(meta))
    log.info("corpus at %s: %s patches per class", root, counts)
    return Corpus(root, gold_path, noisy_path, rows_gold, rows_noisy, counts)


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _write(fn, obj, path: Path) -> None:
    try:
        fn(obj, path)
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def params_from_dict(data: dict) -> tuple[SynthParams, dict]:
    """Split a flat key/value mapping into SynthParams and leftover (noise) keys."""
    synth_keys = {f.name for f in fields(SynthParams)}
    synth = {k: v for k, v in data.items() if k in synth_keys}
    rest = {k: v for k, v in data.items() if k not in synth_keys}
    return SynthParams(**synth), rest


def noise_from_dict(base: NoiseParams, data: dict) -> NoiseParams:
    noise_keys = {f.name for f in fields(NoiseParams)}
    unknown = set(data) - noise_keys
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return replace(base, **data)
