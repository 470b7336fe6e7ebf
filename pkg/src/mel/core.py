"""Shared domain types, affine geometry, tiling and dataset splitting.

Coordinates follow the (row=y, col=x) convention with the origin at the
top-left pixel centre. An :class:`AffineTransform2D` maps *moving* pixel
coordinates to *fixed* pixel coordinates; warping samples the moving image
through the inverse.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml
from PIL import Image

from mel.errors import InsufficientData, InvalidTiling, SingularTransform

__all__ = [
    "Modality",
    "Condition",
    "ImagePlane",
    "AffineTransform2D",
    "apply_affine",
    "compose_affine",
    "TilePlan",
    "plan_tiles",
    "PatchSample",
    "DatasetSplit",
    "split_dataset",
    "ManifestRow",
    "read_manifest",
    "write_manifest",
    "save_mask_png",
    "load_mask_png",
    "save_image_png",
    "load_image_png",
    "save_transform",
    "load_transform",
    "Pyramid",
    "downsample",
    "load_kv",
    "dump_kv",
    "CLASS_NAMES",
]

CLASS_NAMES = ("podocyte", "mesangial")


class Modality(str, enum.Enum):
    PAS = "PAS"
    IF = "IF"


class Condition(str, enum.Enum):
    INJURED = "injured"
    NORMAL = "normal"


# --------------------------------------------------------------------------- #
# Images
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class ImagePlane:
    """An H x W x C raster of unit-interval floats with physical pixel size."""

    data: np.ndarray
    mpp: float
    modality: Modality = Modality.PAS

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValueError(f"expected H x W x C array, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            raise TypeError(f"image data must be floating point, got {data.dtype}")
        h, w, c = data.shape
        if h < 1 or w < 1 or c not in (1, 3, 4):
            raise ValueError(f"invalid image shape {data.shape}")
        if not self.mpp > 0:
            raise ValueError(f"mpp must be positive, got {self.mpp}")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        if data.flags.writeable:
            data = data.view()
            data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mpp", float(self.mpp))
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def replace(self, data: np.ndarray) -> "ImagePlane":
        return ImagePlane(data, self.mpp, self.modality)

    @classmethod
    def from_uint8(cls, arr: np.ndarray, mpp: float, modality=Modality.PAS) -> "ImagePlane":
        return cls(np.asarray(arr, dtype=np.float32) / 255.0, mpp, modality)


def downsample(img: ImagePlane, factor: int) -> ImagePlane:
    """Area-average downsampling by an integer factor (edges cropped)."""
    if factor == 1:
        return img
    h, w, c = img.shape
    hh, ww = h // factor, w // factor
    if hh < 1 or ww < 1:
        raise ValueError(f"cannot downsample {h}x{w} by {factor}")
    block = img.data[: hh * factor, : ww * factor].reshape(hh, factor, ww, factor, c)
    return ImagePlane(block.mean(axis=(1, 3)), img.mpp * factor, img.modality)


# --------------------------------------------------------------------------- #
# Affine geometry
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class AffineTransform2D:
    """2 x 3 row-major matrix: (x', y') = (m00 x + m01 y + m02, m10 x + m11 y + m12)."""

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64).reshape(2, 3)
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "AffineTransform2D":
        return cls([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

    @classmethod
    def translation(cls, dx: float, dy: float) -> "AffineTransform2D":
        return cls([[1.0, 0.0, dx], [0.0, 1.0, dy]])

    @classmethod
    def scaling(cls, sx: float, sy: float | None = None) -> "AffineTransform2D":
        sy = sx if sy is None else sy
        return cls([[sx, 0.0, 0.0], [0.0, sy, 0.0]])

    @classmethod
    def from_params(
        cls,
        angle_deg: float = 0.0,
        scale: float = 1.0,
        shift: tuple[float, float] = (0.0, 0.0),
        center: tuple[float, float] = (0.0, 0.0),
    ) -> "AffineTransform2D":
        """Rotation + isotropic scale about ``center`` (x, y), then ``shift`` (dx, dy)."""
        a = math.radians(angle_deg)
        c, s = scale * math.cos(a), scale * math.sin(a)
        cx, cy = center
        tx = cx + shift[0] - (c * cx - s * cy)
        ty = cy + shift[1] - (s * cx + c * cy)
        return cls([[c, -s, tx], [s, c, ty]])

    @classmethod
    def from_matrix3(cls, m3: np.ndarray) -> "AffineTransform2D":
        return cls(np.asarray(m3)[:2])

    @property
    def matrix3(self) -> np.ndarray:
        out = np.eye(3)
        out[:2] = self.m
        return out

    @property
    def det(self) -> float:
        return float(self.m[0, 0] * self.m[1, 1] - self.m[0, 1] * self.m[1, 0])

    def is_invertible(self, tol: float = 1e-12) -> bool:
        return abs(self.det) > tol and bool(np.isfinite(self.m).all())

    def check_invertible(self) -> None:
        if not self.is_invertible():
            raise SingularTransform(f"affine linear part is singular (det={self.det:g})")

    def inverse(self) -> "AffineTransform2D":
        self.check_invertible()
        return AffineTransform2D.from_matrix3(np.linalg.inv(self.matrix3))

    def apply(self, points) -> np.ndarray:
        """Map an (N, 2) array of (x, y) points."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return pts @ self.m[:, :2].T + self.m[:, 2]

    def to_json(self) -> str:
        return json.dumps({"m": self.m.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "AffineTransform2D":
        return cls(json.loads(text)["m"])

    def allclose(self, other: "AffineTransform2D", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.m, other.m, rtol=0.0, atol=atol))

    def __repr__(self) -> str:
        return f"AffineTransform2D({self.m.tolist()!r})"


def compose_affine(first: AffineTransform2D, second: AffineTransform2D) -> AffineTransform2D:
    """Transform equivalent to applying ``first`` and then ``second``."""
    first.check_invertible()
    second.check_invertible()
    return AffineTransform2D.from_matrix3(second.matrix3 @ first.matrix3)


def bilinear_sample(planes: Sequence[np.ndarray], xs: np.ndarray, ys: np.ndarray) -> list[np.ndarray]:
    """Sample 2-D planes at (xs, ys); neighbours outside the grid contribute zero."""
    h, w = planes[0].shape
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1
    vx0 = (x0 >= 0) & (x0 < w)
    vx1 = (x1 >= 0) & (x1 < w)
    vy0 = (y0 >= 0) & (y0 < h)
    vy1 = (y1 >= 0) & (y1 < h)
    cx0 = np.clip(x0, 0, w - 1)
    cx1 = np.clip(x1, 0, w - 1)
    cy0 = np.clip(y0, 0, h - 1)
    cy1 = np.clip(y1, 0, h - 1)
    w00 = np.where(vy0 & vx0, (1.0 - fy) * (1.0 - fx), 0.0)
    w01 = np.where(vy0 & vx1, (1.0 - fy) * fx, 0.0)
    w10 = np.where(vy1 & vx0, fy * (1.0 - fx), 0.0)
    w11 = np.where(vy1 & vx1, fy * fx, 0.0)
    out = []
    for p in planes:
        out.append(
            w00 * p[cy0, cx0] + w01 * p[cy0, cx1] + w10 * p[cy1, cx0] + w11 * p[cy1, cx1]
        )
    return out


_WARP_CHUNK_ROWS = 256


def apply_affine(img: ImagePlane, t: AffineTransform2D, out_h: int, out_w: int) -> ImagePlane:
    """Warp ``img`` into an ``out_h`` x ``out_w`` frame by inverse bilinear sampling.

    Samples falling outside the source are filled with 0.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be >= 1")
    inv = t.inverse().m
    src = img.data
    planes = [src[:, :, ch] for ch in range(src.shape[2])]
    out = np.zeros((out_h, out_w, src.shape[2]), dtype=src.dtype)
    xs_row = np.arange(out_w, dtype=np.float64)
    for r0 in range(0, out_h, _WARP_CHUNK_ROWS):
        r1 = min(out_h, r0 + _WARP_CHUNK_ROWS)
        ys, xs = np.meshgrid(np.arange(r0, r1, dtype=np.float64), xs_row, indexing="ij")
        sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
        sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
        for ch, vals in enumerate(bilinear_sample(planes, sx, sy)):
            out[r0:r1, :, ch] = vals
    np.clip(out, 0.0, 1.0, out=out)
    return ImagePlane(out, img.mpp, img.modality)


def save_transform(t: AffineTransform2D, path) -> None:
    Path(path).write_text(t.to_json())


def load_transform(path) -> AffineTransform2D:
    return AffineTransform2D.from_json(Path(path).read_text())


# --------------------------------------------------------------------------- #
# Tiling
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class TilePlan:
    height: int
    width: int
    tile_size: int
    overlap: int
    origins: tuple[tuple[int, int], ...]

    @property
    def stride(self) -> int:
        return self.tile_size - self.overlap

    def rect(self, origin: tuple[int, int]) -> tuple[int, int, int, int]:
        """(row0, col0, row1, col1) of a tile, clipped to the image."""
        r, c = origin
        return r, c, min(r + self.tile_size, self.height), min(c + self.tile_size, self.width)

    def __len__(self) -> int:
        return len(self.origins)


def _axis_origins(dim: int, tile: int, stride: int) -> list[int]:
    if dim <= tile:
        return [0]
    out = []
    o = 0
    while o + tile < dim:
        out.append(o)
        o += stride
    last = dim - tile
    if not out or out[-1] != last:
        out.append(last)
    return out


def plan_tiles(h: int, w: int, tile: int, overlap: int) -> TilePlan:
    """Overlapping tile origins; the last tile per axis is shifted inward, never padded."""
    if tile < 1 or overlap < 0 or overlap >= tile:
        raise InvalidTiling(f"need 0 <= overlap < tile, got tile={tile}, overlap={overlap}")
    if h < 1 or w < 1:
        raise InvalidTiling(f"image must be non-empty, got {h}x{w}")
    stride = tile - overlap
    rows = _axis_origins(h, tile, stride)
    cols = _axis_origins(w, tile, stride)
    origins = tuple((r, c) for r in rows for c in cols)
    return TilePlan(h, w, tile, overlap, origins)


# --------------------------------------------------------------------------- #
# Samples and splits
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class PatchSample:
    image: ImagePlane
    class_id: int
    mask: np.ndarray
    condition: Condition
    wsi_id: str
    is_gold: bool = False
    n_classes: int = 2

    def __post_init__(self):
        mask = np.asarray(self.mask)
        if mask.shape != self.image.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} != image shape {self.image.shape[:2]}")
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        if not 0 <= self.class_id < self.n_classes:
            raise ValueError(f"class_id {self.class_id} out of range")
        object.__setattr__(self, "mask", mask.astype(np.uint8))
        object.__setattr__(self, "condition", Condition(self.condition))


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def split_of(self, wsi_id: str) -> str:
        for name in ("train", "val", "test"):
            if wsi_id in getattr(self, name):
                return name
        raise KeyError(wsi_id)

    def as_dict(self) -> dict[str, str]:
        return {w: name for name in ("train", "val", "test") for w in getattr(self, name)}


def _largest_remainder(total: int, weights: Sequence[float]) -> list[int]:
    s = float(sum(weights))
    ideal = [total * w / s for w in weights]
    base = [math.floor(v) for v in ideal]
    rest = total - sum(base)
    order = sorted(range(len(weights)), key=lambda i: (-(ideal[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return base


def split_dataset(
    records: Iterable[tuple[str, str]],
    ratio: Sequence[float] = (6, 1, 3),
    seed: int = 0,
) -> DatasetSplit:
    """Stratified, seeded WSI-level train/val/test partition."""
    conditions: dict[str, str] = {}
    for wsi_id, cond in records:
        conditions.setdefault(str(wsi_id), Condition(cond).value)
    n = len(conditions)
    parts = len(ratio)
    if n < parts:
        raise InsufficientData(f"{n} WSIs cannot fill {parts} splits")

    targets = _largest_remainder(n, ratio)
    # every split gets at least one WSI
    for i in range(parts):
        if targets[i] == 0:
            j = max(range(parts), key=lambda k: (targets[k], -k))
            targets[j] -= 1
            targets[i] += 1

    rng = np.random.default_rng(seed)
    groups = {}
    for cond in sorted(set(conditions.values())):
        ids = sorted(w for w, c in conditions.items() if c == cond)
        groups[cond] = [ids[i] for i in rng.permutation(len(ids))]

    remaining = {c: len(v) for c, v in groups.items()}
    alloc: list[dict[str, int]] = []
    for s in range(parts):
        left = sum(remaining.values())
        if s == parts - 1:
            alloc.append(dict(remaining))
            break
        ideal = {c: targets[s] * remaining[c] / left for c in groups}
        take = {c: min(math.floor(v), remaining[c]) for c, v in ideal.items()}
        short = targets[s] - sum(take.values())
        for c in sorted(groups, key=lambda c: (-(ideal[c] - take[c]), c)):
            if short == 0:
                break
            if take[c] < remaining[c]:
                take[c] += 1
                short -= 1
        for c in take:
            remaining[c] -= take[c]
        alloc.append(take)

    out: list[list[str]] = [[] for _ in range(parts)]
    cursor = {c: 0 for c in groups}
    for s, take in enumerate(alloc):
        for c, k in take.items():
            out[s].extend(groups[c][cursor[c] : cursor[c] + k])
            cursor[c] += k
    train, val, test = (tuple(sorted(x)) for x in out)
    return DatasetSplit(train, val, test)


# --------------------------------------------------------------------------- #
# Persistence
# --------------------------------------------------------------------------- #

MANIFEST_FIELDS = ("wsi_id", "patch_path", "mask_path", "class_id", "condition", "split")


@dataclass(frozen=True)
class ManifestRow:
    wsi_id: str
    patch_path: str
    mask_path: str
    class_id: int
    condition: str
    split: str

    def resolve(self, root: Path) -> tuple[Path, Path]:
        return root / self.patch_path, root / self.mask_path


def write_manifest(rows: Iterable[ManifestRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: getattr(r, k) for k in MANIFEST_FIELDS})


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest missing columns {sorted(missing)}")
        return [
            ManifestRow(
                r["wsi_id"], r["patch_path"], r["mask_path"], int(r["class_id"]), r["condition"], r["split"]
            )
            for r in reader
        ]


def save_mask_png(mask: np.ndarray, path) -> None:
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def load_mask_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    return (arr > 127).astype(np.uint8)


def save_image_png(img: ImagePlane | np.ndarray, path) -> None:
    data = img.data if isinstance(img, ImagePlane) else np.asarray(img)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    arr = np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image_png(path, mpp: float = 0.5, modality=Modality.PAS) -> ImagePlane:
    arr = np.asarray(Image.open(path))
    return ImagePlane.from_uint8(arr, mpp, modality)


@dataclass
class Pyramid:
    """Multi-resolution image stored as a directory of PNG levels plus ``pyramid.json``."""

    levels: list[ImagePlane] = field(default_factory=list)

    @property
    def modality(self) -> Modality:
        return self.levels[0].modality

    def level_for(self, mpp: float, rtol: float = 0.05) -> ImagePlane:
        best = min(self.levels, key=lambda lv: abs(math.log(lv.mpp / mpp)))
        if abs(best.mpp - mpp) > rtol * mpp:
            raise KeyError(f"no pyramid level at {mpp} um/px (have {[lv.mpp for lv in self.levels]})")
        return best

    @classmethod
    def build(cls, base: ImagePlane, factors: Sequence[int] = (1, 4)) -> "Pyramid":
        return cls([downsample(base, f) for f in factors])

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {"modality": self.modality.value, "levels": []}
        for i, lv in enumerate(self.levels):
            name = f"level{i}.png"
            save_image_png(lv, d / name)
            meta["levels"].append({"file": name, "mpp": lv.mpp})
        (d / "pyramid.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory) -> "Pyramid":
        d = Path(directory)
        meta = json.loads((d / "pyramid.json").read_text())
        levels = [
            load_image_png(d / lv["file"], lv["mpp"], Modality(meta["modality"])) for lv in meta["levels"]
        ]
        return cls(levels)


def load_kv(path) -> dict:
    """Read a human-readable key/value (YAML) config file."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a key/value mapping")
    return data


def dump_kv(data: dict) -> str:
    return yaml.safe_dump(data, sort_keys=True)
