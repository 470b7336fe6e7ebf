"""Two-stage morphology/molecular registration.

Stage one searches integer translations exhaustively at a coarse pyramid
level. Stage two refines a full affine per fine-level tile by minimising an
intensity metric with analytic image-gradient Jacobians. The per-tile result
is the composition of both stages.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.signal import fftconvolve

from mel.core import (
    AffineTransform2D,
    ImagePlane,
    Modality,
    Pyramid,
    TilePlan,
    bilinear_sample,
    compose_affine,
    plan_tiles,
    save_transform,
)
from mel.errors import DivergedRefinement, InvalidWindow, LowContrastWarning

log = logging.getLogger(__name__)

COARSE_METRICS = ("ncc", "phase_correlation")
FINE_METRICS = ("mse", "ncc")


@dataclass
class RegistrationConfig:
    coarse_level_mpp: float = 2.0
    fine_level_mpp: float = 0.5
    coarse_metric: str = "ncc"
    fine_metric: str = "mse"
    max_iters: int = 50
    step_size: float = 1.0
    pyramid_levels: int = 3
    convergence_tol: float = 1e-6
    # exhaustive search half-width as a fraction of each coarse dimension
    search_fraction: float = 0.25
    min_overlap: float = 0.25
    tile_size: int = 4096
    tile_overlap: int = 1024
    max_samples: int = 1 << 17
    workers: int = 1

    def __post_init__(self):
        self.coarse_metric = self.coarse_metric.lower()
        self.fine_metric = self.fine_metric.lower()
        if self.coarse_metric == "phase":
            self.coarse_metric = "phase_correlation"
        if self.coarse_metric not in COARSE_METRICS:
            raise ValueError(f"coarse_metric must be one of {COARSE_METRICS}")
        if self.fine_metric not in FINE_METRICS:
            raise ValueError(f"fine_metric must be one of {FINE_METRICS}")
        if not self.coarse_level_mpp >= self.fine_level_mpp > 0:
            raise ValueError("need coarse_level_mpp >= fine_level_mpp > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")


@dataclass
class RegistrationResult:
    global_t: AffineTransform2D
    plan: TilePlan
    refined_t: dict = field(default_factory=dict)
    composed_t: dict = field(default_factory=dict)
    final_loss: dict = field(default_factory=dict)
    failed: dict = field(default_factory=dict)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        (out / "tiles").mkdir(parents=True, exist_ok=True)
        save_transform(self.global_t, out / "global.json")
        lines = ["row,col,final_loss,status"]
        for origin in self.plan.origins:
            r, c = origin
            save_transform(self.composed_t[origin], out / "tiles" / f"{r}_{c}.json")
            status = "diverged" if origin in self.failed else "ok"
            lines.append(f"{r},{c},{self.final_loss[origin]!r},{status}")
        (out / "report.csv").write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------- #
# Preprocessing
# --------------------------------------------------------------------------- #

_LUMA = np.array([0.299, 0.587, 0.114])


def preprocess_modality(img: ImagePlane) -> ImagePlane:
    """Single-channel, polarity-matched, percentile-stretched intensity plane.

    IF channels are max-projected and inverted so that bright antibody signal
    becomes dark, like PAS-stained tissue on a bright background.
    """
    data = np.asarray(img.data, dtype=np.float64)
    if img.modality is Modality.IF:
        gray = 1.0 - data.max(axis=2)
    elif data.shape[2] == 1:
        gray = data[:, :, 0]
    else:
        gray = data[:, :, :3] @ _LUMA
    lo, hi = np.percentile(gray, [1.0, 99.0])
    if not hi > lo:
        lo, hi = float(gray.min()), float(gray.max())
    if not hi > lo:
        warnings.warn("constant image; returning flat 0.5 plane", LowContrastWarning, stacklevel=2)
        out = np.full(gray.shape, 0.5, dtype=np.float32)
    else:
        out = np.clip((gray - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)
    return ImagePlane(out, img.mpp, img.modality)


def _gray(img: ImagePlane) -> np.ndarray:
    d = np.asarray(img.data, dtype=np.float64)
    return d[:, :, 0] if d.shape[2] == 1 else d.mean(axis=2)


# --------------------------------------------------------------------------- #
# Stage 1: global translation
# --------------------------------------------------------------------------- #


def _masked_ncc_surface(f: np.ndarray, m: np.ndarray):
    """NCC over the overlap for every integer shift t, warped(x) = m(x - t).

    Returns (ncc, overlap_count); index k on an axis maps to shift k - (len_m - 1).
    """
    mr = m[::-1, ::-1]
    ones_f = np.ones_like(f)
    ones_mr = np.ones_like(mr)
    n = np.round(fftconvolve(ones_f, ones_mr))
    sf = fftconvolve(f, ones_mr)
    sff = fftconvolve(f * f, ones_mr)
    sm = fftconvolve(ones_f, mr)
    smm = fftconvolve(ones_f, mr * mr)
    sfm = fftconvolve(f, mr)
    with np.errstate(divide="ignore", invalid="ignore"):
        cov = sfm - sf * sm / n
        vf = sff - sf * sf / n
        vm = smm - sm * sm / n
        denom = np.sqrt(np.clip(vf, 0, None) * np.clip(vm, 0, None))
        ncc = np.where((n > 0) & (denom > 1e-9 * np.maximum(n, 1)), cov / denom, -np.inf)
    return ncc, n


def _phase_correlation_surface(f: np.ndarray, m: np.ndarray):
    hf, wf = f.shape
    hm, wm = m.shape
    shape = (hf + hm, wf + wm)
    win_f = np.outer(np.hanning(hf), np.hanning(wf)) if min(hf, wf) > 2 else 1.0
    win_m = np.outer(np.hanning(hm), np.hanning(wm)) if min(hm, wm) > 2 else 1.0
    F = np.fft.rfft2((f - f.mean()) * win_f, shape)
    M = np.fft.rfft2((m - m.mean()) * win_m, shape)
    cross = F * np.conj(M)
    cross /= np.maximum(np.abs(cross), 1e-12)
    corr = np.fft.irfft2(cross, shape)
    # rearrange so index k maps to shift k - (len_m - 1), like the NCC surface
    corr = np.roll(corr, (hm - 1, wm - 1), axis=(0, 1))[: hf + hm - 1, : wf + wm - 1]
    ones = fftconvolve(np.ones_like(f), np.ones_like(m))
    return corr, np.round(ones)


def estimate_global_translation(
    fixed: ImagePlane, moving: ImagePlane, cfg: RegistrationConfig | None = None
) -> AffineTransform2D:
    """Exhaustive integer-shift search maximising the coarse similarity metric.

    The returned pure translation maps moving coordinates onto fixed ones.
    """
    cfg = cfg or RegistrationConfig()
    if abs(fixed.mpp - moving.mpp) > 0.01 * fixed.mpp:
        raise ValueError(f"resolution mismatch: {fixed.mpp} vs {moving.mpp} um/px")
    if cfg.search_fraction < 0:
        raise InvalidWindow("search_fraction must be non-negative")
    f = _gray(fixed)
    m = _gray(moving)
    hm, wm = m.shape
    if cfg.coarse_metric == "ncc":
        score, n = _masked_ncc_surface(f, m)
    else:
        score, n = _phase_correlation_surface(f, m)

    ty = np.arange(score.shape[0]) - (hm - 1)
    tx = np.arange(score.shape[1]) - (wm - 1)
    wy = math.floor(cfg.search_fraction * max(f.shape[0], hm))
    wx = math.floor(cfg.search_fraction * max(f.shape[1], wm))
    min_n = cfg.min_overlap * min(f.size, m.size)
    allowed = (np.abs(ty)[:, None] <= wy) & (np.abs(tx)[None, :] <= wx) & (n >= min_n)
    if not allowed.any():
        raise InvalidWindow("no candidate shift with sufficient overlap inside the search window")
    masked = np.where(allowed & np.isfinite(score), score, -np.inf)
    if not np.isfinite(masked).any():
        # featureless overlap everywhere; fall back to the zero shift if admissible
        log.warning("coarse metric undefined over the whole window; using zero shift")
        return AffineTransform2D.identity()
    k = int(np.argmax(masked))
    iy, ix = np.unravel_index(k, masked.shape)
    return AffineTransform2D.translation(float(tx[ix]), float(ty[iy]))


# --------------------------------------------------------------------------- #
# Stage 2: affine refinement
# --------------------------------------------------------------------------- #


class _Level:
    """One pyramid level of a fixed/moving pair with a strided sample grid."""

    def __init__(self, f: np.ndarray, m: np.ndarray, scale: float, max_samples: int, metric: str):
        self.scale = scale
        self.metric = metric
        self.m = m
        gy, gx = np.gradient(m)
        self.gx, self.gy = gx, gy
        self.mh, self.mw = m.shape
        stride = max(1, math.ceil(math.sqrt(f.size / max_samples)))
        ys, xs = np.mgrid[0 : f.shape[0] : stride, 0 : f.shape[1] : stride]
        self.xs = xs.ravel().astype(np.float64)
        self.ys = ys.ravel().astype(np.float64)
        self.f = f[ys, xs].ravel()
        self.min_valid = max(16, int(0.1 * self.xs.size))

    def evaluate(self, a: np.ndarray, jacobian: bool = True):
        """Loss, residual and Jacobian w.r.t. the 6 entries of ``a`` (fixed -> moving)."""
        sx = a[0, 0] * self.xs + a[0, 1] * self.ys + a[0, 2]
        sy = a[1, 0] * self.xs + a[1, 1] * self.ys + a[1, 2]
        valid = (sx >= 0) & (sx <= self.mw - 1) & (sy >= 0) & (sy <= self.mh - 1)
        if valid.sum() < self.min_valid:
            return math.inf, None, None
        sx, sy = sx[valid], sy[valid]
        x, y = self.xs[valid], self.ys[valid]
        planes = [self.m, self.gx, self.gy] if jacobian else [self.m]
        sampled = bilinear_sample(planes, sx, sy)
        vals = sampled[0]
        b = self.f[valid]
        J = None
        if jacobian:
            gxs, gys = sampled[1], sampled[2]
            J = np.stack([gxs * x, gxs * y, gxs, gys * x, gys * y, gys], axis=1)
        if self.metric == "mse":
            r = vals - b
            n = r.size
            # loss = mean(r^2); scale residual/J so that loss = |r|^2 and grad = 2 J^T r
            s = 1.0 / math.sqrt(n)
            r = r * s
            if J is not None:
                J = J * s
            return float(r @ r), r, J
        ac = vals - vals.mean()
        bc = b - b.mean()
        na = float(np.linalg.norm(ac))
        nb = float(np.linalg.norm(bc))
        if na < 1e-12 or nb < 1e-12:
            return math.inf, None, None
        ah = ac / na
        bh = bc / nb
        r = (ah - bh) / math.sqrt(2.0)
        if J is not None:
            Jc = J - J.mean(axis=0)
            J = (Jc - np.outer(ah, ah @ Jc)) / (na * math.sqrt(2.0))
        return float(r @ r), r, J


def _metric_loss(fixed: np.ndarray, moving: np.ndarray, a: np.ndarray, metric: str, max_samples: int) -> float:
    return _Level(fixed, moving, 1.0, max_samples, metric).evaluate(a, jacobian=False)[0]


def _pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    out = [img]
    for _ in range(levels - 1):
        prev = out[-1]
        if min(prev.shape) < 32:
            break
        out.append(ndimage.gaussian_filter(prev, 1.0, mode="nearest")[::2, ::2])
    return out


def _level_matrix(a: np.ndarray, scale: float) -> np.ndarray:
    d = np.diag([scale, scale, 1.0])
    dinv = np.diag([1.0 / scale, 1.0 / scale, 1.0])
    a3 = np.vstack([a, [0, 0, 1]])
    return (dinv @ a3 @ d)[:2]


def refine_affine(
    fixed: ImagePlane,
    moving: ImagePlane,
    init: AffineTransform2D,
    cfg: RegistrationConfig | None = None,
) -> tuple[AffineTransform2D, float]:
    """Coarse-to-fine Levenberg-Marquardt refinement of a moving -> fixed affine.

    Returns the refined transform (including ``init``) and its fine-level loss.
    The result never has a higher loss than ``init``.
    """
    cfg = cfg or RegistrationConfig()
    f0 = _gray(fixed)
    m0 = _gray(moving)
    a_init = init.inverse().m.copy()
    fpyr = _pyramid(f0, cfg.pyramid_levels)
    mpyr = _pyramid(m0, len(fpyr))
    metric = cfg.fine_metric

    init_loss = _metric_loss(f0, m0, a_init, metric, cfg.max_samples)
    if not math.isfinite(init_loss):
        raise DivergedRefinement("initial transform leaves no usable overlap", init, init_loss)

    a = a_init.copy()
    for lvl in reversed(range(len(fpyr))):
        scale = 2.0**lvl
        level = _Level(fpyr[lvl], mpyr[lvl], scale, cfg.max_samples, metric)
        al = _level_matrix(a, scale)
        loss, r, J = level.evaluate(al)
        if not math.isfinite(loss):
            continue
        level_init = loss
        lam = 1e-3
        bad = 0
        best_al, best_loss = al.copy(), loss
        for _ in range(cfg.max_iters):
            H = J.T @ J
            g = J.T @ r
            diag = np.diag(H).copy()
            diag[diag <= 0] = 1e-12
            try:
                delta = np.linalg.solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                break
            cand = al + cfg.step_size * delta.reshape(2, 3)
            c_loss, c_r, c_J = level.evaluate(cand)
            if not math.isfinite(c_loss) or c_loss > 10.0 * level_init:
                bad += 1
                if bad >= 10:
                    best = AffineTransform2D.from_matrix3(
                        np.linalg.inv(np.vstack([_level_matrix(best_al, 1.0 / scale), [0, 0, 1]]))
                    )
                    raise DivergedRefinement(
                        f"refinement diverged at pyramid level {lvl}", best, best_loss
                    )
            else:
                bad = 0
            if math.isfinite(c_loss) and c_loss < loss:
                rel = (loss - c_loss) / max(loss, 1e-300)
                al, loss, r, J = cand, c_loss, c_r, c_J
                best_al, best_loss = al.copy(), loss
                lam = max(lam / 10.0, 1e-9)
                if rel < cfg.convergence_tol:
                    break
            else:
                lam *= 10.0
                if lam > 1e8:
                    break
        a = _level_matrix(best_al, 1.0 / scale)

    final_loss = _metric_loss(f0, m0, a, metric, cfg.max_samples)
    if not final_loss <= init_loss:
        return init, init_loss
    t = AffineTransform2D.from_matrix3(np.linalg.inv(np.vstack([a, [0, 0, 1]])))
    return t, final_loss


# --------------------------------------------------------------------------- #
# Pipeline
# --------------------------------------------------------------------------- #


def _crop(img: ImagePlane, r0: int, c0: int, r1: int, c1: int) -> ImagePlane:
    return ImagePlane(img.data[r0:r1, c0:c1], img.mpp, img.modality)


def _refine_tile(origin, plan, fixed_f, moving_f, global_t, cfg):
    r0, c0, r1, c1 = plan.rect(origin)
    fixed_tile = _crop(fixed_f, r0, c0, r1, c1)
    # footprint of the tile in moving coordinates, padded for the residual motion
    inv = global_t.inverse()
    corners = np.array([[c0, r0], [c1 - 1, r0], [c0, r1 - 1], [c1 - 1, r1 - 1]], dtype=float)
    fp = inv.apply(corners)
    margin = max(16, (r1 - r0 + c1 - c0) // 8)
    mh, mw = moving_f.height, moving_f.width
    qc0 = int(np.clip(math.floor(fp[:, 0].min()) - margin, 0, mw - 1))
    qc1 = int(np.clip(math.ceil(fp[:, 0].max()) + margin + 1, qc0 + 1, mw))
    qr0 = int(np.clip(math.floor(fp[:, 1].min()) - margin, 0, mh - 1))
    qr1 = int(np.clip(math.ceil(fp[:, 1].max()) + margin + 1, qr0 + 1, mh))
    moving_crop = _crop(moving_f, qr0, qc0, qr1, qc1)

    to_tile = AffineTransform2D.translation(-c0, -r0)
    from_crop = AffineTransform2D.translation(qc0, qr0)
    local_init = compose_affine(compose_affine(from_crop, global_t), to_tile)
    failed = None
    try:
        local, loss = refine_affine(fixed_tile, moving_crop, local_init, cfg)
    except DivergedRefinement as exc:
        failed = str(exc)
        local = exc.best if exc.best is not None else local_init
        loss = exc.best_loss
    total = compose_affine(
        compose_affine(AffineTransform2D.translation(-qc0, -qr0), local),
        AffineTransform2D.translation(c0, r0),
    )
    refined = compose_affine(global_t.inverse(), total)
    return refined, loss, failed


def register_pair(pas_pyramid: Pyramid, if_pyramid: Pyramid, cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Global translation at the coarse level, then per-tile affine refinement at the fine level."""
    cfg = cfg or RegistrationConfig()
    pas_c = pas_pyramid.level_for(cfg.coarse_level_mpp)
    if_c = if_pyramid.level_for(cfg.coarse_level_mpp)
    pas_f = pas_pyramid.level_for(cfg.fine_level_mpp)
    if_f = if_pyramid.level_for(cfg.fine_level_mpp)

    coarse_t = estimate_global_translation(preprocess_modality(pas_c), preprocess_modality(if_c), cfg)
    ratio = pas_c.mpp / pas_f.mpp
    global_t = AffineTransform2D.translation(coarse_t.m[0, 2] * ratio, coarse_t.m[1, 2] * ratio)

    fixed_f = preprocess_modality(pas_f)
    moving_f = preprocess_modality(if_f)
    plan = plan_tiles(fixed_f.height, fixed_f.width, cfg.tile_size, cfg.tile_overlap)
    result = RegistrationResult(global_t, plan)

    def work(origin):
        return origin, _refine_tile(origin, plan, fixed_f, moving_f, global_t, cfg)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            outputs = dict(pool.map(work, plan.origins))
    else:
        outputs = dict(map(work, plan.origins))

    for origin in plan.origins:
        refined, loss, failed = outputs[origin]
        result.refined_t[origin] = refined
        result.composed_t[origin] = compose_affine(global_t, refined)
        result.final_loss[origin] = loss
        if failed:
            result.failed[origin] = failed
            warnings.warn(f"tile {origin}: {failed}", RuntimeWarning, stacklevel=2)
    return result


def corner_error(estimated: AffineTransform2D, truth: AffineTransform2D, rect) -> float:
    """Max distance between where two moving->fixed transforms send a fixed-frame rectangle's corners back."""
    r0, c0, r1, c1 = rect
    corners = np.array([[c0, r0], [c1 - 1, r0], [c0, r1 - 1], [c1 - 1, r1 - 1]], dtype=float)
    a = estimated.inverse().apply(corners)
    b = truth.inverse().apply(corners)
    return float(np.max(np.linalg.norm(a - b, axis=1)))
