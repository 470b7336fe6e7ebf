"""Molecular-oriented corrective loss.

The model's own foreground confidence picks the k most trusted annotated
pixels; their decoder embeddings act as a reference for the annotated cell
type. Annotated pixels whose embeddings disagree with the reference, or that
the model is unsure about, get a small loss weight. The weighted loss is
Dice + BCE.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields

import torch

from mel.errors import DegenerateWeights, EmptyAnnotation
from mel.model import SegModelOutput

log = logging.getLogger(__name__)

MODES = ("linear", "exponent")
REDUCTIONS = ("mean", "prototype")
PROB_CLAMP = 1e-7

# ablation row order
ABLATION_GRID = (
    ("linear", "linear"),
    ("linear", "exponent"),
    ("exponent", "linear"),
    ("exponent", "exponent"),
)


@dataclass
class MoclConfig:
    k: int = 64
    confidence_mode: str = "exponent"
    similarity_mode: str = "linear"
    background_weight: float = 1.0
    smooth_eps: float = 1.0
    enabled: bool = True
    similarity_reduction: str = "mean"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.smooth_eps <= 0:
            raise ValueError("smooth_eps must be positive")
        if self.background_weight < 0:
            raise ValueError("background_weight must be non-negative")
        for name in ("confidence_mode", "similarity_mode"):
            if getattr(self, name) not in MODES:
                raise ValueError(f"{name} must be one of {MODES}")
        if self.similarity_reduction not in REDUCTIONS:
            raise ValueError(f"similarity_reduction must be one of {REDUCTIONS}")

    @classmethod
    def from_dict(cls, data: dict) -> "MoclConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**data)

    @property
    def label(self) -> str:
        if not self.enabled:
            return "Plain"
        return f"{self.confidence_mode.capitalize()} & {self.similarity_mode.capitalize()}"


@dataclass
class CriticalEmbeddings:
    vectors: torch.Tensor  # (k, M)
    confidences: torch.Tensor  # (k,), descending
    pixel_indices: torch.Tensor  # (k, 2) rows of (row, col)

    def __len__(self) -> int:
        return self.vectors.shape[0]


def confidence_map(output: SegModelOutput) -> torch.Tensor:
    """Foreground probability channel, shape (N, H, W)."""
    return output.prob[:, 1]


def select_topk(E: torch.Tensor, W: torch.Tensor, Y: torch.Tensor, k: int) -> CriticalEmbeddings:
    """The ``k`` annotated pixels with the highest confidence.

    ``E`` is (M, H, W); ``W`` and ``Y`` are (H, W). Ties go to the smaller
    row-major pixel index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    h, w = W.shape
    flat = torch.nonzero(Y.reshape(-1) > 0.5, as_tuple=False).reshape(-1)
    if flat.numel() == 0:
        raise EmptyAnnotation("annotation mask is empty")
    conf = W.reshape(-1)[flat]
    order = torch.sort(conf, descending=True, stable=True).indices[: min(k, flat.numel())]
    idx = flat[order]
    vectors = E.reshape(E.shape[0], -1)[:, idx].T
    rows = torch.div(idx, w, rounding_mode="floor")
    return CriticalEmbeddings(vectors, conf[order], torch.stack([rows, idx - rows * w], dim=1))


def _unit(v: torch.Tensor, dim: int) -> torch.Tensor:
    n = torch.linalg.vector_norm(v, dim=dim, keepdim=True)
    return torch.where(n > 0, v / torch.where(n > 0, n, torch.ones_like(n)), torch.zeros_like(v))


def similarity_map(E: torch.Tensor, crit: CriticalEmbeddings, reduction: str = "mean") -> torch.Tensor:
    """Cosine similarity of every pixel embedding to the critical set, shape (H, W).

    ``mean`` averages the cosine to each critical vector; ``prototype`` takes
    the cosine to their mean vector. Zero-norm vectors count as cosine 0.
    """
    if len(crit) == 0:
        raise EmptyAnnotation("no critical embeddings")
    e_hat = _unit(E, dim=0)  # (M, H, W)
    if reduction == "mean":
        ref = _unit(crit.vectors, dim=1).mean(dim=0)
    elif reduction == "prototype":
        ref = _unit(crit.vectors.mean(dim=0), dim=0)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    s = torch.einsum("mhw,m->hw", e_hat, ref)
    return s.clamp(-1.0, 1.0)


def _g(x: torch.Tensor, mode: str) -> torch.Tensor:
    return torch.exp(x) if mode == "exponent" else x


def corrective_weights(W: torch.Tensor, S: torch.Tensor, Y: torch.Tensor, cfg: MoclConfig) -> torch.Tensor:
    """Per-pixel loss weight: g_c(W) * g_s(clamp(S, 0, 1)) on annotated pixels, a constant elsewhere."""
    if not cfg.enabled:
        return torch.ones_like(W)
    fg = _g(W, cfg.confidence_mode) * _g(S.clamp(0.0, 1.0), cfg.similarity_mode)
    bg = torch.full_like(W, cfg.background_weight)
    return torch.where(Y > 0.5, fg, bg)


def weighted_dice_bce(prob_fg: torch.Tensor, Y: torch.Tensor, omega: torch.Tensor, smooth_eps: float = 1.0) -> torch.Tensor:
    """Weighted Dice + weighted-mean BCE for one sample (any matching shapes)."""
    p = prob_fg.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    Y = Y.to(p.dtype)
    omega = omega.to(p.dtype)
    total = omega.sum()
    if not total > 0:
        raise DegenerateWeights("loss weights sum to zero")
    bce = -(Y * torch.log(p) + (1.0 - Y) * torch.log1p(-p))
    bce_term = (omega * bce).sum() / total
    inter = (omega * p * Y).sum()
    dice_term = 1.0 - (2.0 * inter + smooth_eps) / ((omega * p).sum() + (omega * Y).sum() + smooth_eps)
    return dice_term + bce_term


@torch.no_grad()
def compute_guidance(output: SegModelOutput, Y: torch.Tensor, cfg: MoclConfig) -> torch.Tensor:
    """Detached per-pixel weights (N, H, W); samples with empty annotation get unit weights."""
    Y = Y.reshape(output.logits.shape[0], *output.logits.shape[2:])
    W = confidence_map(output)
    if not cfg.enabled:
        return torch.ones_like(W)
    omegas = []
    for i in range(W.shape[0]):
        try:
            crit = select_topk(output.embedding[i], W[i], Y[i], cfg.k)
        except EmptyAnnotation:
            log.warning("empty annotation in batch item %d; using unweighted loss", i)
            omegas.append(torch.ones_like(W[i]))
            continue
        S = similarity_map(output.embedding[i], crit, cfg.similarity_reduction)
        omegas.append(corrective_weights(W[i], S, Y[i], cfg))
    return torch.stack(omegas)


def mocl_loss(output: SegModelOutput, Y: torch.Tensor, cfg: MoclConfig, guidance: torch.Tensor | None = None) -> torch.Tensor:
    """Batch-mean corrective Dice + BCE.

    Gradients flow only through the foreground probability; the weights are
    guidance. Pass ``guidance`` to reuse weights computed earlier.
    """
    n = output.logits.shape[0]
    Y = Y.reshape(n, *output.logits.shape[2:])
    omega = compute_guidance(output, Y, cfg) if guidance is None else guidance.detach()
    prob_fg = output.prob[:, 1]
    losses = [weighted_dice_bce(prob_fg[i], Y[i], omega[i], cfg.smooth_eps) for i in range(n)]
    return torch.stack(losses).mean()


def plain_dice_bce(prob_fg: torch.Tensor, Y: torch.Tensor, smooth_eps: float = 1.0) -> torch.Tensor:
    """Unweighted Dice + mean BCE, written out independently of the weighted form."""
    p = prob_fg.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    Y = Y.to(p.dtype)
    bce = -(Y * torch.log(p) + (1.0 - Y) * torch.log1p(-p)).mean()
    dice = 1.0 - (2.0 * (p * Y).sum() + smooth_eps) / (p.sum() + Y.sum() + smooth_eps)
    return dice + bce


def expected_weight_example(w: float, s: float, cfg: MoclConfig) -> float:
    """Scalar weight of an annotated pixel; handy for documentation and checks."""
    gc = math.exp(w) if cfg.confidence_mode == "exponent" else w
    s = min(max(s, 0.0), 1.0)
    gs = math.exp(s) if cfg.similarity_mode == "exponent" else s
    return gc * gs
