"""Class-conditioned encoder-decoder segmentation network.

A shared U-Net trunk ends in an M-channel embedding layer; one 1x1 head per
cell class turns that embedding into background/foreground logits. The
trunk never sees the class id, so every head reads the same embedding.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml

from mel.core import dump_kv
from mel.errors import UnknownClass


@dataclass
class ModelConfig:
    base_channels: int = 16
    depth: int = 4
    embedding_channels: int = 16
    n_classes: int = 2
    seed: int = 0
    in_channels: int = 3

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.embedding_channels < 2:
            raise ValueError("embedding_channels must be >= 2")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class SegModelOutput:
    logits: torch.Tensor  # (N, 2, H, W)
    embedding: torch.Tensor  # (N, M, H, W)

    @property
    def prob(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=1)


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class SegModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = [cfg.base_channels * 2**i for i in range(cfg.depth)]
        self.encoders = nn.ModuleList([_block(cfg.in_channels, ch[0])])
        self.downs = nn.ModuleList()
        for i in range(1, cfg.depth):
            self.downs.append(nn.Sequential(nn.Conv2d(ch[i - 1], ch[i - 1], 3, stride=2, padding=1), nn.ReLU(inplace=True)))
            self.encoders.append(_block(ch[i - 1], ch[i]))
        # decoders[j] restores level depth-2-j
        self.decoders = nn.ModuleList([_block(ch[i + 1] + ch[i], ch[i]) for i in reversed(range(cfg.depth - 1))])
        self.embed = nn.Conv2d(ch[0], cfg.embedding_channels, 3, padding=1)
        self.heads = nn.ModuleList([nn.Conv2d(cfg.embedding_channels, 2, 1) for _ in range(cfg.n_classes)])
        for head in self.heads:
            nn.init.normal_(head.weight, std=0.01)
            nn.init.zeros_(head.bias)

    @property
    def multiple(self) -> int:
        return 2 ** (self.cfg.depth - 1)

    def trunk(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % self.multiple or x.shape[-2] % self.multiple:
            raise ValueError(f"input size {tuple(x.shape[-2:])} must be divisible by {self.multiple}")
        skips = []
        h = self.encoders[0](x - 0.5)
        for down, enc in zip(self.downs, self.encoders[1:]):
            skips.append(h)
            h = enc(down(h))
        for dec in self.decoders:
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = dec(torch.cat([h, skip], dim=1))
        return self.embed(h)

    def forward(self, x: torch.Tensor, class_ids: torch.Tensor) -> SegModelOutput:
        emb = self.trunk(x)
        class_ids = torch.as_tensor(class_ids, device=x.device).reshape(-1)
        if class_ids.numel() == 1 and x.shape[0] > 1:
            class_ids = class_ids.expand(x.shape[0])
        if (class_ids < 0).any() or (class_ids >= self.cfg.n_classes).any():
            raise UnknownClass(f"class id outside [0, {self.cfg.n_classes})")
        logits = torch.empty(emb.shape[0], 2, *emb.shape[2:], dtype=emb.dtype, device=emb.device)
        for c in torch.unique(class_ids).tolist():
            sel = class_ids == c
            logits[sel] = self.heads[c](emb[sel])
        return SegModelOutput(logits, emb)


def init_model(cfg: ModelConfig) -> SegModel:
    """Build a model whose parameters depend only on ``cfg`` (including its seed)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = SegModel(cfg)
    return model.eval()


def _as_batch(patch) -> torch.Tensor:
    # numpy input is channel-last H x W x C; tensors are already C x H x W or N x C x H x W
    if isinstance(patch, torch.Tensor):
        return patch.unsqueeze(0) if patch.ndim == 3 else patch
    arr = np.asarray(patch, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).unsqueeze(0)


def forward(model: SegModel, patch, class_id) -> SegModelOutput:
    """Run ``model`` on an H x W x 3 array (or an N x 3 x H x W tensor)."""
    x = _as_batch(patch)
    param = next(model.parameters())
    return model(x.to(dtype=param.dtype), class_id)


@torch.no_grad()
def predict_foreground(model: SegModel, image: np.ndarray, class_id: int) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = forward(model, image, class_id)
    if was_training:
        model.train()
    return out.prob[0, 1].cpu().numpy()


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: SegModel, path, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"config": dump_kv(asdict(model.cfg)), "state_dict": model.state_dict(), **extra}, path)
    return path


def load_checkpoint(path) -> SegModel:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    cfg = ModelConfig.from_dict(yaml.safe_load(blob["config"]))
    model = SegModel(cfg)
    model.load_state_dict(blob["state_dict"])
    state_dtype = next(iter(blob["state_dict"].values())).dtype
    return model.to(state_dtype).eval()
