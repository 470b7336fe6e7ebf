"""Training loop, ablation grid and the noisy-label benefit experiment."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from mel.core import CLASS_NAMES, PatchSample, dump_kv
from mel.errors import InsufficientData, NonFiniteLoss
from mel.metrics import CONDITIONS, MetricsReport, evaluate_model, f1_score, load_samples
from mel.mocl import ABLATION_GRID, MoclConfig, mocl_loss
from mel.model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from mel.synthdata import SynthParams, generate_corpus, noise_preset

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd_momentum")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    loss: MoclConfig = field(default_factory=MoclConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    manifest_path: str | None = None
    gold_manifest_path: str | None = None
    checkpoint_dir: str = "runs/train"
    eval_every: int = 1
    augment: bool = True
    warmup_epochs: int = 0
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = MoclConfig.from_dict(self.loss)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    config_hash: str
    epoch_losses: list = field(default_factory=list)
    val_f1: list = field(default_factory=list)  # (epoch, f1)
    best_epoch: int = 0
    checkpoint: str = ""
    test_report_path: str | None = None
    wall_clock: float = 0.0

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))


def env_workers(default: int = 1) -> int:
    """Worker count, overridable through MEL_WORKERS."""
    value = os.environ.get("MEL_WORKERS")
    if not value:
        return default
    try:
        n = int(value)
    except ValueError:
        raise ValueError(f"MEL_WORKERS must be an integer, got {value!r}") from None
    return max(1, n)


@contextmanager
def _torch_threads(n: int):
    old = torch.get_num_threads()
    torch.set_num_threads(max(1, n))
    try:
        yield
    finally:
        torch.set_num_threads(old)


def _stack(samples: list[PatchSample]):
    x = torch.from_numpy(np.stack([s.image.data[:, :, :3].transpose(2, 0, 1) for s in samples]).astype(np.float32))
    y = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float32))
    c = torch.tensor([s.class_id for s in samples], dtype=torch.long)
    return x, y, c


def _augment(x: torch.Tensor, y: torch.Tensor, gen: torch.Generator):
    # independent dihedral transform per sample
    xs, ys = [], []
    for i in range(x.shape[0]):
        k, flip = torch.randint(0, 4, (2,), generator=gen).tolist()
        xi, yi = torch.rot90(x[i], k, (1, 2)), torch.rot90(y[i], k, (0, 1))
        if flip % 2:
            xi, yi = xi.flip(2), yi.flip(1)
        xs.append(xi)
        ys.append(yi)
    return torch.stack(xs), torch.stack(ys)


@torch.no_grad()
def _mean_f1(model, x, y, c, batch: int = 16) -> float:
    model.eval()
    scores = []
    for i in range(0, x.shape[0], batch):
        prob = model(x[i : i + batch], c[i : i + batch]).prob[:, 1].numpy()
        scores.extend(f1_score(p > 0.5, t) for p, t in zip(prob, y[i : i + batch].numpy()))
    return float(np.mean(scores))


def _dump_batch(cfg: TrainConfig, epoch: int, ids: list) -> Path:
    path = Path(cfg.checkpoint_dir) / "nonfinite_batch.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"epoch": epoch, "samples": ids}, indent=2))
    return path


def train(cfg: TrainConfig):
    """Fit a model on the training split of ``cfg.manifest_path``.

    Returns ``(checkpoint_path, RunRecord)``. The checkpoint holds the model
    with the best validation F1 (against the manifest's own masks). When a
    gold manifest is configured, that model is also scored on its test split.
    """
    if cfg.manifest_path is None:
        raise ValueError("manifest_path is required")
    manifest = Path(cfg.manifest_path)
    if not manifest.exists():
        raise FileNotFoundError(manifest)
    train_s = load_samples(manifest, "train", is_gold=False)
    if not train_s:
        raise InsufficientData("training split is empty")
    val_s = load_samples(manifest, "val", is_gold=False)
    out_dir = Path(cfg.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "best.pt"
    record = RunRecord(cfg.config_hash, checkpoint=str(ckpt))
    start = time.perf_counter()

    with _torch_threads(cfg.threads):
        x, y, c = _stack(train_s)
        ids = [f"{s.wsi_id}:{s.class_id}:{i}" for i, s in enumerate(train_s)]
        if val_s:
            vx, vy, vc = _stack(val_s)
        model_cfg = replace(cfg.model, n_classes=max(cfg.model.n_classes, int(c.max()) + 1))
        model = init_model(model_cfg)
        gen = torch.Generator().manual_seed(cfg.seed)
        if cfg.optimizer == "adam":
            opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        else:
            opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=0.9)
        plain = replace(cfg.loss, enabled=False)
        best = -math.inf

        for epoch in range(1, cfg.epochs + 1):
            model.train()
            loss_cfg = plain if epoch <= cfg.warmup_epochs else cfg.loss
            order = torch.randperm(x.shape[0], generator=gen)
            total, n_seen = 0.0, 0
            for start_i in range(0, len(order), cfg.batch_size):
                idx = order[start_i : start_i + cfg.batch_size]
                xb, yb = x[idx], y[idx]
                if cfg.augment:
                    xb, yb = _augment(xb, yb, gen)
                out = model(xb, c[idx])
                loss = mocl_loss(out, yb, loss_cfg)
                if not torch.isfinite(loss):
                    path = _dump_batch(cfg, epoch, [ids[i] for i in idx.tolist()])
                    raise NonFiniteLoss(f"non-finite loss at epoch {epoch}; batch written to {path}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                n_seen += len(idx)
            record.epoch_losses.append(total / n_seen)

            if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
                score = _mean_f1(model, vx, vy, vc) if val_s else -record.epoch_losses[-1]
                record.val_f1.append((epoch, score))
                if score > best:
                    best = score
                    record.best_epoch = epoch
                    save_checkpoint(model, ckpt, epoch=epoch)
            log.info("epoch %d loss %.4f", epoch, record.epoch_losses[-1])

        if cfg.gold_manifest_path:
            report = evaluate_model(load_checkpoint(ckpt), cfg.gold_manifest_path, "test", n_classes=model_cfg.n_classes)
            report_path = out_dir / "test_report.csv"
            report.to_csv(report_path)
            record.test_report_path = str(report_path)

    record.wall_clock = time.perf_counter() - start
    (out_dir / "config.yaml").write_text(dump_kv(_plain(cfg.to_dict())))
    record.save(out_dir / "record.json")
    return ckpt, record


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def train_and_evaluate(cfg: TrainConfig) -> tuple[MetricsReport, RunRecord]:
    if not cfg.gold_manifest_path:
        raise ValueError("gold_manifest_path is required for evaluation")
    ckpt, record = train(cfg)
    report = evaluate_model(load_checkpoint(ckpt), cfg.gold_manifest_path, "test", n_classes=cfg.model.n_classes)
    return report, record


# --------------------------------------------------------------------------- #
# Ablation grid
# --------------------------------------------------------------------------- #

ABLATION_FIELDS = ("config", "Podocyte F1", "Mesangial F1", "Average F1", "status")
_MODE_RANK = {m: i for i, m in enumerate(ABLATION_GRID)}


def default_grid() -> list[dict]:
    return [{"confidence_mode": cm, "similarity_mode": sm} for cm, sm in ABLATION_GRID]


def _class_f1(report: MetricsReport, class_id: int) -> float:
    return report.f1("average", CLASS_NAMES[class_id])


def run_ablation(grid: list[dict] | None, base: TrainConfig, out_csv=None) -> list[dict]:
    """Train one model per grid cell on the same corpus and seed.

    Rows come back in linear/linear, linear/exponent, exponent/linear,
    exponent/exponent order. A failing cell is recorded with NaN scores.
    """
    grid = default_grid() if grid is None else list(grid)
    rows = []
    for i, cell in enumerate(grid):
        modes = (cell.get("confidence_mode", base.loss.confidence_mode), cell.get("similarity_mode", base.loss.similarity_mode))
        row = {"config": f"{modes[0].capitalize()} & {modes[1].capitalize()}", "_rank": _MODE_RANK.get(modes, len(_MODE_RANK)), "_pos": i}
        tag = f"{i:02d}_{modes[0]}_{modes[1]}_k{cell.get('k', base.loss.k)}"
        try:
            loss = replace(base.loss, enabled=True, **cell)
            cfg = replace(base, loss=loss, checkpoint_dir=str(Path(base.checkpoint_dir) / tag))
            report, _ = train_and_evaluate(cfg)
            pod, mes = _class_f1(report, 0), _class_f1(report, 1)
            row.update({"Podocyte F1": pod, "Mesangial F1": mes, "Average F1": (pod + mes) / 2, "status": "ok"})
        except Exception as exc:  # noqa: BLE001 - one bad cell must not sink the grid
            log.error("ablation cell %s failed: %s", tag, exc)
            row.update({"Podocyte F1": math.nan, "Mesangial F1": math.nan, "Average F1": math.nan, "status": f"failed: {exc}"})
        rows.append(row)
    rows.sort(key=lambda r: (r["_rank"], r["_pos"]))
    rows = [{k: v for k, v in r.items() if not k.startswith("_")} for r in rows]
    if out_csv is not None:
        _write_rows(out_csv, ABLATION_FIELDS, rows)
    return rows


def _write_rows(path, header, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


# --------------------------------------------------------------------------- #
# Benefit experiment: corrective loss vs plain loss on noisy labels
# --------------------------------------------------------------------------- #


def _metric_columns(n_classes: int = 2) -> list[str]:
    cols = [f"{cond}_{CLASS_NAMES[c]}" for cond in CONDITIONS for c in range(n_classes)]
    return cols + [f"average_{CLASS_NAMES[c]}" for c in range(n_classes)] + ["average_f1"]


def _report_values(report: MetricsReport, n_classes: int = 2) -> dict:
    vals = {f"{r['condition']}_{r['cell_type']}": r["f1"] for r in report.rows}
    vals["average_f1"] = float(np.mean([vals[f"average_{CLASS_NAMES[c]}"] for c in range(n_classes)]))
    return vals


@dataclass
class BenefitSummary:
    rows: list  # one dict per (seed, arm), then the mean-delta row
    deltas: dict  # seed -> average_f1 delta (corrective minus plain)
    mean_delta: dict  # metric -> mean delta over completed seeds
    failed: dict = field(default_factory=dict)
    csv_path: str | None = None

    @property
    def positive_seeds(self) -> int:
        return sum(1 for d in self.deltas.values() if d > 0)


def run_benefit_experiment(
    noise: str,
    seeds,
    base: TrainConfig,
    synth: SynthParams,
    out_dir,
    workers: int | None = None,
) -> BenefitSummary:
    """Per seed: build a corpus, train plain and corrective arms on noisy masks, score both on gold."""
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError("the benefit experiment needs at least 3 seeds")
    workers = env_workers(1) if workers is None else workers
    out_dir = Path(out_dir)
    cols = _metric_columns(synth.n_classes)
    rows, deltas, per_metric, failed = [], {}, {k: [] for k in cols}, {}
    for seed in seeds:
        try:
            params = replace(synth, texture_seed=seed)
            corpus = generate_corpus(params, noise_preset(noise, params), out_dir / f"seed{seed}" / "corpus", workers=workers)
            arm_vals = {}
            for arm, enabled in (("plain", False), ("mocl", True)):
                cfg = replace(
                    base,
                    seed=seed,
                    model=replace(base.model, seed=seed, n_classes=synth.n_classes),
                    loss=replace(base.loss, enabled=enabled),
                    manifest_path=str(corpus.noisy_manifest),
                    gold_manifest_path=str(corpus.gold_manifest),
                    checkpoint_dir=str(out_dir / f"seed{seed}" / arm),
                )
                report, record = train_and_evaluate(cfg)
                arm_vals[arm] = _report_values(report, synth.n_classes)
                rows.append({"seed": seed, "arm": arm, **{k: arm_vals[arm][k] for k in cols}, "wall_clock": record.wall_clock})
        except Exception as exc:  # noqa: BLE001 - summarize the seeds that finished
            log.error("benefit seed %s failed: %s", seed, exc)
            failed[seed] = str(exc)
            rows = [r for r in rows if r["seed"] != seed]
            continue
        for k in cols:
            per_metric[k].append(arm_vals["mocl"][k] - arm_vals["plain"][k])
        deltas[seed] = arm_vals["mocl"]["average_f1"] - arm_vals["plain"]["average_f1"]
    mean_delta = {k: float(np.nanmean(v)) if v else math.nan for k, v in per_metric.items()}
    rows.append({"seed": "mean", "arm": "delta", **mean_delta, "wall_clock": math.nan})
    summary = BenefitSummary(rows, deltas, mean_delta, failed)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary.csv_path = str(out_dir / "benefit_summary.csv")
    _write_rows(summary.csv_path, ["seed", "arm", *cols, "wall_clock"], rows)
    return summary


def desk_synth_params(**overrides) -> SynthParams:
    """Small corpus geometry that trains in minutes on one CPU core."""
    base = dict(
        n_wsis=10,
        glomeruli_per_wsi=10,
        patch_size=64,
        cell_radius_px=(3.0, 5.0),
        cells_per_class=(3, 5),
    )
    base.update(overrides)
    return SynthParams(**base)


def desk_train_config(**overrides) -> TrainConfig:
    base = dict(model=ModelConfig(base_channels=8, depth=3, embedding_channels=8))
    base.update(overrides)
    return TrainConfig(**base)


def train_config_from_dict(data: dict, base: TrainConfig | None = None) -> TrainConfig:
    """Overlay key-value settings (nested ``loss``/``model`` sections allowed) on ``base``."""
    base = base or TrainConfig()
    data = dict(data)
    unknown = set(data) - {f.name for f in fields(TrainConfig)}
    if unknown:
        raise ValueError(f"unknown train config keys: {sorted(unknown)}")
    if "loss" in data:
        data["loss"] = replace(base.loss, **data["loss"])
    if "model" in data:
        data["model"] = replace(base.model, **data["model"])
    return replace(base, **data)
