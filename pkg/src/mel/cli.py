"""Command-line entry point: ``mel <command> ...``."""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from pathlib import Path

from mel.core import Modality, Pyramid, load_image_png, load_kv, load_mask_png
from mel.errors import MelError


def _parse_seeds(text: str) -> list[int]:
    """``0..4`` (inclusive range) or a comma list ``0,2,5``."""
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def _load_pyramid(path: str, modality: Modality, cfg) -> Pyramid:
    """A saved pyramid directory, or a single fine-level PNG expanded into one."""
    p = Path(path)
    if p.is_dir():
        return Pyramid.load(p)
    factor = int(round(cfg.coarse_level_mpp / cfg.fine_level_mpp))
    return Pyramid.build(load_image_png(p, mpp=cfg.fine_level_mpp, modality=modality), (1, factor))


def cmd_register(args) -> int:
    from mel.registration import RegistrationConfig, register_pair

    settings = load_kv(args.config) if args.config else {}
    for key in ("coarse_metric", "fine_metric", "workers"):
        if getattr(args, key):
            settings[key] = getattr(args, key)
    cfg = RegistrationConfig(**settings)
    fixed = _load_pyramid(args.pas, Modality.PAS, cfg)
    moving = _load_pyramid(args.if_path, Modality.IF, cfg)
    result = register_pair(fixed, moving, cfg)
    result.save(args.out)
    print(f"global: {result.global_t}")
    print(f"tiles: {len(result.composed_t)} ok, {len(result.failed)} failed; written to {args.out}")
    return 0 if not result.failed else 3


def cmd_synth(args) -> int:
    from mel.harness import env_workers
    from mel.synthdata import generate_corpus, noise_from_dict, noise_preset, params_from_dict

    params, rest = params_from_dict(load_kv(args.config) if args.config else {})
    noise = noise_from_dict(noise_preset(args.noise_preset, params), rest)
    corpus = generate_corpus(params, noise, args.out, workers=env_workers(1))
    print(f"gold manifest: {corpus.gold_manifest}")
    print(f"noisy manifest: {corpus.noisy_manifest}")
    return 0


def _train_config(path):
    from mel.harness import train_config_from_dict

    return train_config_from_dict(load_kv(path) if path else {})


def cmd_train(args) -> int:
    from mel.harness import train

    cfg = _train_config(args.config)
    if args.manifest:
        cfg.manifest_path = args.manifest
    if args.gold_manifest:
        cfg.gold_manifest_path = args.gold_manifest
    if args.out:
        cfg.checkpoint_dir = args.out
    ckpt, record = train(cfg)
    print(f"checkpoint: {ckpt} (best epoch {record.best_epoch}, {record.wall_clock:.1f}s)")
    if record.test_report_path:
        print(f"test report: {record.test_report_path}")
    return 0


def cmd_eval(args) -> int:
    from mel.metrics import evaluate_model
    from mel.model import load_checkpoint

    model = load_checkpoint(args.ckpt)
    report = evaluate_model(model, args.manifest, args.split, n_classes=model.cfg.n_classes)
    report.to_csv(args.out)
    for r in report.rows:
        print(f"{r['condition']:>8} {r['cell_type']:>10} {r['f1']:.4f} (n={r['n_patches']})")
    return 0


def cmd_kappa(args) -> int:
    from mel.metrics import RaterPanel, fleiss_kappa

    groups = [sorted(glob.glob(g)) for g in args.masks]
    if len(groups) < 2:
        raise ValueError("pass one --masks glob per rater (at least two)")
    if any(not g for g in groups):
        raise FileNotFoundError("a rater glob matched no files")
    if len({len(g) for g in groups}) != 1:
        raise ValueError("every rater glob must match the same number of masks")
    import numpy as np

    # concatenate each rater's masks (paired by sorted order) into one long item list
    masks = [np.concatenate([load_mask_png(p).reshape(-1) for p in g]) for g in groups]
    kappa = fleiss_kappa(RaterPanel(masks), args.stride)
    print(f"fleiss_kappa {kappa:.6f}")
    return 0


def cmd_ablate(args) -> int:
    from mel.harness import run_ablation

    grid = load_kv(args.grid) if args.grid else None
    if isinstance(grid, dict):
        grid = grid.get("grid")
    base = _train_config(args.config)
    if args.out:
        base.checkpoint_dir = str(Path(args.out).parent / "ablation_runs")
    rows = run_ablation(grid, base, args.out)
    for r in rows:
        print(f"{r['config']:<22} {r['Podocyte F1']:.4f} {r['Mesangial F1']:.4f} {r['Average F1']:.4f} {r['status']}")
    return 0 if all(r["status"] == "ok" for r in rows) else 3


def cmd_benefit(args) -> int:
    from mel.harness import desk_synth_params, desk_train_config, run_benefit_experiment, train_config_from_dict

    data = load_kv(args.config) if args.config else {}
    base = train_config_from_dict(data.get("train", {}), desk_train_config())
    synth = desk_synth_params(**data.get("synth", {}))
    summary = run_benefit_experiment(args.noise, _parse_seeds(args.seeds), base, synth, args.out)
    print(json.dumps({"per_seed_delta": summary.deltas, "mean_delta": summary.mean_delta}, indent=2))
    print(f"summary: {summary.csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mel", description="Multimodal-assisted cell segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("register", help="register an IF slide onto its PAS twin")
    s.add_argument("--pas", required=True, help="PAS pyramid directory (or fine-level PNG)")
    s.add_argument("--if", dest="if_path", required=True, help="IF pyramid directory (or fine-level PNG)")
    s.add_argument("--config", help="registration key-value file")
    s.add_argument("--out", required=True)
    s.add_argument("--coarse-metric", choices=["ncc", "phase_correlation"])
    s.add_argument("--fine-metric", choices=["mse", "ncc"])
    s.add_argument("--workers", type=int, default=0)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--config", help="key-value file of corpus and noise parameters")
    s.add_argument("--out", required=True)
    s.add_argument("--noise-preset", default="lay", choices=["clean", "lay", "harsh"])
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", help="training key-value file")
    s.add_argument("--manifest", help="override manifest_path")
    s.add_argument("--gold-manifest", help="override gold_manifest_path")
    s.add_argument("--out", help="override checkpoint_dir")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a manifest split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", default="report.csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("kappa", help="Fleiss' kappa across raters")
    s.add_argument("--masks", action="append", required=True, help="glob of one rater's masks (repeat per rater)")
    s.add_argument("--stride", type=int, default=4)
    s.set_defaults(func=cmd_kappa)

    s = sub.add_parser("ablate", help="run the confidence/similarity mode grid")
    s.add_argument("--grid", help="key-value file with a list of loss settings")
    s.add_argument("--config", help="base training key-value file")
    s.add_argument("--out", default="ablation.csv")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("benefit", help="corrective vs plain loss on noisy labels")
    s.add_argument("--noise", default="lay", choices=["clean", "lay", "harsh"])
    s.add_argument("--seeds", default="0..4")
    s.add_argument("--config", help="key-value file with optional 'train' and 'synth' sections")
    s.add_argument("--out", default="benefit")
    s.set_defaults(func=cmd_benefit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MelError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
