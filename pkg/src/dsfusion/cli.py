"""Command-line entry point: pilot, select, train, fuse, eval, freq.

Exit codes: 0 success, 1 runtime failure, 2 configuration/usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import DatasetError, PatchGridSpec, load_pair, load_split_patches, scan_split, to_luma_chroma


class ConfigError(Exception):
    pass


PILOT_KEYS = {
    "data_root", "split", "num_classes", "epochs", "batch_size", "lr", "weight_lr",
    "seed", "val_fraction", "patch_size", "stride", "device",
}
TRAIN_KEYS = {
    "data_root", "pilot_ckpt_ir", "pilot_ckpt_vi", "selection_ir", "selection_vi",
    "num_classes", "lr", "betas", "batch_size", "lam", "patch_size", "stride",
    "epochs", "max_steps", "seed", "weight_lr", "val_fraction", "grad_clip", "device",
}
SELECT_KEYS = {"trajectory", "tau", "k_min", "k_max", "modality"}
FUSE_KEYS = {"checkpoint", "data", "rgb", "ids", "device"}
EVAL_KEYS = {"fused", "data", "checkpoint"}
FREQ_KEYS = {"checkpoint", "data", "id", "plot"}


def load_config_file(path: str, allowed: set[str]) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {p}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {p} must be a JSON object")
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys in {p}: {', '.join(unknown)}")
    return doc


def _prepare_out_dir(out: str, force: bool) -> Path:
    out_dir = Path(out)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ConfigError(f"output directory {out_dir} is not empty (use --force)")
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _require_dir(path: Path, what: str) -> None:
    if not path.is_dir():
        raise ConfigError(f"missing {what}: {path}")


def _require_file(path: Path, what: str) -> None:
    if not path.is_file():
        raise ConfigError(f"missing {what}: {path}")


def _merge_config(args, allowed: set[str], defaults: dict, required=()) -> None:
    """Fill unset CLI options from --config; explicit flags win over the file."""
    cfg = load_config_file(args.config, allowed) if getattr(args, "config", None) else {}
    for key, fallback in defaults.items():
        current = getattr(args, key, None)
        if current is None or current is False:  # absent flag or untouched store_true
            setattr(args, key, cfg.get(key, fallback if current is None else current))
    missing = [k for k in required if not getattr(args, k)]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join(sorted(missing))}")


def cmd_pilot(args) -> int:
    from .pilot import PilotConfig, run_pilot

    cfg = load_config_file(args.config, PILOT_KEYS)
    if args.seed is not None:
        cfg["seed"] = args.seed
    split = cfg.pop("split", "train")
    root = cfg.pop("data_root", "")
    if not root:
        raise ConfigError("config must set data_root")
    data_root = Path(root)
    _require_dir(data_root / split / "ir", "infrared directory")
    _require_dir(data_root / split / "vi", "visible directory")
    _require_dir(data_root / split / "labels", "labels directory")
    spec = PatchGridSpec(
        patch_size=int(cfg.pop("patch_size", 256)), stride=int(cfg.pop("stride", 100))
    )
    out_dir = _prepare_out_dir(args.out, args.force)

    pilot_cfg = PilotConfig(**cfg)
    patches = load_split_patches(data_root, split, spec, require_labels=True)
    ckpt, traj = run_pilot(args.modality, patches, pilot_cfg, out_dir)
    print(f"pilot {args.modality}: {len(traj)} epochs, checkpoint {ckpt}")
    return 0


def cmd_select(args) -> int:
    from .pilot import SelectionRule, save_selection, select_significant
    from .rfam import load_trajectory_csv

    _merge_config(
        args,
        SELECT_KEYS,
        {"trajectory": None, "tau": 0.6, "k_min": 1, "k_max": 3, "modality": None},
        required=("trajectory",),
    )
    traj_path = Path(args.trajectory)
    _require_file(traj_path, "trajectory CSV")
    modality = args.modality
    if modality is None:
        stem = traj_path.stem
        for m in ("ir", "vi"):
            if stem.endswith(f"_{m}"):
                modality = m
        if modality is None:
            raise ConfigError("cannot infer modality from filename; pass --modality")
    traj = load_trajectory_csv(traj_path, modality=modality)
    rule = SelectionRule(tau=args.tau, k_min=args.k_min, k_max=args.k_max)
    sel = select_significant(traj, rule)
    sel.trajectory_path = str(traj_path)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise ConfigError(f"output file {out} exists (use --force)")
    save_selection(sel, out)
    print(f"selected {len(sel.entries)} features for {modality}: {sel.entries}")
    return 0


def cmd_train(args) -> int:
    from .trainer import TrainConfig, train_joint

    cfg = load_config_file(args.config, TRAIN_KEYS)
    if args.seed is not None:
        cfg["seed"] = args.seed
    for key in ("data_root", "pilot_ckpt_ir", "pilot_ckpt_vi", "selection_ir", "selection_vi"):
        if key not in cfg:
            raise ConfigError(f"config must set {key}")
    if "betas" in cfg:
        cfg["betas"] = tuple(cfg["betas"])
    config = TrainConfig(**cfg)
    _require_dir(Path(config.data_root) / "train" / "ir", "infrared directory")
    _require_dir(Path(config.data_root) / "train" / "vi", "visible directory")
    _require_dir(Path(config.data_root) / "train" / "labels", "labels directory")
    for key in ("pilot_ckpt_ir", "pilot_ckpt_vi", "selection_ir", "selection_vi"):
        _require_file(Path(getattr(config, key)), key)
    run_dir = _prepare_out_dir(args.out, args.force)
    train_joint(config, run_dir)
    print(f"run directory: {run_dir}")
    return 0


def cmd_fuse(args) -> int:
    from .trainer import fuse_inference

    _merge_config(
        args,
        FUSE_KEYS,
        {"checkpoint": None, "data": None, "rgb": False, "ids": None, "device": "cpu"},
        required=("checkpoint", "data"),
    )
    _require_file(Path(args.checkpoint), "checkpoint")
    data_dir = Path(args.data)
    _require_dir(data_dir / "ir", "infrared directory")
    _require_dir(data_dir / "vi", "visible directory")
    out_dir = _prepare_out_dir(args.out, args.force)
    timings = fuse_inference(
        args.checkpoint, data_dir, out_dir, rgb=args.rgb, ids=args.ids, device=args.device
    )
    mean = float(np.mean([s for _, s in timings]))
    print(f"fused {len(timings)} pairs, mean {mean:.3f}s -> {out_dir}")
    return 0


def cmd_eval(args) -> int:
    from .data import _read_array
    from .metrics import fusion_metrics, seg_scores, write_fusion_csv, write_seg_csv

    _merge_config(
        args,
        EVAL_KEYS,
        {"fused": None, "data": None, "checkpoint": None},
        required=("fused", "data"),
    )
    fused_dir = Path(args.fused)
    data_dir = Path(args.data)
    _require_dir(fused_dir, "fused image directory")
    _require_dir(data_dir / "ir", "infrared directory")
    refs = scan_split(data_dir)
    missing = [r.id for r in refs if not (fused_dir / f"{r.id}.png").is_file()]
    if missing:
        raise ConfigError(f"fused images missing for ids: {', '.join(missing)}")
    out_dir = _prepare_out_dir(args.out, args.force)

    records = []
    for ref in refs:
        pair = load_pair(ref)
        fused = _read_array(fused_dir / f"{ref.id}.png").astype(np.float32) / 255.0
        if fused.ndim == 3:
            fused = to_luma_chroma(fused[..., :3]).y
        a = pair.infrared
        b = to_luma_chroma(pair.visible).y
        records.append(fusion_metrics(ref.id, fused, a, b))
    write_fusion_csv(records, out_dir / "fusion_metrics.csv")

    if args.checkpoint:
        import torch

        from .data import pad_to_multiple
        from .pilot import branch_inputs
        from .trainer import model_from_checkpoint

        pairs = [load_pair(r) for r in refs]
        if any(p.label is None for p in pairs):
            raise ConfigError("segmentation scoring needs labels for every pair")
        model = model_from_checkpoint(args.checkpoint)
        for modality, branch in (("ir", model.branch_ir), ("vi", model.branch_vi)):
            preds, gts = [], []
            with torch.no_grad():
                for p in pairs:
                    x, size = pad_to_multiple(branch_inputs([p], modality)[0], 16)
                    logits, _ = branch(torch.from_numpy(x)[None, None])
                    preds.append(logits.argmax(dim=1)[0, : size[0], : size[1]].numpy())
                    gts.append(p.label)
            score = seg_scores(
                np.concatenate([x.ravel() for x in preds]),
                np.concatenate([g.ravel() for g in gts]),
                model.num_classes,
            )
            write_seg_csv(score, out_dir / f"seg_{modality}.csv")
    print(f"metrics written to {out_dir}")
    return 0


def cmd_freq(args) -> int:
    import torch

    from .freqprobe import (
        feature_spectra,
        low_freq_ratio,
        plot_profiles,
        spectral_profile,
        write_profiles_csv,
        write_ratios_csv,
    )
    from .data import pad_to_multiple
    from .trainer import model_from_checkpoint

    _merge_config(
        args,
        FREQ_KEYS,
        {"checkpoint": None, "data": None, "id": None, "plot": False},
        required=("checkpoint", "data"),
    )
    _require_file(Path(args.checkpoint), "checkpoint")
    data_dir = Path(args.data)
    _require_dir(data_dir / "ir", "infrared directory")
    refs = scan_split(data_dir)
    if args.id is not None:
        refs = [r for r in refs if r.id == args.id]
        if not refs:
            raise ConfigError(f"id {args.id} not found under {data_dir}")
    out_dir = _prepare_out_dir(args.out, args.force)

    model = model_from_checkpoint(args.checkpoint)
    pair = load_pair(refs[0])
    ir, _ = pad_to_multiple(pair.infrared, 16)
    vi_y, _ = pad_to_multiple(to_luma_chroma(pair.visible).y, 16)
    tagged = feature_spectra(
        model, torch.from_numpy(ir)[None, None], torch.from_numpy(vi_y)[None, None]
    )
    profiles = [spectral_profile(values, tag=tag) for tag, values in tagged]
    ratios = {tag: low_freq_ratio(values) for tag, values in tagged}
    write_profiles_csv(profiles, out_dir / "profiles.csv")
    write_ratios_csv(ratios, out_dir / "low_freq_ratios.csv")
    if args.plot:
        plot_profiles(profiles, out_dir / "profiles.png")
    print(f"spectral analysis of {refs[0].id} written to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsfusion",
        description="Semantic-guided infrared/visible image fusion workflow",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="allow non-empty output")
        p.add_argument("--seed", type=int, default=None, help="override config seed")

    p = sub.add_parser("pilot", help="train one modality's segmentation branch")
    p.add_argument("--modality", required=True, choices=["ir", "vi"])
    p.add_argument("--config", required=True)
    common(p)
    p.set_defaults(func=cmd_pilot)

    p = sub.add_parser("select", help="pick significant features from a weight trajectory")
    p.add_argument("--trajectory", default=None)
    p.add_argument("--tau", type=float, default=None, help="cumulative-mass threshold (0.6)")
    p.add_argument("--k-min", type=int, default=None)
    p.add_argument("--k-max", type=int, default=None)
    p.add_argument("--modality", choices=["ir", "vi"], default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="output JSON path")
    p.add_argument("--force", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("train", help="joint training of both branches plus fusion")
    p.add_argument("--config", required=True)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="fuse pairs with a trained checkpoint")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None, help="directory containing ir/ and vi/")
    p.add_argument("--rgb", action="store_true", help="recombine source chroma")
    p.add_argument("--ids", nargs="*", default=None)
    p.add_argument("--device", default=None)
    p.add_argument("--config", default=None)
    common(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="score fused images against their source pairs")
    p.add_argument("--fused", default=None, help="directory of fused <id>.png")
    p.add_argument("--data", default=None, help="directory containing ir/ and vi/")
    p.add_argument("--checkpoint", default=None, help="also score branch segmentation")
    p.add_argument("--config", default=None)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("freq", help="spectral analysis of semantic/detail features")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None, help="directory containing ir/ and vi/")
    p.add_argument("--id", default=None, help="pair id (default: first)")
    p.add_argument("--plot", action="store_true")
    p.add_argument("--config", default=None)
    common(p)
    p.set_defaults(func=cmd_freq)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    if args.seed is not None:
        from .utils import seed_everything

        seed_everything(args.seed)
    try:
        return args.func(args)
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - uniform runtime exit code
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
