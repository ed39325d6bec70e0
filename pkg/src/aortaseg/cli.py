"""Command line interface binding all modules.

Subcommands: phantom, split, augment, train, predict, pipeline, evaluate.
All randomness flows from --seed, split into named streams per stage, so
every command is reproducible bit-for-bit. --config points at a flat
key=value file; command line flags override config values.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import augment as aug
from . import datasets, evaluation, manifest as mf, network, nifti, phantom, pipeline
from .training import TrainConfig, train
from .volume import LabelMask


def stream_seed(root_seed: int, name: str) -> int:
    """Derive a named 32-bit seed stream from the root seed."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def load_config(path) -> dict:
    """Flat key=value file; values are parsed as JSON when possible."""
    cfg = {}
    if path is None:
        return cfg
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        try:
            cfg[key.strip()] = json.loads(value.strip())
        except json.JSONDecodeError:
            cfg[key.strip()] = value.strip()
    return cfg


def _cmd_phantom(args, cfg):
    base = phantom.PhantomSpec(
        dims=tuple(cfg.get("phantom.dims", (64, 64, 72))),
        noise_sigma=float(cfg.get("phantom.noise_sigma", 20.0)),
    )
    manifest = phantom.generate_cohort(args.n_patients, args.out_dir, base,
                                       seed=stream_seed(args.seed, "phantom"))
    print(f"wrote {manifest['n_patients']} phantom patients to {args.out_dir}")


def _cmd_split(args, cfg):
    cohort = json.loads((Path(args.cohort_dir) / "cohort.json").read_text())
    ids = [e["patient_id"] for e in cohort["entries"]]
    paths = {e["patient_id"]: e["paths"] for e in cohort["entries"]}
    counts = tuple(int(c) for c in args.counts.split(","))
    split = mf.group_split(ids, counts, seed=stream_seed(args.seed, "split"),
                           paths=paths)
    out = Path(args.out_dir) / "split.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    split.to_json(out)
    print(f"split {len(ids)} patients {counts} -> {out}")


def _cmd_augment(args, cfg):
    cohort_dir = Path(args.cohort_dir)
    split = mf.SplitManifest.from_json(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sigma = float(cfg.get("augment.sigma", 30.0))
    amplitude = float(cfg.get("augment.amplitude", 12.0))
    provenance = []
    attached = []
    for cohort in ("train", "valid"):
        for entry in split.scans(cohort, augmented=False):
            vol = nifti.read_volume(cohort_dir / entry.paths["cta"])
            gt = nifti.read_mask(cohort_dir / entry.paths["gt"])
            pairs = aug.augment_patient(vol, gt, sigma=sigma, amplitude=amplitude)
            for idx, (avol, amask) in enumerate(pairs, start=1):
                stem = f"{entry.patient_id}_aug{idx:02d}"
                paths = {"cta": f"{stem}_cta.nii.gz", "gt": f"{stem}_gt.nii.gz"}
                nifti.write_volume(out_dir / paths["cta"], avol)
                nifti.write_mask(out_dir / paths["gt"], amask)
                attached.append((entry.patient_id, paths))
                provenance.append({"source": entry.patient_id, "output": stem,
                                   "sigma": sigma, "amplitude": amplitude,
                                   "index": idx, "seed": args.seed})
    augmented = mf.attach_augmented(split, attached)
    augmented.to_json(out_dir / "split_augmented.json")
    (out_dir / "provenance.json").write_text(json.dumps(provenance, indent=2) + "\n")
    print(f"wrote {len(provenance)} augmented scans to {out_dir}")


def _load_samples(split, cohort_dir, cohort, task, modality, cfg):
    vol_key, gt_key = (("cta", "gt") if modality == "contrast"
                       else ("nc", "gt_nc"))
    out = []
    for entry in split.scans(cohort):
        src = Path(cohort_dir) / entry.paths[vol_key]
        vol = nifti.read_volume(src)
        gt = nifti.read_mask(Path(cohort_dir) / entry.paths[gt_key])
        if task == "roi":
            out.append(datasets.lowres_sample(
                entry.patient_id, vol, gt,
                factor=float(cfg.get("pipeline.stage1_factor", 3.2))))
        else:
            out.append(datasets.cube_roi_sample(
                entry.patient_id, vol, gt,
                size=int(cfg.get("train.roi_size", 32)),
                binary=modality != "contrast"))
    return out


def _cmd_train(args, cfg):
    split = mf.SplitManifest.from_json(args.manifest)
    train_set = _load_samples(split, args.cohort_dir, "train", args.task,
                              args.modality, cfg)
    valid_set = _load_samples(split, args.cohort_dir, "valid", args.task,
                              args.modality, cfg)
    num_classes = 2 if (args.task == "roi" or args.modality == "non_contrast") else 3
    spec = network.UNetSpec(
        num_classes=num_classes,
        depth=int(cfg.get("model.depth", 4)),
        base_channels=int(cfg.get("model.base_channels", 16)),
        attention=bool(cfg.get("model.attention", True)),
    )
    tcfg = TrainConfig(
        learning_rate=float(cfg.get("train.learning_rate", 1.0e-3)),
        weight_decay=float(cfg.get("train.weight_decay", 1.0e-6)),
        batch_size=int(cfg.get("train.batch_size", 2)),
        epochs=int(cfg.get("train.epochs", 600)),
        seed=stream_seed(args.seed, "train"),
    )
    model = network.build_unet(spec, init_seed=stream_seed(args.seed, "init"))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, history = train(model, train_set, valid_set, tcfg,
                           checkpoint_dir=out_dir)
    history.to_csv(out_dir / "history.csv")
    network.save_checkpoint(out_dir / "final.pt", model, tcfg.epochs)
    last = history.records[-1]
    print(f"trained {args.task}/{args.modality}: {tcfg.epochs} epochs, "
          f"final loss {last.train_loss:.4f}, "
          f"valid dice {last.dice_combined:.4f} -> {out_dir}")


def _cmd_predict(args, cfg):
    model, _ = network.load_checkpoint(args.checkpoint)
    vol = nifti.read_volume(args.input)
    probs = network.unet_forward(model, network.normalize_input(vol))
    labels = probs.argmax(axis=0).astype(np.int16)
    mask = LabelMask(labels, vol.spacing, vol.origin,
                     class_set=frozenset(range(model.spec.num_classes)))
    nifti.write_mask(args.output, mask)
    print(f"wrote prediction {args.output}")


def _cmd_pipeline(args, cfg):
    bundle = pipeline.load_bundle(args.bundle)
    vol = nifti.read_volume(args.input)
    pcfg = pipeline.PipelineConfig(
        stage1_factor=float(cfg.get("pipeline.stage1_factor", 3.2)),
        roi_out_xy=int(cfg.get("pipeline.roi_out_xy", 144)),
        box_margin=int(cfg.get("pipeline.box_margin", 12)),
    )
    result = pipeline.run_pipeline(vol, bundle, pcfg)
    nifti.write_mask(args.output, result.full_mask)
    if args.debug_dir:
        dbg = Path(args.debug_dir)
        dbg.mkdir(parents=True, exist_ok=True)
        (dbg / "boxes.json").write_text(json.dumps(
            [{"region": r, "lo": b.lo, "hi": b.hi} for r, b in result.boxes],
            indent=2) + "\n")
        for region, m in result.region_masks.items():
            nifti.write_mask(dbg / f"region_{region}.nii.gz", m)
    print(f"pipeline done: {args.output} "
          f"({', '.join(f'{k}={v:.2f}s' for k, v in result.timing.items())})")


def _cmd_evaluate(args, cfg):
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    report = evaluation.MetricsReport()
    preds = sorted(p for p in pred_dir.iterdir()
                   if p.name.endswith((".nii", ".nii.gz")))
    if not preds:
        raise SystemExit(f"[evaluate] no NIfTI predictions in {pred_dir}")
    for pred_path in preds:
        gt_path = gt_dir / pred_path.name
        if not gt_path.exists():
            raise SystemExit(f"[evaluate] missing ground truth {gt_path}")
        pred = nifti.read_mask(pred_path)
        gt = nifti.read_mask(gt_path)
        scan_id = pred_path.name.split(".")[0]
        report.add(scan_id, evaluation.multiclass_dice(pred, gt),
                   model_id=args.model_id)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(out_dir / "metrics.csv")
    for (model, region), (mean, sem) in sorted(report.aggregate().items()):
        print(f"{model} {region}: {100 * mean:.1f} +- {100 * sem:.1f} %")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aortaseg")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None)
        p.add_argument("--out-dir", default=".")

    p = sub.add_parser("phantom", help="generate a synthetic phantom cohort")
    common(p)
    p.add_argument("--n-patients", type=int, default=26)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("split", help="patient-level train/valid/test split")
    common(p)
    p.add_argument("--cohort-dir", required=True)
    p.add_argument("--counts", default="10,3,13")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("augment", help="10:1 divergence-warp augmentation")
    common(p)
    p.add_argument("--cohort-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("train", help="train a U-Net for one cascade role")
    common(p)
    p.add_argument("--cohort-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", choices=("roi", "region"), default="region")
    p.add_argument("--modality", choices=("contrast", "non_contrast"),
                   default="contrast")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="single-model inference on one scan")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("pipeline", help="full two-stage cascade on one scan")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--debug-dir", default=None)
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("evaluate", help="Dice tables for prediction/GT pairs")
    common(p)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--model-id", default="model")
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config)
    try:
        args.func(args, cfg)
    except (pipeline.PipelineStageError, pipeline.NoAortaFoundError,
            nifti.NiftiFormatError, mf.LeakageError, ValueError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
