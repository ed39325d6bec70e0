"""Reusable experiment harnesses over phantom cohorts.

These back both the CLI/scripts and the acceptance suite: a toy
multi-class training run on aorta-centered cubes, and the head-to-head
attention-vs-plain comparison emitting a per-region Dice table.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from . import datasets, phantom
from .evaluation import MetricsReport, dice
from .network import UNet3D, UNetSpec, build_unet
from .training import Sample, TrainConfig, TrainHistory, train, validate

TOY_SPEC = phantom.PhantomSpec(dims=(48, 48, 48), spacing=(1.0, 1.0, 1.0),
                               with_arch=False, bone_distractor=True)


def toy_cohort(n_patients: int, seed: int,
               base: phantom.PhantomSpec = TOY_SPEC) -> list[phantom.PhantomSample]:
    specs = phantom.cohort_specs(n_patients, base, seed)
    return [phantom.generate_phantom(s, f"phantom{i:03d}")
            for i, s in enumerate(specs)]


def toy_datasets(n_train: int, n_valid: int, n_test: int, seed: int,
                 roi_size: int = 32) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Disjoint train/valid/test cube datasets from one jittered cohort."""
    cohort = toy_cohort(n_train + n_valid + n_test, seed)
    cubes = datasets.region_samples_from_phantoms(cohort, roi_size)
    return (cubes[:n_train], cubes[n_train:n_train + n_valid],
            cubes[n_train + n_valid:])


def train_toy_model(spec: UNetSpec, train_set, valid_set, epochs: int,
                    seed: int) -> tuple[UNet3D, TrainHistory]:
    torch.set_num_threads(max(1, torch.get_num_threads()))
    model = build_unet(spec, init_seed=seed)
    cfg = TrainConfig(epochs=epochs, seed=seed)
    return train(model, train_set, valid_set, cfg)


def evaluate_model(model: UNet3D, test_set: list[Sample],
                   model_id: str) -> MetricsReport:
    report = MetricsReport()
    model.eval()
    with torch.no_grad():
        for s in test_set:
            x = torch.from_numpy(s.image[None, None].astype(np.float32))
            pred = model(x)[0].argmax(dim=0).numpy()
            scores = {"entire": dice(pred > 0, s.labels > 0)}
            if model.spec.num_classes >= 3:
                scores["inner_lumen"] = dice(pred == 1, s.labels == 1)
                scores["wall_ilt"] = dice(pred == 2, s.labels == 2)
            report.add(s.patient_id, scores, model_id)
    return report


def attention_comparison(n_train: int = 10, n_valid: int = 3, n_test: int = 5,
                         epochs: int = 200, seed: int = 0, roi_size: int = 32,
                         out_dir=None) -> tuple[MetricsReport, dict]:
    """Train attention and plain U-Nets identically; emit a per-region table.

    Returns the combined report and {model_id: (history, test combined dice)}.
    """
    train_set, valid_set, test_set = toy_datasets(n_train, n_valid, n_test, seed,
                                                  roi_size)
    report = MetricsReport()
    summary = {}
    for model_id, attention in (("attention_unet", True), ("plain_unet", False)):
        spec = UNetSpec(num_classes=3, depth=2, base_channels=8,
                        attention=attention)
        model, history = train_toy_model(spec, train_set, valid_set, epochs, seed)
        part = evaluate_model(model, test_set, model_id)
        report.rows.extend(part.rows)
        combined = float(np.mean([r.dice for r in part.rows
                                  if r.region == "entire"]))
        summary[model_id] = (history, combined)
        if out_dir:
            history.to_csv(Path(out_dir) / f"history_{model_id}.csv")
    if out_dir:
        report.to_csv(Path(out_dir) / "comparison.csv")
    return report, summary
