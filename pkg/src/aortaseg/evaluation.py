"""Segmentation metrics and report tables.

Dice is 2|A∩B|/(|A|+|B|), defined as 1.0 when both masks are empty.
Observer agreement uses ICC(2,1): two-way random effects, absolute
agreement, single measures, computed from the ANOVA mean squares on one
scalar per scan per rater (total segmented volume in mm^3). Cohort
comparisons use Welch's t-test by default, with an exact permutation
variant.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .volume import HuStats, LabelMask

REGION_LABELS = {
    "inner_lumen": "Inner Lumen",
    "entire": "Entire Aorta",
    "wall_ilt": "Outer Wall + ILT Only",
}


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap of two binary arrays; 1.0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def multiclass_dice(pred: LabelMask, gt: LabelMask) -> dict[str, float]:
    """Dice on lumen (class 1), wall+ILT (class 2) and their union."""
    if pred.dims != gt.dims:
        raise ValueError(f"dim mismatch {pred.dims} vs {gt.dims}")
    if pred.class_set != gt.class_set:
        raise ValueError(f"class vocabulary mismatch {sorted(pred.class_set)} "
                         f"vs {sorted(gt.class_set)}")
    p, g = pred.labels, gt.labels
    out = {"entire": dice(p > 0, g > 0)}
    if 1 in gt.class_set:
        out["inner_lumen"] = dice(p == 1, g == 1)
    if 2 in gt.class_set:
        out["wall_ilt"] = dice(p == 2, g == 2)
    return out


def icc(measurements: np.ndarray) -> tuple[float, bool]:
    """ICC(2,1) over a scans x raters matrix; (value, degenerate_flag).

    Degenerate (zero total variance) matrices return (1.0, True).
    """
    m = np.asarray(measurements, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2 or m.shape[1] < 2:
        raise ValueError("need at least a 2x2 scans-by-raters matrix")
    if not np.all(np.isfinite(m)):
        raise ValueError("missing or non-finite cells")
    n, k = m.shape
    if np.allclose(m, m.ravel()[0]):
        return 1.0, True
    grand = m.mean()
    row_means = m.mean(axis=1)
    col_means = m.mean(axis=0)
    ss_rows = k * ((row_means - grand) ** 2).sum()
    ss_cols = n * ((col_means - grand) ** 2).sum()
    ss_total = ((m - grand) ** 2).sum()
    ss_err = ss_total - ss_rows - ss_cols
    msr = ss_rows / (n - 1)
    msc = ss_cols / (k - 1)
    mse = ss_err / ((n - 1) * (k - 1))
    denom = msr + (k - 1) * mse + k * (msc - mse) / n
    if denom == 0:
        return 1.0, True
    return float((msr - mse) / denom), False


def mask_volume_mm3(mask: LabelMask) -> float:
    return float((mask.labels > 0).sum()) * float(np.prod(mask.spacing))


@dataclass(frozen=True)
class MetricsRow:
    scan_id: str
    region: str
    dice: float
    model_id: str


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)

    def add(self, scan_id: str, scores: dict[str, float], model_id: str) -> None:
        for region, value in scores.items():
            self.rows.append(MetricsRow(scan_id, region, value, model_id))

    def aggregate(self) -> dict[tuple[str, str], tuple[float, float]]:
        """(model, region) -> (mean, s.e.m.) over scans."""
        groups: dict[tuple[str, str], list[float]] = {}
        for r in self.rows:
            groups.setdefault((r.model_id, r.region), []).append(r.dice)
        out = {}
        for key, vals in groups.items():
            arr = np.asarray(vals)
            sem = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
            out[key] = (float(arr.mean()), sem)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scan_id", "region", "region_label", "dice", "model_id"])
            for r in self.rows:
                w.writerow([r.scan_id, r.region,
                            REGION_LABELS.get(r.region, r.region),
                            f"{r.dice:.6f}", r.model_id])
            w.writerow([])
            w.writerow(["model_id", "region", "region_label",
                        "mean_dice", "sem_dice"])
            for (model, region), (mean, sem) in sorted(self.aggregate().items()):
                w.writerow([model, region, REGION_LABELS.get(region, region),
                            f"{mean:.6f}", f"{sem:.6f}"])


def observer_report(study: dict[str, dict[str, LabelMask]],
                    ground: str) -> MetricsReport:
    """Per-region Dice of each observer/session against the ground observer.

    `study` maps scan_id -> observer_id -> mask; every scan must include
    the ground observer.
    """
    report = MetricsReport()
    for scan_id, per_obs in study.items():
        if ground not in per_obs:
            raise ValueError(f"scan {scan_id} missing ground observer {ground!r}")
        gt = per_obs[ground]
        for obs, mask in per_obs.items():
            if obs == ground:
                continue
            report.add(scan_id, multiclass_dice(mask, gt), model_id=obs)
    if not report.rows:
        raise ValueError("no paired segmentations in study")
    return report


def _welch_p(a: np.ndarray, b: np.ndarray) -> float:
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


def _permutation_p(a: np.ndarray, b: np.ndarray, n_perm: int, seed: int) -> float:
    pooled = np.concatenate([a, b])
    observed = abs(a.mean() - b.mean())
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_perm):
        perm = rng.permutation(pooled)
        if abs(perm[:len(a)].mean() - perm[len(a):].mean()) >= observed - 1e-12:
            hits += 1
    return (hits + 1) / (n_perm + 1)


def compare_cohorts(stats_a: list[HuStats], stats_b: list[HuStats],
                    test: str = "welch", n_perm: int = 2000,
                    seed: int = 0) -> list[dict]:
    """Per-field comparison table: mean, 95% CI per cohort, and a p-value."""
    if len(stats_a) < 2 or len(stats_b) < 2:
        raise ValueError("need at least 2 scans per cohort")
    fields = ["p25", "mean", "p75", "std"]
    labels = {"p25": "25th Percentile HU", "mean": "Mean HU",
              "p75": "75th Percentile", "std": "Standard Deviation"}
    rows = []
    for name in fields:
        a = np.array([getattr(s, name) for s in stats_a], dtype=np.float64)
        b = np.array([getattr(s, name) for s in stats_b], dtype=np.float64)
        if test == "welch":
            p = _welch_p(a, b)
        elif test == "permutation":
            p = _permutation_p(a, b, n_perm, seed)
        else:
            raise ValueError(f"unknown test {test!r}")
        row = {"field": labels[name]}
        for tag, vals in (("a", a), ("b", b)):
            half = 1.96 * vals.std(ddof=1) / np.sqrt(len(vals))
            row[f"mean_{tag}"] = float(vals.mean())
            row[f"ci_{tag}"] = f"[{vals.mean() - half:.1f} {vals.mean() + half:.1f}]"
        row["p_value"] = p
        rows.append(row)
    return rows


def cohort_table_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["field", "cohort_a_mean", "cohort_a_95ci",
                    "cohort_b_mean", "cohort_b_95ci", "p_value"])
        for r in rows:
            w.writerow([r["field"], f"{r['mean_a']:.1f}", r["ci_a"],
                        f"{r['mean_b']:.1f}", r["ci_b"], f"{r['p_value']:.3g}"])
