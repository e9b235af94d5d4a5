"""Per-class Dice, per-boundary absolute error in micrometres, and the noise sweep."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import BoundarySet, NoiseSpec, add_block_noise, block_noise_region, mask_to_boundaries
from .inference import InferenceConfig, mc_predict

AXIAL_RESOLUTION_UM = 3.87


def dice(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """2|A and B| / (|A| + |B|) per class; a class absent from both scores 1."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    n = num_classes
    joint = np.bincount((truth.reshape(-1) * n + pred.reshape(-1)).astype(np.int64), minlength=n * n)
    joint = joint[: n * n].reshape(n, n)
    inter = np.diag(joint).astype(np.float64)
    sizes = joint.sum(axis=0) + joint.sum(axis=1)
    out = np.ones(n)
    nonempty = sizes > 0
    out[nonempty] = 2 * inter[nonempty] / sizes[nonempty]
    return out


def boundary_mae(pred: np.ndarray, truth_b: BoundarySet,
                 resolution_um: float = AXIAL_RESOLUTION_UM) -> tuple[np.ndarray, np.ndarray]:
    """Mean |predicted row - true row| in micrometres for each boundary.

    True rows are floored, matching how boundaries rasterise into a mask.
    Returns ``(mae, valid_columns)``; boundaries without any column valid in
    both are NaN.
    """
    pred_b = mask_to_boundaries(pred, truth_b.num_classes)
    both = pred_b.valid & truth_b.valid
    err = np.abs(pred_b.rows - np.floor(truth_b.rows))
    counts = both.sum(axis=1)
    mae = np.full(len(counts), np.nan)
    has = counts > 0
    mae[has] = (err * both).sum(axis=1)[has] / counts[has] * resolution_um
    return mae, counts


@dataclass
class EvalReport:
    dice: np.ndarray  # [C]
    boundary_mae_um: np.ndarray  # [C-1]
    valid_columns: np.ndarray  # [C-1]
    axial_resolution_um: float = AXIAL_RESOLUTION_UM
    per_image_dice: np.ndarray = field(default=None)  # [N,C]
    per_image_mae: np.ndarray = field(default=None)  # [N,C-1]

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice))


def evaluate_masks(preds, truths, num_classes: int, truth_boundaries=None,
                   resolution_um: float = AXIAL_RESOLUTION_UM) -> EvalReport:
    """Average Dice and boundary error over images (NaN boundaries are skipped)."""
    preds, truths = list(preds), list(truths)
    if truth_boundaries is None:
        truth_boundaries = [mask_to_boundaries(t, num_classes) for t in truths]
    d = np.array([dice(p, t, num_classes) for p, t in zip(preds, truths)]).reshape(-1, num_classes)
    maes, counts = [], []
    for p, b in zip(preds, truth_boundaries):
        m, c = boundary_mae(p, b, resolution_um)
        maes.append(m)
        counts.append(c)
    maes = np.array(maes).reshape(-1, num_classes - 1)
    counts = np.array(counts).reshape(-1, num_classes - 1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean_mae = np.nanmean(maes, axis=0) if len(maes) else np.full(num_classes - 1, np.nan)
    return EvalReport(
        dice=d.mean(axis=0) if len(d) else np.full(num_classes, np.nan),
        boundary_mae_um=mean_mae,
        valid_columns=counts.sum(axis=0),
        axial_resolution_um=resolution_um,
        per_image_dice=d,
        per_image_mae=maes,
    )


@dataclass
class SweepRow:
    level: int
    mode: str
    mean_dice: float
    dice: np.ndarray
    mean_uncertainty: float


def noise_sweep_report(models: dict, samples, levels, infer_cfg: InferenceConfig | None = None,
                base_count: int = 2, block_size: int = 8, seed: int = 0,
                threads: int = 1, keep_outputs: bool = False):
    """Evaluate each ``{mode: (model, bayesian)}`` entry on block-noise levels 0..max(levels).

    Image ``i`` at every level uses noise seed ``(seed, i)``, so higher levels
    add blocks on top of lower ones. Returns the table rows and, with
    ``keep_outputs``, ``{(level, mode): (noisy images, region masks, PredictiveOutput)}``.
    """
    infer_cfg = infer_cfg or InferenceConfig()
    levels = sorted(set([0, *levels]))
    truths = np.stack([s.mask for s in samples])
    num_classes = None
    rows, kept = [], {}
    for level in levels:
        specs = [NoiseSpec(level, base_count, block_size, seed=seed * 1_000_003 + i) for i in range(len(samples))]
        noisy = np.stack([add_block_noise(s.image, sp) for s, sp in zip(samples, specs)])
        region = np.stack([block_noise_region(s.image.shape, sp) for s, sp in zip(samples, specs)])
        for mode, (model, bayesian) in models.items():
            num_classes = model.config.num_classes
            cfg = InferenceConfig(infer_cfg.t, infer_cfg.dropout_rate, bayesian)
            out = mc_predict(model, noisy, cfg, seed=seed, threads=threads)
            report = evaluate_masks(out.segmentation, truths, num_classes)
            mean_u = float(out.uncertainty[region].mean()) if region.any() else float("nan")
            rows.append(SweepRow(level, mode, report.mean_dice, report.dice, mean_u))
            if keep_outputs:
                kept[(level, mode)] = (noisy, region, out)
    return (rows, kept) if keep_outputs else rows


def _g6(x: float) -> str:
    return f"{x:.6g}"


def write_report_csv(path, rows, num_classes: int) -> None:
    header = ["level", "mode", "mean_dice"] + [f"dice_c{c}" for c in range(num_classes)] + ["mean_uncertainty"]
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join([str(r.level), r.mode, _g6(r.mean_dice), *map(_g6, r.dice), _g6(r.mean_uncertainty)]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_per_image_csv(path, report: EvalReport) -> None:
    n_c = report.dice.shape[0]
    header = (["image", "mean_dice"] + [f"dice_c{c}" for c in range(n_c)]
              + [f"mae_um_b{k}" for k in range(1, n_c)])
    lines = [",".join(header)]
    for i, (d, m) in enumerate(zip(report.per_image_dice, report.per_image_mae)):
        lines.append(",".join([str(i), _g6(d.mean()), *map(_g6, d), *map(_g6, m)]))
    lines.append(",".join(["mean", _g6(report.mean_dice), *map(_g6, report.dice), *map(_g6, report.boundary_mae_um)]))
    Path(path).write_text("\n".join(lines) + "\n")
