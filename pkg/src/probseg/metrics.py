"""Uncertainty-aware evaluation: IoU/DSC, squared generalized energy distance
over d = 1 - IoU, one-tailed paired t-test, and report aggregation.

Empty-mask convention: iou(empty, empty) = dsc(empty, empty) = 1, hence
d(empty, empty) = 0. Annotators are allowed to mark no lesion, so the metric
must treat two "nothing there" opinions as perfect agreement.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import special

from .data import Dataset
from .model import ProbSegModel

SAMPLING_MODES = ("prior", "fixed", "dropout")


def _as_bool(a: np.ndarray) -> np.ndarray:
    return np.asarray(a).astype(bool)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a & b| / |a | b|, with iou(empty, empty) = 1."""
    a, b = _as_bool(a), _as_bool(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """2 |a & b| / (|a| + |b|), with dsc(empty, empty) = 1."""
    a, b = _as_bool(a), _as_bool(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def _flatten_set(masks: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    arr = np.stack([_as_bool(m) for m in masks])
    return arr.reshape(arr.shape[0], -1)


def _distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise d = 1 - IoU between two flattened bool mask sets."""
    af = a.astype(np.float64)
    bf = b.astype(np.float64)
    inter = af @ bf.T
    union = af.sum(axis=1)[:, None] + bf.sum(axis=1)[None, :] - inter
    with np.errstate(invalid="ignore"):
        iou_mat = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 1.0)
    return 1.0 - iou_mat


def ged_squared(
    samples: Sequence[np.ndarray] | np.ndarray,
    gts: Sequence[np.ndarray] | np.ndarray,
) -> float:
    """D^2 = 2 E[d(s, y)] - E[d(s, s')] - E[d(y, y')] with d = 1 - IoU.

    Expectations run over all ordered pairs including identical indices
    (V-statistic), so two identical multisets give exactly 0.
    """
    if len(samples) == 0 or len(gts) == 0:
        raise ValueError("ged_squared needs non-empty sample and ground-truth sets")
    s = _flatten_set(samples)
    y = _flatten_set(gts)
    if s.shape[1] != y.shape[1]:
        raise ValueError("samples and ground truths have different mask shapes")
    cross = float(_distance_matrix(s, y).mean())
    within_s = float(_distance_matrix(s, s).mean())
    within_y = float(_distance_matrix(y, y).mean())
    return 2.0 * cross - within_s - within_y


def mean_pairwise_distance(masks: Sequence[np.ndarray] | np.ndarray) -> float:
    """Mean d = 1 - IoU over distinct pairs; 0 for fewer than two masks."""
    m = len(masks)
    if m < 2:
        return 0.0
    flat = _flatten_set(masks)
    d = _distance_matrix(flat, flat)
    return float((d.sum() / (m * (m - 1))))


def paired_t_one_tailed(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """One-tailed paired t-test of H1: mean(a - b) > 0.

    t = mean(d) / (sd(d) / sqrt(n)) with the n-1 sample sd; p = P(T_{n-1} > t).
    All-zero differences give (0, 0.5); zero sd with nonzero mean gives +-inf
    and the degenerate p.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be equal-length 1-d sequences")
    n = a.shape[0]
    if n < 2:
        raise ValueError(f"need n >= 2 pairs, got {n}")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 0.5
        if mean > 0:
            return float("inf"), 0.0
        return float("-inf"), 1.0
    t = mean / (sd / np.sqrt(n))
    p = float(special.stdtr(n - 1, -t))  # upper tail by symmetry
    return float(t), p


# ---------------------------------------------------------------------------
# model evaluation


@dataclass
class MetricsReport:
    mode: str
    M: int
    seed: int
    per_sample: list[dict]
    aggregates: dict
    comparison: dict | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path: str | Path) -> "MetricsReport":
        return MetricsReport(**json.loads(Path(path).read_text()))


def _sample_generator(seed: int, index: int, stream: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, index, stream]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(state))


def _draw(model: ProbSegModel, sample, m: int, gen: torch.Generator, mode: str) -> np.ndarray:
    if mode == "prior":
        return model.forward_sample(sample.image, sample.box, m, gen)
    if mode == "dropout":
        return model.forward_sample_dropout(sample.image, sample.box, m, gen)
    if mode == "fixed":
        mask = model.forward_mean(sample.image, sample.box)
        return np.repeat(mask[None], m, axis=0)
    raise ValueError(f"unknown sampling mode '{mode}' (have {SAMPLING_MODES})")


def evaluate(
    model: ProbSegModel,
    ds: Dataset,
    m: int = 16,
    seed: int = 0,
    mode: str = "prior",
    baseline: str | None = None,
) -> MetricsReport:
    """Per sample: m drawn masks -> GED^2 against the annotator set, plus the
    deterministic prior-mean prediction scored by DSC/IoU averaged over
    annotators. With `baseline`, a second mask set is drawn in that mode and a
    one-tailed paired t-test checks that the primary mode's GED^2 is lower.

    Deterministic given `seed`: each sample gets its own derived generator, so
    results do not depend on evaluation order.
    """
    if m < 2:
        raise ValueError(f"need m >= 2 samples per image for GED, got {m}")
    if mode not in SAMPLING_MODES:
        raise ValueError(f"unknown sampling mode '{mode}' (have {SAMPLING_MODES})")
    if baseline is not None and baseline not in SAMPLING_MODES:
        raise ValueError(f"unknown baseline mode '{baseline}' (have {SAMPLING_MODES})")

    per_sample: list[dict] = []
    baseline_ged2: list[float] = []
    for idx, sample in enumerate(ds.samples):
        annotations = [a.astype(bool) for a in sample.annotations]
        masks = _draw(model, sample, m, _sample_generator(seed, idx, 0), mode)
        central = model.forward_mean(sample.image, sample.box)
        record = {
            "id": sample.sample_id or str(idx),
            "ged2": ged_squared(masks, annotations),
            "dsc": float(np.mean([dsc(central, a) for a in annotations])),
            "iou": float(np.mean([iou(central, a) for a in annotations])),
            "diversity": mean_pairwise_distance(masks),
        }
        per_sample.append(record)
        if baseline is not None:
            bmasks = _draw(model, sample, m, _sample_generator(seed, idx, 1), baseline)
            baseline_ged2.append(ged_squared(bmasks, annotations))

    aggregates = {
        key: float(np.mean([r[key] for r in per_sample]))
        for key in ("ged2", "dsc", "iou", "diversity")
    }
    comparison = None
    if baseline is not None:
        primary = [r["ged2"] for r in per_sample]
        t_stat, p_value = paired_t_one_tailed(baseline_ged2, primary)
        comparison = {
            "baseline": baseline,
            "metric": "ged2",
            "baseline_ged2_mean": float(np.mean(baseline_ged2)),
            "baseline_per_sample_ged2": baseline_ged2,
            "t_stat": t_stat,
            "p_value": p_value,
        }
    return MetricsReport(
        mode=mode, M=m, seed=seed, per_sample=per_sample,
        aggregates=aggregates, comparison=comparison,
    )
