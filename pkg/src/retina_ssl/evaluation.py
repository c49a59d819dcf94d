"""Evaluation protocol: flip TTA, training-set threshold, pooled Dice, AUPRC, paired t intervals."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .data.dataset import Sample
from .data.imageio import resize_bilinear, size_for_width
from .unet import UNetModel

THRESHOLD_GRID = np.round(np.arange(101) * 0.01, 2)


def _chw(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(image, np.float32).transpose(2, 0, 1)[None])


def predict_single(model: UNetModel, image: np.ndarray) -> np.ndarray:
    """Eval-mode probability map (H x W) for one H x W x 3 image."""
    return model.predict(_chw(image))[0, 0]


def predict_tta(model: UNetModel, image: np.ndarray) -> np.ndarray:
    """Average of the predictions for all four flip combinations, each un-flipped.

    Each flip gets its own forward pass and the four maps are summed as
    ``(id + h) + (v + hv)``, which makes the result exactly equivariant
    under flips of the input.
    """
    maps = []
    for h, v in ((False, False), (True, False), (False, True), (True, True)):
        x = image
        if h:
            x = x[:, ::-1]
        if v:
            x = x[::-1]
        p = predict_single(model, x)
        if v:
            p = p[::-1]
        if h:
            p = p[:, ::-1]
        maps.append(p)
    return ((maps[0] + maps[1]) + (maps[2] + maps[3])) / np.float32(4.0)


def model_input_size(shape: tuple[int, int], width: Optional[int], multiple: int) -> tuple[int, int]:
    """(width, height) the model runs at: optional resize, then rounding to ``multiple``."""
    h, w = shape
    if width:
        w, h = size_for_width(h, w, width)
    w = max(multiple, int(round(w / multiple)) * multiple)
    h = max(multiple, int(round(h / multiple)) * multiple)
    return w, h


def predict_sample(model: UNetModel, sample: Sample, width: Optional[int] = None, tta: bool = True) -> np.ndarray:
    """Probability map at the sample's original resolution.

    The image is resized for the model when needed and the prediction is
    resized back bilinearly.
    """
    h, w = sample.shape
    mw, mh = model_input_size((h, w), width, model.config.divisor)
    image = sample.image if (mh, mw) == (h, w) else resize_bilinear(sample.image, mw, mh)
    p = predict_tta(model, image) if tta else predict_single(model, image)
    if p.shape != (h, w):
        p = resize_bilinear(p, w, h)
    return p


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def dice(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        if denom == 0:
            raise ValueError("Dice undefined: no positives in prediction or ground truth")
        return 2 * self.tp / denom


def _flat(prob, gt, fov) -> tuple[np.ndarray, np.ndarray]:
    prob = np.asarray(prob)
    gt = np.asarray(gt)
    if prob.shape != gt.shape:
        raise ValueError(f"prediction shape {prob.shape} != ground truth shape {gt.shape}")
    if fov is None:
        return prob.ravel(), gt.ravel().astype(bool)
    fov = np.asarray(fov)
    if fov.shape != gt.shape:
        raise ValueError(f"FOV shape {fov.shape} != ground truth shape {gt.shape}")
    keep = fov.astype(bool)
    return prob[keep], gt[keep].astype(bool)


def _fovs(fovs, n):
    return [None] * n if fovs is None else list(fovs)


def pooled_counts(probs: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                  fovs: Sequence[Optional[np.ndarray]] | None, threshold: float) -> Counts:
    """Confusion counts over all in-FOV pixels of all images; ``p >= threshold`` is positive."""
    total = Counts()
    seen = 0
    for p, g, f in zip(probs, gts, _fovs(fovs, len(probs))):
        pv, gv = _flat(p, g, f)
        seen += pv.size
        pos = pv >= threshold
        tp = int(np.count_nonzero(pos & gv))
        fp = int(np.count_nonzero(pos)) - tp
        fn = int(np.count_nonzero(gv)) - tp
        total = total + Counts(tp, fp, fn, pv.size - tp - fp - fn)
    if seen == 0:
        raise ValueError("no in-FOV pixels to evaluate")
    return total


def pooled_dice(probs, gts, fovs, threshold: float) -> float:
    return pooled_counts(probs, gts, fovs, threshold).dice


def grid_dice(probs, gts, fovs, grid: np.ndarray = THRESHOLD_GRID) -> np.ndarray:
    """Pooled Dice at every grid threshold, via one histogram pass per image."""
    n = len(grid)
    pos_hist = np.zeros(n + 1, np.int64)
    neg_hist = np.zeros(n + 1, np.int64)
    for p, g, f in zip(probs, gts, _fovs(fovs, len(probs))):
        pv, gv = _flat(p, g, f)
        # k = number of grid values <= p, so p >= grid[j] exactly when j < k
        k = np.searchsorted(grid, pv, side="right")
        pos_hist += np.bincount(k[gv], minlength=n + 1)
        neg_hist += np.bincount(k[~gv], minlength=n + 1)
    n_pos = int(pos_hist.sum())
    if n_pos == 0:
        raise ValueError("ground truth has no positive pixels; Dice is undefined")
    # pixels with k > j are predicted positive at grid[j]
    tp = np.cumsum(pos_hist[::-1])[::-1][1:]
    fp = np.cumsum(neg_hist[::-1])[::-1][1:]
    fn = n_pos - tp
    return 2 * tp / (2 * tp + fp + fn)


def select_threshold(probs, gts, fovs=None, grid: np.ndarray = THRESHOLD_GRID) -> float:
    """Grid threshold maximising pooled Dice on the given (training) predictions; ties go low."""
    if len(probs) == 0:
        raise ValueError("need at least one image to select a threshold")
    d = grid_dice(probs, gts, fovs, grid)
    return float(grid[int(np.argmax(d))])


@dataclass
class PRCurve:
    thresholds: np.ndarray  # descending distinct scores
    precision: np.ndarray
    recall: np.ndarray

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["threshold", "precision", "recall"])
            for row in zip(self.thresholds, self.precision, self.recall):
                w.writerow([repr(float(v)) for v in row])
        return path


def pr_curve(scores, labels) -> PRCurve:
    """One point per distinct score, thresholds descending (``score >= t`` is positive)."""
    scores = np.asarray(scores, np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("PR curve needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(labels[order])
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = tp[last]
    predicted = last + 1
    return PRCurve(s[last], tp / predicted, tp / n_pos)


def auprc(curve: PRCurve) -> float:
    """Step-wise average precision: sum of (R_n - R_{n-1}) * P_n with R_0 = 0."""
    r = np.r_[0.0, curve.recall]
    return float(np.sum(np.diff(r) * curve.precision))


@dataclass
class Interval:
    mean: float
    lower: float
    upper: float
    sd: float
    n: int
    sided: str
    level: float

    @property
    def significant(self) -> bool:
        return not (self.lower <= 0.0 <= self.upper)


def paired_tci(diffs, sided: str = "one", level: float = 0.95) -> Interval:
    """t confidence interval for the mean of paired differences.

    One-sided gives ``[mean - t_{level} * s / sqrt(N), +inf)``; two-sided uses
    the ``(1 + level) / 2`` quantile on both sides.
    """
    d = np.asarray(diffs, np.float64).ravel()
    n = d.size
    if n < 2:
        raise ValueError("need at least 2 paired differences")
    if sided not in ("one", "two"):
        raise ValueError(f"sided must be 'one' or 'two', got {sided!r}")
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    se = sd / math.sqrt(n)
    if sided == "one":
        t = float(stats.t.ppf(level, n - 1))
        return Interval(mean, mean - t * se, math.inf, sd, n, sided, level)
    t = float(stats.t.ppf(0.5 + level / 2, n - 1))
    return Interval(mean, mean - t * se, mean + t * se, sd, n, sided, level)


@dataclass
class EvalReport:
    threshold: float
    counts: Counts
    auprc: Optional[float] = None
    per_image_dice: list = field(default_factory=list)
    target: str = ""

    @property
    def dice(self) -> float:
        return self.counts.dice

    HEADER = ("target", "threshold", "tp", "fp", "fn", "tn", "dice", "auprc")

    def csv_row(self) -> list:
        a = "" if self.auprc is None else repr(self.auprc)
        c = self.counts
        return [self.target, repr(self.threshold), c.tp, c.fp, c.fn, c.tn, repr(self.dice), a]

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.HEADER)
            w.writerow(self.csv_row())
        return path

    def to_text(self) -> str:
        c = self.counts
        lines = [
            f"target: {self.target}",
            f"threshold: {self.threshold:.2f}",
            f"TP={c.tp} FP={c.fp} FN={c.fn} TN={c.tn}",
            f"dice: {self.dice:.6f}",
        ]
        if self.auprc is not None:
            lines.append(f"auprc: {self.auprc:.6f}")
        if self.per_image_dice:
            lines.append("per-image dice: " + " ".join(f"{d:.4f}" for d in self.per_image_dice))
        return "\n".join(lines) + "\n"


def _per_image_dice(p, g, f, threshold) -> float:
    try:
        return pooled_counts([p], [g], [f], threshold).dice
    except ValueError:
        return float("nan")


def evaluate_predictions(test_probs, test_samples: Sequence[Sample], threshold: float, target: str,
                         with_auprc: bool = False) -> EvalReport:
    gts = [s.targets[target] for s in test_samples]
    fovs = [s.fov for s in test_samples]
    counts = pooled_counts(test_probs, gts, fovs, threshold)
    ap = None
    if with_auprc:
        flat = [_flat(p, g, f) for p, g, f in zip(test_probs, gts, fovs)]
        ap = auprc(pr_curve(np.concatenate([a for a, _ in flat]), np.concatenate([b for _, b in flat])))
    per = [_per_image_dice(p, g, f, threshold) for p, g, f in zip(test_probs, gts, fovs)]
    return EvalReport(threshold, counts, ap, per, target)


def evaluate(model: UNetModel, test_samples: Sequence[Sample], train_samples: Sequence[Sample],
             target: str, width: Optional[int] = None, tta: bool = True,
             with_auprc: bool = False, threshold: Optional[float] = None) -> EvalReport:
    """Full protocol: threshold from training predictions, pooled metrics on the test set.

    Samples are taken at their original resolution; ``width`` is the width
    the model runs at.
    """
    if threshold is None:
        train_probs = [predict_sample(model, s, width, tta) for s in train_samples]
        threshold = select_threshold(train_probs, [s.targets[target] for s in train_samples],
                                     [s.fov for s in train_samples])
    test_probs = [predict_sample(model, s, width, tta) for s in test_samples]
    return evaluate_predictions(test_probs, test_samples, threshold, target, with_auprc)
