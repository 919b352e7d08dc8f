"""Saliency evaluation: MAE, PR/F-measure, S-measure, E-measure.

All scalars are float64 and lie in [0, 1]. Thresholded metrics sweep the
256 levels t = k/255 with `pixel >= t` counted as positive. Conventions
that the literature leaves implicit are pinned here:
  - precision is defined as 1 when a threshold yields no positives;
  - F is 0 whenever its denominator vanishes;
  - ground truth with no foreground makes recall undefined, so such
    images are flagged and excluded from F/S averages and the PR curve
    (they still count toward MAE and E);
  - the E-measure alignment score is averaged over all W*H pixels;
  - S-measure region/object statistics use N-1 normalized deviations,
    empty centroid blocks get weight 0, and single-pixel blocks have
    zero variance.
"""

import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import DataError, InputError, UsageError

EPS = float(np.spacing(1))
N_THRESHOLDS = 256
BETA2 = 0.3


def thresholds():
    return np.arange(N_THRESHOLDS, dtype=np.float64) / 255.0


def _as_pred(pred):
    arr = np.asarray(pred, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError(f"expected a 2-D prediction map, got shape {arr.shape}")
    if arr.size == 0:
        raise InputError("prediction map is empty")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InputError("prediction values must lie in [0, 1]")
    return arr


def _as_gt(gt, pred_shape):
    arr = np.asarray(gt, dtype=np.float64)
    if arr.shape != pred_shape:
        raise InputError(f"ground truth shape {arr.shape} does not match prediction {pred_shape}")
    return (arr >= 0.5).astype(np.float64)


def mae(pred, gt) -> float:
    """Mean absolute error over all pixels."""
    pred = _as_pred(pred)
    gtb = _as_gt(gt, pred.shape)
    return float(np.abs(pred - gtb).mean())


def pr_curve(pred, gt):
    """Precision and recall over the 256-threshold sweep.

    Returns (precision, recall) float64 arrays of length 256. Raises
    InputError when the ground truth has no foreground pixel, because
    recall is undefined there; callers flag and skip those images.
    """
    pred = _as_pred(pred)
    gtb = _as_gt(gt, pred.shape)
    n_fg = int(gtb.sum())
    if n_fg == 0:
        raise InputError("ground truth has no foreground, recall is undefined")
    t = thresholds()
    all_sorted = np.sort(pred, axis=None)
    fg_sorted = np.sort(pred[gtb > 0.5], axis=None)
    positives = pred.size - np.searchsorted(all_sorted, t, side="left")
    true_pos = n_fg - np.searchsorted(fg_sorted, t, side="left")
    precision = np.where(positives > 0, true_pos / np.maximum(positives, 1), 1.0)
    recall = true_pos / n_fg
    return precision.astype(np.float64), recall.astype(np.float64)


def f_measure(precision, recall, beta2=BETA2):
    """F = (1+b2)*P*R / (b2*P + R), defined as 0 where the denominator is 0."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    num = (1.0 + beta2) * p * r
    den = beta2 * p + r
    out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return out if out.ndim else float(out)


def adaptive_f_measure(pred, gt, beta2=BETA2) -> float:
    """F at the adaptive threshold min(2*mean(pred), 1)."""
    pred = _as_pred(pred)
    gtb = _as_gt(gt, pred.shape)
    n_fg = int(gtb.sum())
    if n_fg == 0:
        raise InputError("ground truth has no foreground, recall is undefined")
    thr = min(2.0 * pred.mean(), 1.0)
    binary = pred >= thr
    positives = int(binary.sum())
    true_pos = int((binary & (gtb > 0.5)).sum())
    precision = 1.0 if positives == 0 else true_pos / positives
    recall = true_pos / n_fg
    return float(f_measure(precision, recall, beta2))


def _object_score(values):
    if values.size == 0:
        return 0.0
    x = float(values.mean())
    sigma = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + EPS)


def _s_object(pred, gtb):
    fg = gtb > 0.5
    u = float(gtb.mean())
    return u * _object_score(pred[fg]) + (1.0 - u) * _object_score(1.0 - pred[~fg])


def _round_half_up(v):
    return int(np.floor(v + 0.5))


def _centroid(gtb):
    """Foreground centroid as 1-based (row, col) with half-up rounding."""
    h, w = gtb.shape
    total = gtb.sum()
    rows = np.arange(1, h + 1, dtype=np.float64)
    cols = np.arange(1, w + 1, dtype=np.float64)
    y = _round_half_up(float((gtb.sum(axis=1) * rows).sum() / total))
    x = _round_half_up(float((gtb.sum(axis=0) * cols).sum() / total))
    return y, x


def _block_ssim(p, g):
    n = p.size
    if n == 0:
        return 0.0
    x = float(p.mean())
    y = float(g.mean())
    if n > 1:
        sigma_x = float(((p - x) ** 2).sum() / (n - 1))
        sigma_y = float(((g - y) ** 2).sum() / (n - 1))
        sigma_xy = float(((p - x) * (g - y)).sum() / (n - 1))
    else:
        sigma_x = sigma_y = sigma_xy = 0.0
    a = 4.0 * x * y * sigma_xy
    b = (x * x + y * y) * (sigma_x + sigma_y)
    if a != 0.0:
        return a / (b + EPS)
    if b == 0.0:
        return 1.0
    return 0.0


def _s_region(pred, gtb):
    h, w = gtb.shape
    y, x = _centroid(gtb)
    area = h * w
    weights = (
        x * y / area,
        (w - x) * y / area,
        x * (h - y) / area,
        (w - x) * (h - y) / area,
    )
    pred_blocks = (pred[:y, :x], pred[:y, x:], pred[y:, :x], pred[y:, x:])
    gt_blocks = (gtb[:y, :x], gtb[:y, x:], gtb[y:, :x], gtb[y:, x:])
    return sum(wgt * _block_ssim(p, g)
               for wgt, p, g in zip(weights, pred_blocks, gt_blocks) if wgt > 0)


def s_measure(pred, gt, alpha=0.5) -> float:
    """Structure measure: alpha*object term + (1-alpha)*region term.

    All-background ground truth scores 1 - mean(pred); all-foreground
    scores mean(pred); the result is clamped below at 0.
    """
    pred = _as_pred(pred)
    gtb = _as_gt(gt, pred.shape)
    y = float(gtb.mean())
    if y == 0.0:
        return 1.0 - float(pred.mean())
    if y == 1.0:
        return float(pred.mean())
    q = alpha * _s_object(pred, gtb) + (1.0 - alpha) * _s_region(pred, gtb)
    return max(float(q), 0.0)


def _enhanced(d_gt, d_fm):
    align = 2.0 * d_gt * d_fm / (d_gt * d_gt + d_fm * d_fm + EPS)
    return (align + 1.0) ** 2 / 4.0


def e_measure_curve(pred, gt):
    """Alignment score of the binarized map at each of the 256 thresholds.

    With mixed ground truth the score is the mean over pixels of the
    enhanced alignment of the two mean-centered binary maps; all-background
    ground truth scores mean(1-FM) and all-foreground scores mean(FM).
    Binary maps make the alignment piecewise constant, so each threshold
    reduces to a closed form over the four (gt, fm) pixel-count cells.
    """
    pred = _as_pred(pred)
    gtb = _as_gt(gt, pred.shape)
    n = pred.size
    n_fg = int(gtb.sum())
    t = thresholds()
    all_sorted = np.sort(pred, axis=None)
    positives = (n - np.searchsorted(all_sorted, t, side="left")).astype(np.float64)
    if n_fg == 0:
        return 1.0 - positives / n
    if n_fg == n:
        return positives / n
    fg_sorted = np.sort(pred[gtb > 0.5], axis=None)
    tp = (n_fg - np.searchsorted(fg_sorted, t, side="left")).astype(np.float64)
    n11 = tp
    n10 = n_fg - tp
    n01 = positives - tp
    n00 = n - n_fg - n01
    mu_g = n_fg / n
    mu_f = positives / n
    scores = (
        n11 * _enhanced(1.0 - mu_g, 1.0 - mu_f)
        + n10 * _enhanced(1.0 - mu_g, -mu_f)
        + n01 * _enhanced(-mu_g, 1.0 - mu_f)
        + n00 * _enhanced(-mu_g, -mu_f)
    ) / n
    return scores


def e_measure(pred, gt) -> float:
    """Max of the enhanced-alignment score over the threshold sweep."""
    return float(np.max(e_measure_curve(pred, gt)))


@dataclass
class MetricReport:
    """Aggregate metrics for a prediction set.

    Scalars averaging only foreground-bearing images (f_max, f_adaptive, s)
    are None when every image was flagged; pr holds 256 {t, p, r} points
    averaged pointwise over the same images.
    """

    n_images: int
    f_max: float
    f_adaptive: float
    s: float
    e_max: float
    mae: float
    pr: list = field(default_factory=list)
    flagged: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def to_json(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    @classmethod
    def from_json(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def evaluate_pairs(named_pairs) -> MetricReport:
    """Aggregate metrics over (name, pred, gt) triples.

    Per-image F and E threshold curves are averaged pointwise before the
    max is taken, matching common saliency benchmarks; MAE, S, and the
    adaptive F are plain means of per-image values.
    """
    t = thresholds()
    mae_values = []
    e_curves = []
    s_values = []
    adaptive_values = []
    f_curves = []
    p_curves = []
    r_curves = []
    flagged = []
    for name, pred, gt in named_pairs:
        mae_values.append(mae(pred, gt))
        e_curves.append(e_measure_curve(pred, gt))
        gtb = np.asarray(gt, dtype=np.float64) >= 0.5
        if not gtb.any():
            flagged.append(name)
            continue
        precision, recall = pr_curve(pred, gt)
        p_curves.append(precision)
        r_curves.append(recall)
        f_curves.append(f_measure(precision, recall))
        adaptive_values.append(adaptive_f_measure(pred, gt))
        s_values.append(s_measure(pred, gt))
    if not mae_values:
        raise UsageError("no image pairs to evaluate")
    if f_curves:
        mean_p = np.mean(p_curves, axis=0)
        mean_r = np.mean(r_curves, axis=0)
        f_max = float(np.max(np.mean(f_curves, axis=0)))
        f_adaptive = float(np.mean(adaptive_values))
        s_mean = float(np.mean(s_values))
        pr = [{"t": float(tk), "p": float(pk), "r": float(rk)}
              for tk, pk, rk in zip(t, mean_p, mean_r)]
    else:
        f_max = f_adaptive = s_mean = None
        pr = []
    return MetricReport(
        n_images=len(mae_values),
        f_max=f_max,
        f_adaptive=f_adaptive,
        s=s_mean,
        e_max=float(np.max(np.mean(e_curves, axis=0))),
        mae=float(np.mean(mae_values)),
        pr=pr,
        flagged=flagged,
    )


def _load_gray(path):
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def _index_maps(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    found = {p.stem: p for p in sorted(directory.iterdir())
             if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")}
    if not found:
        raise UsageError(f"no images found in {directory}")
    return found


def evaluate_dataset(pred_dir, gt_dir) -> MetricReport:
    """Evaluate every prediction in pred_dir against the same stem in gt_dir.

    Stems present on only one side are recorded in report.skipped; a
    prediction whose size differs from its ground truth is bilinearly
    resized to match, with a warning.
    """
    preds = _index_maps(pred_dir)
    gts = _index_maps(gt_dir)
    common = sorted(set(preds) & set(gts))
    skipped = sorted(set(preds) ^ set(gts))
    if not common:
        raise UsageError(f"no matching stems between {pred_dir} and {gt_dir}")

    def iterate():
        for stem in common:
            pred = _load_gray(preds[stem])
            gt = _load_gray(gts[stem])
            if pred.shape != gt.shape:
                warnings.warn(f"resizing prediction {stem} from {pred.shape} to {gt.shape}",
                              stacklevel=2)
                img = Image.fromarray(np.clip(np.rint(pred * 255.0), 0, 255).astype(np.uint8))
                img = img.resize((gt.shape[1], gt.shape[0]), Image.BILINEAR)
                pred = np.asarray(img, dtype=np.float64) / 255.0
            yield stem, pred, gt

    report = evaluate_pairs(iterate())
    report.skipped = skipped
    return report
