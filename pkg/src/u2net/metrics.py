"""Saliency evaluation: PR curve, max F-beta, MAE, weighted F-beta, S-measure, relaxed boundary F.

Conventions shared by every measure:

* a prediction is quantised to ``q = floor(255 * P + 0.5)`` and binarised at
  threshold ``t`` as ``q >= t`` for t = 0..255 (t = 0 is all-foreground);
* precision of an empty prediction is 1, recall against an empty ground
  truth is 1, and F(0, 0) = 0.

Weighted F-beta
    E = |P - G|.  Every background pixel takes the error of its nearest
    foreground pixel (Euclidean; ties go to the lowest row-major index),
    giving Et.  EA = Et correlated with a 7x7 Gaussian (sigma 5, edge
    values replicated outward).  On foreground pixels where EA < E the error becomes EA.
    Background errors are scaled by B = 2 - exp(ln(0.5) / 5 * d), d being
    the distance to the nearest foreground pixel; Ew is the result.
    TPw = |G| - sum(Ew on fg), FPw = sum(Ew on bg), R = 1 - mean(Ew on fg),
    P = TPw / (TPw + FPw), F = (1 + b2) P R / (b2 P + R), b2 = 1 by default.
    An all-background G is undefined and yields NaN (excluded from means).

S-measure
    S = alpha * S_o + (1 - alpha) * S_r, clipped at 0; all-background G gives
    1 - mean(P) and all-foreground G gives mean(P).
    S_o = u * O(P on fg) + (1 - u) * O(1 - P on bg), u = mean(G), with
    O(x) = 2 mean(x) / (mean(x)^2 + 1 + std(x)) (sample std, 0 for one pixel).
    S_r splits both maps at the foreground centroid (X = round(mean col) + 1,
    Y = round(mean row) + 1; the top-left block is rows < Y, cols < X) and
    sums the four SSIM scores weighted by block area.  Block SSIM is
    4 mx my sxy / ((mx^2 + my^2)(sx + sy)) with sample (co)variances; it is 1
    when numerator and denominator are both 0 and 0 when only the numerator is.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DataError
from .imaging import resize_bilinear

log = logging.getLogger(__name__)

N_THRESHOLDS = 256
FW_SIGMA = 5.0
FW_KERNEL = 7
FW_DECAY = 5.0


@dataclass
class EvalPair:
    pred: np.ndarray
    gt: np.ndarray
    name: str = ""

    def __post_init__(self):
        pred = np.asarray(self.pred, dtype=np.float64)
        gt = np.asarray(self.gt)
        if pred.ndim != 2 or gt.ndim != 2:
            raise ConfigurationError(f"EvalPair needs 2-D maps, got {pred.shape} and {gt.shape}")
        if not np.all((gt == 0) | (gt == 1)):
            raise ConfigurationError("ground truth must be binary {0, 1}")
        if pred.shape != gt.shape:
            log.info("resizing prediction %s from %s to %s", self.name, pred.shape, gt.shape)
            pred = resize_bilinear(pred, *gt.shape)
        self.pred = np.clip(pred, 0.0, 1.0)
        self.gt = gt.astype(bool)


def _as_pair(pred, gt=None) -> EvalPair:
    return pred if isinstance(pred, EvalPair) else EvalPair(pred, gt)


def f_beta(precision, recall, beta2: float = 0.3):
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    num = (1 + beta2) * precision * recall
    den = beta2 * precision + recall
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


# ---------------------------------------------------------------- PR / maxF

def quantize(pred: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(pred, dtype=np.float64) * 255.0 + 0.5).astype(np.int64)


def image_pr(pair: EvalPair) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall at every threshold 0..255 for one image."""
    q = quantize(pair.pred)
    fg_hist = np.bincount(q[pair.gt], minlength=N_THRESHOLDS)
    all_hist = np.bincount(q.ravel(), minlength=N_THRESHOLDS)
    # counts of q >= t
    tp = np.cumsum(fg_hist[::-1])[::-1].astype(np.float64)
    pp = np.cumsum(all_hist[::-1])[::-1].astype(np.float64)
    n_fg = float(pair.gt.sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pp > 0, tp / np.where(pp > 0, pp, 1.0), 1.0)
        recall = tp / n_fg if n_fg > 0 else np.ones(N_THRESHOLDS)
    return precision, recall


@dataclass
class PrCurve:
    precision: np.ndarray
    recall: np.ndarray

    @property
    def thresholds(self) -> np.ndarray:
        return np.arange(N_THRESHOLDS)

    def to_list(self) -> list:
        return [{"t": int(t), "precision": float(p), "recall": float(r)}
                for t, p, r in zip(self.thresholds, self.precision, self.recall)]


def pr_curve(pairs: Iterable) -> PrCurve:
    pairs = [_as_pair(p) if isinstance(p, EvalPair) else EvalPair(*p) for p in pairs]
    if not pairs:
        raise DataError("pr_curve needs at least one prediction/ground-truth pair")
    ps, rs = zip(*(image_pr(p) for p in pairs))
    curve = PrCurve(np.mean(ps, axis=0), np.mean(rs, axis=0))
    assert np.all(np.diff(curve.recall) <= 1e-12), "recall must not increase with the threshold"
    return curve


def max_f_beta(curve: PrCurve, beta2: float = 0.3) -> float:
    return float(np.max(f_beta(curve.precision, curve.recall, beta2)))


# ---------------------------------------------------------------- MAE

def mae(pred, gt=None) -> float:
    pair = _as_pair(pred, gt)
    return float(np.mean(np.abs(pair.pred - pair.gt)))


# ---------------------------------------------------------------- weighted F

def gaussian_kernel(size: int = FW_KERNEL, sigma: float = FW_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma * sigma))
    return k / k.sum()


def nearest_foreground(gt: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distance to, and row/col of, the nearest foreground pixel for every pixel.

    Exact Euclidean distances come from the distance transform; the nearest
    pixel is then re-selected among all lattice offsets at exactly that
    squared distance so ties resolve to the lowest row-major index.
    """
    gt = gt.astype(bool)
    h, w = gt.shape
    iy, ix = np.indices((h, w))
    if gt.all():
        return np.zeros((h, w)), iy, ix
    dist, (ny, nx) = ndimage.distance_transform_edt(~gt, return_indices=True)
    d2 = (ny - iy) ** 2 + (nx - ix) ** 2
    ny, nx = ny.copy(), nx.copy()
    for sq in np.unique(d2[~gt]):
        sel = (d2 == sq) & ~gt
        py, px = iy[sel], ix[sel]
        r = int(math.isqrt(int(sq)))
        offsets = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx == sq]
        best_y = np.full(py.shape, -1)
        best_x = np.full(py.shape, -1)
        for dy, dx in offsets:  # row-major order of the candidate position
            cy, cx = py + dy, px + dx
            ok = (best_y < 0) & (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w)
            ok[ok] = gt[cy[ok], cx[ok]]
            best_y[ok], best_x[ok] = cy[ok], cx[ok]
        ny[sel], nx[sel] = best_y, best_x
    return np.sqrt(d2.astype(np.float64)), ny, nx


def weighted_f_beta(pred, gt=None, beta2: float = 1.0) -> float:
    pair = _as_pair(pred, gt)
    G = pair.gt
    if not G.any():
        return float("nan")
    E = np.abs(pair.pred - G)
    dist, ny, nx = nearest_foreground(G)
    Et = E[ny, nx]
    EA = ndimage.correlate(Et, gaussian_kernel(), mode="nearest")
    min_e_ea = np.where(G & (EA < E), EA, E)
    B = np.where(G, 1.0, 2.0 - np.exp(math.log(0.5) / FW_DECAY * dist))
    Ew = min_e_ea * B
    tpw = G.sum() - Ew[G].sum()
    fpw = Ew[~G].sum()
    recall = 1.0 - Ew[G].mean()
    precision = tpw / (tpw + fpw) if tpw + fpw > 0 else 0.0
    return float(f_beta(precision, recall, beta2))


# ---------------------------------------------------------------- S-measure

def _variance(a: np.ndarray, b: np.ndarray) -> float:
    """Sample covariance; exactly 0 when either input is constant, so roundoff in the mean cannot leak in."""
    if a.size < 2 or a.min() == a.max() or b.min() == b.max():
        return 0.0
    return float(((a - a.mean()) * (b - b.mean())).sum() / (a.size - 1))


def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mean = x.mean()
    std = math.sqrt(_variance(x, x))
    return 2.0 * mean / (mean * mean + 1.0 + std)


def s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    u = gt.mean()
    fg = _object_score(pred[gt])
    bg = _object_score(1.0 - pred[~gt])
    return float(u * fg + (1 - u) * bg)


def centroid(gt: np.ndarray) -> tuple[int, int]:
    """(X, Y) split point: rounded foreground centroid plus one; centre if empty."""
    h, w = gt.shape
    if not gt.any():
        return int(math.floor(w / 2 + 0.5)), int(math.floor(h / 2 + 0.5))
    rows, cols = np.nonzero(gt)
    # half rounds up, not to even
    return int(math.floor(cols.mean() + 0.5)) + 1, int(math.floor(rows.mean() + 0.5)) + 1


def _block_ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    x, y = pred.mean(), gt.mean()
    sx, sy, sxy = _variance(pred, pred), _variance(gt, gt), _variance(pred, gt)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return float(alpha / beta)
    return 1.0 if beta == 0 else 0.0


def s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    X, Y = centroid(gt)
    g = gt.astype(np.float64)
    area = h * w
    blocks = [(slice(0, Y), slice(0, X)), (slice(0, Y), slice(X, w)),
              (slice(Y, h), slice(0, X)), (slice(Y, h), slice(X, w))]
    weights = [X * Y / area, (w - X) * Y / area, X * (h - Y) / area]
    weights.append(1.0 - sum(weights))
    score = 0.0
    for (rs, cs), wt in zip(blocks, weights):
        if pred[rs, cs].size:
            score += wt * _block_ssim(pred[rs, cs], g[rs, cs])
    return float(score)


def s_measure(pred, gt=None, alpha: float = 0.5) -> float:
    pair = _as_pair(pred, gt)
    P, G = pair.pred, pair.gt
    y = G.mean()
    if y == 0:
        return float(1.0 - P.mean())
    if y == 1:
        return float(P.mean())
    score = alpha * s_object(P, G) + (1 - alpha) * s_region(P, G)
    return float(max(0.0, score))


# ---------------------------------------------------------------- relaxed boundary F

def erode(mask: np.ndarray) -> np.ndarray:
    """3x3 binary erosion; pixels outside the image count as background."""
    return ndimage.binary_erosion(np.asarray(mask, dtype=bool), structure=np.ones((3, 3), bool),
                                  border_value=0)


def extract_boundary(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    return m ^ erode(m)


def _within(src: np.ndarray, dst: np.ndarray, rho: float) -> np.ndarray:
    """For every ``src`` pixel, whether some ``dst`` pixel is within Euclidean ``rho``."""
    if not dst.any():
        return np.zeros(int(src.sum()), dtype=bool)
    d2 = ndimage.distance_transform_edt(~dst) ** 2
    return np.rint(d2[src]) <= rho * rho


def relax_boundary_prf(pred, gt=None, rho: float = 3, threshold: float = 0.5) -> tuple[float, float]:
    """(relaxed boundary precision, relaxed boundary recall)."""
    pair = _as_pair(pred, gt)
    bp = extract_boundary(pair.pred >= threshold)
    bg = extract_boundary(pair.gt)
    precision = float(_within(bp, bg, rho).mean()) if bp.any() else 1.0
    recall = float(_within(bg, bp, rho).mean()) if bg.any() else 1.0
    return precision, recall


def relax_boundary_f(pred, gt=None, rho: float = 3, beta2: float = 0.3, threshold: float = 0.5) -> float:
    pair = _as_pair(pred, gt)
    bp = extract_boundary(pair.pred >= threshold)
    bg = extract_boundary(pair.gt)
    if not bp.any() and not bg.any():
        return 1.0
    p, r = relax_boundary_prf(pair, rho=rho, threshold=threshold)
    return float(f_beta(p, r, beta2))


# ---------------------------------------------------------------- dataset

@dataclass
class ImageMetrics:
    name: str
    mae: float
    max_f_beta: float
    wf_beta: float
    s_measure: float
    relax_f_boundary: float


@dataclass
class MetricReport:
    dataset: str
    n_images: int
    max_f_beta: float
    mae: float
    wf_beta: float
    s_measure: float
    relax_f_boundary: float
    pr: PrCurve
    per_image: list = field(default_factory=list)
    beta2: float = 0.3
    wf_beta2: float = 1.0
    wf_excluded: int = 0

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "n_images": self.n_images,
                "max_f_beta": self.max_f_beta, "mae": self.mae,
                "wf_beta": self.wf_beta, "s_measure": self.s_measure,
                "relax_f_boundary": self.relax_f_boundary,
                "beta2": self.beta2, "wf_beta2": self.wf_beta2,
                "wf_excluded": self.wf_excluded,
                "pr_curve": self.pr.to_list()}

    def per_image_csv(self) -> str:
        rows = ["name,mae,max_f_beta,wf_beta,s_measure,relax_f_boundary"]
        for m in self.per_image:
            rows.append(f"{m.name},{m.mae:.9g},{m.max_f_beta:.9g},{m.wf_beta:.9g},"
                        f"{m.s_measure:.9g},{m.relax_f_boundary:.9g}")
        return "\n".join(rows) + "\n"


def evaluate_pairs(pairs: Sequence[EvalPair], dataset: str = "dataset",
                   beta2: float = 0.3, wf_beta2: float = 1.0) -> MetricReport:
    """Per-image measures and dataset means; order of ``pairs`` is preserved."""
    if not pairs:
        raise DataError("no prediction/ground-truth pairs to evaluate")
    per_image = []
    for pair in pairs:
        p, r = image_pr(pair)
        per_image.append(ImageMetrics(
            name=pair.name, mae=mae(pair),
            max_f_beta=float(np.max(f_beta(p, r, beta2))),
            wf_beta=weighted_f_beta(pair, beta2=wf_beta2),
            s_measure=s_measure(pair),
            relax_f_boundary=relax_boundary_f(pair, beta2=beta2)))
    curve = pr_curve(pairs)
    wf = np.array([m.wf_beta for m in per_image])
    valid = ~np.isnan(wf)
    return MetricReport(
        dataset=dataset, n_images=len(pairs),
        max_f_beta=max_f_beta(curve, beta2),
        mae=float(np.mean([m.mae for m in per_image])),
        wf_beta=float(wf[valid].mean()) if valid.any() else float("nan"),
        s_measure=float(np.mean([m.s_measure for m in per_image])),
        relax_f_boundary=float(np.mean([m.relax_f_boundary for m in per_image])),
        pr=curve, per_image=per_image, beta2=beta2, wf_beta2=wf_beta2,
        wf_excluded=int((~valid).sum()))


def evaluate_dataset(pred_source, gt_source, dataset: Optional[str] = None, **kwargs) -> MetricReport:
    """Evaluate two directories (or stem -> array mappings) matched by filename stem."""
    from .io import load_prediction_and_masks

    pairs = load_prediction_and_masks(pred_source, gt_source)
    name = dataset or (getattr(gt_source, "name", None) or "dataset")
    return evaluate_pairs(pairs, dataset=str(name), **kwargs)
