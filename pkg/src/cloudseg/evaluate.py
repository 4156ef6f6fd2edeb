"""Confusion-matrix metrics, Tukey summaries, Wilcoxon tests, MOS tables."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

from .errors import ArgumentError, DataError
from .raster import check_mask


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class SegmentationMetrics:
    """Per-mask metric record; a ratio with zero denominator is None."""

    ji: float | None
    pr: float | None
    re: float | None
    spe: float | None
    oa: float | None

    def to_dict(self):
        return {"ji": self.ji, "pr": self.pr, "re": self.re,
                "spe": self.spe, "oa": self.oa}


def confusion(pred, gt):
    """Pixelwise confusion counts with cloud as the positive class."""
    pred = check_mask(pred)
    gt = check_mask(gt)
    if pred.shape != gt.shape:
        raise ArgumentError(f"pred {pred.shape} vs gt {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
    )


def _ratio(num, den):
    return num / den if den > 0 else None


def metrics_from_confusion(c):
    return SegmentationMetrics(
        ji=_ratio(c.tp, c.tp + c.fp + c.fn),
        pr=_ratio(c.tp, c.tp + c.fp),
        re=_ratio(c.tp, c.tp + c.fn),
        spe=_ratio(c.tn, c.tn + c.fp),
        oa=_ratio(c.tp + c.tn, c.total),
    )


@dataclass(frozen=True)
class TukeySummary:
    q1: float
    median: float
    q3: float
    whisker_lo: float
    whisker_hi: float
    outliers: tuple

    def to_dict(self):
        return {"q1": self.q1, "median": self.median, "q3": self.q3,
                "whisker_lo": self.whisker_lo, "whisker_hi": self.whisker_hi,
                "outliers": list(self.outliers)}


def tukey_summary(values):
    """Quartiles by the hinge (median-of-halves) convention, 1.5*IQR
    whisker fences, points beyond the fences listed as outliers."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ArgumentError("empty sample")
    s = np.sort(values)
    n = s.size
    med = float(np.median(s))
    lower = s[: (n + 1) // 2]
    upper = s[n // 2 :]
    q1 = float(np.median(lower))
    q3 = float(np.median(upper))
    iqr = q3 - q1
    lo_fence = q1 - 1.5 * iqr
    hi_fence = q3 + 1.5 * iqr
    inside = s[(s >= lo_fence) & (s <= hi_fence)]
    return TukeySummary(
        q1=q1, median=med, q3=q3,
        whisker_lo=float(inside.min()),
        whisker_hi=float(inside.max()),
        outliers=tuple(float(v) for v in s[(s < lo_fence) | (s > hi_fence)]),
    )


@dataclass(frozen=True)
class WilcoxonResult:
    w: float       # min(W+, W-)
    p: float
    n: int         # pairs remaining after dropping zero differences
    exact: bool
    degenerate: bool = False


EXACT_LIMIT = 20


def _exact_tails(ranks2, w2):
    """Distribution of 2*W+ over all sign assignments, by convolution.

    ranks2 are the doubled (integer) ranks; returns (P(W+<=w), P(W+>=w)).
    """
    total = int(sum(ranks2))
    poly = np.zeros(total + 1, dtype=np.float64)
    poly[0] = 1.0
    for r in ranks2:
        nxt = poly.copy()
        nxt[r:] += poly[: total + 1 - r]
        poly = nxt
    poly /= poly.sum()
    lo = poly[: w2 + 1].sum()
    hi = poly[w2:].sum()
    return lo, hi


def wilcoxon_two_tailed(a, b, method=None):
    """Paired two-tailed Wilcoxon signed-rank test.

    Average ranks for tied |differences|; exact p by enumerating the
    2^n sign assignments (via convolution) for n <= 20, otherwise a
    normal approximation with tie-corrected variance and continuity
    correction. ``method`` ("exact"/"approx") overrides the size rule.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ArgumentError(f"paired samples must be equal-length 1-D, got {a.shape} vs {b.shape}")
    d = a - b
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return WilcoxonResult(w=0.0, p=1.0, n=0, exact=True, degenerate=True)
    if n < 5:
        raise ArgumentError(f"need >= 5 nonzero differences, got {n}")

    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)

    use_exact = n <= EXACT_LIMIT if method is None else method == "exact"
    if use_exact:
        ranks2 = [int(round(2 * r)) for r in ranks]
        lo, hi = _exact_tails(ranks2, int(round(2 * w_plus)))
        p = min(1.0, 2.0 * min(lo, hi))
        return WilcoxonResult(w=w, p=p, n=n, exact=True)

    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    tie_term = float(((counts**3 - counts) / 48.0).sum())
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    if var <= 0:
        return WilcoxonResult(w=w, p=1.0, n=n, exact=False, degenerate=True)
    # continuity correction toward the mean
    z = (w_plus - mean - np.sign(w_plus - mean) * 0.5) / np.sqrt(var)
    p = min(1.0, 2.0 * float(norm.sf(abs(z))))
    return WilcoxonResult(w=w, p=p, n=n, exact=False)


# --- MOS aggregation ------------------------------------------------------

MOS_CHOICES = ("A", "B", "BOTH", "NONE")


@dataclass(frozen=True)
class MosResponse:
    image_id: str
    choice: str

    def __post_init__(self):
        if self.choice not in MOS_CHOICES:
            raise ArgumentError(f"choice must be one of {MOS_CHOICES}, got {self.choice!r}")


@dataclass(frozen=True)
class MosRow:
    pct_a: float
    pct_b: float
    pct_both: float
    pct_none: float
    avg_ji_a: float
    avg_ji_b: float
    n_images: int

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class MosTable:
    """Rows: images where mask A had the higher JI, where mask B did,
    and all images; percentages are per-image, then averaged unweighted
    across the group's images. delta[image] = ji_b - ji_a."""

    higher_a: MosRow | None
    higher_b: MosRow | None
    all_images: MosRow
    delta: dict


def _row(image_ids, per_image_pct, ji_table):
    pcts = np.array([per_image_pct[i] for i in image_ids])
    mean = pcts.mean(axis=0)
    return MosRow(
        pct_a=float(mean[0]), pct_b=float(mean[1]),
        pct_both=float(mean[2]), pct_none=float(mean[3]),
        avg_ji_a=float(np.mean([ji_table[i][0] for i in image_ids])),
        avg_ji_b=float(np.mean([ji_table[i][1] for i in image_ids])),
        n_images=len(image_ids),
    )


def mos_aggregate(responses, ji_table):
    """ji_table: {image_id: (ji_a, ji_b)}. Images are grouped by which
    mask scored the higher JI (exact ties join only the all-images row)."""
    if not responses:
        raise ArgumentError("no responses")
    counts = {}
    for r in responses:
        if r.image_id not in ji_table:
            raise DataError(f"response references unknown image {r.image_id!r}")
        c = counts.setdefault(r.image_id, dict.fromkeys(MOS_CHOICES, 0))
        c[r.choice] += 1

    per_image_pct = {}
    for img, c in counts.items():
        total = sum(c.values())
        per_image_pct[img] = [100.0 * c[k] / total for k in MOS_CHOICES]

    images = sorted(counts)
    group_a = [i for i in images if ji_table[i][0] > ji_table[i][1]]
    group_b = [i for i in images if ji_table[i][1] > ji_table[i][0]]
    return MosTable(
        higher_a=_row(group_a, per_image_pct, ji_table) if group_a else None,
        higher_b=_row(group_b, per_image_pct, ji_table) if group_b else None,
        all_images=_row(images, per_image_pct, ji_table),
        delta={i: ji_table[i][1] - ji_table[i][0] for i in images},
    )
