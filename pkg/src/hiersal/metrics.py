"""Saliency evaluation metrics: NSS, CC, SIM, AUC-Judd, shuffled AUC.

All computation runs in float64. Metrics return None on degenerate frames
(no fixations, constant maps, empty negative pools); ``EvalRecord`` counts
and excludes those per metric instead of folding silent zeros into the
aggregates.

Both AUC variants are exact ROC areas with thresholds at every distinct
map value, i.e. the tie-corrected rank statistic
P(pred@fixation > pred@negative) + 0.5 P(tie).
"""

import csv

import numpy as np


def nss(pred, fixations):
    """Mean z-scored prediction over fixated pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    fix = np.asarray(fixations) > 0
    if fix.sum() == 0:
        return None
    sd = pred.std()
    if sd == 0:
        return None
    z = (pred - pred.mean()) / sd
    return float(z[fix].mean())


def cc(pred, gt_density):
    """Pearson correlation between prediction and ground-truth density."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    g = np.asarray(gt_density, dtype=np.float64).ravel()
    pc = p - p.mean()
    gc = g - g.mean()
    denom = np.sqrt((pc * pc).sum() * (gc * gc).sum())
    if denom == 0:
        return None
    return float((pc * gc).sum() / denom)


def sim(pred, gt_density):
    """Histogram intersection of the sum-normalized maps."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt_density, dtype=np.float64)
    ps, gs = p.sum(), g.sum()
    if ps <= 0 or gs <= 0:
        return None
    return float(np.minimum(p / ps, g / gs).sum())


def _midrank(values):
    uniq, inv, counts = np.unique(values, return_inverse=True, return_counts=True)
    high = np.cumsum(counts)
    mid = (high - counts + 1 + high) / 2.0
    return mid[inv]


def _rank_auc(pos, neg):
    npos, nneg = pos.size, neg.size
    if npos == 0 or nneg == 0:
        return None
    ranks = _midrank(np.concatenate([pos, neg]))
    rpos = ranks[:npos].sum()
    return float((rpos - npos * (npos + 1) / 2.0) / (npos * nneg))


def auc_judd(pred, fixations):
    """ROC area with fixated pixels as positives, all others as negatives."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    fix = (np.asarray(fixations) > 0).ravel()
    return _rank_auc(p[fix], p[~fix])


def shuffled_auc(pred, fixations, other_fixations, seed=0, max_shuffles=10):
    """AUC with negatives drawn from other videos' fixations.

    Negatives are sampled (without replacement, per shuffle) from
    ``other_fixations`` minus the true fixations; up to ``max_shuffles``
    draws are averaged. Deterministic given ``seed``.
    """
    p = np.asarray(pred, dtype=np.float64).ravel()
    fix = (np.asarray(fixations) > 0).ravel()
    pool = ((np.asarray(other_fixations) > 0).ravel()) & ~fix
    pool_idx = np.flatnonzero(pool)
    if fix.sum() == 0 or pool_idx.size == 0:
        return None
    pos = p[fix]
    n_neg = min(pos.size, pool_idx.size)
    rng = np.random.default_rng(seed)
    scores = []
    for _ in range(max_shuffles):
        chosen = rng.choice(pool_idx, size=n_neg, replace=False)
        scores.append(_rank_auc(pos, p[chosen]))
    return float(np.mean(scores))


METRIC_NAMES = ("nss", "cc", "sim", "aucj", "sauc")


class EvalRecord:
    """Per-frame metric table with per-video and aggregate means."""

    def __init__(self):
        self.rows = []

    def add_frame(self, video_id, frame_idx, scores):
        flags = [f"{k}_undef" for k in METRIC_NAMES if scores.get(k) is None]
        self.rows.append({
            "video_id": video_id,
            "frame_idx": frame_idx,
            **{k: scores.get(k) for k in METRIC_NAMES},
            "flags": "|".join(flags),
        })

    @property
    def frame_count(self):
        return len(self.rows)

    def _mean_over(self, rows, key):
        vals = [r[key] for r in rows if r[key] is not None]
        return (float(np.mean(vals)), len(vals)) if vals else (None, 0)

    def aggregate(self):
        return {k: self._mean_over(self.rows, k)[0] for k in METRIC_NAMES}

    def defined_counts(self):
        return {k: self._mean_over(self.rows, k)[1] for k in METRIC_NAMES}

    def per_video(self):
        out = {}
        for vid in sorted({r["video_id"] for r in self.rows}):
            rows = [r for r in self.rows if r["video_id"] == vid]
            out[vid] = {k: self._mean_over(rows, k)[0] for k in METRIC_NAMES}
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["video_id", "frame_idx", *METRIC_NAMES, "flags"])
            for r in self.rows:
                w.writerow([r["video_id"], r["frame_idx"]]
                           + [("" if r[k] is None else f"{r[k]:.6f}") for k in METRIC_NAMES]
                           + [r["flags"]])
            agg = self.aggregate()
            counts = self.defined_counts()
            w.writerow(["aggregate", self.frame_count]
                       + [("" if agg[k] is None else f"{agg[k]:.6f}") for k in METRIC_NAMES]
                       + [";".join(f"{k}_n={counts[k]}" for k in METRIC_NAMES)])
