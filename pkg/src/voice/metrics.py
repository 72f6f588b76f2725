"""Quantitative measures on uncertainty maps and their aggregation.

Two map-level measures: a full-reference overlap score (IoU of the
explanation and its uncertainty map, both binarized at the same
threshold) and a no-reference dispersion score (SNR, the inverse
coefficient of variation of the uncertainty map). Reference
log-likelihood, the correct-vs-wrong percent difference, challenge
curves, and trapezoidal area-under-curve complete the toolkit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from voice.engine import PredictionRecord

DEFAULT_IOU_THRESHOLD = 0.1
SWEEP_THRESHOLDS = (0.1, 0.3, 0.4, 0.5, 0.6, 0.7)
NLL_EPS = 1e-12


@dataclass
class MetricRecord:
    """Per-image, per-explainer metric row."""

    source_id: str
    method: str
    iou: float
    snr: float | None  # None: undefined (zero-dispersion map)
    nll: float | None
    correct: bool
    threshold_t: float
    level: int = 0
    challenge: str = "none"
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.iou <= 1.0):
            raise ValueError(f"iou must lie in [0, 1], got {self.iou}")
        if self.snr is not None and self.snr < 0:
            raise ValueError(f"snr must be >= 0, got {self.snr}")
        if self.nll is not None and self.nll < 0:
            raise ValueError(f"nll must be >= 0, got {self.nll}")


def _values(m) -> np.ndarray:
    return np.asarray(getattr(m, "values", m), dtype=np.float64)


def iou(u, m, t: float = DEFAULT_IOU_THRESHOLD) -> float:
    """Intersection over union of both maps binarized at threshold t.

    Pixels strictly above t are in-support. An empty union scores 0 so
    aggregation never drops rows.
    """
    if not (0.0 < t < 1.0):
        raise ValueError(f"threshold t must lie in (0, 1), got {t}")
    uv, mv = _values(u), _values(m)
    if uv.shape != mv.shape:
        raise ValueError(f"shape mismatch: {uv.shape} vs {mv.shape}")
    ub, mb = uv > t, mv > t
    union = np.logical_or(ub, mb).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(ub, mb).sum() / union)


def snr(u) -> float | None:
    """Mean over population standard deviation of the map's intensities.

    The inverse coefficient of variation: higher means the uncertainty
    mass is more dispersed relative to its spread. Undefined (None) when
    the map has zero dispersion.
    """
    uv = _values(u)
    if not np.isfinite(uv).all():
        raise ValueError("non-finite values in uncertainty map")
    sigma = float(uv.std())  # ddof=0
    if sigma == 0.0:
        return None
    return float(uv.mean() / sigma)


def nll(record: PredictionRecord) -> float:
    """Negative log-likelihood of the ground-truth label."""
    if record.label is None:
        raise ValueError("nll requires a ground-truth label")
    p = float(np.asarray(record.probs, dtype=np.float64)[record.label])
    return -math.log(p + NLL_EPS)


def percent_difference(correct_mean: float, wrong_mean: float) -> float:
    """(wrong - correct) / correct x 100, sign preserved."""
    if correct_mean <= 0:
        raise ValueError(f"correct_mean must be > 0, got {correct_mean}")
    return (wrong_mean - correct_mean) / correct_mean * 100.0


# ---------------------------------------------------------------------------
# aggregation over records
# ---------------------------------------------------------------------------

def _mean(xs: list[float]) -> float | None:
    return float(np.mean(xs)) if xs else None


def split_means(records: list[MetricRecord]) -> dict:
    """Mean iou/snr/nll per correctness split, with undefined-SNR counts."""
    out: dict = {}
    for split_name, keep in (("correct", True), ("wrong", False)):
        rows = [r for r in records if r.correct is keep]
        snrs = [r.snr for r in rows if r.snr is not None]
        out[split_name] = {
            "n": len(rows),
            "iou": _mean([r.iou for r in rows]),
            "snr": _mean(snrs),
            "snr_undefined": sum(1 for r in rows if r.snr is None),
            "nll": _mean([r.nll for r in rows if r.nll is not None]),
        }
    for metric in ("iou", "snr"):
        c, w = out["correct"][metric], out["wrong"][metric]
        key = f"{metric}_pct_difference"
        if c is not None and w is not None and c > 0:
            out[key] = percent_difference(c, w)
        else:
            out[key] = None
    return out


# ---------------------------------------------------------------------------
# challenge curves and area under curve
# ---------------------------------------------------------------------------

CURVE_METRICS = ("iou", "snr", "nll")
CURVE_SPLITS = ("all", "correct", "wrong")


@dataclass
class ChallengeCurve:
    """Per-level metric means for one (challenge, explainer) pair.

    ``values[metric][split]`` holds one entry per level (None where a
    split is empty). ``bounds`` records min-max normalization bounds per
    (metric, split) once ``normalized()`` has been taken.
    """

    challenge: str
    explainer: str
    levels: list[int]
    values: dict
    bounds: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError(f"levels must be strictly increasing, got {self.levels}")
        for metric, by_split in self.values.items():
            for split, series in by_split.items():
                if len(series) != len(self.levels):
                    raise ValueError(
                        f"{metric}/{split} has {len(series)} values "
                        f"for {len(self.levels)} levels"
                    )

    def normalized(self) -> "ChallengeCurve":
        """Min-max normalize every series over its own range.

        Constant series normalize to zeros, mirroring map normalization;
        the recorded bounds let either view be recovered.
        """
        norm_values: dict = {}
        bounds: dict = {}
        for metric, by_split in self.values.items():
            norm_values[metric] = {}
            for split, series in by_split.items():
                present = [v for v in series if v is not None]
                if not present:
                    norm_values[metric][split] = list(series)
                    bounds[f"{metric}/{split}"] = None
                    continue
                lo, hi = min(present), max(present)
                bounds[f"{metric}/{split}"] = (lo, hi)
                if hi == lo:
                    norm_values[metric][split] = [
                        None if v is None else 0.0 for v in series
                    ]
                else:
                    norm_values[metric][split] = [
                        None if v is None else (v - lo) / (hi - lo) for v in series
                    ]
        return ChallengeCurve(
            challenge=self.challenge,
            explainer=self.explainer,
            levels=list(self.levels),
            values=norm_values,
            bounds=bounds,
        )


@dataclass
class AUCResult:
    """Trapezoidal area under one normalized metric-vs-level series."""

    metric: str
    auc: float
    challenge: str
    explainer: str
    split: str = "all"


def curve_from_records(records: list[MetricRecord], challenge: str,
                       explainer: str) -> ChallengeCurve:
    """Aggregate per-level records into a ChallengeCurve (raw means)."""
    rows = [r for r in records if r.challenge == challenge and r.method == explainer]
    levels = sorted({r.level for r in rows})
    values: dict = {m: {s: [] for s in CURVE_SPLITS} for m in CURVE_METRICS}
    for level in levels:
        at_level = [r for r in rows if r.level == level]
        for split in CURVE_SPLITS:
            if split == "all":
                sel = at_level
            else:
                sel = [r for r in at_level if r.correct is (split == "correct")]
            values["iou"][split].append(_mean([r.iou for r in sel]))
            values["snr"][split].append(
                _mean([r.snr for r in sel if r.snr is not None])
            )
            values["nll"][split].append(
                _mean([r.nll for r in sel if r.nll is not None])
            )
    return ChallengeCurve(
        challenge=challenge, explainer=explainer, levels=levels, values=values
    )


def auc_curve(curve: ChallengeCurve, metric: str, split: str = "all") -> AUCResult:
    """Trapezoidal area under an already-normalized series.

    The level axis is rescaled to [0, 1]; values must lie in [0, 1] (take
    ``curve.normalized()`` first when starting from raw means). Lower is
    better: an ideal explanation's uncertainty stays flat at zero across
    challenge levels.
    """
    if len(curve.levels) < 2:
        raise ValueError(
            f"area under curve needs at least 2 levels, got {len(curve.levels)}"
        )
    series = curve.values[metric][split]
    if any(v is None for v in series):
        raise ValueError(f"{metric}/{split} series has missing values")
    ys = np.asarray(series, dtype=np.float64)
    if ys.min() < 0.0 or ys.max() > 1.0:
        raise ValueError("series must be normalized to [0, 1] before integrating")
    xs = np.asarray(curve.levels, dtype=np.float64)
    xs = (xs - xs[0]) / (xs[-1] - xs[0])
    return AUCResult(
        metric=metric,
        auc=float(np.trapezoid(ys, xs)),
        challenge=curve.challenge,
        explainer=curve.explainer,
        split=split,
    )


# ---------------------------------------------------------------------------
# threshold sweep
# ---------------------------------------------------------------------------

def threshold_sweep(map_pairs, t_values=SWEEP_THRESHOLDS) -> list[dict]:
    """Recompute the overlap IoU at each threshold and aggregate splits.

    ``map_pairs`` is a sequence of (uncertainty_map, explanation_map,
    correct) triples with maps retained per image. Rows where a split is
    empty or the correct-side mean is zero report a None percent
    difference rather than dropping silently.
    """
    rows = []
    for t in t_values:
        by_split = {True: [], False: []}
        for u, m, correct in map_pairs:
            by_split[bool(correct)].append(iou(u, m, t))
        c, w = _mean(by_split[True]), _mean(by_split[False])
        pct = None
        if c is not None and w is not None and c > 0:
            pct = percent_difference(c, w)
        rows.append(
            {
                "t": float(t),
                "iou_correct": c,
                "iou_wrong": w,
                "n_correct": len(by_split[True]),
                "n_wrong": len(by_split[False]),
                "pct_difference": pct,
            }
        )
    return rows
