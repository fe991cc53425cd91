"""Depth restoration metrics and per-region error breakdown.

RMSE, MAE, and REL are computed over the evaluated set: pixels that are
marked valid and carry nonzero ground truth.  The divisor is the size of
that set, never the full image area.  delta_{1+n%} thresholds report the
percentage of evaluated pixels whose relative error stays below n%.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .depthmap import DepthMap, Mask, RegionPartition

DELTA_THRESHOLDS = (0.05, 0.10, 0.25)


class MetricsError(ValueError):
    """Raised when the evaluated pixel set is empty."""


@dataclass(frozen=True)
class MetricsReport:
    region: str
    count: int
    rmse: float
    mae: float
    rel: float
    delta_105: float
    delta_110: float
    delta_125: float

    def __post_init__(self):
        if not self.delta_105 <= self.delta_110 + 1e-9 or not self.delta_110 <= self.delta_125 + 1e-9:
            raise ValueError("delta percentages must be monotone")

    def to_dict(self) -> dict:
        return {
            "region": self.region,
            "count": self.count,
            "rmse": self.rmse,
            "mae": self.mae,
            "rel": self.rel,
            "delta_105": self.delta_105,
            "delta_110": self.delta_110,
            "delta_125": self.delta_125,
        }


def compute_metrics(pred: DepthMap, gt: DepthMap, valid: Mask,
                    region: str = "overall") -> MetricsReport:
    """Metrics over ``valid & (gt > 0)``; errors out if that set is empty."""
    if pred.shape != gt.shape or pred.shape != valid.shape:
        raise ValueError(
            f"shape mismatch: pred {pred.shape}, gt {gt.shape}, valid {valid.shape}"
        )
    sel = np.asarray(valid, bool) & (gt > 0)
    n = int(sel.sum())
    if n == 0:
        raise MetricsError(f"no evaluated pixels in region '{region}'")
    p = pred[sel].astype(np.float64)
    g = gt[sel].astype(np.float64)
    err = p - g
    abs_err = np.abs(err)
    rel_err = abs_err / g
    deltas = [100.0 * float((rel_err < thr).sum()) / n for thr in DELTA_THRESHOLDS]
    return MetricsReport(
        region=region,
        count=n,
        rmse=float(np.sqrt((err**2).mean())),
        mae=float(abs_err.mean()),
        rel=float(rel_err.mean()),
        delta_105=deltas[0],
        delta_110=deltas[1],
        delta_125=deltas[2],
    )


def breakdown(pred: DepthMap, gt: DepthMap, part: RegionPartition,
              valid: Mask | None = None) -> dict:
    """Overall metrics plus independent optical/geometric (and hole) reports.

    Regions with no evaluated pixel map to None ("n/a" downstream), never
    to zeros.
    """
    if valid is None:
        valid = np.ones(gt.shape, dtype=bool)
    out: dict[str, MetricsReport | None] = {
        "overall": compute_metrics(pred, gt, valid, "overall")
    }
    for name, region_mask in (("optical", part.optical), ("geometric", part.geometric),
                              ("holes", part.holes)):
        try:
            out[name] = compute_metrics(pred, gt, valid & region_mask, name)
        except MetricsError:
            out[name] = None
    return out


def aggregate_reports(per_sample: list[dict]) -> dict:
    """Mean of per-sample metric values per region; counts are summed.

    This is the cross-sample aggregation contract (documented in every
    report header): metrics are averaged per sample, not pixel-pooled.
    """
    if not per_sample:
        raise MetricsError("nothing to aggregate")
    regions = per_sample[0].keys()
    agg: dict[str, dict | None] = {}
    for region in regions:
        reports = [s[region] for s in per_sample if s[region] is not None]
        if not reports:
            agg[region] = None
            continue
        agg[region] = {
            "region": region,
            "samples": len(reports),
            "count": int(sum(r.count for r in reports)),
            "rmse": float(np.mean([r.rmse for r in reports])),
            "mae": float(np.mean([r.mae for r in reports])),
            "rel": float(np.mean([r.rel for r in reports])),
            "delta_105": float(np.mean([r.delta_105 for r in reports])),
            "delta_110": float(np.mean([r.delta_110 for r in reports])),
            "delta_125": float(np.mean([r.delta_125 for r in reports])),
        }
    return agg


def format_table(rows: list[tuple[str, dict | None]], title: str = "") -> str:
    """Fixed-width text table with one row per (label, aggregate-region)."""
    header = f"{'Method':<28s} {'RMSE':>7s} {'MAE':>7s} {'REL':>7s} {'d1.05':>7s} {'d1.10':>7s} {'d1.25':>7s}"
    lines = [title, header, "-" * len(header)] if title else [header, "-" * len(header)]
    for label, rep in rows:
        if rep is None:
            lines.append(f"{label:<28s} {'n/a':>7s} {'n/a':>7s} {'n/a':>7s} {'n/a':>7s} {'n/a':>7s} {'n/a':>7s}")
        else:
            lines.append(
                f"{label:<28s} {rep['rmse']:7.3f} {rep['mae']:7.3f} {rep['rel']:7.3f} "
                f"{rep['delta_105']:7.2f} {rep['delta_110']:7.2f} {rep['delta_125']:7.2f}"
            )
    return "\n".join(lines) + "\n"
