"""Output-based group metrics and distribution summaries of canonical sets."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.spatial.distance import jensenshannon
from scipy.stats import wasserstein_distance

from .blackbox import ScoredTable
from .data import DataError, RawTable, TableSchema
from .lucidgan import CanonicalSet

DECISION_THRESHOLD = 0.5
SUPPORT_FLOOR = 30
MAX_BINS = 200

CATEGORY_ORDER_CAVEAT = "categorical Wasserstein distance uses the schema vocabulary order"


@dataclass
class GroupMetrics:
    feature: str
    categories: list[str]
    support: dict[str, int]
    pr: dict[str, float | None]
    tpr: dict[str, float | None]
    low_support: set[str]
    support_floor: int = SUPPORT_FLOOR

    def table(self) -> pd.DataFrame:
        """Percentages per category, one column per category (the Table 1 layout)."""
        return pd.DataFrame({
            c: {"support": self.support[c],
                "PR": None if self.pr[c] is None else 100 * self.pr[c],
                "TPR": None if self.tpr[c] is None else 100 * self.tpr[c]}
            for c in self.categories
        })

    def to_dict(self) -> dict:
        return {
            c: {"support": self.support[c], "PR": self.pr[c], "TPR": self.tpr[c],
                "low_support": c in self.low_support}
            for c in self.categories
        }


def group_metrics(
    scored: ScoredTable,
    feature: str,
    threshold: float = DECISION_THRESHOLD,
    support_floor: int = SUPPORT_FLOOR,
) -> GroupMetrics:
    """Positivity rate and true positive rate of every category of ``feature``.

    A row counts as a positive decision when its prediction is at least
    ``threshold``. Categories without ground-truth positives get ``tpr=None``;
    empty categories get ``pr=None``.
    """
    schema = scored.schema
    if feature not in schema or not schema[feature].is_categorical:
        raise DataError(f"unknown categorical feature {feature!r}")
    y = scored.table.y
    decided = scored.predictions >= threshold
    col = scored.table.rows[feature].to_numpy()
    cats = list(schema[feature].categories)
    support, pr, tpr = {}, {}, {}
    for c in cats:
        sel = col == c
        n = int(sel.sum())
        support[c] = n
        pr[c] = float(decided[sel].mean()) if n else None
        pos = sel & (y == 1)
        tpr[c] = float(decided[pos].mean()) if pos.any() else None
    low = {c for c in cats if support[c] < support_floor}
    return GroupMetrics(feature, cats, support, pr, tpr, low, support_floor)


@dataclass
class Disparity:
    kind: str
    gaps: pd.DataFrame  # absolute pairwise gaps in rate units
    max_gap: float
    max_pair: tuple[str, str] | None
    low_support_pairs: list[tuple[str, str]]


def disparity(metrics: GroupMetrics, kind: str = "DP", include_low_support: bool = True) -> Disparity:
    """Pairwise absolute rate gaps: PR for ``"DP"``, TPR for ``"EOP"``."""
    if kind not in ("DP", "EOP"):
        raise ValueError(f"kind must be 'DP' or 'EOP', got {kind!r}")
    rates = metrics.pr if kind == "DP" else metrics.tpr
    defined = [c for c in metrics.categories if rates[c] is not None]
    if not defined:
        raise DataError(f"no category of {metrics.feature!r} has a defined rate")
    gaps = pd.DataFrame(0.0, index=defined, columns=defined)
    low_pairs = []
    best, best_pair = 0.0, None
    for a, b in itertools.combinations(defined, 2):
        g = abs(rates[a] - rates[b])
        gaps.loc[a, b] = gaps.loc[b, a] = g
        is_low = a in metrics.low_support or b in metrics.low_support
        if is_low:
            low_pairs.append((a, b))
        if (include_low_support or not is_low) and (best_pair is None or g > best):
            best, best_pair = g, (a, b)
    return Disparity(kind, gaps, best, best_pair, low_pairs)


# distribution summaries


@dataclass
class DistributionSummary:
    frequencies: dict[str, pd.Series] = field(default_factory=dict)
    histograms: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    n: int = 0

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "frequencies": {k: v.to_dict() for k, v in self.frequencies.items()},
            "histograms": {k: {"edges": e.tolist(), "masses": m.tolist()} for k, (e, m) in self.histograms.items()},
        }


def _rows(obj) -> tuple[pd.DataFrame, TableSchema | None]:
    if isinstance(obj, CanonicalSet):
        return obj.rows, None
    if isinstance(obj, RawTable):
        return obj.rows, obj.schema
    if isinstance(obj, ScoredTable):
        return obj.table.rows, obj.schema
    return obj, None


def histogram_edges(*samples: np.ndarray, max_bins: int = MAX_BINS) -> np.ndarray:
    """Freedman-Diaconis edges on the union of samples, Sturges when the IQR is zero."""
    x = np.concatenate([np.asarray(s, dtype=float) for s in samples])
    if x.size == 0:
        raise DataError("cannot bin an empty sample")
    lo, hi = x.min(), x.max()
    if lo == hi:
        return np.array([lo - 0.5, hi + 0.5])
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    rule = "fd" if iqr > 0 else "sturges"
    edges = np.histogram_bin_edges(x, bins=rule)
    if len(edges) - 1 > max_bins:
        edges = np.linspace(lo, hi, max_bins + 1)
    return edges


def summarize(
    obj,
    schema: TableSchema,
    bins: Mapping[str, np.ndarray] | None = None,
    features: Sequence[str] | None = None,
) -> DistributionSummary:
    """Category frequencies and numeric histograms (masses sum to one).

    Numeric features use ``bins[name]`` when given so that compared sets
    share their bins; otherwise edges come from this set alone.
    """
    rows, _ = _rows(obj)
    if len(rows) == 0:
        raise DataError("cannot summarize an empty set")
    out = DistributionSummary(n=len(rows))
    for f in schema.features:
        if features is not None and f.name not in features:
            continue
        if f.name not in rows.columns:
            continue
        col = rows[f.name]
        if f.is_categorical:
            counts = col.astype(str).value_counts().reindex(f.categories, fill_value=0)
            out.frequencies[f.name] = counts / counts.sum()
        else:
            x = col.to_numpy(float)
            edges = np.asarray(bins[f.name]) if bins and f.name in bins else histogram_edges(x)
            counts, _ = np.histogram(np.clip(x, edges[0], edges[-1]), bins=edges)
            out.histograms[f.name] = (edges, counts / counts.sum())
    return out


def shared_bins(sets: Iterable, schema: TableSchema) -> dict[str, np.ndarray]:
    frames = [_rows(s)[0] for s in sets]
    return {
        f.name: histogram_edges(*[fr[f.name].to_numpy(float) for fr in frames if f.name in fr.columns and len(fr)])
        for f in schema.numeric
        if any(f.name in fr.columns and len(fr) for fr in frames)
    }


@dataclass
class PairedSummary:
    """Positive and negative summaries over shared bins; never one without the other."""

    positive: DistributionSummary
    negative: DistributionSummary
    bins: dict[str, np.ndarray]

    def frequency_table(self, feature: str) -> pd.DataFrame:
        if feature in self.positive.frequencies:
            return pd.DataFrame({"positive": self.positive.frequencies[feature],
                                 "negative": self.negative.frequencies[feature]})
        edges, pm = self.positive.histograms[feature]
        _, nm = self.negative.histograms[feature]
        return pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "positive": pm, "negative": nm})

    def to_dict(self) -> dict:
        return {"positive": self.positive.to_dict(), "negative": self.negative.to_dict()}


def summarize_pair(positive, negative, schema: TableSchema) -> PairedSummary:
    bins = shared_bins([positive, negative], schema)
    return PairedSummary(summarize(positive, schema, bins), summarize(negative, schema, bins), bins)


def _check_matching(a: DistributionSummary, b: DistributionSummary):
    if set(a.frequencies) != set(b.frequencies) or set(a.histograms) != set(b.histograms):
        raise DataError("summaries cover different features")
    for k in a.frequencies:
        if list(a.frequencies[k].index) != list(b.frequencies[k].index):
            raise DataError(f"category mismatch for {k!r}")
    for k in a.histograms:
        if not np.array_equal(a.histograms[k][0], b.histograms[k][0]):
            raise DataError(f"bin mismatch for {k!r}")


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in bits, in ``[0, 1]``."""
    d = jensenshannon(np.asarray(p, float), np.asarray(q, float), base=2)
    return float(d) ** 2


def distribution_distance(a: DistributionSummary, b: DistributionSummary, metric: str = "wasserstein1") -> dict[str, float]:
    """Per-feature distance between two summaries with identical bins.

    Wasserstein-1 transports mass between bin centers for numeric features
    and between vocabulary positions ``0, 1, ...`` for categorical ones.
    """
    _check_matching(a, b)
    out = {}
    for k, pa in a.frequencies.items():
        pb = b.frequencies[k]
        if metric == "wasserstein1":
            pos = np.arange(len(pa))
            out[k] = float(wasserstein_distance(pos, pos, pa.to_numpy(), pb.to_numpy()))
        elif metric == "jensen_shannon":
            out[k] = js_divergence(pa.to_numpy(), pb.to_numpy())
        else:
            raise ValueError(f"unknown metric {metric!r}")
    for k, (edges, ma) in a.histograms.items():
        mb = b.histograms[k][1]
        if metric == "wasserstein1":
            centers = (edges[:-1] + edges[1:]) / 2
            out[k] = float(wasserstein_distance(centers, centers, ma, mb))
        else:
            out[k] = js_divergence(ma, mb)
    return out


def canonical_delta(direct: DistributionSummary, proxy: DistributionSummary) -> dict[str, pd.Series]:
    """Signed direct-minus-proxy mass per category or bin; positive means more frequent under direct."""
    _check_matching(direct, proxy)
    out = {k: direct.frequencies[k] - proxy.frequencies[k] for k in direct.frequencies}
    for k, (edges, md) in direct.histograms.items():
        out[k] = pd.Series(md - proxy.histograms[k][1], index=pd.IntervalIndex.from_breaks(edges))
    return out


# intersectional cross-tabs


@dataclass
class CrossTab:
    axis: str
    percentages: pd.DataFrame  # rows: fixed-category labels, columns: axis categories
    counts: pd.DataFrame
    fixed: list[dict[str, str]]
    prediction_target: float

    def to_csv(self, path) -> None:
        self.percentages.to_csv(path)


def fixed_label(fixed: Mapping[str, str]) -> str:
    return ", ".join(f"{k}={v}" for k, v in fixed.items())


def intersectional_crosstab(sets: Sequence[CanonicalSet], axis: str, schema: TableSchema) -> CrossTab:
    """Percentage distribution over ``axis`` for each fixed-category set."""
    if not sets:
        raise DataError("no canonical sets given")
    if axis not in schema or not schema[axis].is_categorical:
        raise DataError(f"axis {axis!r} is not a categorical feature")
    targets = {s.prediction_target for s in sets}
    if len(targets) != 1:
        raise DataError("canonical sets have different prediction targets")
    labels = [fixed_label(s.fixed_categories) for s in sets]
    if len(set(labels)) != len(labels):
        raise DataError("fixed categories must be distinct")
    cats = list(schema[axis].categories)
    counts = pd.DataFrame(0, index=labels, columns=cats)
    for lab, s in zip(labels, sets):
        if axis not in s.rows.columns:
            raise DataError(f"axis {axis!r} absent from canonical set")
        counts.loc[lab] = s.rows[axis].astype(str).value_counts().reindex(cats, fill_value=0)
    totals = counts.sum(axis=1).replace(0, np.nan)
    pct = counts.div(totals, axis=0) * 100
    return CrossTab(axis, pct, counts, [dict(s.fixed_categories) for s in sets], targets.pop())
