"""Evaluation metrics and explainability aggregates.

Segmentation quality is scored as mean intersection-over-union and rows of
per-domain results are summarized by their harmonic mean.  Fusion plans are
aggregated into contribution matrices (which adapters served which test
domains), per-query support scores, and distance-versus-improvement
correlations.  Everything here is pure aggregation over values produced
elsewhere; emission helpers render deterministic CSV.
"""

from __future__ import annotations

import dataclasses
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import NumericError, StructuralError, UsageError
from .fusion import FusionPlan


@dataclasses.dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Square count table; rows are ground truth, columns are predictions."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.counts, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
            raise StructuralError(
                f"confusion matrix must be square, got shape {arr.shape}"
            )
        if np.any(arr < 0):
            raise StructuralError("confusion counts must be nonnegative")
        arr.setflags(write=False)
        object.__setattr__(self, "counts", arr)

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_predictions(
        cls, y_true: np.ndarray, y_pred: np.ndarray, class_count: int
    ) -> "ConfusionMatrix":
        t = np.asarray(y_true).ravel()
        p = np.asarray(y_pred).ravel()
        if t.shape != p.shape:
            raise StructuralError(
                f"prediction count {p.shape} does not match truth {t.shape}"
            )
        if t.size == 0:
            raise UsageError("cannot build a confusion matrix from zero samples")
        if np.any((t < 0) | (t >= class_count) | (p < 0) | (p >= class_count)):
            raise StructuralError(f"labels must lie in [0, {class_count})")
        counts = np.zeros((class_count, class_count), dtype=np.int64)
        np.add.at(counts, (t, p), 1)
        return cls(counts)


def miou(cm: ConfusionMatrix) -> float:
    """Mean over classes of TP / (TP + FP + FN).

    A class absent from both ground truth and prediction has an undefined
    0/0 ratio and is excluded from the mean.
    """
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    if not np.any(present):
        raise UsageError("every class is absent; mean IoU is undefined")
    return float((tp[present] / denom[present]).mean())


def harmonic_mean(values: Sequence[float]) -> float:
    """n / sum(1/v); defined only for strictly positive values."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise UsageError("harmonic mean of an empty list is undefined")
    if np.any(vals <= 0) or not np.all(np.isfinite(vals)):
        raise UsageError("harmonic mean requires strictly positive finite values")
    return float(vals.size / np.sum(1.0 / vals))


@dataclasses.dataclass(frozen=True, eq=False)
class ContributionMatrix:
    """Mean fusion weight each library adapter earned per test domain.

    Cells marked absent were structurally impossible (a held-out domain's
    own adapter under leave-one-out) and are distinct from an adapter that
    was available but never selected, which scores 0.
    """

    row_ids: tuple[str, ...]
    col_ids: tuple[str, ...]
    values: np.ndarray
    absent: np.ndarray

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.absent, dtype=bool)
        shape = (len(self.row_ids), len(self.col_ids))
        if vals.shape != shape or mask.shape != shape:
            raise StructuralError("contribution matrix shape mismatch")
        if np.any(vals < 0) or np.any(vals > 1 + 1e-9):
            raise NumericError("contribution cells must lie in [0, 1]")
        if np.any(vals[mask] != 0):
            raise StructuralError("absent cells must carry no weight")
        row_sums = vals.sum(axis=1)
        if not np.allclose(row_sums, 1.0, atol=1e-6, rtol=0.0):
            raise NumericError(
                f"contribution rows must each sum to 1, got {row_sums}"
            )
        vals.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "absent", mask)

    def cell(self, row_id: str, col_id: str) -> float | None:
        """The mean weight, or None where the cell is structurally absent."""
        i = self.row_ids.index(row_id)
        j = self.col_ids.index(col_id)
        if self.absent[i, j]:
            return None
        return float(self.values[i, j])


def contribution_matrix(
    tagged_plans: Iterable[tuple[str, FusionPlan]],
    adapter_ids: Sequence[str] | None = None,
    excluded: Iterable[tuple[str, str]] = (),
) -> ContributionMatrix:
    """Aggregate plans into per-(test domain, adapter) mean weights.

    ``excluded`` marks cells that the evaluation protocol makes impossible;
    a plan that puts weight on an excluded cell is a protocol violation.
    Aggregation is a commutative count-plus-sum, so plan order is irrelevant.
    """
    sums: dict[str, dict[str, float]] = {}
    counts: dict[str, int] = {}
    seen_adapters: set[str] = set()
    for domain_id, plan in tagged_plans:
        row = sums.setdefault(domain_id, {})
        counts[domain_id] = counts.get(domain_id, 0) + 1
        for entry in plan.selected:
            row[entry.domain_id] = row.get(entry.domain_id, 0.0) + entry.weight
            seen_adapters.add(entry.domain_id)
    if not counts:
        raise UsageError("cannot aggregate an empty plan stream")

    excluded_set = {(r, c) for r, c in excluded}
    for (row_id, col_id) in excluded_set:
        if sums.get(row_id, {}).get(col_id, 0.0) != 0.0:
            raise StructuralError(
                f"plan stream puts weight on excluded cell "
                f"({row_id!r}, {col_id!r})"
            )

    row_ids = tuple(sorted(counts))
    if adapter_ids is None:
        col_ids = tuple(sorted(seen_adapters))
    else:
        col_ids = tuple(adapter_ids)
        stray = seen_adapters - set(col_ids)
        if stray:
            raise StructuralError(
                f"plans reference adapters outside the library: {sorted(stray)}"
            )
    values = np.zeros((len(row_ids), len(col_ids)))
    absent = np.zeros((len(row_ids), len(col_ids)), dtype=bool)
    for i, rid in enumerate(row_ids):
        for j, cid in enumerate(col_ids):
            if (rid, cid) in excluded_set:
                absent[i, j] = True
            else:
                values[i, j] = sums[rid].get(cid, 0.0) / counts[rid]
    return ContributionMatrix(row_ids, col_ids, values, absent)


def support_score(plan: FusionPlan, epsilon_exact: float = 1e-12) -> float:
    """Sum of weight over distance: high when near, trusted adapters serve.

    Exact matches would divide by zero; each distance is floored at
    epsilon_exact and the total is capped at 1/epsilon_exact, so an exact
    hit scores exactly the cap.
    """
    if not (epsilon_exact > 0):
        raise UsageError("epsilon_exact must be positive")
    total = 0.0
    for entry in plan.selected:
        total += entry.weight / max(entry.distance, epsilon_exact)
    return float(min(total, 1.0 / epsilon_exact))


@dataclasses.dataclass(frozen=True)
class CorrelationResult:
    r: float
    slope: float
    count: int


def distance_performance_correlation(
    pairs: Sequence[tuple[float, float]],
) -> CorrelationResult:
    """Pearson r and least-squares slope of improvement against distance."""
    if len(pairs) < 3:
        raise UsageError(
            f"correlation needs at least 3 pairs, got {len(pairs)}"
        )
    arr = np.asarray(pairs, dtype=np.float64)
    x, y = arr[:, 0], arr[:, 1]
    xc, yc = x - x.mean(), y - y.mean()
    var_x, var_y = float(xc @ xc), float(yc @ yc)
    if var_x == 0.0 or var_y == 0.0:
        raise UsageError("correlation is undefined under zero variance")
    cov = float(xc @ yc)
    return CorrelationResult(
        r=cov / np.sqrt(var_x * var_y),
        slope=cov / var_x,
        count=len(pairs),
    )


# ---------------------------------------------------------------------------
# Deterministic CSV emission.  Floats are written with repr so the exact
# value round-trips; headers are `# key: value` comment lines.
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_csv(
    header: Sequence[tuple[str, object]],
    columns: Sequence[str],
    rows: Iterable[Sequence[object]],
) -> str:
    lines = [f"# {key}: {_fmt(val)}" for key, val in header]
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def metric_table_csv(
    header: Sequence[tuple[str, object]],
    methods: Sequence[str],
    per_domain: Mapping[str, Mapping[str, float]],
) -> str:
    """Schema: domain, then one column per method; one row per test domain."""
    columns = ["domain"] + list(methods)
    rows = []
    for domain in sorted(per_domain):
        scores = per_domain[domain]
        rows.append([domain] + [float(scores[m]) for m in methods])
    return render_csv(header, columns, rows)


def contribution_csv(
    header: Sequence[tuple[str, object]],
    matrix: ContributionMatrix,
    threshold: float | None = None,
) -> str:
    """Schema: test_domain, then one column per adapter.

    Structurally absent cells emit empty; a threshold additionally blanks
    small weights at emission time without touching the aggregate itself.
    """
    columns = ["test_domain"] + list(matrix.col_ids)
    rows = []
    for i, rid in enumerate(matrix.row_ids):
        row: list[object] = [rid]
        for j in range(len(matrix.col_ids)):
            if matrix.absent[i, j]:
                row.append(None)
            elif threshold is not None and matrix.values[i, j] < threshold:
                row.append(None)
            else:
                row.append(float(matrix.values[i, j]))
        rows.append(row)
    return render_csv(header, columns, rows)


def correlation_csv(
    header: Sequence[tuple[str, object]],
    pairs: Sequence[tuple[float, float]],
    result: CorrelationResult,
    x_name: str = "distance",
    y_name: str = "improvement",
) -> str:
    """Schema: the raw pairs, with r/slope/count recorded in the header."""
    full_header = list(header) + [
        ("pearson_r", float(result.r)),
        ("slope", float(result.slope)),
        ("pair_count", result.count),
    ]
    rows = [[float(x), float(y)] for x, y in pairs]
    return render_csv(full_header, [x_name, y_name], rows)
