"""Query-time adapter fusion.

The pipeline: measure the query's distance to every domain centroid, keep
the closest K, turn inverse distances into softmax weights, and merge the
selected adapters by concatenating their factors.  Merging never multiplies
B by A; the weighted concatenation is algebraically identical to the
weighted sum of the individual deltas, which is what makes test-time
adaptation cheap.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from typing import Mapping, Sequence

import numpy as np

from .errors import NumericError, StructuralError, UsageError
from .library import DomainRecord, Embedding, Library
from .tensor import AdapterSet, Matrix

DISTANCE_METRICS = ("euclidean", "cosine", "mahalanobis")


@dataclasses.dataclass(frozen=True)
class FusionConfig:
    """Knobs for one fusion run; evaluation harnesses must set K and tau."""

    top_k: int = 7
    temperature: float = 0.01
    distance_metric: str = "euclidean"
    epsilon_exact: float = 1e-12
    normalize_query: bool = False

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise UsageError(f"top_k must be >= 1, got {self.top_k}")
        if not (np.isfinite(self.temperature) and self.temperature > 0):
            raise UsageError(f"temperature must be positive, got {self.temperature}")
        if self.distance_metric not in DISTANCE_METRICS:
            raise UsageError(
                f"unknown distance metric {self.distance_metric!r}; "
                f"choose from {DISTANCE_METRICS}"
            )
        if not (np.isfinite(self.epsilon_exact) and self.epsilon_exact > 0):
            raise UsageError(
                f"epsilon_exact must be positive, got {self.epsilon_exact}"
            )


@dataclasses.dataclass(frozen=True)
class PlanEntry:
    domain_id: str
    distance: float
    weight: float


@dataclasses.dataclass(frozen=True, eq=False)
class FusionPlan:
    """Which adapters a query selected, how far they were, what they weigh."""

    selected: tuple[PlanEntry, ...]
    metric: str
    query_digest: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "selected", tuple(self.selected))
        if not self.selected:
            raise UsageError("a fusion plan must select at least one adapter")
        weights = np.array([e.weight for e in self.selected])
        if np.any(weights < 0):
            raise NumericError("fusion weights must be nonnegative")
        if abs(float(weights.sum()) - 1.0) > 1e-9:
            raise NumericError(
                f"fusion weights must sum to 1, got {float(weights.sum())!r}"
            )
        dists = [e.distance for e in self.selected]
        if any(b < a for a, b in zip(dists, dists[1:])):
            raise StructuralError("plan entries must be in ascending distance order")

    @property
    def domain_ids(self) -> tuple[str, ...]:
        return tuple(e.domain_id for e in self.selected)

    @property
    def weights(self) -> tuple[float, ...]:
        return tuple(e.weight for e in self.selected)


@dataclasses.dataclass(frozen=True, eq=False)
class FusedLayer:
    """Concatenated factors for one layer, plus the scaling they carry."""

    B_fused: Matrix
    A_fused: Matrix
    rank: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


@dataclasses.dataclass(frozen=True, eq=False)
class FusedAdapter:
    """Per-layer concatenated factors ready to drop into a host model."""

    layers: Mapping[str, FusedLayer]
    merged_count: int
    plan: FusionPlan | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", dict(self.layers))
        for name, layer in self.layers.items():
            if layer.B_fused.cols != layer.A_fused.rows:
                raise StructuralError(
                    f"layer {name!r}: fused factor inner dims disagree"
                )
            if layer.B_fused.cols != layer.rank * self.merged_count:
                raise StructuralError(
                    f"layer {name!r}: fused width {layer.B_fused.cols} is not "
                    f"rank {layer.rank} times {self.merged_count} adapters"
                )

    def delta(self, layer_name: str, apply_scaling: bool = False) -> Matrix:
        """Materialize the dense fused update for one layer."""
        layer = self.layers[layer_name]
        # same fixed reduction order as the per-adapter delta op, so a
        # single-adapter merge reproduces that adapter bit for bit
        out = np.einsum(
            "dr,rk->dk", layer.B_fused.data, layer.A_fused.data, optimize=False
        )
        if apply_scaling:
            out = out * layer.scaling
        return Matrix(out)


def embedding_digest(e: Embedding) -> str:
    """SHA-256 of the raw little-endian float64 bytes of a vector."""
    return hashlib.sha256(
        np.ascontiguousarray(e.values, dtype="<f8").tobytes()
    ).hexdigest()


def distance(query: Embedding, record: DomainRecord, metric: str) -> float:
    """How far a query embedding sits from one domain's centroid."""
    if query.dim != record.centroid.dim:
        raise StructuralError(
            f"query dim {query.dim} does not match centroid dim "
            f"{record.centroid.dim}"
        )
    q = query.values
    c = record.centroid.values
    if metric == "euclidean":
        return float(np.linalg.norm(q - c))
    if metric == "cosine":
        qn, cn = float(np.linalg.norm(q)), float(np.linalg.norm(c))
        if qn == 0.0 or cn == 0.0:
            raise UsageError("cosine distance is undefined for zero-norm vectors")
        return float(1.0 - np.dot(q, c) / (qn * cn))
    if metric == "mahalanobis":
        if record.covariance is None:
            raise UsageError(
                f"domain {record.domain_id!r} has no covariance; "
                f"it is not eligible for mahalanobis distance"
            )
        diff = q - c
        try:
            solved = np.linalg.solve(record.covariance.data, diff)
        except np.linalg.LinAlgError as exc:
            raise NumericError(
                f"domain {record.domain_id!r}: covariance is singular; "
                f"rebuild with a positive ridge"
            ) from exc
        quad = float(diff @ solved)
        return float(np.sqrt(max(quad, 0.0)))
    raise UsageError(f"unknown distance metric {metric!r}")


def _prepared_query(query: Embedding, config: FusionConfig) -> Embedding:
    if not config.normalize_query:
        return query
    norm = float(np.linalg.norm(query.values))
    if norm == 0.0:
        raise UsageError("cannot normalize a zero-norm query")
    return Embedding(query.values / norm)


def select_top_k(
    query: Embedding, lib: Library, config: FusionConfig
) -> list[tuple[DomainRecord, float]]:
    """The min(K, M) nearest records, ascending; ties broken by domain_id.

    Under the mahalanobis metric, records without a covariance are dropped
    from the candidate set before ranking rather than raising.
    """
    if lib.size == 0:
        raise UsageError("cannot select adapters from an empty library")
    q = _prepared_query(query, config)
    candidates = lib.records
    if config.distance_metric == "mahalanobis":
        candidates = tuple(r for r in candidates if r.mahalanobis_eligible)
        if not candidates:
            raise UsageError(
                "no record in the library is eligible for mahalanobis distance"
            )
    scored = [(r, distance(q, r, config.distance_metric)) for r in candidates]
    scored.sort(key=lambda pair: (pair[1], pair[0].domain_id))
    return scored[: min(config.top_k, len(scored))]


def compute_weights(
    distances: Sequence[float],
    temperature: float,
    epsilon_exact: float = 1e-12,
) -> list[float]:
    """Softmax over inverse distances, stabilized by max-subtraction.

    Scores are 1/(d_i * tau), so closer domains score higher and smaller
    temperatures sharpen the distribution.  Distances at or below
    epsilon_exact are treated as exact matches: they split the whole weight
    uniformly among themselves and everything else gets zero, which is the
    continuous tau -> 0 limit.
    """
    if not (np.isfinite(temperature) and temperature > 0):
        raise UsageError(f"temperature must be positive, got {temperature}")
    if len(distances) == 0:
        raise UsageError("cannot weight an empty selection")
    d = np.asarray(distances, dtype=np.float64)
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise NumericError("distances must be finite and nonnegative")

    exact = d <= epsilon_exact
    if np.any(exact):
        weights = np.where(exact, 1.0 / int(exact.sum()), 0.0)
        return [float(w) for w in weights]

    with np.errstate(over="ignore"):
        scores = 1.0 / (d * temperature)
    if np.any(np.isinf(scores)):
        # beyond-range tau underflowed d*tau; the limit equals an exact match
        top = np.isinf(scores)
        weights = np.where(top, 1.0 / int(top.sum()), 0.0)
        return [float(w) for w in weights]
    shifted = scores - scores.max()
    expd = np.exp(shifted)
    weights = expd / expd.sum()
    return [float(w) for w in weights]


def _shared_layer_table(adapters: Sequence[AdapterSet]) -> tuple[str, ...]:
    ref = adapters[0]
    ref_names = set(ref.layer_names)
    for other in adapters[1:]:
        if set(other.layer_names) != ref_names:
            raise StructuralError(
                f"adapters {ref.adapter_id!r} and {other.adapter_id!r} "
                f"have different layer sets"
            )
        for name in ref.layer_names:
            p, q = ref.layer(name), other.layer(name)
            if (p.out_dim, p.rank, p.in_dim) != (q.out_dim, q.rank, q.in_dim):
                raise StructuralError(
                    f"layer {name!r}: shape/rank mismatch between adapters "
                    f"{ref.adapter_id!r} and {other.adapter_id!r}"
                )
            if p.alpha != q.alpha:
                raise StructuralError(
                    f"layer {name!r}: alpha mismatch between adapters "
                    f"{ref.adapter_id!r} and {other.adapter_id!r}"
                )
    return ref.layer_names


def merge_concat(
    adapters: Sequence[AdapterSet],
    weights: Sequence[float],
    plan: FusionPlan | None = None,
) -> FusedAdapter:
    """Concatenate factors so the product equals the weighted delta sum.

    Per layer, the up-projections are laid side by side unchanged and each
    down-projection is scaled by its weight before being stacked:

        B_fused = [B_1 | ... | B_K]        (d x rK)
        A_fused = [w_1 A_1; ...; w_K A_K]  (rK x k)

    so B_fused A_fused = sum_i w_i B_i A_i without ever forming the dense
    per-adapter deltas.
    """
    if len(adapters) == 0:
        raise UsageError("cannot merge an empty adapter selection")
    if len(adapters) != len(weights):
        raise UsageError(
            f"{len(adapters)} adapters but {len(weights)} weights"
        )
    layer_names = _shared_layer_table(adapters)
    w = [float(x) for x in weights]
    fused = {}
    for name in layer_names:
        pairs = [a.layer(name) for a in adapters]
        b_cat = np.hstack([p.B.data for p in pairs])
        a_cat = np.vstack([wi * p.A.data for wi, p in zip(w, pairs)])
        fused[name] = FusedLayer(
            B_fused=Matrix(b_cat),
            A_fused=Matrix(a_cat),
            rank=pairs[0].rank,
            alpha=pairs[0].alpha,
        )
    return FusedAdapter(layers=fused, merged_count=len(adapters), plan=plan)


def merge_uniform(adapters: Sequence[AdapterSet]) -> FusedAdapter:
    """Relevance-blind baseline: every provided adapter gets weight 1/N."""
    if len(adapters) == 0:
        raise UsageError("cannot merge an empty adapter selection")
    n = len(adapters)
    return merge_concat(adapters, [1.0 / n] * n)


def fuse(query: Embedding, lib: Library, config: FusionConfig) -> FusedAdapter:
    """distance -> select -> weight -> merge, with the plan attached."""
    q = _prepared_query(query, config)
    selection = select_top_k(q, lib, dataclasses.replace(config, normalize_query=False))
    dists = [d for _, d in selection]
    weights = compute_weights(dists, config.temperature, config.epsilon_exact)
    plan = FusionPlan(
        selected=tuple(
            PlanEntry(rec.domain_id, float(d), float(w))
            for (rec, d), w in zip(selection, weights)
        ),
        metric=config.distance_metric,
        query_digest=embedding_digest(q),
    )
    return merge_concat([rec.adapter for rec, _ in selection], weights, plan=plan)


def apply_fused(base: Mapping[str, Matrix], fused: FusedAdapter) -> dict[str, Matrix]:
    """Add each layer's scaled fused delta to its host weight matrix."""
    out = dict(base)
    for name, layer in fused.layers.items():
        if name not in base:
            raise StructuralError(f"host model has no layer {name!r}")
        w = base[name]
        d, k = layer.B_fused.rows, layer.A_fused.cols
        if w.shape != (d, k):
            raise StructuralError(
                f"layer {name!r}: host shape {w.shape} does not match "
                f"fused delta shape {(d, k)}"
            )
        out[name] = Matrix(w.data + fused.delta(name, apply_scaling=True).data)
    return out


def late_fuse_outputs(
    outputs: Sequence[np.ndarray], weights: Sequence[float]
) -> np.ndarray:
    """Convex combination of per-adapter probability tensors.

    Class probabilities live on the last axis; every slice must sum to 1
    within 1e-6 going in, and convexity guarantees the same coming out.
    """
    if len(outputs) == 0:
        raise UsageError("cannot late-fuse an empty output list")
    if len(outputs) != len(weights):
        raise UsageError(f"{len(outputs)} outputs but {len(weights)} weights")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-6:
        raise UsageError("late-fusion weights must be a convex combination")
    arrs = [np.asarray(o, dtype=np.float64) for o in outputs]
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise StructuralError(f"output shapes differ: {shape} vs {a.shape}")
    for a in arrs:
        sums = a.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-6, rtol=0.0):
            raise NumericError("late-fusion inputs must be probability tensors")
    combined = np.zeros(shape)
    for wi, a in zip(w, arrs):
        combined += wi * a
    sums = combined.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-6, rtol=0.0):
        raise NumericError("late-fusion output drifted off the simplex")
    return combined


def plan_report(plan: FusionPlan, config: FusionConfig) -> dict:
    """The JSON-ready explainability record for one fusion decision."""
    return {
        "query_digest": plan.query_digest,
        "metric": plan.metric,
        "temperature": config.temperature,
        "top_k": config.top_k,
        "selected": [
            {
                "domain_id": e.domain_id,
                "distance": e.distance,
                "weight": e.weight,
            }
            for e in plan.selected
        ],
    }


def plan_digest(plan: FusionPlan) -> str:
    """Stable identifier for a plan: hash of its canonical serialization."""
    canon = json.dumps(
        {
            "query_digest": plan.query_digest,
            "metric": plan.metric,
            "selected": [
                [e.domain_id, repr(e.distance), repr(e.weight)]
                for e in plan.selected
            ],
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
