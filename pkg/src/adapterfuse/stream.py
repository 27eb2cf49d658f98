"""Deployment policies for streams and batches of query embeddings.

Per-image fusion is wasteful when consecutive frames come from the same
domain.  Two cheaper policies live here: a debounced stream mode that tracks
an exponential moving average of the incoming embeddings and only re-fuses
when the average drifts past a threshold, and a batch mode that clusters a
whole buffer and fuses once per cluster.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Iterator, Sequence

import numpy as np

from .errors import StructuralError, UsageError
from .fusion import (
    FusedAdapter,
    FusionConfig,
    FusionPlan,
    fuse,
    plan_digest,
)
from .library import Embedding, Library
from .metrics import support_score


@dataclasses.dataclass(frozen=True, eq=False)
class StreamState:
    """Everything a debounced stream carries between samples.

    The state starts empty: no average, no active plan.  The first sample
    primes the average and the first policy call always fuses; that initial
    fusion is not a swap, so swap_count stays 0 until a real drift.
    """

    beta: float
    swap_threshold: float
    ema: Embedding | None = None
    active_plan: FusionPlan | None = None
    swap_count: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.beta < 1.0):
            raise UsageError(f"beta must lie in [0, 1), got {self.beta}")
        if math.isnan(self.swap_threshold) or self.swap_threshold < 0:
            raise UsageError(
                f"swap_threshold must be nonnegative, got {self.swap_threshold}"
            )
        if self.swap_count < 0:
            raise StructuralError("swap_count cannot be negative")


def ema_update(state: StreamState, e_t: Embedding) -> StreamState:
    """Fold one embedding into the moving average.

    With an existing average the update is beta * ema + (1 - beta) * e_t;
    the very first sample becomes the average as-is.
    """
    if state.ema is None:
        return dataclasses.replace(state, ema=e_t)
    if state.ema.dim != e_t.dim:
        raise StructuralError(
            f"embedding dim {e_t.dim} does not match stream dim {state.ema.dim}"
        )
    blended = state.beta * state.ema.values + (1.0 - state.beta) * e_t.values
    return dataclasses.replace(state, ema=Embedding(blended))


def plan_weighted_centroid(plan: FusionPlan, lib: Library) -> Embedding:
    """The plan's single summary point: the weight-averaged centroid."""
    acc = np.zeros(lib.embedding_dim)
    for entry in plan.selected:
        acc += entry.weight * lib.record(entry.domain_id).centroid.values
    return Embedding(acc)


def maybe_refuse(
    state: StreamState, lib: Library, config: FusionConfig
) -> tuple[StreamState, FusedAdapter | None]:
    """Fuse when the average has drifted past the threshold, else keep.

    Drift is the euclidean distance from the moving average to the active
    plan's weighted centroid; re-fusing increments swap_count.  Returns the
    new state and the fresh fusion, or (state, None) when nothing changed.
    """
    if state.ema is None:
        raise UsageError("stream has no samples yet; call ema_update first")
    if state.ema.dim != lib.embedding_dim:
        raise StructuralError(
            f"stream dim {state.ema.dim} does not match library dim "
            f"{lib.embedding_dim}"
        )
    if state.active_plan is None:
        fused = fuse(state.ema, lib, config)
        return dataclasses.replace(state, active_plan=fused.plan), fused

    reference = plan_weighted_centroid(state.active_plan, lib)
    drift = float(np.linalg.norm(state.ema.values - reference.values))
    if drift > state.swap_threshold:
        fused = fuse(state.ema, lib, config)
        new_state = dataclasses.replace(
            state, active_plan=fused.plan, swap_count=state.swap_count + 1
        )
        return new_state, fused
    return state, None


def run_stream(
    embeddings: Sequence[Embedding],
    lib: Library,
    config: FusionConfig,
    beta: float,
    swap_threshold: float,
) -> Iterator[dict]:
    """Drive the debounced policy over a whole stream, yielding fusion events.

    One event per fusion: the initial one (swapped false) and every swap
    (swapped true).  Steps are 1-based in the emitted events.
    """
    state = StreamState(beta=beta, swap_threshold=swap_threshold)
    for step, e_t in enumerate(embeddings, start=1):
        state = ema_update(state, e_t)
        state, fused = maybe_refuse(state, lib, config)
        if fused is not None:
            yield {
                "step": step,
                "swapped": state.swap_count > 0 and step > 1,
                "plan_digest": plan_digest(fused.plan),
                "support_score": support_score(fused.plan, config.epsilon_exact),
                "swap_count": state.swap_count,
            }


# ---------------------------------------------------------------------------
# Batch mode: cluster the buffer, fuse once per cluster.
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True, eq=False)
class BatchFusionResult:
    assignments: tuple[int, ...]
    centroids: tuple[Embedding, ...]
    fused: tuple[FusedAdapter, ...]


def _farthest_point_seeds(points: np.ndarray, k: int) -> np.ndarray:
    """Deterministic seeding: start central, then repeatedly take the point
    farthest from the chosen set (lowest index on ties)."""
    center = points.mean(axis=0)
    first = int(np.argmin(np.linalg.norm(points - center, axis=1)))
    chosen = [first]
    min_dist = np.linalg.norm(points - points[first], axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(min_dist))
        chosen.append(nxt)
        min_dist = np.minimum(
            min_dist, np.linalg.norm(points - points[nxt], axis=1)
        )
    return points[chosen].copy()


KMEANS_ITERATIONS = 25


def _kmeans(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    centers = _farthest_point_seeds(points, k)
    assignments = np.zeros(len(points), dtype=np.int64)
    for _ in range(KMEANS_ITERATIONS):
        dists = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
        assignments = np.argmin(dists, axis=1)  # argmin takes lowest index on ties
        for j in range(k):
            members = points[assignments == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            # an emptied cluster keeps its previous center
    return assignments, centers


def batch_cluster_fuse(
    embeddings: Sequence[Embedding],
    lib: Library,
    config: FusionConfig,
    cluster_count: int,
) -> BatchFusionResult:
    """Group a buffer of embeddings and fuse once per group.

    Exactly cluster_count fusions run regardless of buffer size; with
    cluster_count equal to the buffer size this degenerates to per-image
    fusion.
    """
    if len(embeddings) == 0:
        raise UsageError("cannot cluster an empty embedding buffer")
    if not (1 <= cluster_count <= len(embeddings)):
        raise UsageError(
            f"cluster_count must lie in [1, {len(embeddings)}], "
            f"got {cluster_count}"
        )
    dim = embeddings[0].dim
    for e in embeddings[1:]:
        if e.dim != dim:
            raise StructuralError(f"mixed embedding dims: {dim} vs {e.dim}")
    points = np.stack([e.values for e in embeddings])
    assignments, centers = _kmeans(points, cluster_count)
    centroids = tuple(Embedding(c) for c in centers)
    fused = tuple(fuse(c, lib, config) for c in centroids)
    return BatchFusionResult(
        assignments=tuple(int(a) for a in assignments),
        centroids=centroids,
        fused=fused,
    )
