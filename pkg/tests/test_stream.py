"""Debounced streaming policy and batch cluster fusion."""

import numpy as np
import pytest

import adapterfuse.stream as stream_mod
from adapterfuse.errors import StructuralError, UsageError
from adapterfuse.fusion import FusionConfig, fuse, plan_digest
from adapterfuse.library import DomainRecord, Embedding, Library
from adapterfuse.stream import (
    BatchFusionResult,
    StreamState,
    batch_cluster_fuse,
    ema_update,
    maybe_refuse,
    plan_weighted_centroid,
    run_stream,
)
from adapterfuse.tensor import AdapterSet, LoraPair, Matrix


def E(*vals):
    return Embedding(np.array(vals, dtype=np.float64))


def make_adapter(rng, adapter_id):
    return AdapterSet(
        adapter_id,
        (
            LoraPair(
                "layer_0",
                Matrix(rng.normal(size=(6, 2))),
                Matrix(rng.normal(size=(2, 5))),
                rank=2,
                alpha=4.0,
            ),
        ),
    )


def library_at(rng, centroids, ids=None):
    ids = ids or [f"dom_{i}" for i in range(len(centroids))]
    records = tuple(
        DomainRecord(did, c, 10, make_adapter(rng, f"ad_{did}"))
        for did, c in zip(ids, centroids)
    )
    return Library(records=records, embedding_dim=centroids[0].dim)


class TestStreamState:
    def test_beta_range_enforced(self):
        with pytest.raises(UsageError):
            StreamState(beta=1.0, swap_threshold=1.0)
        with pytest.raises(UsageError):
            StreamState(beta=-0.1, swap_threshold=1.0)

    def test_threshold_must_be_nonnegative(self):
        with pytest.raises(UsageError):
            StreamState(beta=0.9, swap_threshold=-1.0)
        # zero and infinity are both meaningful settings
        StreamState(beta=0.9, swap_threshold=0.0)
        StreamState(beta=0.9, swap_threshold=float("inf"))


class TestEmaUpdate:
    def test_zero_beta_has_no_memory(self):
        state = StreamState(beta=0.0, swap_threshold=1.0, ema=E(5.0, 5.0))
        out = ema_update(state, E(1.0, -2.0))
        np.testing.assert_array_equal(out.ema.values, [1.0, -2.0])

    def test_high_beta_barely_moves(self):
        state = StreamState(beta=0.999, swap_threshold=1.0, ema=E(1.0, 0.0))
        out = ema_update(state, E(0.0, 1.0))
        np.testing.assert_allclose(out.ema.values, [0.999, 0.001], atol=1e-12)

    def test_first_sample_primes_average(self):
        state = StreamState(beta=0.9, swap_threshold=1.0)
        out = ema_update(state, E(2.0, 3.0))
        np.testing.assert_array_equal(out.ema.values, [2.0, 3.0])

    def test_geometric_convergence_closed_form(self):
        """Against a constant stream the gap shrinks by exactly beta a step."""
        rng = np.random.default_rng(42)
        for beta in (0.5, 0.9, 0.99):
            ema0 = Embedding(rng.normal(size=4))
            target = Embedding(rng.normal(size=4))
            gap0 = np.linalg.norm(ema0.values - target.values)
            state = StreamState(beta=beta, swap_threshold=1.0, ema=ema0)
            # stop while the gap is still large against float rounding noise
            for n in range(1, 12):
                state = ema_update(state, target)
                gap = np.linalg.norm(state.ema.values - target.values)
                np.testing.assert_allclose(gap, beta**n * gap0, rtol=1e-9)

    def test_dim_mismatch_rejected(self):
        state = StreamState(beta=0.9, swap_threshold=1.0, ema=E(0.0, 0.0))
        with pytest.raises(StructuralError):
            ema_update(state, E(1.0, 2.0, 3.0))


class TestMaybeRefuse:
    def test_requires_a_primed_average(self):
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(0, 0)])
        state = StreamState(beta=0.9, swap_threshold=1.0)
        with pytest.raises(UsageError):
            maybe_refuse(state, lib, FusionConfig())

    def test_first_call_always_fuses(self):
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(0, 0), E(5, 0)])
        state = StreamState(beta=0.9, swap_threshold=float("inf"), ema=E(1, 0))
        state, fused = maybe_refuse(state, lib, FusionConfig(top_k=2))
        assert fused is not None
        assert state.active_plan is fused.plan
        assert state.swap_count == 0  # the bootstrap fusion is not a swap

    def test_infinite_threshold_never_swaps(self):
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(0, 0), E(8, 0)])
        cfg = FusionConfig(top_k=2, temperature=0.01)
        state = StreamState(beta=0.9, swap_threshold=float("inf"))
        fusions = 0
        for _ in range(40):
            state = ema_update(state, Embedding(rng.normal(size=2) * 4))
            state, fused = maybe_refuse(state, lib, cfg)
            fusions += fused is not None
        assert fusions == 1
        assert state.swap_count == 0

    def test_zero_threshold_matches_stateless_fusion(self):
        """Every step re-fuses, reproducing plain fuse on the EMA sequence."""
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(0, 0), E(3, 1), E(-2, 4)])
        cfg = FusionConfig(top_k=2, temperature=0.05)
        state = StreamState(beta=0.8, swap_threshold=0.0)
        for step in range(25):
            e_t = Embedding(rng.normal(size=2) * 2 + 1)
            state = ema_update(state, e_t)
            state, fused = maybe_refuse(state, lib, cfg)
            assert fused is not None
            stateless = fuse(state.ema, lib, cfg)
            assert plan_digest(fused.plan) == plan_digest(stateless.plan)
        assert state.swap_count == 24

    def test_single_shift_swaps_exactly_once(self):
        """Threshold between intra- and inter-domain drift: 2 fusions total."""
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(0, 0), E(20, 0)], ids=["left", "right"])
        cfg = FusionConfig(top_k=2, temperature=0.01)
        state = StreamState(beta=0.9, swap_threshold=12.0)
        fusions = 0
        for segment_center in ((0.0, 0.0), (20.0, 0.0)):
            for _ in range(30):
                e_t = Embedding(np.array(segment_center) + rng.normal(0, 0.05, 2))
                state = ema_update(state, e_t)
                state, fused = maybe_refuse(state, lib, cfg)
                fusions += fused is not None
        assert fusions == 2
        assert state.swap_count == 1

    def test_swap_count_monotone_in_decreasing_threshold(self):
        rng = np.random.default_rng(42)
        walk = np.cumsum(rng.normal(0, 0.6, size=(60, 2)), axis=0)
        stream = [Embedding(p) for p in walk]
        lib = library_at(rng, [E(0, 0), E(4, 4), E(-4, 2)])
        cfg = FusionConfig(top_k=2, temperature=0.05)
        counts = []
        for threshold in (0.0, 0.5, 1.0, 2.0, 4.0, 8.0, float("inf")):
            events = list(run_stream(stream, lib, cfg, 0.9, threshold))
            counts.append(len(events))
        assert all(a >= b for a, b in zip(counts, counts[1:]))


class TestPlanWeightedCentroid:
    def test_blends_centroids_by_weight(self):
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(0, 0), E(4, 0)], ids=["a", "b"])
        fused = fuse(E(1, 0), lib, FusionConfig(top_k=2, temperature=0.5))
        ref = plan_weighted_centroid(fused.plan, lib)
        w = dict(zip(fused.plan.domain_ids, fused.plan.weights))
        np.testing.assert_allclose(ref.values, [4.0 * w["b"], 0.0], atol=1e-12)


class TestRunStream:
    def test_event_shape_and_counts(self):
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(0, 0), E(6, 0)])
        cfg = FusionConfig(top_k=2, temperature=0.05)
        stream = [Embedding(rng.normal(size=2)) for _ in range(12)]

        one = list(run_stream(stream, lib, cfg, 0.9, float("inf")))
        assert len(one) == 1
        assert one[0]["step"] == 1
        assert one[0]["swapped"] is False
        assert one[0]["support_score"] > 0
        assert len(one[0]["plan_digest"]) == 64

        every = list(run_stream(stream, lib, cfg, 0.9, 0.0))
        assert len(every) == len(stream)
        assert [e["swapped"] for e in every] == [False] + [True] * 11
        assert every[-1]["swap_count"] == 11

    def test_stream_is_deterministic(self):
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(0, 0), E(3, 3)])
        cfg = FusionConfig(top_k=2, temperature=0.05)
        stream = [Embedding(rng.normal(size=2)) for _ in range(10)]
        a = list(run_stream(stream, lib, cfg, 0.9, 1.0))
        b = list(run_stream(stream, lib, cfg, 0.9, 1.0))
        assert a == b


class TestBatchClusterFuse:
    def test_single_cluster_fuses_batch_centroid(self):
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(0, 0), E(5, 0)])
        cfg = FusionConfig(top_k=2, temperature=0.05)
        embs = [Embedding(rng.normal(size=2) + 2) for _ in range(9)]
        result = batch_cluster_fuse(embs, lib, cfg, cluster_count=1)
        assert result.assignments == (0,) * 9
        batch_mean = np.mean([e.values for e in embs], axis=0)
        direct = fuse(Embedding(batch_mean), lib, cfg)
        assert plan_digest(result.fused[0].plan) == plan_digest(direct.plan)

    def test_one_cluster_per_image_matches_plain_fusion(self):
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(0, 0), E(5, 0), E(0, 5)])
        cfg = FusionConfig(top_k=2, temperature=0.05)
        embs = [Embedding(rng.normal(size=2) * 3) for _ in range(7)]
        result = batch_cluster_fuse(embs, lib, cfg, cluster_count=7)
        per_image = {
            plan_digest(fuse(e, lib, cfg).plan) for e in embs
        }
        batch = {plan_digest(f.plan) for f in result.fused}
        assert batch == per_image

    def test_separated_blobs_recover_generating_domains(self):
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(0, 0), E(30, 0)], ids=["west", "east"])
        cfg = FusionConfig(top_k=2, temperature=0.01)
        west = [Embedding(rng.normal(0, 0.3, 2)) for _ in range(10)]
        east = [Embedding(np.array([30.0, 0.0]) + rng.normal(0, 0.3, 2)) for _ in range(10)]
        result = batch_cluster_fuse(west + east, lib, cfg, cluster_count=2)
        west_labels = set(result.assignments[:10])
        east_labels = set(result.assignments[10:])
        assert len(west_labels) == 1 and len(east_labels) == 1
        assert west_labels != east_labels
        for label, expect in ((west_labels.pop(), "west"), (east_labels.pop(), "east")):
            top = result.fused[label].plan.selected[0]
            assert top.domain_id == expect

    def test_fuse_called_exactly_cluster_count_times(self, monkeypatch):
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(0, 0), E(5, 0)])
        cfg = FusionConfig(top_k=2, temperature=0.05)
        embs = [Embedding(rng.normal(size=2)) for _ in range(20)]
        calls = []
        real_fuse = stream_mod.fuse
        monkeypatch.setattr(
            stream_mod, "fuse", lambda *a, **k: calls.append(1) or real_fuse(*a, **k)
        )
        batch_cluster_fuse(embs, lib, cfg, cluster_count=4)
        assert len(calls) == 4

    def test_input_validation(self):
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(0, 0)])
        cfg = FusionConfig()
        with pytest.raises(UsageError):
            batch_cluster_fuse([], lib, cfg, cluster_count=1)
        embs = [E(0, 0), E(1, 1)]
        with pytest.raises(UsageError):
            batch_cluster_fuse(embs, lib, cfg, cluster_count=3)
        with pytest.raises(UsageError):
            batch_cluster_fuse(embs, lib, cfg, cluster_count=0)
        with pytest.raises(StructuralError):
            batch_cluster_fuse([E(0, 0), E(1, 1, 1)], lib, cfg, cluster_count=1)

    def test_clustering_is_deterministic(self):
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(0, 0), E(6, 0), E(0, 6)])
        cfg = FusionConfig(top_k=2, temperature=0.05)
        embs = [Embedding(rng.normal(size=2) * 4) for _ in range(15)]
        a = batch_cluster_fuse(embs, lib, cfg, cluster_count=3)
        b = batch_cluster_fuse(embs, lib, cfg, cluster_count=3)
        assert a.assignments == b.assignments
        assert [plan_digest(f.plan) for f in a.fused] == [
            plan_digest(f.plan) for f in b.fused
        ]
