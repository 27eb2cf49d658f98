"""Distance, selection, weighting, merging, and application."""

import numpy as np
import pytest

from adapterfuse.errors import NumericError, StructuralError, UsageError
from adapterfuse.fusion import (
    FusionConfig,
    FusionPlan,
    PlanEntry,
    apply_fused,
    compute_weights,
    distance,
    embedding_digest,
    fuse,
    late_fuse_outputs,
    merge_concat,
    merge_uniform,
    plan_digest,
    plan_report,
    select_top_k,
)
from adapterfuse.library import DomainRecord, Embedding, Library
from adapterfuse.tensor import AdapterSet, LoraPair, Matrix, axpy_accumulate, delta


def E(*vals):
    return Embedding(np.array(vals, dtype=np.float64))


def make_adapter(rng, adapter_id, d=6, k=5, rank=2, alpha=4.0, n_layers=2):
    pairs = tuple(
        LoraPair(
            layer_name=f"layer_{i}",
            B=Matrix(rng.normal(size=(d, rank))),
            A=Matrix(rng.normal(size=(rank, k))),
            rank=rank,
            alpha=alpha,
        )
        for i in range(n_layers)
    )
    return AdapterSet(adapter_id, pairs)


def record_at(rng, domain_id, centroid, **kwargs):
    return DomainRecord(
        domain_id=domain_id,
        centroid=centroid,
        sample_count=kwargs.pop("sample_count", 10),
        adapter=kwargs.pop("adapter", make_adapter(rng, f"ad_{domain_id}")),
        **kwargs,
    )


def library_at(rng, centroids, ids=None):
    ids = ids or [f"dom_{i}" for i in range(len(centroids))]
    records = tuple(record_at(rng, did, c) for did, c in zip(ids, centroids))
    return Library(records=records, embedding_dim=centroids[0].dim)


def fused_dense(fused, layer_name):
    return fused.delta(layer_name).data


class TestDistance:
    def test_euclidean_three_four_five(self):
        rng = np.random.default_rng(42)
        rec = record_at(rng, "d0", E(0, 0))
        assert distance(E(3, 4), rec, "euclidean") == 5.0

    def test_cosine_identical_direction(self):
        rng = np.random.default_rng(42)
        rec = record_at(rng, "d0", E(2, 1))
        assert abs(distance(E(4, 2), rec, "cosine")) < 1e-12

    def test_cosine_zero_norm_rejected(self):
        rng = np.random.default_rng(42)
        rec = record_at(rng, "d0", E(1, 1))
        with pytest.raises(UsageError):
            distance(E(0, 0), rec, "cosine")
        rec0 = record_at(rng, "d1", E(0, 0))
        with pytest.raises(UsageError):
            distance(E(1, 1), rec0, "cosine")

    def test_mahalanobis_identity_covariance_is_euclidean(self):
        rng = np.random.default_rng(42)
        rec = record_at(rng, "d0", E(1, 2), covariance=Matrix(np.eye(2)))
        q = E(4, 6)
        np.testing.assert_allclose(
            distance(q, rec, "mahalanobis"),
            distance(q, rec, "euclidean"),
            atol=1e-12,
        )

    def test_mahalanobis_scales_by_spread(self):
        rng = np.random.default_rng(42)
        # variance 4 along x shrinks x-offsets by a factor of 2
        rec = record_at(
            rng, "d0", E(0, 0), covariance=Matrix([[4.0, 0.0], [0.0, 1.0]])
        )
        np.testing.assert_allclose(distance(E(2, 0), rec, "mahalanobis"), 1.0)

    def test_mahalanobis_requires_covariance(self):
        rng = np.random.default_rng(42)
        rec = record_at(rng, "d0", E(0, 0))
        with pytest.raises(UsageError):
            distance(E(1, 1), rec, "mahalanobis")

    def test_dim_mismatch(self):
        rng = np.random.default_rng(42)
        rec = record_at(rng, "d0", E(0, 0))
        with pytest.raises(StructuralError):
            distance(E(1, 1, 1), rec, "euclidean")


class TestSelection:
    def test_sorts_ascending(self):
        rng = np.random.default_rng(42)
        lib = library_at(
            rng, [E(0.2, 0), E(0.5, 0), E(0.1, 0)], ids=["a", "b", "c"]
        )
        picked = select_top_k(E(0, 0), lib, FusionConfig(top_k=2))
        assert [r.domain_id for r, _ in picked] == ["c", "a"]

    def test_k_clamped_to_library_size(self):
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(1, 0), E(2, 0), E(3, 0)])
        picked = select_top_k(E(0, 0), lib, FusionConfig(top_k=10))
        assert len(picked) == 3

    def test_tie_broken_by_domain_id(self):
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(1, 0), E(-1, 0)], ids=["zeta", "alpha"])
        picked = select_top_k(E(0, 0), lib, FusionConfig(top_k=1))
        assert picked[0][0].domain_id == "alpha"

    def test_empty_library_rejected(self):
        lib = Library(records=(), embedding_dim=2)
        with pytest.raises(UsageError):
            select_top_k(E(0, 0), lib, FusionConfig())

    def test_mahalanobis_skips_ineligible_records(self):
        rng = np.random.default_rng(42)
        eligible = record_at(
            rng, "has_cov", E(5, 0), covariance=Matrix(np.eye(2))
        )
        bare = record_at(rng, "bare", E(0.1, 0))
        lib = Library(records=(bare, eligible), embedding_dim=2)
        picked = select_top_k(
            E(0, 0), lib, FusionConfig(top_k=5, distance_metric="mahalanobis")
        )
        assert [r.domain_id for r, _ in picked] == ["has_cov"]

    def test_all_ineligible_rejected(self):
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(1, 0), E(2, 0)])
        with pytest.raises(UsageError):
            select_top_k(
                E(0, 0), lib, FusionConfig(distance_metric="mahalanobis")
            )

    def test_selection_invariant_under_distance_scaling(self):
        """Scaling the whole space preserves the top-K set and order."""
        rng = np.random.default_rng(42)
        centroids = [Embedding(rng.normal(size=3)) for _ in range(8)]
        lib = library_at(rng, centroids)
        cfg = FusionConfig(top_k=4)
        base = [r.domain_id for r, _ in select_top_k(E(0, 0, 0), lib, cfg)]
        for scale in (0.01, 3.0, 250.0):
            scaled_lib = library_at(
                rng, [Embedding(c.values * scale) for c in centroids]
            )
            scaled = [
                r.domain_id for r, _ in select_top_k(E(0, 0, 0), scaled_lib, cfg)
            ]
            assert scaled == base

    def test_normalize_query_changes_geometry(self):
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(1, 0), E(10, 0)], ids=["unit", "far"])
        raw = select_top_k(E(20, 0), lib, FusionConfig(top_k=1))
        normed = select_top_k(
            E(20, 0), lib, FusionConfig(top_k=1, normalize_query=True)
        )
        assert raw[0][0].domain_id == "far"
        assert normed[0][0].domain_id == "unit"

    def test_config_validation(self):
        with pytest.raises(UsageError):
            FusionConfig(top_k=0)
        with pytest.raises(UsageError):
            FusionConfig(temperature=0.0)
        with pytest.raises(UsageError):
            FusionConfig(distance_metric="manhattan")
        with pytest.raises(UsageError):
            FusionConfig(epsilon_exact=0.0)


class TestWeights:
    def test_equal_distances_split_evenly(self):
        for tau in (1e-6, 0.01, 1.0, 1e6):
            np.testing.assert_allclose(
                compute_weights([1.0, 1.0], tau), [0.5, 0.5], atol=1e-15
            )

    def test_hand_evaluated_softmax(self):
        # scores 1/(0.5*1)=2 and 1/(1*1)=1; softmax of [2,1]
        w = compute_weights([0.5, 1.0], 1.0)
        np.testing.assert_allclose(
            w, [0.7310585786300049, 0.2689414213699951], atol=1e-15
        )

    def test_low_temperature_one_hot(self):
        # score gap is 1000, far past where exp underflows
        w = compute_weights([0.5, 1.0], 0.001)
        assert w[0] == 1.0
        assert w[1] < 1e-300

    def test_exact_match_takes_all(self):
        np.testing.assert_array_equal(
            compute_weights([0.0, 0.5], 0.01), [1.0, 0.0]
        )

    def test_multiple_exact_matches_split_uniformly(self):
        np.testing.assert_array_equal(
            compute_weights([0.0, 0.0, 1.0], 0.01), [0.5, 0.5, 0.0]
        )

    def test_exact_cutoff_is_inclusive(self):
        w = compute_weights([1e-3, 4e-3], 1000.0, epsilon_exact=1e-3)
        np.testing.assert_array_equal(w, [1.0, 0.0])
        # just past the cutoff the normal softmax path takes over
        w = compute_weights([2e-3, 4e-3], 1000.0, epsilon_exact=1e-3)
        assert 0.0 < w[1] < w[0] < 1.0

    def test_non_positive_temperature_rejected(self):
        with pytest.raises(UsageError):
            compute_weights([1.0, 2.0], 0.0)
        with pytest.raises(UsageError):
            compute_weights([1.0, 2.0], -0.5)

    def test_simplex_over_temperature_range(self):
        """Weights stay nonnegative and sum to 1 across 12 decades of tau."""
        rng = np.random.default_rng(42)
        for tau in (1e-6, 1e-3, 1e-2, 5e-2, 1.0, 1e6):
            for _ in range(50):
                n = int(rng.integers(1, 9))
                d = rng.uniform(1e-6, 10.0, size=n)
                w = np.array(compute_weights(d, tau))
                assert np.all(w >= 0)
                assert abs(w.sum() - 1.0) <= 1e-9

    def test_closer_always_outweighs_farther(self):
        """Strict where weights stay representable, non-strict under underflow."""
        rng = np.random.default_rng(42)
        for _ in range(200):
            d = np.sort(rng.uniform(0.1, 5.0, size=5))
            d += np.arange(5) * 1e-3  # enforce strict ordering
            tau = 10.0 ** rng.uniform(-1.3, 1.0)
            w = compute_weights(d, tau)
            assert all(a > b for a, b in zip(w, w[1:]))
        for _ in range(100):
            d = np.sort(rng.uniform(0.05, 5.0, size=5)) + np.arange(5) * 1e-3
            tau = 10.0 ** rng.uniform(-5, 5)
            w = compute_weights(d, tau)
            assert all(a >= b for a, b in zip(w, w[1:]))

    def test_sharp_limit_concentrates_on_argmin(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            d = rng.uniform(0.05, 3.0, size=6)
            while np.diff(np.sort(d)).min() < 0.01:
                d = rng.uniform(0.05, 3.0, size=6)
            w = compute_weights(d, 1e-6)
            assert w[int(np.argmin(d))] > 1.0 - 1e-9

    def test_flat_limit_approaches_uniform(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            d = rng.uniform(0.5, 2.0, size=7)
            w = compute_weights(d, 1e6)
            assert max(w) - min(w) < 1e-3

    def test_weights_permute_with_distances(self):
        rng = np.random.default_rng(42)
        d = rng.uniform(0.1, 2.0, size=6)
        w = np.array(compute_weights(d, 0.05))
        perm = rng.permutation(6)
        w_perm = np.array(compute_weights(d[perm], 0.05))
        np.testing.assert_allclose(w_perm, w[perm], atol=1e-15)


class TestMergeConcat:
    def test_single_adapter_identity(self):
        rng = np.random.default_rng(42)
        a = make_adapter(rng, "a0")
        fused = merge_concat([a], [1.0])
        for name in a.layer_names:
            np.testing.assert_array_equal(
                fused_dense(fused, name), delta(a.layer(name)).data
            )

    def test_two_adapter_hand_oracle(self):
        # rank-1 pairs whose top-left products are 6 and 4; half of each is 5
        mk = lambda aid, b, a: AdapterSet(
            aid,
            (
                LoraPair(
                    "w",
                    Matrix([[b], [0.0]]),
                    Matrix([[a, 0.0]]),
                    rank=1,
                    alpha=2.0,
                ),
            ),
        )
        fused = merge_concat([mk("x", 2.0, 3.0), mk("y", 4.0, 1.0)], [0.5, 0.5])
        assert fused_dense(fused, "w")[0, 0] == 5.0

    def test_matches_weighted_sum_oracle(self):
        """Concatenated product equals the accumulated weighted deltas."""
        rng = np.random.default_rng(42)
        adapters = [make_adapter(rng, f"a{i}", rank=3) for i in range(5)]
        weights = rng.dirichlet(np.ones(5))
        fused = merge_concat(adapters, weights)
        for name in adapters[0].layer_names:
            acc = Matrix.zeros(6, 5)
            for w, a in zip(weights, adapters):
                acc = axpy_accumulate(acc, w, delta(a.layer(name)))
            got = fused_dense(fused, name)
            rel = np.linalg.norm(got - acc.data) / np.linalg.norm(acc.data)
            assert rel <= 1e-6

    def test_fused_shapes(self):
        rng = np.random.default_rng(42)
        adapters = [make_adapter(rng, f"a{i}", d=8, k=9, rank=2) for i in range(3)]
        fused = merge_concat(adapters, [0.2, 0.3, 0.5])
        layer = fused.layers["layer_0"]
        assert layer.B_fused.shape == (8, 6)
        assert layer.A_fused.shape == (6, 9)
        assert fused.merged_count == 3

    def test_rank_mismatch_rejected(self):
        rng = np.random.default_rng(42)
        with pytest.raises(StructuralError):
            merge_concat(
                [make_adapter(rng, "a", rank=2), make_adapter(rng, "b", rank=3)],
                [0.5, 0.5],
            )

    def test_alpha_mismatch_rejected(self):
        rng = np.random.default_rng(42)
        with pytest.raises(StructuralError):
            merge_concat(
                [
                    make_adapter(rng, "a", alpha=4.0),
                    make_adapter(rng, "b", alpha=8.0),
                ],
                [0.5, 0.5],
            )

    def test_empty_selection_rejected(self):
        with pytest.raises(UsageError):
            merge_concat([], [])

    def test_weight_count_mismatch_rejected(self):
        rng = np.random.default_rng(42)
        with pytest.raises(UsageError):
            merge_concat([make_adapter(rng, "a")], [0.5, 0.5])


class TestMergeUniform:
    def test_duplicates_are_idempotent(self):
        rng = np.random.default_rng(42)
        a = make_adapter(rng, "a0")
        b = AdapterSet("a1", a.layers)
        fused = merge_uniform([a, b])
        for name in a.layer_names:
            np.testing.assert_allclose(
                fused_dense(fused, name), delta(a.layer(name)).data, atol=1e-12
            )

    def test_opposite_deltas_cancel(self):
        rng = np.random.default_rng(42)
        a = make_adapter(rng, "a0")
        negated = AdapterSet(
            "a1",
            tuple(
                LoraPair(p.layer_name, Matrix(-p.B.data), p.A, p.rank, p.alpha)
                for p in a.layers
            ),
        )
        fused = merge_uniform([a, negated])
        for name in a.layer_names:
            np.testing.assert_allclose(
                fused_dense(fused, name), 0.0, atol=1e-12
            )

    def test_agrees_with_equal_weight_concat(self):
        rng = np.random.default_rng(42)
        adapters = [make_adapter(rng, f"a{i}") for i in range(4)]
        via_uniform = merge_uniform(adapters)
        via_concat = merge_concat(adapters, [0.25] * 4)
        for name in adapters[0].layer_names:
            np.testing.assert_array_equal(
                fused_dense(via_uniform, name), fused_dense(via_concat, name)
            )


class TestFusePipeline:
    def test_exact_centroid_match_reproduces_adapter(self):
        rng = np.random.default_rng(42)
        centroids = [E(0, 0), E(5, 0), E(0, 5)]
        lib = library_at(rng, centroids)
        cfg = FusionConfig(top_k=3, temperature=1e-4)
        fused = fuse(E(5, 0), lib, cfg)
        target = lib.record("dom_1").adapter
        for name in target.layer_names:
            diff = np.abs(
                fused_dense(fused, name) - delta(target.layer(name)).data
            ).max()
            assert diff < 1e-6

    def test_single_record_library(self):
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(3, 3)])
        for cfg in (FusionConfig(top_k=1, temperature=5.0), FusionConfig(top_k=9)):
            fused = fuse(E(-1, 7), lib, cfg)
            only = lib.records[0].adapter
            for name in only.layer_names:
                np.testing.assert_allclose(
                    fused_dense(fused, name), delta(only.layer(name)).data
                )

    def test_midpoint_query_splits_weight_evenly(self):
        rng = np.random.default_rng(42)
        lib = library_at(rng, [E(-1, 0), E(1, 0)])
        fused = fuse(E(0, 0), lib, FusionConfig(top_k=2, temperature=0.05))
        np.testing.assert_allclose(fused.plan.weights, [0.5, 0.5], atol=1e-12)

    def test_plan_is_ordered_and_digested(self):
        rng = np.random.default_rng(42)
        centroids = [Embedding(rng.normal(size=4)) for _ in range(6)]
        lib = library_at(rng, centroids)
        q = Embedding(rng.normal(size=4))
        fused = fuse(q, lib, FusionConfig(top_k=4, temperature=0.05))
        dists = [e.distance for e in fused.plan.selected]
        assert dists == sorted(dists)
        assert fused.plan.query_digest == embedding_digest(q)
        assert fused.merged_count == 4

    def test_permuting_library_changes_nothing(self):
        rng = np.random.default_rng(42)
        centroids = [Embedding(rng.normal(size=3)) for _ in range(7)]
        lib = library_at(rng, centroids)
        q = Embedding(rng.normal(size=3))
        cfg = FusionConfig(top_k=5, temperature=0.02)
        baseline = fuse(q, lib, cfg)
        for _ in range(5):
            perm = rng.permutation(lib.size)
            shuffled = Library(
                records=tuple(lib.records[i] for i in perm),
                embedding_dim=lib.embedding_dim,
            )
            fused = fuse(q, shuffled, cfg)
            assert fused.plan.domain_ids == baseline.plan.domain_ids
            assert fused.plan.weights == baseline.plan.weights
            for name in fused.layers:
                np.testing.assert_array_equal(
                    fused_dense(fused, name), fused_dense(baseline, name)
                )


class TestApplyFused:
    def test_zero_delta_leaves_host_unchanged(self):
        rng = np.random.default_rng(42)
        zero = AdapterSet(
            "z",
            (
                LoraPair(
                    "layer_0",
                    Matrix.zeros(6, 2),
                    Matrix(rng.normal(size=(2, 5))),
                    rank=2,
                    alpha=4.0,
                ),
            ),
        )
        base = {"layer_0": Matrix(rng.normal(size=(6, 5)))}
        out = apply_fused(base, merge_concat([zero], [1.0]))
        np.testing.assert_array_equal(out["layer_0"].data, base["layer_0"].data)

    def test_single_adapter_application(self):
        rng = np.random.default_rng(42)
        a = make_adapter(rng, "a0", n_layers=1)
        base = {"layer_0": Matrix(rng.normal(size=(6, 5)))}
        out = apply_fused(base, merge_concat([a], [1.0]))
        expected = base["layer_0"].data + delta(
            a.layer("layer_0"), apply_scaling=True
        ).data
        np.testing.assert_allclose(out["layer_0"].data, expected, atol=1e-12)

    def test_apply_then_subtract_recovers_host(self):
        rng = np.random.default_rng(42)
        adapters = [make_adapter(rng, f"a{i}", n_layers=1) for i in range(4)]
        fused = merge_concat(adapters, rng.dirichlet(np.ones(4)))
        base = {"layer_0": Matrix(rng.normal(size=(6, 5)))}
        out = apply_fused(base, fused)
        layer = fused.layers["layer_0"]
        recovered = out["layer_0"].data - layer.scaling * (
            layer.B_fused.data @ layer.A_fused.data
        )
        np.testing.assert_allclose(
            recovered, base["layer_0"].data, atol=1e-7
        )

    def test_missing_layer_rejected(self):
        rng = np.random.default_rng(42)
        a = make_adapter(rng, "a0", n_layers=2)
        with pytest.raises(StructuralError):
            apply_fused(
                {"layer_0": Matrix.zeros(6, 5)}, merge_concat([a], [1.0])
            )

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(42)
        a = make_adapter(rng, "a0", n_layers=1)
        with pytest.raises(StructuralError):
            apply_fused(
                {"layer_0": Matrix.zeros(3, 3)}, merge_concat([a], [1.0])
            )


class TestLateFusion:
    def test_identical_outputs_are_fixed_point(self):
        rng = np.random.default_rng(42)
        p = rng.dirichlet(np.ones(4), size=10)
        out = late_fuse_outputs([p, p, p], [0.2, 0.3, 0.5])
        np.testing.assert_allclose(out, p, atol=1e-12)

    def test_vertex_weight_selects_one_output(self):
        rng = np.random.default_rng(42)
        p1 = rng.dirichlet(np.ones(3), size=5)
        p2 = rng.dirichlet(np.ones(3), size=5)
        np.testing.assert_allclose(
            late_fuse_outputs([p1, p2], [1.0, 0.0]), p1, atol=1e-15
        )

    def test_hand_convex_combination(self):
        out = late_fuse_outputs(
            [np.array([1.0, 0.0]), np.array([0.0, 1.0])], [0.3, 0.7]
        )
        np.testing.assert_allclose(out, [0.3, 0.7], atol=1e-15)

    def test_output_stays_on_simplex(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            outs = [rng.dirichlet(np.ones(6), size=(4, 3)) for _ in range(5)]
            w = rng.dirichlet(np.ones(5))
            combined = late_fuse_outputs(outs, w)
            np.testing.assert_allclose(
                combined.sum(axis=-1), 1.0, atol=1e-6
            )

    def test_length_mismatch_rejected(self):
        p = np.array([0.5, 0.5])
        with pytest.raises(UsageError):
            late_fuse_outputs([p, p], [1.0])

    def test_non_probability_input_rejected(self):
        with pytest.raises(NumericError):
            late_fuse_outputs([np.array([0.9, 0.3])], [1.0])

    def test_non_convex_weights_rejected(self):
        p = np.array([0.5, 0.5])
        with pytest.raises(UsageError):
            late_fuse_outputs([p, p], [0.8, 0.8])


class TestPlanSerialization:
    def make_plan(self):
        return FusionPlan(
            selected=(
                PlanEntry("near", 0.25, 0.75),
                PlanEntry("far", 1.25, 0.25),
            ),
            metric="euclidean",
            query_digest="ab" * 32,
        )

    def test_report_fields(self):
        report = plan_report(self.make_plan(), FusionConfig(top_k=2, temperature=0.05))
        assert report["metric"] == "euclidean"
        assert report["temperature"] == 0.05
        assert report["top_k"] == 2
        assert [s["domain_id"] for s in report["selected"]] == ["near", "far"]

    def test_digest_is_stable_and_content_sensitive(self):
        plan = self.make_plan()
        assert plan_digest(plan) == plan_digest(plan)
        other = FusionPlan(
            selected=(
                PlanEntry("near", 0.25, 0.70),
                PlanEntry("far", 1.25, 0.30),
            ),
            metric="euclidean",
            query_digest="ab" * 32,
        )
        assert plan_digest(plan) != plan_digest(other)

    def test_plan_invariants_enforced(self):
        with pytest.raises(NumericError):
            FusionPlan(
                selected=(PlanEntry("a", 0.5, 0.6), PlanEntry("b", 1.0, 0.6)),
                metric="euclidean",
                query_digest="00",
            )
        with pytest.raises(StructuralError):
            FusionPlan(
                selected=(PlanEntry("a", 1.0, 0.5), PlanEntry("b", 0.5, 0.5)),
                metric="euclidean",
                query_digest="00",
            )


class TestMergeEquivalence:
    def test_randomized_concat_equals_delta_sum(self):
        """The factored merge and the dense weighted sum agree to 1e-6."""
        rng = np.random.default_rng(42)
        for _ in range(40):
            d = int(rng.integers(4, 33))
            k = int(rng.integers(4, 33))
            r = int(rng.integers(1, min(8, min(d, k) - 1) + 1))
            n = int(rng.integers(1, 9))
            adapters = [
                make_adapter(rng, f"a{i}", d=d, k=k, rank=r, n_layers=1)
                for i in range(n)
            ]
            weights = rng.dirichlet(np.ones(n))
            fused = merge_concat(adapters, weights)
            dense = np.zeros((d, k))
            for w, a in zip(weights, adapters):
                dense += w * delta(a.layer("layer_0")).data
            got = fused_dense(fused, "layer_0")
            rel = np.linalg.norm(got - dense) / max(np.linalg.norm(dense), 1e-30)
            assert rel <= 1e-6
