import math

import numpy as np
import pytest

from feddwa.datagen import synth_clusters
from feddwa.dwa import (
    CrossDistanceMatrix,
    GuidanceConfig,
    WeightMatrix,
    aggregate_personalized,
    compute_weights,
    cross_distance_matrix,
    decompose_distance,
    guidance_model,
    oracle_solve_full,
    top_k,
)
from feddwa.errors import SolverError
from feddwa.fedcore import ClientState, local_train
from feddwa.models import ModelSpec, grad, init_params
from feddwa.numkit import ParamVector, Rng, axpy, sq_dist, weighted_sum

from conftest import random_vector


def row_objective(p, dists):
    """Objective sum_j p_j^2 d_j minimized by the weight formula."""
    return float(np.sum(np.asarray(p) ** 2 * np.asarray(dists)))


def vec(values):
    values = np.asarray(values, dtype=float)
    return ParamVector(values, (("w", (values.size,)),))


class TestComputeWeights:
    def test_equal_distances_give_uniform(self, rng):
        guidance = vec([0.0, 0.0])
        models = [vec([1.0, 0.0]), vec([0.0, 1.0]), vec([-1.0, 0.0])]
        np.testing.assert_allclose(compute_weights(guidance, models), [1/3] * 3, atol=1e-15)

    def test_inverse_distance_ratios(self):
        guidance = vec([0.0])
        models = [vec([1.0]), vec([2.0])]  # squared distances 1 and 4
        np.testing.assert_allclose(compute_weights(guidance, models), [0.8, 0.2], atol=1e-15)

    def test_three_way_ratio(self):
        guidance = vec([0.0])
        models = [vec([1.0]), vec([math.sqrt(2.0)]), vec([2.0])]  # d = 1, 2, 4
        np.testing.assert_allclose(compute_weights(guidance, models),
                                   [4/7, 2/7, 1/7], rtol=1e-12)

    def test_zero_distance_takes_the_row(self, rng):
        guidance = random_vector(rng)
        other = random_vector(rng)
        weights = compute_weights(guidance, [other, guidance.copy(), guidance.copy()])
        assert weights == [0.0, 0.5, 0.5]

    def test_beats_monte_carlo_simplex_samples(self, rng):
        # independent oracle: random points on the simplex never do better
        for _ in range(10):
            n = int(rng.integers(3, 9))
            guidance = random_vector(rng, dim=12)
            models = [random_vector(rng, dim=12) for _ in range(n)]
            dists = [sq_dist(guidance, m) for m in models]
            p = compute_weights(guidance, models)
            ours = row_objective(p, dists)
            samples = rng.dirichlet(np.ones(n), size=100_000)
            sampled = ((samples ** 2) @ np.asarray(dists)).min()
            assert ours <= sampled + 1e-9

    def test_kkt_product_constant(self, rng):
        for _ in range(20):
            guidance = random_vector(rng, dim=10)
            models = [random_vector(rng, dim=10) for _ in range(6)]
            dists = np.array([sq_dist(guidance, m) for m in models])
            p = np.array(compute_weights(guidance, models))
            products = p * dists
            assert products.max() - products.min() <= 1e-9 * products.max()

    def test_scale_invariance(self, rng):
        guidance = vec([0.0, 0.0, 0.0])
        base = [vec([1.0, 0, 0]), vec([0, 2.0, 0]), vec([0, 0, 0.5])]
        scaled = [vec(3.0 * m.values) for m in base]  # squared distances x9
        np.testing.assert_allclose(compute_weights(guidance, base),
                                   compute_weights(guidance, scaled), rtol=1e-12)

    def test_monotone_in_distance(self, rng):
        for _ in range(20):
            guidance = random_vector(rng, dim=6)
            models = [random_vector(rng, dim=6) for _ in range(5)]
            dists = [sq_dist(guidance, m) for m in models]
            p = compute_weights(guidance, models)
            for a in range(5):
                for b in range(5):
                    if dists[a] < dists[b]:
                        assert p[a] > p[b]

    def test_row_is_on_simplex(self, rng):
        for _ in range(30):
            guidance = random_vector(rng)
            models = [random_vector(rng) for _ in range(int(rng.integers(1, 9)))]
            p = compute_weights(guidance, models)
            assert all(w >= 0 for w in p)
            assert abs(math.fsum(p) - 1.0) <= 1e-9


class TestTopK:
    def test_k_equals_n_is_identity(self):
        row = [0.5, 0.3, 0.2]
        assert top_k(row, 3) == row

    def test_forced_renormalization(self):
        np.testing.assert_allclose(top_k([0.5, 0.3, 0.2], 2), [0.625, 0.375, 0.0],
                                   rtol=1e-15)

    def test_tie_prefers_lower_id(self):
        assert top_k([0.4, 0.4, 0.2], 1) == [1.0, 0.0, 0.0]

    def test_preserves_simplex(self, rng):
        for _ in range(30):
            n = int(rng.integers(2, 10))
            row = rng.dirichlet(np.ones(n))
            k = int(rng.integers(1, n + 1))
            out = top_k(row, k)
            assert sum(v > 0 for v in out) <= k
            assert abs(math.fsum(out) - 1.0) <= 1e-9
            assert all(v >= 0 for v in out)

    def test_bad_k_rejected(self):
        with pytest.raises(SolverError):
            top_k([1.0], 2)


class TestAggregatePersonalized:
    def test_identity_matrix_keeps_models(self, rng):
        models = [random_vector(rng) for _ in range(4)]
        weights = WeightMatrix(np.eye(4), round_index=1)
        out = aggregate_personalized(weights, models)
        for got, want in zip(out, models):
            np.testing.assert_array_equal(got.values, want.values)

    def test_uniform_matrix_gives_fedavg_mean(self, rng):
        models = [random_vector(rng) for _ in range(5)]
        weights = WeightMatrix(np.full((5, 5), 0.2), round_index=1)
        mean = weighted_sum([0.2] * 5, models)
        for got in aggregate_personalized(weights, models):
            np.testing.assert_array_equal(got.values, mean.values)

    def test_swapping_identical_models_changes_nothing(self, rng):
        a, b = random_vector(rng), random_vector(rng)
        dup = ParamVector(a.values.copy(), a.layout)
        weights = WeightMatrix(np.full((3, 3), 1 / 3), round_index=2)
        out1 = aggregate_personalized(weights, [a, dup, b])
        out2 = aggregate_personalized(weights, [dup, a, b])
        for x, y in zip(out1, out2):
            np.testing.assert_array_equal(x.values, y.values)

    def test_row_sum_enforced(self):
        with pytest.raises(SolverError):
            WeightMatrix(np.array([[0.6, 0.3], [0.5, 0.5]]), round_index=1)
        with pytest.raises(SolverError):
            WeightMatrix(np.array([[1.5, -0.5], [0.5, 0.5]]), round_index=1)


class TestCrossDistanceMatrix:
    def test_zero_when_models_equal_guidance(self, rng):
        g = random_vector(rng)
        cross = cross_distance_matrix(g, [g.copy(), g.copy()])
        np.testing.assert_array_equal(cross.matrix, np.zeros((2, 2)))

    def test_diagonal_matches_sq_dist(self, rng):
        g = random_vector(rng)
        models = [random_vector(rng) for _ in range(4)]
        cross = cross_distance_matrix(g, models)
        for j, m in enumerate(models):
            assert cross.matrix[j, j] == sq_dist(g, m)

    def test_symmetric_and_psd(self, rng):
        g = random_vector(rng, dim=10)
        models = [random_vector(rng, dim=10) for _ in range(5)]
        cross = cross_distance_matrix(g, models)
        np.testing.assert_array_equal(cross.matrix, cross.matrix.T)
        assert np.linalg.eigvalsh(cross.matrix).min() >= -1e-9


class TestOracleSolveFull:
    def test_identity_matrix_uniform_unique(self):
        p, unique = oracle_solve_full(CrossDistanceMatrix(np.eye(3)))
        np.testing.assert_allclose(p, [1/3] * 3, atol=1e-9)
        assert unique

    def test_rank_deficient_toy_case_not_unique(self):
        p, unique = oracle_solve_full(CrossDistanceMatrix(np.diag([0.0, 0.0, 1.0])))
        assert not unique
        assert p[2] == pytest.approx(0.0, abs=1e-9)
        assert p[0] + p[1] == pytest.approx(1.0, abs=1e-9)

    def test_diagonal_case_matches_weight_formula(self, rng):
        for _ in range(10):
            n = int(rng.integers(3, 9))
            dists = rng.uniform(0.1, 10.0, size=n)
            p_oracle, unique = oracle_solve_full(CrossDistanceMatrix(np.diag(dists)))
            inv = 1.0 / dists
            expected = inv / inv.sum()
            np.testing.assert_allclose(p_oracle, expected, atol=1e-8)
            assert unique

    def test_indefinite_rejected(self):
        with pytest.raises(SolverError):
            oracle_solve_full(CrossDistanceMatrix(np.diag([1.0, -1.0])))

    def test_full_matrix_from_real_vectors(self, rng):
        g = random_vector(rng, dim=6)
        models = [random_vector(rng, dim=6) for _ in range(4)]
        cross = cross_distance_matrix(g, models)
        p, _ = oracle_solve_full(cross)
        # the solution is feasible and at least as good as simplex samples
        obj = float(p @ cross.matrix @ p)
        samples = rng.dirichlet(np.ones(4), size=20_000)
        sampled = np.einsum("ij,jk,ik->i", samples, cross.matrix, samples).min()
        assert obj <= sampled + 1e-9


class TestDecomposeDistance:
    def test_zero_step(self, rng):
        w_i, w_j = random_vector(rng), random_vector(rng)
        g = random_vector(rng)
        t1, t2, t3 = decompose_distance(w_i, 0.0, g, w_j)
        assert t1 == sq_dist(w_i, w_j)
        assert t2 == 0.0 and t3 == 0.0

    def test_same_model(self, rng):
        w = random_vector(rng)
        g = random_vector(rng)
        eta = 0.3
        t1, t2, t3 = decompose_distance(w, eta, g, w.copy())
        assert t1 == 0.0 and t2 == 0.0
        assert t3 == pytest.approx(eta ** 2 * sq_dist(g, ParamVector(np.zeros(g.dim), g.layout)))

    def test_sum_equals_direct_distance(self, rng):
        for _ in range(100):
            w_i = random_vector(rng, dim=15)
            w_j = random_vector(rng, dim=15)
            g = random_vector(rng, dim=15)
            eta = float(rng.uniform(0.0, 0.5))
            t1, t2, t3 = decompose_distance(w_i, eta, g, w_j)
            adapted = axpy(-eta, g, w_i)
            direct = sq_dist(adapted, w_j)
            assert abs((t1 + t2 + t3) - direct) <= 1e-10 * max(direct, 1.0)


def make_client(rng, n=30, f=5, c=3):
    fed = synth_clusters(1, 1, f, c, n_per_client=n, noise=0.0,
                         rng=np.random.default_rng(rng.integers(1 << 30)))
    shard = fed.shards[0]
    spec = ModelSpec("softmax", f, c)
    model = init_params(spec, np.random.default_rng(0))
    return ClientState(0, shard.train, shard.test, model, lr=0.05,
                       batch_size=10, local_epochs=1), spec


class TestGuidanceModel:
    def test_zero_lr_returns_trained(self, rng):
        client, spec = make_client(rng)
        client.lr = 0.0
        trained = random_vector_like(client.model)
        out = guidance_model(client, trained, GuidanceConfig(), spec)
        np.testing.assert_array_equal(out.values, trained.values)

    def test_one_full_batch_step_is_definitional(self, rng):
        client, spec = make_client(rng)
        trained = client.model
        out = guidance_model(client, trained, GuidanceConfig(adapt_steps=1), spec)
        expected = axpy(-client.lr, grad(trained, client.train, spec), trained)
        np.testing.assert_array_equal(out.values, expected.values)

    def test_more_steps_move_further(self, rng):
        client, spec = make_client(rng)
        one = guidance_model(client, client.model, GuidanceConfig(adapt_steps=1), spec)
        five = guidance_model(client, client.model, GuidanceConfig(adapt_steps=5), spec)
        assert sq_dist(five, client.model) > sq_dist(one, client.model)

    def test_last_iteration_uses_previous(self, rng):
        client, spec = make_client(rng)
        previous = random_vector_like(client.model)
        cfg = GuidanceConfig(mode="last_iteration")
        out = guidance_model(client, client.model, cfg, spec, previous=previous)
        np.testing.assert_array_equal(out.values, previous.values)

    def test_last_iteration_falls_back_to_current(self, rng, caplog):
        client, spec = make_client(rng)
        cfg = GuidanceConfig(mode="last_iteration")
        with caplog.at_level("INFO", logger="feddwa.dwa"):
            out = guidance_model(client, client.model, cfg, spec, previous=None)
        np.testing.assert_array_equal(out.values, client.model.values)
        assert any("falls back" in r.message for r in caplog.records)

    def test_current_mode(self, rng):
        client, spec = make_client(rng)
        cfg = GuidanceConfig(mode="current")
        out = guidance_model(client, client.model, cfg, spec)
        np.testing.assert_array_equal(out.values, client.model.values)

    def test_minibatch_mode_matches_one_epoch_of_sgd(self, rng):
        client, spec = make_client(rng)
        cfg = GuidanceConfig(adapt_steps=1, adapt_batch="minibatch")
        out = guidance_model(client, client.model, cfg, spec,
                             rng=Rng(3).stream("guidance"))
        expected = local_train(client, client.model, spec, Rng(3).stream("guidance"),
                               epochs=1)
        np.testing.assert_array_equal(out.values, expected.values)

    def test_self_weight_below_one_with_nonzero_gradient(self, rng):
        client, spec = make_client(rng)
        trained = local_train(client, client.model, spec, Rng(1).stream("batch"))
        guide = guidance_model(client, trained, GuidanceConfig(), spec)
        weights = compute_weights(guide, [trained, random_vector_like(trained)])
        assert weights[0] < 1.0


def random_vector_like(v: ParamVector) -> ParamVector:
    values = np.random.default_rng(abs(hash(v.values.tobytes())) % (1 << 31)).normal(
        size=v.dim
    )
    return ParamVector(values, v.layout)
