import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vqspeech.errors import FormatError, ShapeError, StateError
from vqspeech.quantizer import (
    Codebook,
    GumbelConfig,
    KMeansConfig,
    average_probs,
    codebook_usage_stats,
    diversity_penalty,
    gumbel_backward,
    gumbel_select,
    group_flatten,
    group_reshape,
    init_projection,
    kmeans_loss_and_grads,
    kmeans_select,
    read_codes,
    temperature_at,
    write_codes,
)


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def brute_force(z, entries, G):
    T, D = z.shape
    d = D // G
    out = np.zeros((T, G), dtype=int)
    for t in range(T):
        for g in range(G):
            best, best_k = np.inf, -1
            for k in range(entries.shape[0]):
                dist = sum((z[t, g * d + j] - entries[k, j]) ** 2 for j in range(d))
                if dist < best:
                    best, best_k = dist, k
            out[t, g] = best_k
    return out


def random_book(K=4, G=2, D=6, seed=0):
    return Codebook.init(K, G, D, np.random.default_rng(seed))


class TestGrouping:
    def test_contiguous_split(self):
        np.testing.assert_array_equal(group_reshape(np.array([1, 2, 3, 4]), 2), [[1, 2], [3, 4]])

    def test_single_group(self):
        np.testing.assert_array_equal(group_reshape(np.array([1, 2, 3]), 1), [[1, 2, 3]])

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            group_reshape(np.zeros(5), 2)

    def test_round_trip_sweep(self):
        z = np.random.default_rng(0).normal(size=(100, 12))
        back = group_flatten(group_reshape(z, 3))
        assert back.tobytes() == z.tobytes()

    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.sampled_from([2, 4, 8])),
                      elements=st.floats(-1e6, 1e6)), st.sampled_from([1, 2]))
    def test_round_trip_property(self, z, G):
        np.testing.assert_array_equal(group_flatten(group_reshape(z, G)), z)


class TestCodebook:
    def test_shared_storage(self):
        cb = Codebook.init(320, 2, 512, np.random.default_rng(0))
        assert cb.entries.shape == (320, 256)
        assert cb.n_params == 320 * 256

    def test_capacity(self):
        cb = Codebook(np.array([[0.0, 1.0], [2.0, -1.0], [0.5, 3.0]]), 2, 4)
        vecs = np.array([cb.composite(p) for p in itertools.product(range(3), repeat=2)])
        assert len(vecs) == 9
        d = np.linalg.norm(vecs[:, None] - vecs[None], axis=-1)
        assert np.all(d[~np.eye(9, dtype=bool)] > 0)

    def test_bad_shapes(self):
        with pytest.raises(ShapeError):
            Codebook(np.zeros((4, 3)), 2, 5)
        with pytest.raises(ShapeError):
            Codebook(np.zeros((4, 2)), 2, 6)
        with pytest.raises(ShapeError):
            Codebook.init(4, 3, 8, np.random.default_rng(0))


class TestKMeans:
    def test_exact_match(self):
        cb = random_book(K=8, G=1, D=3)
        res = kmeans_select(cb.entries[3][None], cb)
        assert res.indices.tolist() == [[3]]
        loss, _, _ = kmeans_loss_and_grads(cb.entries[3][None], cb)
        assert loss == 0.0

    def test_tie_goes_to_lower_index(self):
        cb = Codebook(np.array([[1.0], [-1.0], [3.0]]), 1, 1)
        assert kmeans_select(np.array([[0.0]]), cb).indices[0, 0] == 0
        cb = Codebook(np.array([[5.0], [-1.0], [1.0]]), 1, 1)
        assert kmeans_select(np.array([[0.0]]), cb).indices[0, 0] == 1

    def test_matches_brute_force(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            cb = Codebook(rng.normal(size=(8, 2)), 2, 4)
            z = rng.normal(size=(5, 4))
            np.testing.assert_array_equal(kmeans_select(z, cb).indices, brute_force(z, cb.entries, 2))

    def test_assembles_winners_and_counts(self):
        cb = random_book(K=5, G=3, D=6, seed=2)
        z = np.random.default_rng(1).normal(size=(7, 6))
        res = kmeans_select(z, cb)
        np.testing.assert_array_equal(res.z_q, cb.composite(res.indices))
        assert res.selection_counts.shape == (3, 5)
        assert res.selection_counts.sum(axis=1).tolist() == [7, 7, 7]

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            kmeans_select(np.zeros((3, 5)), random_book())

    def test_fixed_point(self):
        cb = random_book()
        z = cb.composite(np.array([[0, 1], [2, 3], [3, 3]]))
        loss, gz, ge = kmeans_loss_and_grads(z, cb)
        assert loss == 0.0
        assert not gz.any() and not ge.any()

    def test_frozen_value(self):
        cb = Codebook(np.array([[0.0, 0.0], [10.0, 10.0]]), 1, 2)
        loss, gz, ge = kmeans_loss_and_grads(np.array([[1.0, 2.0]]), cb, KMeansConfig(beta=0.25))
        assert loss == pytest.approx(1.25 * 5.0)
        np.testing.assert_allclose(gz, [[2.0, 4.0]])
        np.testing.assert_allclose(ge, [[-0.5, -1.0], [0.0, 0.0]])

    def test_beta_isolates_codebook_term(self):
        cb = random_book(seed=3)
        z = np.random.default_rng(4).normal(size=(3, 6))
        _, gz1, ge1 = kmeans_loss_and_grads(z, cb, KMeansConfig(beta=0.25))
        _, gz0, ge0 = kmeans_loss_and_grads(z, cb, KMeansConfig(beta=0.0))
        np.testing.assert_array_equal(gz0, gz1)
        assert not ge0.any()
        assert ge1.any()

    def test_commitment_zero_stops_encoder_pull(self):
        cb = random_book(seed=3)
        z = np.random.default_rng(4).normal(size=(3, 6))
        _, gz, ge = kmeans_loss_and_grads(z, cb, KMeansConfig(commitment=0.0))
        assert not gz.any()
        assert ge.any()

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            KMeansConfig(beta=-1.0)
        with pytest.raises(ValueError):
            KMeansConfig(commitment=-0.1)

    def test_finite_differences(self):
        # each term differentiated with the other side held constant, selections frozen
        rng = np.random.default_rng(11)
        cb = Codebook(rng.normal(size=(4, 2)), 2, 4)
        z = rng.normal(size=(3, 4))
        cfg = KMeansConfig(beta=0.25, commitment=1.0)
        res = kmeans_select(z, cb)
        _, gz, ge = kmeans_loss_and_grads(z, cb, cfg, result=res)
        idx = res.indices
        zq0 = cb.composite(idx)
        entries = cb.entries.copy()

        def commit():
            return cfg.commitment * np.sum((z - zq0) ** 2) / z.size * cb.sub_dim

        def codebook():
            return cfg.beta * np.sum((zfrozen - entries[idx].reshape(3, 4)) ** 2) / z.size * cb.sub_dim

        zfrozen = z.copy()
        assert rel_err(gz, numeric_grad(commit, z)) < 1e-4
        assert rel_err(ge, numeric_grad(codebook, entries)) < 1e-4


class TestGumbel:
    def setup_method(self):
        self.cb = Codebook(np.array([[1.0], [0.0], [-1.0]]), 1, 1)
        self.proj = {"weight": np.array([[[2.0], [1.0], [0.0]]]), "bias": np.zeros((1, 3))}

    def test_noiseless_softmax(self):
        res = gumbel_select(np.array([[1.0]]), self.cb, self.proj, GumbelConfig(1.0, True, 0.0))
        e = np.exp([2.0, 1.0, 0.0])
        np.testing.assert_allclose(res.probs[0, 0], e / e.sum(), rtol=1e-12)
        assert res.indices[0, 0] == 0
        np.testing.assert_array_equal(res.z_q, [[1.0]])

    def test_high_temperature_is_uniform(self):
        res = gumbel_select(np.array([[1.0]]), self.cb, self.proj, GumbelConfig(1e6, True, 0.0))
        np.testing.assert_allclose(res.probs[0, 0], 1 / 3, atol=1e-6)

    def test_seed_determinism(self):
        cb = random_book(K=8, G=2, D=4)
        proj = init_projection(cb, np.random.default_rng(1))
        z = np.random.default_rng(2).normal(size=(10, 4))
        a = gumbel_select(z, cb, proj, seed=7)
        b = gumbel_select(z, cb, proj, seed=7)
        c = gumbel_select(z, cb, proj, seed=8)
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_array_equal(a.probs, b.probs)
        assert not np.array_equal(a.probs, c.probs)

    def test_probs_sum_to_one(self):
        cb = random_book(K=8, G=2, D=4)
        proj = init_projection(cb, np.random.default_rng(1))
        res = gumbel_select(np.random.default_rng(2).normal(size=(10, 4)), cb, proj, seed=0)
        np.testing.assert_allclose(res.probs.sum(-1), 1.0, atol=1e-6)

    @given(hnp.arrays(np.float64, (6, 4), elements=st.floats(-3, 3).filter(lambda v: v == 0 or abs(v) > 1e-3)))
    @settings(max_examples=30, deadline=None)
    def test_noiseless_picks_argmax_logit(self, z):
        cb = random_book(K=5, G=2, D=4)
        proj = init_projection(cb, np.random.default_rng(1))
        proj["bias"] = np.random.default_rng(2).normal(size=proj["bias"].shape)
        res = gumbel_select(z, cb, proj, GumbelConfig(1.0, True, 0.0))
        logits = np.einsum("ngd,gkd->ngk", group_reshape(z, 2), proj["weight"]) + proj["bias"]
        np.testing.assert_array_equal(res.indices, np.argmax(logits, axis=-1))

    def test_uniform_symmetric_annihilates_constant(self):
        cb = Codebook(np.array([[1.0, -1.0], [-1.0, 1.0]]), 1, 2)
        proj = {"weight": np.zeros((1, 2, 2)), "bias": np.zeros((1, 2))}
        res = gumbel_select(np.ones((3, 2)), cb, proj, GumbelConfig(1.0, True, 0.0))
        np.testing.assert_allclose(res.probs, 0.5)
        g = gumbel_backward(np.ones((3, 2)), res, cb, proj)
        np.testing.assert_allclose(g.logits, 0.0, atol=1e-15)
        g = gumbel_backward(np.zeros((3, 2)), res, cb, proj, grad_probs=np.full((3, 1, 2), 0.7))
        np.testing.assert_allclose(g.logits, 0.0, atol=1e-15)

    def test_zero_upstream(self):
        cb = random_book(K=4, G=2, D=4)
        proj = init_projection(cb, np.random.default_rng(1))
        res = gumbel_select(np.random.default_rng(2).normal(size=(3, 4)), cb, proj, seed=1)
        g = gumbel_backward(np.zeros((3, 4)), res, cb, proj)
        for arr in (g.logits, g.entries, g.projection["weight"], g.projection["bias"], g.z_e):
            assert not arr.any()

    def test_missing_probs(self):
        cb = random_book()
        res = kmeans_select(np.zeros((2, 6)), cb)
        with pytest.raises(StateError):
            gumbel_backward(np.zeros((2, 6)), res, cb, init_projection(cb, np.random.default_rng(0)))

    def test_finite_differences_on_soft_surrogate(self):
        rng = np.random.default_rng(9)
        cb = Codebook(rng.normal(size=(4, 2)), 2, 4)
        proj = init_projection(cb, rng)
        proj["bias"] = rng.normal(size=proj["bias"].shape)
        z = rng.normal(size=(3, 4))
        up = rng.normal(size=(3, 4))
        cfg = GumbelConfig(temperature=0.7)
        res = gumbel_select(z, cb, proj, cfg, seed=4)
        noise = -np.log(-np.log(np.random.default_rng(4).uniform(np.finfo(float).tiny, 1.0, size=(3, 2, 4))))
        grads = gumbel_backward(up, res, cb, proj)
        entries = cb.entries

        def soft():
            logits = np.einsum("ngd,gkd->ngk", group_reshape(z, 2), proj["weight"]) + proj["bias"]
            s = (logits + noise) / cfg.temperature
            p = np.exp(s - s.max(-1, keepdims=True))
            p /= p.sum(-1, keepdims=True)
            return float(np.sum(group_flatten(np.einsum("ngk,kd->ngd", p, entries)) * up))

        assert rel_err(grads.entries, numeric_grad(soft, entries)) < 1e-4
        assert rel_err(grads.projection["weight"], numeric_grad(soft, proj["weight"])) < 1e-4
        assert rel_err(grads.projection["bias"], numeric_grad(soft, proj["bias"])) < 1e-4
        assert rel_err(grads.z_e, numeric_grad(soft, z)) < 1e-4

    def test_temperature_schedule(self):
        assert temperature_at(0) == 2.0
        assert temperature_at(10**9) == 0.5
        assert temperature_at(1000) == pytest.approx(2.0 * 0.999995**1000)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            GumbelConfig(temperature=0.0)
        with pytest.raises(ValueError):
            GumbelConfig(noise_scale=1.5)


class TestDiversity:
    def test_uniform_value(self):
        loss, grad = diversity_penalty(np.full((2, 320), 1 / 320))
        assert loss == pytest.approx(-math.log(320) / 320, rel=1e-12)
        assert loss == pytest.approx(-0.018026, abs=1e-6)
        np.testing.assert_allclose(grad, (np.log(1 / 320) + 1) / 640)

    def test_one_hot_is_worst(self):
        p = np.zeros((2, 4))
        p[:, 1] = 1.0
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            loss, _ = diversity_penalty(p)
        assert -1e-8 < loss <= 0.0
        assert "clamped 6" in str(caught[0].message)

    def test_uniform_is_global_minimum(self):
        rng = np.random.default_rng(0)
        K = 6
        floor, _ = diversity_penalty(np.full((1, K), 1 / K))
        for _ in range(1000):
            p = rng.dirichlet(np.full(K, 0.5))[None]
            p = np.maximum(p, 1e-300)
            p /= p.sum()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                assert diversity_penalty(p)[0] >= floor - 1e-12

    def test_gradient_matches_finite_differences(self):
        p = np.random.default_rng(1).dirichlet(np.ones(5), size=2)
        _, grad = diversity_penalty(p)
        num = numeric_grad(lambda: diversity_penalty(p)[0], p)
        assert rel_err(grad, num) < 1e-6

    def test_average_probs(self):
        cb = random_book(K=4, G=2, D=4)
        proj = init_projection(cb, np.random.default_rng(1))
        res = gumbel_select(np.random.default_rng(2).normal(size=(5, 4)), cb, proj, seed=0)
        np.testing.assert_allclose(average_probs(res), res.probs.mean(axis=0))


class TestUsage:
    def test_degenerate(self):
        cb = Codebook(np.array([[0.0], [5.0], [9.0]]), 1, 1)
        stats = codebook_usage_stats(kmeans_select(np.zeros((10, 1)), cb))
        assert stats.entropy[0] == 0.0
        assert stats.perplexity[0] == 1.0
        assert stats.dead_codewords[0] == 2

    def test_uniform(self):
        cb = Codebook(np.arange(4.0)[:, None], 1, 1)
        stats = codebook_usage_stats(kmeans_select(np.arange(4.0)[:, None], cb))
        assert stats.perplexity[0] == pytest.approx(4.0)
        assert stats.dead_codewords[0] == 0

    def test_random_selection_band(self):
        cb = Codebook(np.arange(8.0)[:, None], 1, 1)
        z = np.random.default_rng(0).integers(0, 8, 10_000).astype(float)[:, None]
        stats = codebook_usage_stats(kmeans_select(z, cb))
        assert 7.5 <= stats.perplexity[0] <= 8.0

    def test_accumulates_results(self):
        cb = Codebook(np.arange(2.0)[:, None], 1, 1)
        a = kmeans_select(np.zeros((3, 1)), cb)
        b = kmeans_select(np.ones((3, 1)), cb)
        assert codebook_usage_stats([a, b]).perplexity[0] == pytest.approx(2.0)


class TestCodesFile:
    def test_round_trip(self, tmp_path):
        idx = np.array([[0, 3], [2, 1], [3, 3]])
        path = tmp_path / "u.codes"
        write_codes(path, idx, 4, 100.0, header="# vqspeech 0.1.0 config_hash=abcdefabcdef seed=1")
        text = path.read_text()
        assert text.startswith("# vqspeech")
        back, K, rate = read_codes(path)
        np.testing.assert_array_equal(back, idx)
        assert K == 4
        assert rate == 100.0

    def test_out_of_range_index(self, tmp_path):
        path = tmp_path / "bad.codes"
        write_codes(path, np.array([[0], [1]]), 2, 50.0)
        path.write_text(path.read_text().replace("\n1", "\n5"))
        with pytest.raises(FormatError):
            read_codes(path)
