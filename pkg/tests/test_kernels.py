"""The numba kernels and their numpy twins must agree."""
import numpy as np
import pytest

from drive2vec import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba unavailable")


def test_backend_reported():
    assert K.BACKEND in ("numba", "numpy")


@needs_numba
@pytest.mark.parametrize("seed", range(3))
def test_sliding_range_agrees(seed):
    x = np.random.default_rng(seed).normal(size=500)
    for w in (2, 4, 17):
        np.testing.assert_array_equal(K.sliding_range_numba(x, w), K.sliding_range_numpy(x, w))
    assert K.sliding_range_numba(x[:3], 4).size == 0 == K.sliding_range_numpy(x[:3], 4).size


@needs_numba
def test_average_ranks_agree_with_ties():
    x = np.random.default_rng(1).integers(0, 20, 300).astype(float)
    np.testing.assert_array_equal(K.average_ranks_numba(x), K.average_ranks_numpy(x))
    np.testing.assert_array_equal(K.average_ranks_numpy(np.array([5.0, 1.0, 5.0])), [2.5, 1.0, 2.5])


@needs_numba
def test_perplexity_search_agrees():
    X = np.random.default_rng(2).normal(size=(40, 3))
    D2 = ((X[:, None] - X[None]) ** 2).sum(-1)
    a = K.perplexity_search_numba(D2, np.log(8.0), 1e-6, 200)
    b = K.perplexity_search_numpy(D2, np.log(8.0), 1e-6, 200)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=1e-9, atol=1e-12)


def test_perplexity_search_survives_large_beta():
    # duplicated points push beta high; the diagonal must not overflow
    X = np.vstack([np.zeros((10, 2)), np.random.default_rng(1).normal(size=(10, 2))])
    D2 = ((X[:, None] - X[None]) ** 2).sum(-1)
    P, beta, _ = K.perplexity_search_numpy(D2, np.log(3.0), 1e-6, 200)
    assert np.all(np.isfinite(P)) and np.all(np.diag(P) == 0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0)
    if K.HAS_NUMBA:
        Pn, bn, _ = K.perplexity_search_numba(D2, np.log(3.0), 1e-6, 200)
        np.testing.assert_allclose(P, Pn, rtol=1e-9, atol=1e-12)


@needs_numba
def test_tsne_kl_grad_agrees():
    rng = np.random.default_rng(3)
    P = rng.random((25, 25))
    P = P + P.T
    np.fill_diagonal(P, 0)
    P /= P.sum()
    Y = rng.normal(size=(25, 2))
    for ex in (1.0, 4.0):
        ka, ga = K.tsne_kl_grad_numba(P, Y, ex)
        kb, gb = K.tsne_kl_grad_numpy(P, Y, ex)
        assert ka == pytest.approx(kb, rel=1e-12)
        np.testing.assert_allclose(ga, gb, rtol=1e-10, atol=1e-14)


@needs_numba
def test_simulator_agrees(monkeypatch):
    from drive2vec import synth

    cfg = synth.SynthConfig(n_drivers=2, sessions_per_driver=1, duration_s=180.0, seed=11)
    prof = synth.make_profile(cfg, 0)
    monkeypatch.setattr(K, "simulate_vehicle", K.simulate_vehicle_py)
    a, ev_a = synth.generate_session(prof, cfg, 7)
    monkeypatch.setattr(K, "simulate_vehicle", K.simulate_vehicle_numba)
    b, ev_b = synth.generate_session(prof, cfg, 7)
    assert ev_a == ev_b
    np.testing.assert_allclose(a.values, b.values, rtol=1e-12, atol=1e-9)
