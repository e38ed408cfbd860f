import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decalign import autodiff as ad
from decalign import homo
from decalign.exceptions import MismatchedDims, NonPositiveBandwidth, TooFewSamples


def moments_oracle(F, eps=1e-6):
    N, d = F.shape
    mu = [sum(F[n, a] for n in range(N)) / N for a in range(d)]
    cov = [[sum((F[n, a] - mu[a]) * (F[n, b] - mu[b]) for n in range(N)) / N
            for b in range(d)] for a in range(d)]
    skew = [sum(((F[n, a] - mu[a]) / (np.sqrt(cov[a][a]) + eps)) ** 3 for n in range(N)) / N
            for a in range(d)]
    return np.array(mu), np.array(cov), np.array(skew)


def sem_oracle(Fs):
    M = len(Fs)
    total = 0.0
    for i in range(M):
        for j in range(i + 1, M):
            a, b = moments_oracle(Fs[i]), moments_oracle(Fs[j])
            total += sum(float(np.sum((x - y) ** 2)) for x, y in zip(a, b))
    return total / (M * (M - 1))


def mmd_oracle(Fs, sigma, unbiased=False):
    def k(x, y):
        return np.exp(-sum((x[a] - y[a]) ** 2 for a in range(len(x))) / (2 * sigma ** 2))

    def mean_k(A, B, exclude):
        tot, cnt = 0.0, 0
        for p in range(len(A)):
            for q in range(len(B)):
                if exclude and p == q:
                    continue
                tot += k(A[p], B[q])
                cnt += 1
        return tot / cnt

    M = len(Fs)
    total = 0.0
    for i in range(M):
        for j in range(i + 1, M):
            X, Y = Fs[i], Fs[j]
            total += (mean_k(X, X, unbiased) + mean_k(Y, Y, unbiased)
                      - 2 * mean_k(X, Y, False))
    return total * 2 / (M * (M - 1))


# -- moments ------------------------------------------------------------------
def test_constant_rows():
    c = np.array([1.0, -2.0, 3.0])
    s = homo.moments(np.tile(c, (5, 1)))
    np.testing.assert_array_equal(s.mean.data, c)
    np.testing.assert_array_equal(s.cov.data, np.zeros((3, 3)))
    np.testing.assert_array_equal(s.skew.data, np.zeros(3))


def test_symmetric_samples_zero_skew(rng):
    mu = rng.standard_normal(3)
    half = rng.standard_normal((4, 3))
    F = np.concatenate([mu + half, mu - half])
    np.testing.assert_allclose(homo.moments(F).skew.data, 0.0, atol=1e-12)


def test_moments_loop_oracle(rng):
    for _ in range(10):
        F = rng.standard_normal((5, 3))
        s = homo.moments(F)
        for got, want in zip((s.mean, s.cov, s.skew), moments_oracle(F)):
            np.testing.assert_allclose(got.data, want, atol=1e-12)


def test_moments_too_few():
    with pytest.raises(TooFewSamples):
        homo.moments(np.ones((1, 3)))


# -- semantic moment loss -----------------------------------------------------
def test_sem_identical_zero(rng):
    F = rng.standard_normal((6, 3))
    assert float(homo.l_sem([homo.moments(F)] * 3).data) == 0.0


def test_sem_mean_shift():
    delta = np.array([0.3, -1.2])
    a = homo.MomentStats(ad.Tensor(np.zeros(2)), ad.Tensor(np.eye(2)), ad.Tensor(np.zeros(2)))
    b = homo.MomentStats(ad.Tensor(delta), ad.Tensor(np.eye(2)), ad.Tensor(np.zeros(2)))
    assert float(homo.l_sem([a, b]).data) == pytest.approx(delta @ delta / 2, abs=1e-15)


def test_sem_pair_oracle(rng):
    for _ in range(10):
        Fs = [rng.standard_normal((5, 3)) for _ in range(3)]
        got = float(homo.l_sem([homo.moments(F) for F in Fs]).data)
        assert abs(got - sem_oracle(Fs)) < 1e-12


def test_sem_mismatched_dims(rng):
    with pytest.raises(MismatchedDims):
        homo.l_sem([homo.moments(rng.standard_normal((4, 2))),
                    homo.moments(rng.standard_normal((4, 3)))])


# -- kernel and MMD -----------------------------------------------------------
def test_kernel_examples(rng):
    x = rng.standard_normal(3)
    assert homo.gaussian_kernel(x, x, 0.7) == 1.0
    sigma = 0.8
    y = x + np.array([sigma * np.sqrt(2.0), 0.0, 0.0])
    assert homo.gaussian_kernel(x, y, sigma) == pytest.approx(np.exp(-1.0), abs=1e-15)
    with pytest.raises(NonPositiveBandwidth):
        homo.gaussian_kernel(x, y, 0.0)


def test_mmd_identical_sets(rng):
    X = rng.standard_normal((6, 3))
    assert abs(float(homo.l_mmd([X, X.copy()]).data)) < 1e-12


def test_mmd_single_points(rng):
    x, y = rng.standard_normal((1, 3)), rng.standard_normal((1, 3))
    sigma = 1.3
    cfg = homo.KernelConfig(bandwidth=sigma)
    # one sample per modality: N >= 2 is required, so duplicate each point
    got = float(homo.l_mmd([np.repeat(x, 2, 0), np.repeat(y, 2, 0)], cfg).data)
    assert got == pytest.approx(2 * (1 - homo.gaussian_kernel(x[0], y[0], sigma)), abs=1e-14)


@pytest.mark.parametrize("estimator", ["biased", "unbiased"])
def test_mmd_loop_oracle(rng, estimator):
    for _ in range(5):
        Fs = [rng.standard_normal((4, 3)) for _ in range(3)]
        sigma = rng.uniform(0.5, 2.0)
        got = float(homo.l_mmd(Fs, homo.KernelConfig(sigma, estimator)).data)
        assert abs(got - mmd_oracle(Fs, sigma, estimator == "unbiased")) < 1e-12


def test_median_bandwidth_loop(rng):
    X, Y = rng.standard_normal((4, 2)), rng.standard_normal((3, 2))
    Z = np.concatenate([X, Y])
    d = [np.linalg.norm(Z[p] - Z[q]) for p, q in itertools.combinations(range(7), 2)]
    assert homo.median_bandwidth(X, Y) == pytest.approx(np.median(d) / np.sqrt(2), abs=1e-14)
    assert homo.median_bandwidth(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), shift=st.floats(-5, 5), scale=st.floats(0.2, 5))
def test_median_mmd_invariant_to_translation_and_scale(seed, shift, scale):
    rng = np.random.default_rng(seed)
    Fs = [rng.standard_normal((5, 2)) for _ in range(3)]
    base = float(homo.l_mmd(Fs).data)
    moved = float(homo.l_mmd([scale * F + shift for F in Fs]).data)
    assert moved == pytest.approx(base, abs=1e-10)


def test_mmd_symmetric_and_permutation_invariant(rng):
    X, Y = rng.standard_normal((5, 2)), rng.standard_normal((6, 2)) + 1
    assert float(homo.l_mmd([X, Y]).data) == pytest.approx(float(homo.l_mmd([Y, X]).data),
                                                           abs=1e-14)
    perm = rng.permutation(5)
    assert float(homo.l_mmd([X[perm], Y]).data) == pytest.approx(
        float(homo.l_mmd([X, Y]).data), abs=1e-14)


def test_mmd_errors(rng):
    with pytest.raises(TooFewSamples):
        homo.l_mmd([np.ones((1, 2)), np.ones((3, 2))])
    with pytest.raises(NonPositiveBandwidth):
        homo.KernelConfig(bandwidth=-1.0)


# -- distribution encoder -----------------------------------------------------
def test_pde_identity_init(rng):
    F = rng.standard_normal((4, 3))
    np.testing.assert_allclose(homo.pde_project(F, np.eye(3), np.zeros(3)).data, np.tanh(F))
    np.testing.assert_array_equal(
        homo.pde_project(np.zeros((2, 3)), rng.standard_normal((3, 3)), np.zeros(3)).data, 0.0)


# -- gradients ----------------------------------------------------------------
def test_gradients(rng):
    Fs = [rng.standard_normal((5, 3)) for _ in range(3)]
    assert ad.grad_check(lambda fs: homo.l_sem([homo.moments(f) for f in fs]), Fs) < 1e-4
    cfg = homo.KernelConfig(bandwidth=1.1, estimator="unbiased")
    assert ad.grad_check(lambda fs: homo.l_mmd(fs, cfg), Fs) < 1e-4
    W, b = rng.standard_normal((3, 3)), rng.standard_normal(3)
    assert ad.grad_check(lambda t: ad.sum_(homo.pde_project(t[0], t[1], t[2]) ** 2),
                         [Fs[0], W, b]) < 1e-4
