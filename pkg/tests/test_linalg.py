import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from decalign.exceptions import (EmptyInput, IndefiniteInput, NonSymmetric,
                                 NotPositiveDefinite)
from decalign.linalg import cholesky, logsumexp, sqrtm_psd, sym_eig

from conftest import random_spd, rel_fro


def test_sym_eig_identity():
    eig = sym_eig(np.eye(3))
    np.testing.assert_allclose(eig.eigenvalues, [1, 1, 1])
    np.testing.assert_allclose(eig.eigenvectors.T @ eig.eigenvectors, np.eye(3), atol=1e-12)


def test_sym_eig_diagonal_descending():
    eig = sym_eig(np.diag([1.0, 4.0])[::-1, ::-1])
    np.testing.assert_allclose(eig.eigenvalues, [4.0, 1.0])
    np.testing.assert_allclose(np.abs(eig.eigenvectors), np.eye(2))


@pytest.mark.parametrize("seed", range(5))
def test_sym_eig_reconstruction(seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((5, 5))
    A = B + B.T
    eig = sym_eig(A)
    V, w = eig.eigenvectors, eig.eigenvalues
    assert rel_fro(V @ np.diag(w) @ V.T, A) < 1e-8
    assert np.linalg.norm(V.T @ V - np.eye(5)) < 1e-8
    assert np.all(np.diff(w) <= 0)


def test_sym_eig_rejects_asymmetric():
    with pytest.raises(NonSymmetric):
        sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_sqrtm_examples():
    np.testing.assert_allclose(sqrtm_psd(np.eye(4)), np.eye(4), atol=1e-14)
    np.testing.assert_allclose(sqrtm_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_sqrtm_squares_back_and_commutes(seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((4, 4))
    A = B.T @ B
    S = sqrtm_psd(A)
    assert rel_fro(S @ S, A) < 1e-8
    np.testing.assert_allclose(S, S.T, atol=1e-14)
    assert np.min(np.linalg.eigvalsh(S)) > -1e-10
    assert np.linalg.norm(S @ A - A @ S) < 1e-8 * max(1.0, np.linalg.norm(A))


def test_sqrtm_clamps_roundoff_and_rejects_indefinite():
    S = sqrtm_psd(np.diag([1.0, -1e-11]))
    np.testing.assert_allclose(S, np.diag([1.0, 0.0]))
    with pytest.raises(IndefiniteInput):
        sqrtm_psd(np.diag([1.0, -1.0]))
    with pytest.raises(NonSymmetric):
        sqrtm_psd(np.array([[1.0, 1.0], [0.0, 1.0]]))


def test_cholesky_examples():
    np.testing.assert_allclose(cholesky(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(cholesky(np.array([[4.0, 0.0], [0.0, 1.0]])),
                               np.array([[2.0, 0.0], [0.0, 1.0]]))


@pytest.mark.parametrize("seed", range(5))
def test_cholesky_reconstruction_and_logdet(seed):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, 4)
    L, logdet = cholesky(A, return_logdet=True)
    assert np.allclose(L, np.tril(L))
    assert rel_fro(L @ L.T, A) < 1e-10
    assert abs(logdet - np.sum(np.log(sym_eig(A).eigenvalues))) < 1e-8


def test_cholesky_jitter_rescues_singular_psd():
    v = np.array([1.0, 2.0, 3.0])
    L = cholesky(np.outer(v, v))
    assert np.all(np.diag(L) > 0)


def test_cholesky_rejects_indefinite():
    with pytest.raises(NotPositiveDefinite):
        cholesky(np.diag([1.0, -1.0]))


def test_logsumexp_examples():
    assert logsumexp([0.0, 0.0]) == pytest.approx(np.log(2.0), abs=1e-15)
    assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000.0 + np.log(2.0), abs=1e-12)
    assert logsumexp([-np.inf, -np.inf]) == -np.inf
    assert logsumexp([-np.inf, 0.0]) == 0.0
    with pytest.raises(EmptyInput):
        logsumexp([])


def test_logsumexp_matches_naive(rng):
    v = rng.standard_normal(10)
    assert abs(logsumexp(v) - np.log(np.sum(np.exp(v)))) < 1e-12


def test_logsumexp_axis():
    v = np.array([[0.0, 0.0], [1.0, -np.inf]])
    np.testing.assert_allclose(logsumexp(v, axis=1), [np.log(2.0), 1.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_logsumexp_shift(v, c):
    assert abs(logsumexp(v + c) - (logsumexp(v) + c)) < 1e-12
