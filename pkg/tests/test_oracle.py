import math

import numpy as np
import pytest

from otdiff.errors import NumericalError, SizeError
from otdiff.geometry_io import PointCloud
from otdiff.normalize import DiffusionOperator, ScalingVector, sinkhorn_normalize
from otdiff.operators import build_dense_operator, build_gaussian_operator, smatvec
from otdiff.oracle import (
    _round_robin,
    dense_assemble,
    dense_generalized_eigs,
    dense_sinkhorn,
    diffusion_spectrum,
    jacobi_eigh,
)
from otdiff.samples import unit_square


class TestAssemble:
    def test_identity(self):
        np.testing.assert_array_equal(dense_assemble(build_dense_operator(np.eye(4))), np.eye(4))

    def test_collinear(self):
        op = build_gaussian_operator(PointCloud([[0.0], [1.0], [2.0]], np.ones(3)), 1.0)
        S = dense_assemble(op)
        np.testing.assert_allclose(S[0], [1, math.exp(-0.5), math.exp(-2)], rtol=1e-15)

    def test_self_consistent(self, rng):
        op = build_gaussian_operator(unit_square(50, seed=1), 0.2)
        f = rng.standard_normal(50)
        np.testing.assert_allclose(dense_assemble(op) @ f, smatvec(op, f), rtol=0, atol=1e-14)

    def test_size_limit(self):
        op = build_dense_operator(np.ones((1, 1)), [1.0])
        op.masses = np.ones(5000)  # only the size check is exercised
        with pytest.raises(SizeError):
            dense_assemble(op)


class TestDenseSinkhorn:
    def test_two_by_two(self):
        a = 0.3
        s = dense_sinkhorn(np.array([[1, a], [a, 1]]), np.ones(2))
        np.testing.assert_allclose(s.scales, 1 / math.sqrt(1 + a), rtol=1e-12)

    def test_bistochastic_input(self):
        S = np.full((3, 3), 1 / 3)
        s = dense_sinkhorn(S, np.ones(3))
        np.testing.assert_allclose(s.scales, 1.0, rtol=1e-15)
        assert s.iterations == 0

    def test_requires_positive(self):
        with pytest.raises(NumericalError):
            dense_sinkhorn(np.eye(2), np.ones(2))

    def test_matches_matrix_free(self):
        op = build_gaussian_operator(unit_square(64, seed=2), 0.25)
        ref = dense_sinkhorn(dense_assemble(op), op.masses, tol=1e-14)
        got = sinkhorn_normalize(op, tol=1e-14, max_iter=5000)
        np.testing.assert_allclose(got.scales, ref.scales, rtol=0, atol=1e-12)


class TestJacobi:
    def test_round_robin_covers_all_pairs(self):
        rounds = _round_robin(8)
        pairs = {tuple(sorted(p)) for r in rounds for p in r}
        assert len(rounds) == 7 and len(pairs) == 28
        for r in rounds:
            flat = [v for p in r for v in p]
            assert len(set(flat)) == 8

    @pytest.mark.parametrize("n", [1, 2, 7, 30])
    def test_against_numpy(self, n, rng):
        A = rng.standard_normal((n, n))
        A = A + A.T
        w, V = jacobi_eigh(A)
        np.testing.assert_allclose(w, np.sort(np.linalg.eigvalsh(A))[::-1], atol=1e-12 * max(1, np.abs(w).max()))
        np.testing.assert_allclose(V.T @ V, np.eye(n), atol=1e-13)
        assert np.linalg.norm(A @ V - V * w) <= 1e-10 * np.linalg.norm(A)

    def test_degenerate(self):
        w, V = jacobi_eigh(np.diag([2.0, 2.0, 1.0]) + 0.0)
        np.testing.assert_array_equal(w, [2.0, 2.0, 1.0])

    def test_zero_matrix(self):
        w, _ = jacobi_eigh(np.zeros((3, 3)))
        np.testing.assert_array_equal(w, np.zeros(3))


class TestGeneralized:
    def test_identity_diffusion(self):
        op = build_dense_operator(np.eye(5), np.full(5, 0.2))
        diff = DiffusionOperator(op, ScalingVector(np.zeros(5)))
        # Q = S = 0.2 I here, so rescale the scaling to make Q = I
        diff = DiffusionOperator(op, ScalingVector(np.full(5, 0.5 * math.log(5.0))))
        lam, _ = diffusion_spectrum(diff)
        np.testing.assert_allclose(lam, 1.0, rtol=1e-14)

    def test_m_orthonormal_basis(self, rng):
        m = rng.uniform(0.5, 2.0, 10)
        A = rng.standard_normal((10, 10))
        lam, phi = dense_generalized_eigs(A + A.T, m)
        np.testing.assert_allclose(phi.T @ (m[:, None] * phi), np.eye(10), atol=1e-12)
        np.testing.assert_allclose((A + A.T) @ phi, m[:, None] * phi * lam, atol=1e-11)

    def test_size_limit(self):
        with pytest.raises(SizeError):
            dense_generalized_eigs(np.eye(513), np.ones(513))
