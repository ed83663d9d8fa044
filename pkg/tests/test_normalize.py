import json
import math

import numpy as np
import pytest

from otdiff.errors import FormatError, NumericalError, ShapeError, SizeError
from otdiff.geometry_io import Graph, PointCloud
from otdiff.normalize import (
    DiffusionOperator,
    ScalingVector,
    convergence_error,
    diffuse,
    dirac,
    graph_laplacian,
    load_scaling,
    mass,
    normalized,
    row_normalize_apply,
    save_scaling,
    sidecar_path,
    sinkhorn_normalize,
    spectral_truncation_apply,
    symmetric_normalize_apply,
)
from otdiff.operators import (
    build_dense_operator,
    build_exponential_operator,
    build_gaussian_operator,
    build_gmm_operator,
    build_graph_operator,
    build_voxel_operator,
    smatvec,
)
from otdiff.oracle import dense_diffusion, diffusion_spectrum
from otdiff.samples import (
    erdos_renyi_graph,
    path_graph,
    random_geometric_graph,
    random_gmm,
    random_voxel_grid,
    star_graph,
    unit_square,
)


def _unit_star():
    return build_graph_operator(Graph.from_edges(4, [(0, k) for k in (1, 2, 3)], masses=np.ones(4)))


def _cloud(n=40, seed=0):
    rng = np.random.default_rng(seed)
    return PointCloud(rng.random((n, 2)), rng.uniform(0.5, 1.5, n) / n)


class TestSinkhornBasics:
    def test_identity_is_fixed_point(self):
        s = sinkhorn_normalize(build_dense_operator(np.eye(5)))
        assert s.converged and s.iterations == 0
        np.testing.assert_array_equal(s.log_scales, np.zeros(5))

    def test_two_point_closed_form(self):
        a = math.exp(-0.5)
        op = build_gaussian_operator(PointCloud([[0.0], [1.0]], [1.0, 1.0]), 1.0)
        s = sinkhorn_normalize(op, tol=1e-14)
        np.testing.assert_allclose(s.scales, [1 / math.sqrt(1 + a)] * 2, rtol=1e-13)
        assert s.scales[0] == pytest.approx(0.78896, abs=1e-5)

    def test_history_starts_at_initial_error(self):
        op = _unit_star()
        s = sinkhorn_normalize(op, tol=1e-10)
        assert s.history[0] == pytest.approx(0.5)
        assert len(s.history) == s.iterations + 1
        assert s.final_error == s.history[-1] <= 1e-10

    def test_non_convergence_reported(self):
        op = build_gaussian_operator(_cloud(), 0.3)
        s = sinkhorn_normalize(op, tol=1e-15, max_iter=3)
        assert not s.converged and s.iterations == 3
        assert s.final_error > 1e-15

    def test_normalized_raises_when_unconverged(self):
        with pytest.raises(NumericalError):
            normalized(build_gaussian_operator(_cloud(), 0.3), tol=1e-15, max_iter=2)

    def test_underflow_detected_in_linear_mode(self):
        op = build_gaussian_operator(PointCloud([[0.0], [1.0]], [1.0, 1.0]), 1.0)
        with pytest.raises(NumericalError):
            sinkhorn_normalize(op, init=[-1000.0, -1000.0])

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            sinkhorn_normalize(_unit_star(), mode="cubic")

    def test_log_mode_needs_capability(self):
        from otdiff.errors import CapabilityError

        with pytest.raises(CapabilityError):
            sinkhorn_normalize(_unit_star(), mode="log")


class TestConvergenceError:
    def test_exact_fixed_point(self):
        assert convergence_error(build_dense_operator(np.eye(3)), ScalingVector(np.zeros(3))) == 0.0

    def test_single_edge_is_bistochastic(self):
        op = build_graph_operator(Graph.from_edges(2, [(0, 1, 1.0)], masses=[1.0, 1.0]))
        assert convergence_error(op, ScalingVector(np.zeros(2))) == 0.0

    def test_star(self):
        assert convergence_error(_unit_star(), ScalingVector(np.zeros(4))) == pytest.approx(0.5, abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            convergence_error(_unit_star(), ScalingVector(np.zeros(3)))


class TestDiffusion:
    @pytest.fixture
    def diff(self):
        return normalized(build_gaussian_operator(_cloud(), 0.25), tol=1e-12)

    def test_constant_preserved(self, diff):
        np.testing.assert_allclose(diffuse(diff, np.ones(diff.n), steps=5), 1.0, atol=1e-10)

    def test_zero_steps(self, diff, rng):
        f = rng.standard_normal(diff.n)
        np.testing.assert_array_equal(diffuse(diff, f, steps=0), f)

    def test_mass_conservation(self, diff, rng):
        f = rng.standard_normal((diff.n, 3))
        out = diffuse(diff, f, steps=3)
        np.testing.assert_allclose(mass(diff.masses, out), mass(diff.masses, f), rtol=1e-9, atol=1e-12)

    def test_negative_steps(self, diff):
        with pytest.raises(ValueError):
            diffuse(diff, np.ones(diff.n), steps=-1)

    def test_shape_mismatch(self, diff):
        with pytest.raises(ShapeError):
            DiffusionOperator(diff.op, ScalingVector(np.zeros(diff.n + 1)))

    def test_dirac_unit_mass(self):
        m = np.array([0.25, 0.5, 0.25])
        assert mass(m, dirac(m, 1)) == 1.0
        np.testing.assert_array_equal(dirac(m, 1, unit_mass=False), [0, 1, 0])


class TestBaselines:
    def test_row_preserves_constants(self):
        op = build_gaussian_operator(_cloud(), 0.2)
        np.testing.assert_allclose(row_normalize_apply(op, np.ones(op.n)), 1.0, rtol=1e-14)

    def test_star_row_mass(self):
        op = _unit_star()
        out = row_normalize_apply(op, dirac(op.masses, 0))
        np.testing.assert_allclose(out, [0.5] * 4, rtol=1e-15)
        assert mass(op.masses, out) == pytest.approx(2.0, abs=1e-12)

    def test_star_symmetric_mass(self):
        op = _unit_star()
        out = symmetric_normalize_apply(op, dirac(op.masses, 0))
        r = 1 / (2 * math.sqrt(3))
        np.testing.assert_allclose(out, [0.5, r, r, r], rtol=1e-14)
        assert mass(op.masses, out) == pytest.approx(0.5 + 3 * r, abs=1e-14)
        assert mass(op.masses, out) == pytest.approx(1.366, abs=1e-3)

    def test_regular_graph_row_equals_symmetric(self, rng):
        cycle = Graph.from_edges(7, [(k, (k + 1) % 7) for k in range(7)])
        op = build_graph_operator(cycle)
        f = rng.standard_normal(7)
        np.testing.assert_allclose(row_normalize_apply(op, f), symmetric_normalize_apply(op, f), rtol=1e-14)

    def test_first_sinkhorn_step_is_symmetric_normalization(self, rng):
        op = build_graph_operator(random_geometric_graph(200, seed=3))
        s = sinkhorn_normalize(op, tol=0.0, max_iter=1)
        f = rng.standard_normal(op.n)
        np.testing.assert_allclose(
            DiffusionOperator(op, s).matvec(f), symmetric_normalize_apply(op, f), rtol=1e-12, atol=1e-14
        )

    def test_zero_row(self):
        with pytest.raises(NumericalError):
            row_normalize_apply(build_dense_operator(np.diag([1.0, 0.0])), np.ones(2))


class TestSpectralTruncation:
    def test_full_rank_zero_time_is_identity(self, rng):
        g = erdos_renyi_graph(12, 0.4, seed=2, weighted=True)
        g.masses = rng.uniform(0.5, 2.0, 12)
        f = rng.standard_normal(12)
        np.testing.assert_allclose(spectral_truncation_apply(g, 0.0, 12, f), f, atol=1e-12)

    def test_rank_one_is_mean(self, rng):
        g = erdos_renyi_graph(10, 0.5, seed=1)
        g.masses = rng.uniform(0.5, 2.0, 10)
        f = rng.standard_normal(10)
        mean = np.sum(g.masses * f) / np.sum(g.masses)
        np.testing.assert_allclose(spectral_truncation_apply(g, 0.7, 1, f), mean, rtol=1e-12)

    def test_mass_preserved(self, rng):
        g = path_graph(9)
        f = rng.standard_normal(9)
        for rank in (1, 3, 9):
            out = spectral_truncation_apply(g, 0.3, rank, f)
            assert mass(g.masses, out) == pytest.approx(mass(g.masses, f), abs=1e-12)

    def test_path_truncation_rings(self):
        g = path_graph(5)
        out = spectral_truncation_apply(g, 0.05, 4, dirac(g.masses, 0))
        assert out.min() < 0

    def test_size_limit(self):
        with pytest.raises(SizeError):
            spectral_truncation_apply(path_graph(2049), 0.1, 1, np.zeros(2049))

    def test_bad_rank(self):
        with pytest.raises(ValueError):
            spectral_truncation_apply(path_graph(3), 0.1, 4, np.zeros(3))

    def test_laplacian(self):
        np.testing.assert_array_equal(graph_laplacian(path_graph(3)), [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])


def _operators():
    return {
        "gaussian": build_gaussian_operator(_cloud(30, 1), 0.3),
        "exponential": build_exponential_operator(_cloud(30, 2), 0.3),
        "gmm": build_gmm_operator(random_gmm(30, 3, scale=0.1, seed=3), 0.2),
        "graph": build_graph_operator(erdos_renyi_graph(30, 0.3, seed=4, weighted=True), 0.01),
        "voxels": build_voxel_operator(random_voxel_grid((5, 5, 5), count=30, spacing=0.1, seed=5), 0.1),
    }


@pytest.mark.parametrize("name", ["gaussian", "exponential", "gmm", "graph", "voxels"])
class TestSinkhornProperties:
    def test_constant_preservation(self, name):
        op = _operators()[name]
        s = sinkhorn_normalize(op, tol=1e-8)
        q1 = DiffusionOperator(op, s).matvec(np.ones(op.n))
        assert np.max(np.abs(q1 - 1)) <= 10 * 1e-8

    def test_uniqueness_from_perturbed_start(self, name, rng):
        op = _operators()[name]
        a = sinkhorn_normalize(op, tol=1e-13, max_iter=2000)
        b = sinkhorn_normalize(op, tol=1e-13, max_iter=2000, init=np.log(rng.uniform(0.5, 2.0, op.n)))
        np.testing.assert_allclose(b.scales, a.scales, rtol=1e-8)

    def test_monotone_improvement(self, name):
        s = sinkhorn_normalize(_operators()[name], tol=1e-10)
        assert s.final_error < s.history[1]

    def test_m_symmetry_and_positivity(self, name):
        op = _operators()[name]
        diff = normalized(op, tol=1e-10)
        Q = dense_diffusion(diff)
        MQ = op.masses[:, None] * Q
        assert np.max(np.abs(MQ - MQ.T)) <= 1e-12 * np.max(np.abs(MQ))
        assert Q.min() >= -1e-14


@pytest.mark.parametrize("name", ["gaussian", "exponential", "gmm"])
def test_linear_and_log_modes_agree(name):
    op = _operators()[name]
    a = sinkhorn_normalize(op, tol=1e-13, max_iter=1000)
    b = sinkhorn_normalize(op, tol=1e-13, max_iter=1000, mode="log")
    assert a.converged and b.converged
    np.testing.assert_allclose(b.log_scales, a.log_scales, rtol=0, atol=1e-10)


def test_dirichlet_damping_report(capsys):
    # E(Qf) <= E(f) is not guaranteed for Q; measured and printed, not asserted
    rng = np.random.default_rng(0)
    worst = -np.inf
    for seed in range(5):
        g = erdos_renyi_graph(25, 0.25, seed=seed)
        if g.n_components() > 1:
            continue
        op = build_graph_operator(g)
        diff = normalized(op, tol=1e-12)
        lap = graph_laplacian(g)
        for _ in range(20):
            f = rng.standard_normal(g.n)
            qf = diff.matvec(f)
            worst = max(worst, (qf @ lap @ qf) / (f @ lap @ f))
    with capsys.disabled():
        print(f"\n[report] max Dirichlet energy ratio E(Qf)/E(f) over random graphs: {worst:.4f}")
    assert np.isfinite(worst)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        op = build_gaussian_operator(_cloud(), 0.3)
        s = sinkhorn_normalize(op, tol=1e-9)
        save_scaling(tmp_path / "s.csv", s, tol=1e-9, sigma=0.3, modality="gaussian")
        back, meta = load_scaling(tmp_path / "s.csv")
        np.testing.assert_array_equal(back.log_scales, s.log_scales)
        assert meta["tol"] == 1e-9 and meta["sigma"] == 0.3 and meta["modality"] == "gaussian"
        assert meta["iterations"] == s.iterations
        assert set(json.loads((tmp_path / "s.json").read_text())) >= {"tol", "iterations", "final_error", "sigma", "modality"}

    def test_sidecar_path(self):
        assert sidecar_path("out/scaling.csv") == "out/scaling.json"

    def test_bad_header(self, tmp_path):
        (tmp_path / "s.csv").write_text("index,ell\n0,1\n")
        with pytest.raises(FormatError):
            load_scaling(tmp_path / "s.csv")
