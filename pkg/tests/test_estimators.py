import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surrogate_sdr.errors import (
    DegenerateMeasurementErrorError,
    InvalidArgumentError,
    NumericalDegeneracyError,
)
from surrogate_sdr.estimators import (
    Method,
    SubspaceEstimate,
    SurrogateProblem,
    clad_objective,
    estimate_delta,
    fit_clad,
    fit_il_lad,
    fit_il_save,
    fit_il_sir,
    fit_lad,
    lad_objective,
    save_directions,
    sir_directions,
)
from surrogate_sdr.manifold import GrassmannPoint
from surrogate_sdr.matops import pseudo_det
from surrogate_sdr.population import InverseRegressionModel, constructed_model
from surrogate_sdr.simlab import generate_dataset
from surrogate_sdr.slices import SlicedMoments, slice_covariances, slice_response

from conftest import proj_dist, random_orthogonal, random_point, random_spd


def random_moments(rng, p, M):
    f = rng.dirichlet(np.full(M, 5.0))
    covs = np.stack([random_spd(rng, p, cond=5.0) for _ in range(M)])
    return SlicedMoments.from_population(random_spd(rng, p, cond=20.0), covs, f)


def central_difference(fn, Psi, h=1e-6):
    G = np.zeros_like(Psi)
    for idx in np.ndindex(*Psi.shape):
        E = np.zeros_like(Psi)
        E[idx] = h
        G[idx] = (fn(Psi + E) - fn(Psi - E)) / (2 * h)
    return G


@pytest.fixture(scope="module")
def m1_data():
    return generate_dataset("M1", "gaussian", 1000, 10, seed=7)


class TestObjectives:
    def test_equal_covariances_give_zero(self, rng):
        S = random_spd(rng, 5)
        mom = SlicedMoments.from_population(S, np.stack([S, S, S]), np.full(3, 1 / 3))
        for _ in range(5):
            assert lad_objective(random_point(rng, 5, 2), mom).value == pytest.approx(0.0, abs=1e-12)

    def test_scalar_example(self):
        mom = SlicedMoments.from_population(np.diag([2.0, 1.0]), np.eye(2)[None], [1.0])
        ev = lad_objective(GrassmannPoint(np.array([[1.0], [0.0]])), mom)
        assert ev.value == pytest.approx(math.log(2.0))

    def test_matches_pseudo_determinant_form(self, rng):
        mom = random_moments(rng, 6, 4)
        pt = random_point(rng, 6, 2)
        P = pt.projection
        expected = math.log(pseudo_det(P @ mom.marginal_cov @ P)) - sum(
            f * math.log(pseudo_det(P @ D @ P)) for f, D in zip(mom.proportions, mom.slice_covs)
        )
        assert lad_objective(pt, mom).value == pytest.approx(expected, abs=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("p,d", [(4, 1), (7, 2), (9, 3)])
    def test_lad_gradient_finite_difference(self, seed, p, d):
        rng = np.random.default_rng(seed)
        mom = random_moments(rng, p, 4)
        Psi = random_point(rng, p, d).basis
        G = lad_objective(Psi, mom).euclidean_gradient
        G_fd = central_difference(lambda B: lad_objective(B, mom).value, Psi)
        assert np.linalg.norm(G - G_fd) <= 1e-5 * np.linalg.norm(G_fd)

    @pytest.mark.parametrize("seed", range(5))
    def test_clad_gradient_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        mom = random_moments(rng, 6, 5)
        L = np.eye(6) + 0.3 * rng.standard_normal((6, 6))
        Psi = random_point(rng, 6, 2).basis
        G = clad_objective(Psi, mom, L).euclidean_gradient
        G_fd = central_difference(lambda B: clad_objective(B, mom, L).value, Psi)
        assert np.linalg.norm(G - G_fd) <= 1e-5 * np.linalg.norm(G_fd)

    def test_clad_with_identity_is_lad(self, rng):
        mom = random_moments(rng, 5, 3)
        pt = random_point(rng, 5, 2)
        a = lad_objective(pt, mom)
        b = clad_objective(pt, mom, np.eye(5))
        assert a.value == pytest.approx(b.value, abs=1e-12)
        np.testing.assert_allclose(a.euclidean_gradient, b.euclidean_gradient, atol=1e-12)

    @settings(max_examples=30)
    @given(st.integers(0, 2**31), st.integers(1, 4))
    def test_rotation_invariance(self, seed, d):
        rng = np.random.default_rng(seed)
        p = d + 3
        mom = random_moments(rng, p, 3)
        L = np.eye(p) + 0.2 * rng.standard_normal((p, p))
        Psi = random_point(rng, p, d).basis
        A = random_orthogonal(rng, d)
        for obj in (lambda B: lad_objective(B, mom), lambda B: clad_objective(B, mom, L)):
            assert abs(obj(Psi @ A).value - obj(Psi).value) <= 1e-10

    def test_singular_slice_is_named(self):
        covs = np.stack([np.eye(3), np.diag([0.0, 1.0, 1.0])])
        mom = SlicedMoments.from_population(np.eye(3), covs, [0.5, 0.5])
        with pytest.raises(NumericalDegeneracyError, match="slice 1"):
            lad_objective(GrassmannPoint(np.eye(3)[:, :1]), mom)


class TestSurrogateProblem:
    @pytest.mark.parametrize("kwargs,match", [
        ({"d": 0}, "d"),
        ({"d": 4}, "d"),
        ({"sigma_u": -np.eye(4)}, "semi-definite"),
        ({"sigma_u": np.triu(np.ones((4, 4)))}, "symmetric"),
        ({"sigma_u": np.eye(3)}, "sigma_u"),
        ({"y": np.zeros(5)}, "y"),
    ])
    def test_invalid(self, rng, kwargs, match):
        base = dict(W=rng.standard_normal((50, 4)), y=rng.standard_normal(50), sigma_u=np.eye(4))
        base.update(kwargs)
        with pytest.raises(InvalidArgumentError, match=match):
            SurrogateProblem(**base)

    def test_needs_more_rows_than_columns(self, rng):
        with pytest.raises(InvalidArgumentError, match="n > p"):
            SurrogateProblem(rng.standard_normal((4, 4)), np.arange(4.0), np.zeros((4, 4)))


class TestFitLad:
    def test_recovers_inverse_model_subspace(self):
        model = constructed_model(p=4, d=1, M=3, seed=3, error_scale=0.0)
        X, _, labels = model.sample(2000, seed=1)
        est = fit_lad(X, labels, d=1, M=3, y_is_categorical=True)
        assert proj_dist(est.basis, model.Psi) <= 0.15
        assert est.method_tag is Method.LAD

    def test_full_codimension_one(self, m1_data):
        est = fit_lad(m1_data.X, m1_data.y, d=9)
        assert est.converged
        assert np.trace(est.projection) == pytest.approx(9.0, abs=1e-8)

    def test_rotation_equivariance(self, m1_data, rng):
        Q = random_orthogonal(rng, 10)
        a = fit_lad(m1_data.X, m1_data.y, d=1)
        b = fit_lad(m1_data.X @ Q, m1_data.y, d=1)
        assert np.linalg.norm(b.projection - Q.T @ a.projection @ Q) <= 1e-6


class TestEstimateDelta:
    def problem(self, rng, sigma_u):
        return SurrogateProblem(rng.standard_normal((60, 3)), rng.standard_normal(60), sigma_u)

    def test_no_measurement_error(self, rng):
        prob = self.problem(rng, np.zeros((3, 3)))
        mom = prob.moments()
        naive = fit_lad(prob.W, prob.y, d=1)
        de = estimate_delta(prob, naive, mom)
        np.testing.assert_array_equal(de.delta, de.delta_n)
        np.testing.assert_array_equal(de.L_hat, np.eye(3))

    def test_pooled_equals_marginal(self, rng):
        S = random_spd(rng, 4)
        mom = SlicedMoments.from_population(S, np.stack([S, S]), [0.5, 0.5])
        prob = SurrogateProblem(rng.standard_normal((20, 4)), np.arange(20.0), np.zeros((4, 4)))
        naive = SubspaceEstimate(random_point(rng, 4, 2), 0.0, True, 0, Method.LAD)
        np.testing.assert_allclose(estimate_delta(prob, naive, mom).delta_n, S, atol=1e-10)

    @pytest.mark.parametrize("seed", range(3))
    def test_population_recovery(self, seed, rng):
        model = constructed_model(p=5, d=2, M=4, seed=seed)
        prob = SurrogateProblem(rng.standard_normal((20, 5)), np.arange(20.0), model.sigma_u, d=2)
        # the naive fit targets the LAD subspace of the W moments
        naive = SubspaceEstimate(GrassmannPoint(model.naive_basis()), 0.0, True, 0, Method.LAD)
        de = estimate_delta(prob, naive, model.moments_w())
        np.testing.assert_allclose(de.delta_n, model.delta + model.sigma_u, atol=1e-8)
        assert np.linalg.norm(de.L_hat @ (de.delta + model.sigma_u) - de.delta) <= 1e-8
        assert de.n_repaired == 0

    def test_repair_floor(self, rng):
        model = constructed_model(p=4, d=1, M=3, seed=0)
        sigma_u = model.sigma_u + np.diag([5.0, 0, 0, 0])
        prob = SurrogateProblem(rng.standard_normal((20, 4)), np.arange(20.0), sigma_u)
        truth = SubspaceEstimate(GrassmannPoint(model.Psi), 0.0, True, 0, Method.LAD)
        de = estimate_delta(prob, truth, model.moments_w())
        assert de.n_repaired >= 1
        assert np.linalg.eigvalsh(de.delta)[0] >= 1e-6 * 0.999

    def test_singular_marginal(self, rng):
        mom = SlicedMoments.from_population(np.diag([1.0, 0.0]), np.eye(2)[None], [1.0])
        prob = SurrogateProblem(rng.standard_normal((20, 2)), np.arange(20.0), np.zeros((2, 2)))
        naive = SubspaceEstimate(GrassmannPoint(np.eye(2)[:, :1]), 0.0, True, 0, Method.LAD)
        with pytest.raises(NumericalDegeneracyError):
            estimate_delta(prob, naive, mom)


class TestFits:
    @pytest.fixture
    def problem(self, m1_data):
        return SurrogateProblem(m1_data.W, m1_data.y, m1_data.sigma_u, d=1)

    @pytest.mark.parametrize("fit", [fit_clad, fit_il_lad, fit_il_sir, fit_il_save])
    def test_projection_invariants(self, problem, fit):
        P = fit(problem).projection
        np.testing.assert_allclose(P, P.T, atol=1e-12)
        assert np.linalg.norm(P @ P - P) <= 1e-8
        assert np.trace(P) == pytest.approx(1.0, abs=1e-8)

    @pytest.mark.parametrize("fit,tag", [
        (fit_clad, Method.CLAD), (fit_il_lad, Method.IL_LAD),
        (fit_il_sir, Method.IL_SIR), (fit_il_save, Method.IL_SAVE),
    ])
    def test_method_tags(self, problem, fit, tag):
        assert fit(problem).method_tag is tag

    def test_clad_without_error_is_lad(self, m1_data):
        prob = SurrogateProblem(m1_data.W, m1_data.y, np.zeros((10, 10)))
        a = fit_clad(prob)
        b = fit_lad(m1_data.W, m1_data.y, d=1)
        assert proj_dist(a.basis, b.basis) <= 1e-6
        np.testing.assert_array_equal(a.adjustment, np.eye(10))

    def test_il_lad_without_error_is_lad(self, m1_data):
        W = m1_data.W - m1_data.W.mean(axis=0)
        prob = SurrogateProblem(W, m1_data.y, np.zeros((10, 10)))
        assert proj_dist(fit_il_lad(prob).basis, fit_lad(W, m1_data.y, d=1).basis) <= 1e-4

    def test_degenerate_measurement_error(self, m1_data):
        prob = SurrogateProblem(m1_data.W, m1_data.y, 100 * np.eye(10))
        with pytest.raises(DegenerateMeasurementErrorError):
            fit_clad(prob)
        with pytest.raises(DegenerateMeasurementErrorError):
            fit_il_lad(prob)

    def test_clad_and_il_lad_agree_at_large_n(self):
        data = generate_dataset("M1", "gaussian", 5000, 10, seed=11)
        prob = SurrogateProblem(data.W, data.y, data.sigma_u)
        assert proj_dist(fit_clad(prob).basis, fit_il_lad(prob).basis) <= 0.05

    def test_correction_beats_naive(self):
        data = generate_dataset("M1", "gaussian", 5000, 10, seed=5, error_draw="variance")
        prob = SurrogateProblem(data.W, data.y, data.sigma_u)
        B = data.B_true / np.linalg.norm(data.B_true)
        naive = fit_lad(data.W, data.y, d=1)
        assert proj_dist(fit_clad(prob).basis, B) < proj_dist(naive.basis, B)

    def test_equivariance(self, m1_data, rng):
        Q = random_orthogonal(rng, 10)
        a = SurrogateProblem(m1_data.W, m1_data.y, m1_data.sigma_u)
        b = SurrogateProblem(m1_data.W @ Q, m1_data.y, Q.T @ m1_data.sigma_u @ Q)
        for fit in (fit_clad, fit_il_lad, fit_il_sir, fit_il_save):
            Pa, Pb = fit(a).projection, fit(b).projection
            assert np.linalg.norm(Pb - Q.T @ Pa @ Q) <= 1e-6, fit.__name__

    def test_sufficient_predictors(self, problem):
        est = fit_clad(problem)
        np.testing.assert_allclose(
            est.sufficient_predictors(problem.W),
            problem.W @ est.adjustment.T @ est.basis.basis,
        )

    def test_single_slice_sir_is_flagged(self, rng):
        prob = SurrogateProblem(rng.standard_normal((40, 3)), np.zeros(40), 0.1 * np.eye(3),
                                M=1, y_is_categorical=True)
        est = fit_il_sir(prob)
        assert not est.converged
        assert est.diagnostics["informative"] is False


class TestInverseMomentDirections:
    def test_symmetric_link_defeats_sir_not_save(self):
        # slices differ only in their variance along Psi: no mean signal
        Psi = np.array([[1.0], [1.0], [0.0], [0.0]]) / math.sqrt(2)
        C = np.array([-0.5, 0.0, 0.5]).reshape(3, 1, 1)
        model = InverseRegressionModel(Psi, np.eye(4), np.full(3, 1 / 3), np.zeros((3, 1)), C,
                                       np.zeros((4, 4)))
        mom = model.moments_x()
        sir_pt, _, sir_informative = sir_directions(mom, 1)
        save_pt, _, save_informative = save_directions(mom, 1)
        assert not sir_informative
        assert save_informative
        assert proj_dist(save_pt, Psi) <= 1e-10

    def test_identical_slices_not_informative(self, rng):
        S = random_spd(rng, 4)
        mom = SlicedMoments.from_population(S, np.stack([S, S, S]), np.full(3, 1 / 3))
        assert not save_directions(mom, 1)[2]
        assert not sir_directions(mom, 1)[2]
