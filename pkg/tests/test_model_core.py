import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import FHN_TRUE, LANGEVIN_TRUE, MFOU_TRUE
from hypoips.errors import EllipticModelError, HypoellipticityViolation, ShapeError
from hypoips.model_core import (FunctionModel, ParameterVector, ParticleSystemState, available_models,
                                default_bounds, diffusion_matrix_aR, get_model, hypo_matrix_aS, register_model,
                                rough_drift)


def test_registry_ids():
    assert set(available_models()) >= {"ifhn", "ilangevin1d", "mfou"}
    with pytest.raises(KeyError):
        get_model("nope")


def test_builtin_dimensions(fhn, langevin, mfou):
    assert (fhn.d_S, fhn.d_R, fhn.d_B) == (1, 1, 1)
    assert fhn.param_sizes == (3, 1, 1)
    assert langevin.param_sizes == (0, 3, 1)
    assert mfou.d_S == 0 and mfou.d == 1
    np.testing.assert_array_equal(fhn.theta_true, FHN_TRUE)
    np.testing.assert_array_equal(langevin.theta_true, LANGEVIN_TRUE)
    np.testing.assert_array_equal(mfou.theta_true, MFOU_TRUE)


def test_parameter_vector_flattening_and_bounds():
    pv = ParameterVector([1.0], [2.0, 3.0], [4.0], [0, 0, 0, 0], [5, 5, 5, 5])
    np.testing.assert_array_equal(pv.flat, [1, 2, 3, 4])
    assert pv.sizes == (1, 2, 1)
    with pytest.raises(ValueError):
        ParameterVector([], [2.0], [9.0], [0, 0], [5, 5])
    with pytest.raises(ShapeError):
        ParameterVector([], [], [1.0], [0], [5])


def test_state_validation():
    with pytest.raises(Exception):
        ParticleSystemState(0.0, np.array([[np.nan, 1.0]]))
    with pytest.raises(ShapeError):
        ParticleSystemState(0.0, np.zeros(3))


def test_fhn_single_particle_drift(fhn):
    y, x = 0.3, 1.2
    state = ParticleSystemState(0.0, np.array([[y, x]]))
    _, alpha_R, _ = fhn.split(FHN_TRUE)
    np.testing.assert_allclose(rough_drift(fhn, alpha_R, state, 0), [x - x ** 3 / 3 - y], rtol=0, atol=1e-15)


def test_langevin_two_particle_drift(langevin):
    state = ParticleSystemState(0.0, np.array([[0.5, 0.0], [1.0, 0.0]]))
    _, alpha_R, _ = langevin.split(LANGEVIN_TRUE)
    np.testing.assert_allclose(rough_drift(langevin, alpha_R, state, 0), [0.5], atol=1e-15)


def test_mfou_coincident_particles_no_interaction(mfou):
    state = ParticleSystemState(0.0, np.full((5, 1), 0.7))
    _, alpha_R, _ = mfou.split(MFOU_TRUE)
    np.testing.assert_allclose(rough_drift(mfou, alpha_R, state, 2), [-0.5 * 0.7], atol=1e-15)


def test_rough_drift_shape_error(langevin):
    state = ParticleSystemState(0.0, np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        rough_drift(langevin, [2.0, 1.5, 2.0], state, 0)
    state = ParticleSystemState(0.0, np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        rough_drift(langevin, [2.0, 1.5, 2.0], state, 5)


def test_diffusion_and_hypo_matrices(fhn, langevin):
    state = ParticleSystemState(0.0, np.array([[0.1, -0.4], [0.3, 0.2]]))
    assert diffusion_matrix_aR(langevin, [0.5], state, 0)[0, 0] == pytest.approx(0.25, abs=1e-15)
    assert diffusion_matrix_aR(fhn, [0.5], state, 1)[0, 0] == pytest.approx(0.25, abs=1e-15)
    assert hypo_matrix_aS(langevin, LANGEVIN_TRUE, state, 0)[0, 0] == pytest.approx(0.25, abs=1e-15)
    assert hypo_matrix_aS(fhn, FHN_TRUE, state, 0)[0, 0] == pytest.approx(0.25 / 2.25, abs=1e-15)


def test_hypo_matrix_errors(mfou):
    state = ParticleSystemState(0.0, np.zeros((2, 1)))
    with pytest.raises(EllipticModelError):
        hypo_matrix_aS(mfou, MFOU_TRUE, state, 0)
    flat = FunctionModel((1, 1, 1), (0, 1, 1),
                         rough_drift_self=lambda a, x: -a * x[..., 1:],
                         diffusion_self=lambda b, x: np.broadcast_to(b, x.shape[:-1] + (1,))[..., None],
                         smooth_drift=lambda a, x: x[..., 1:] ** 2,
                         smooth_jacobian=lambda a, x: np.stack([np.zeros_like(x[..., :1]), 2 * x[..., 1:]], -1))
    state = ParticleSystemState(0.0, np.array([[1.0, 0.0]]))
    with pytest.raises(HypoellipticityViolation):
        hypo_matrix_aS(flat, [1.0, 0.5], state, 0)


def test_two_column_diffusion():
    s = 0.8
    model = FunctionModel((0, 2, 2), (0, 1, 1),
                          rough_drift_self=lambda a, x: -a * x,
                          diffusion_self=lambda b, x: np.broadcast_to(b[..., None, None] * np.eye(2),
                                                                      x.shape[:-1] + (2, 2)))
    state = ParticleSystemState(0.0, np.zeros((3, 2)))
    np.testing.assert_allclose(diffusion_matrix_aR(model, [s], state, 1), s * s * np.eye(2), atol=1e-15)


def test_register_model_roundtrip():
    register_model("test-ou", lambda: get_model("mfou"))
    assert "test-ou" in available_models()
    assert get_model("test-ou").d == 1


def test_default_bounds_contains_truth():
    lo, hi = default_bounds([2.0, -1.0, 0.0], margin=2.0)
    np.testing.assert_allclose(lo, [1.0, -2.0, -1.0])
    np.testing.assert_allclose(hi, [4.0, -0.5, 1.0])


state_arrays = st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3)), min_size=1, max_size=7).map(np.array)


@given(state_arrays, st.randoms())
def test_drift_permutation_invariance(X, rnd):
    for name in ("ifhn", "ilangevin1d"):
        model = get_model(name)
        _, alpha_R, _ = model.split(model.theta_true)
        perm = list(range(X.shape[0]))
        rnd.shuffle(perm)
        base = model.rough_drift_field(alpha_R, X)
        permuted = model.rough_drift_field(alpha_R, X[perm])
        np.testing.assert_allclose(permuted, base[perm], rtol=1e-13, atol=1e-13)


@given(st.tuples(st.floats(-3, 3), st.floats(-3, 3)))
def test_single_particle_is_self_plus_pair(x):
    x = np.array([x])
    for name in ("ifhn", "ilangevin1d"):
        model = get_model(name)
        _, alpha_R, _ = model.split(model.theta_true)
        pair = model.rough_drift_pair(alpha_R, x[:, None, :], x[None, :, :])
        expected = model.rough_drift_self(alpha_R, x) + (0 if pair is None else pair[:, 0])
        assert model.rough_drift_field(alpha_R, x)[0, 0] == expected[0, 0]


@given(state_arrays, st.floats(0.1, 2.0))
def test_field_override_matches_pair_mean(X, scale):
    # built-in fields use empirical moments; the generic O(N^2) pair mean is the oracle
    for name in ("ifhn", "ilangevin1d"):
        model = get_model(name)
        _, alpha_R, beta = model.split(np.array(model.theta_true) * scale)
        generic = ModelSpecOracle(model)
        np.testing.assert_allclose(model.rough_drift_field(alpha_R, X), generic.rough_drift_field(alpha_R, X),
                                   rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(model.diffusion_field(beta, X), generic.diffusion_field(beta, X),
                                   rtol=1e-12, atol=1e-12)


def ModelSpecOracle(model):
    from hypoips.model_core import ModelSpec

    class Oracle(ModelSpec):
        d_S, d_R, d_B = model.d_S, model.d_R, model.d_B

        def rough_drift_self(self, a, x):
            return model.rough_drift_self(a, x)

        def rough_drift_pair(self, a, x, w):
            return model.rough_drift_pair(a, x, w)

        def diffusion_self(self, b, x):
            return model.diffusion_self(b, x)

        def diffusion_pair(self, b, x, w):
            return model.diffusion_pair(b, x, w)

    return Oracle()


@given(state_arrays, st.floats(0.2, 3.0), st.floats(0.2, 3.0))
def test_diffusion_matrices_spd(X, c, sigma):
    for model, theta in ((get_model("ifhn"), [0.2, 0.8, c, 2.0, sigma]),
                         (get_model("ilangevin1d"), [2.0, 1.5, 2.0, sigma])):
        state = ParticleSystemState(0.0, X)
        for i in range(X.shape[0]):
            aR = diffusion_matrix_aR(model, model.split(theta)[2], state, i)
            aS = hypo_matrix_aS(model, theta, state, i)
            for a in (aR, aS):
                np.testing.assert_allclose(a, a.T, atol=1e-14)
                assert np.all(np.linalg.eigvalsh(a) > 0)


@given(state_arrays)
def test_smooth_jacobian_matches_finite_differences(X):
    for name in ("ifhn", "ilangevin1d"):
        model = get_model(name)
        alpha_S = model.split(model.theta_true)[0]
        J = model.smooth_jacobian(alpha_S, X)
        h = 1e-6
        for c in range(model.d):
            e = np.zeros(model.d)
            e[c] = h
            fd = (model.smooth_drift(alpha_S, X + e) - model.smooth_drift(alpha_S, X - e)) / (2 * h)
            np.testing.assert_allclose(J[..., c], fd, atol=1e-7)
