import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentmp.promp import (BasisConfig, MovementParams, Trajectory, decode,
                            encode, rbf_features, rbf_matrix)

# Frozen from an independent scalar evaluation of the normalized-Gaussian
# formula (math.exp loop, centers linspace(0,1,5), width 0.1, phase 0.3).
RBF_ORACLE_5_01_03 = np.array([
    0.010796111749647622,
    0.8576413851802899,
    0.13152356618916186,
    3.893685864858544e-05,
    2.2252444841037813e-11,
])


def min_jerk_traj(q0, q1, duration, n, rng=None):
    s = np.linspace(0, 1, n)
    prof = 10 * s**3 - 15 * s**4 + 6 * s**5
    q = q0[None, :] + prof[:, None] * (q1 - q0)[None, :]
    return Trajectory(times=s * duration, positions=q)


class TestRbfFeatures:
    def test_single_basis_is_one(self):
        assert rbf_features(0.37, BasisConfig(n_basis=1)) == pytest.approx([1.0])

    def test_two_basis_symmetry(self):
        feats = rbf_features(0.5, BasisConfig(n_basis=2))
        np.testing.assert_allclose(feats, [0.5, 0.5], atol=1e-15)

    def test_matches_independent_oracle(self):
        feats = rbf_features(0.3, BasisConfig(n_basis=5, width=0.1))
        np.testing.assert_allclose(feats, RBF_ORACLE_5_01_03, rtol=1e-12)

    def test_phase_domain_error(self):
        with pytest.raises(ValueError):
            rbf_features(-0.01, BasisConfig())
        with pytest.raises(ValueError):
            rbf_features(1.01, BasisConfig())

    @given(st.floats(0.0, 1.0), st.integers(1, 30))
    @settings(max_examples=100, deadline=None)
    def test_normalization_property(self, phase, n_basis):
        feats = rbf_features(phase, BasisConfig(n_basis=n_basis))
        assert abs(feats.sum() - 1.0) < 1e-12
        assert np.all(feats > 0) and np.all(feats <= 1.0)


class TestEncodeDecode:
    def test_constant_trajectory_roundtrip(self):
        cfg = BasisConfig(n_basis=20, ridge_lambda=1e-8)
        traj = Trajectory(times=np.linspace(0, 2, 100),
                          positions=np.full((100, 2), 0.7))
        out = decode(encode(traj, cfg), cfg, 100)
        np.testing.assert_allclose(out.positions, 0.7, atol=1e-6)

    def test_parameter_count_matches_contract(self):
        cfg = BasisConfig(n_basis=20)
        rng = np.random.default_rng(0)
        traj = min_jerk_traj(rng.normal(size=2), rng.normal(size=2), 2.0, 100)
        assert encode(traj, cfg).dim == 41

    def test_roundtrip_rmse_against_normal_equations(self):
        # oracle: plain normal-equations least squares on the same features
        cfg = BasisConfig(n_basis=20, ridge_lambda=1e-8)
        rng = np.random.default_rng(1)
        q0, q1 = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
        traj = min_jerk_traj(q0, q1, 2.0, 100)
        phases = traj.times / traj.times[-1]
        phi = rbf_matrix(phases, cfg)
        w_ref = np.linalg.solve(phi.T @ phi, phi.T @ traj.positions)
        rmse_ref = np.sqrt(np.mean((phi @ w_ref - traj.positions) ** 2))

        out = decode(encode(traj, cfg), cfg, 100)
        rmse = np.sqrt(np.mean((out.positions - traj.positions) ** 2))
        assert rmse <= rmse_ref + 1e-6

    def test_roundtrip_rmse_small_for_min_jerk(self):
        cfg = BasisConfig(n_basis=20)
        rng = np.random.default_rng(2)
        for _ in range(5):
            traj = min_jerk_traj(rng.uniform(-2, 2, 2), rng.uniform(-2, 2, 2), 2.0, 100)
            out = decode(encode(traj, cfg), cfg, 100)
            rmse = np.sqrt(np.mean((out.positions - traj.positions) ** 2, axis=0))
            assert np.all(rmse < 1e-3)

    def test_decode_constant_weights(self):
        cfg = BasisConfig(n_basis=7)
        params = MovementParams(weights=np.full(7, 1.3), duration_raw=1.0)
        traj = decode(params, cfg, 50)
        np.testing.assert_allclose(traj.positions, 1.3, atol=1e-12)

    def test_decode_times_evenly_spaced(self):
        params = MovementParams(weights=np.zeros(20), duration_raw=2.0)
        traj = decode(params, BasisConfig(), 5)
        np.testing.assert_allclose(traj.times, [0, 0.5, 1.0, 1.5, 2.0])

    def test_duration_clamped(self):
        params = MovementParams(weights=np.zeros(20), duration_raw=1e-4)
        assert decode(params, BasisConfig(), 10).times[-1] == pytest.approx(0.1)
        params = MovementParams(weights=np.zeros(20), duration_raw=100.0)
        assert decode(params, BasisConfig(), 10).times[-1] == pytest.approx(30.0)

    def test_zero_duration_errors(self):
        with pytest.raises(ValueError):
            Trajectory(times=np.array([1.0, 1.0]), positions=np.zeros((2, 2)))

    def test_projection_idempotence(self):
        # with negligible ridge the encode map is a projection
        cfg = BasisConfig(n_basis=20, ridge_lambda=0.0)
        rng = np.random.default_rng(3)
        traj = min_jerk_traj(rng.uniform(-2, 2, 2), rng.uniform(-2, 2, 2), 1.7, 120)
        w1 = encode(traj, cfg)
        w2 = encode(decode(w1, cfg, 120), cfg)
        np.testing.assert_allclose(w2.to_vector(), w1.to_vector(), atol=1e-10)


class TestTrajectoryValidation:
    def test_rejects_short(self):
        with pytest.raises(ValueError):
            Trajectory(times=np.array([0.0]), positions=np.zeros((1, 2)))

    def test_rejects_nonmonotone(self):
        with pytest.raises(ValueError):
            Trajectory(times=np.array([0.0, 0.2, 0.1]), positions=np.zeros((3, 2)))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Trajectory(times=np.array([0.0, np.nan]), positions=np.zeros((2, 2)))

    def test_rejects_negative_start(self):
        with pytest.raises(ValueError):
            Trajectory(times=np.array([-0.5, 0.5]), positions=np.zeros((2, 2)))
