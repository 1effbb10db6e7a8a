import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tactforce import geometry as geo


def rot_z(angle):
    return geo.rotation_about([0.0, 0.0, 1.0], angle)


def homogeneous_fk_oracle(q, chain):
    """Independent FK via explicit 4x4 homogeneous matrix products."""
    def hom(r, t):
        m = np.eye(4)
        m[:3, :3] = r
        m[:3, 3] = t
        return m

    total = hom(chain.base_pose.rotation, chain.base_pose.translation)
    for j in range(4):
        total = total @ hom(geo.rotation_about(chain.joint_axes[j], q[j]), np.zeros(3))
        total = total @ hom(np.eye(3), [chain.link_lengths[j], 0.0, 0.0])
    return total[:3, :3], total[:3, 3]


class TestProjectToCommon:
    def test_identity_rotations_sum(self):
        layout = geo.ArrayLayout("two", 2, (1, 2), np.tile(np.eye(3), (2, 1, 1)),
                                 np.zeros((2, 3)))
        z = geo.project_to_common(np.array([1.0, 0, 0, 0, 1.0, 0]), layout)
        assert np.allclose(z, [1.0, 1.0, 0.0])

    def test_antipodal_cancellation(self):
        rots = np.stack([np.eye(3), rot_z(np.pi)])
        layout = geo.ArrayLayout("two", 2, (1, 2), rots, np.zeros((2, 3)))
        z = geo.project_to_common(np.array([1.0, 0, 0, 1.0, 0, 0]), layout)
        assert np.max(np.abs(z)) < 1e-12

    def test_matches_naive_loop(self, fingertip):
        rng = np.random.default_rng(42)
        x = rng.normal(size=3 * fingertip.n)
        z = geo.project_to_common(x, fingertip)
        naive = np.zeros(3)
        for i in range(fingertip.n):
            naive += fingertip.rotations[i] @ x[3 * i:3 * i + 3]
        assert np.max(np.abs(z - naive)) < 1e-12

    def test_wrong_length_rejected(self, fingertip):
        with pytest.raises(geo.ShapeError):
            geo.project_to_common(np.zeros(10), fingertip)

    @given(alpha=st.floats(-5, 5), beta=st.floats(-5, 5), seed=st.integers(0, 100))
    @settings(max_examples=25, deadline=None)
    def test_linearity(self, alpha, beta, seed):
        layout = geo.fingertip_layout()
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(2, 3 * layout.n))
        lhs = geo.project_to_common(alpha * x + beta * y, layout)
        rhs = alpha * geo.project_to_common(x, layout) + beta * geo.project_to_common(y, layout)
        assert np.max(np.abs(lhs - rhs)) < 1e-12

    def test_common_rotation_equivariance(self, fingertip):
        q_rot = geo.rotation_about(np.array([1.0, 2.0, 2.0]) / 3.0, 0.7)
        rotated = geo.ArrayLayout(
            "rot", fingertip.n, fingertip.grid,
            np.einsum("ij,njk->nik", q_rot, fingertip.rotations),
            fingertip.taxel_positions)
        x = np.random.default_rng(3).normal(size=3 * fingertip.n)
        z = geo.project_to_common(x, fingertip)
        z_rot = geo.project_to_common(x, rotated)
        assert np.allclose(z_rot, q_rot @ z, atol=1e-13)


class TestPresets:
    @pytest.mark.parametrize("name,n,grid", [
        ("fingertip", 30, (6, 5)), ("phalanx", 16, (4, 4)), ("rect", 24, (6, 4))])
    def test_shapes(self, name, n, grid):
        layout = geo.preset_layout(name)
        assert layout.n == n and layout.grid == grid
        for r in layout.rotations:
            assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-9
            assert np.linalg.det(r) > 0

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            geo.preset_layout("nope")

    def test_layout_json_roundtrip(self, tmp_path, fingertip):
        path = tmp_path / "lay.json"
        fingertip.save(path)
        back = geo.ArrayLayout.load(path)
        assert back.array_id == fingertip.array_id
        assert np.max(np.abs(back.rotations - fingertip.rotations)) < 1e-12
        assert np.max(np.abs(back.taxel_positions - fingertip.taxel_positions)) < 1e-15


class TestQuaternions:
    @given(seed=st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        r = geo.rotation_about(axis, rng.uniform(-np.pi, np.pi))
        back = geo.quat_to_matrix(geo.matrix_to_quat(r))
        assert np.max(np.abs(back - r)) < 1e-12


class TestForwardKinematics:
    def test_zero_configuration(self, chain):
        res = geo.forward_kinematics(np.zeros(4), chain)
        expected = chain.base_pose.translation + np.array(
            [chain.link_lengths.sum(), 0.0, 0.0])
        assert np.allclose(res.pose.translation, expected)
        assert not res.clamped

    def test_single_joint_rotation(self, chain):
        res = geo.forward_kinematics([np.pi / 2, 0, 0, 0], chain)
        zero = geo.forward_kinematics(np.zeros(4), chain)
        rotated = rot_z(np.pi / 2) @ zero.pose.translation
        assert np.allclose(res.pose.translation, rotated, atol=1e-12)

    def test_matches_homogeneous_oracle(self, chain):
        rng = np.random.default_rng(7)
        for _ in range(20):
            q = rng.uniform(-1.2, 1.2, 4)
            res = geo.forward_kinematics(q, chain)
            r_o, p_o = homogeneous_fk_oracle(q, chain)
            assert np.max(np.abs(res.pose.translation - p_o)) < 1e-10
            assert np.max(np.abs(res.pose.rotation - r_o)) < 1e-10

    def test_out_of_limit_clamped(self, chain):
        res = geo.forward_kinematics([5.0, 0, 0, 0], chain)
        clamped = geo.forward_kinematics([chain.joint_limits[0, 1], 0, 0, 0], chain)
        assert res.clamped
        assert np.allclose(res.pose.translation, clamped.pose.translation)

    def test_chain_json_roundtrip(self, tmp_path, chain):
        path = tmp_path / "chain.json"
        chain.save(path)
        back = geo.FingerChain.load(path)
        q = [0.3, -0.2, 0.5, 0.1]
        assert np.allclose(geo.forward_kinematics(q, back).pose.translation,
                           geo.forward_kinematics(q, chain).pose.translation, atol=1e-12)


class TestJacobian:
    def test_finite_difference_agreement(self, chain):
        rng = np.random.default_rng(11)
        step = 1e-6
        for _ in range(100):
            q = rng.uniform(-1.2, 1.2, 4)
            jac = geo.jacobian(q, chain)
            fd = np.empty((3, 4))
            for j in range(4):
                e = np.zeros(4)
                e[j] = step
                up = geo.forward_kinematics(q + e, chain).pose.translation
                dn = geo.forward_kinematics(q - e, chain).pose.translation
                fd[:, j] = (up - dn) / (2 * step)
            scale = max(np.max(np.abs(fd)), 1e-9)
            assert np.max(np.abs(jac - fd)) / scale < 1e-5

    def test_planar_two_link_signs(self, chain):
        # q1 = 0 keeps joints 2..4 planar in xz; flexing joint 2 by t moves
        # the tip like the textbook planar arm: dx/dt = -l sin t, dz/dt = -l cos t
        t = 0.4
        jac = geo.jacobian([0.0, t, 0.0, 0.0], chain)
        distal = chain.link_lengths[1:].sum()  # joint 2 moves links 2..4 only
        assert jac[0, 1] == pytest.approx(-distal * np.sin(t), rel=1e-9)
        assert jac[2, 1] == pytest.approx(-distal * np.cos(t), rel=1e-9)
        assert abs(jac[1, 1]) < 1e-12

    def test_stretched_singularity(self, chain):
        jac = geo.jacobian(np.zeros(4), chain)
        assert np.linalg.svd(jac, compute_uv=False)[-1] < 1e-8


class TestGravityTorque:
    def test_zero_gravity(self, chain):
        assert np.allclose(geo.gravity_torque([0.1, 0.2, 0.3, 0.4], chain, np.zeros(3)), 0.0)

    def test_hanging_chain_zero_torque(self):
        base = geo.RigidTransform(geo.rotation_about([0, 1.0, 0], np.pi / 2), np.zeros(3))
        chain = geo.FingerChain(
            link_lengths=[0.05] * 4, link_masses=[0.05] * 4,
            link_coms=[[0.025, 0, 0]] * 4,
            joint_axes=[[0, 0, 1.0], [0, 1.0, 0], [0, 1.0, 0], [0, 1.0, 0]],
            base_pose=base, joint_limits=[[-2.5, 2.5]] * 4)
        tau = geo.gravity_torque(np.zeros(4), chain, [0.0, 0.0, -9.81])
        assert np.max(np.abs(tau)) < 1e-12

    def test_potential_gradient_oracle(self, chain):
        # U(q) = sum_i m_i g . com_i(q); gravity_torque claims its gradient
        g = np.array([0.3, -0.4, -9.6])

        def potential(q):
            frames = geo.chain_frames(q, chain)
            return float(np.sum(chain.link_masses[:, None] * frames[2] @ g))

        rng = np.random.default_rng(5)
        step = 1e-6
        for _ in range(20):
            q = rng.uniform(-1.2, 1.2, 4)
            tau = geo.gravity_torque(q, chain, g)
            fd = np.empty(4)
            for j in range(4):
                e = np.zeros(4)
                e[j] = step
                fd[j] = (potential(q + e) - potential(q - e)) / (2 * step)
            scale = max(np.max(np.abs(fd)), 1e-9)
            assert np.max(np.abs(tau - fd)) / scale < 1e-5

    def test_linear_in_g(self, chain):
        q = [0.2, 0.4, -0.3, 0.6]
        g1, g2 = np.array([1.0, 2.0, -3.0]), np.array([-0.5, 0.1, 9.0])
        lhs = geo.gravity_torque(q, chain, 2.0 * g1 - 0.7 * g2)
        rhs = 2.0 * geo.gravity_torque(q, chain, g1) - 0.7 * geo.gravity_torque(q, chain, g2)
        assert np.max(np.abs(lhs - rhs)) < 1e-12


class TestRigidTransform:
    def test_compose_apply(self):
        a = geo.RigidTransform(rot_z(0.3), np.array([1.0, 0, 0]))
        b = geo.RigidTransform(rot_z(-0.1), np.array([0, 2.0, 0]))
        p = np.array([0.5, -0.2, 0.7])
        assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-14)

    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            geo.RigidTransform(np.eye(3) * 1.1, np.zeros(3))
