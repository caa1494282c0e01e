"""Contact geometry tests.

Oracles: closed-form plane/capsule distances, brute-force cross-section
angle search, and invariance of body-frame quantities under common rigid
transforms of rod and obstacle.
"""

import numpy as np
import pytest

from cosrod.contact import (
    CapsuleObstacle,
    ContactPair,
    PlaneObstacle,
    RodSurrogate,
    SurfaceCoord,
    TubeObstacle,
    ad_contact_body,
    contact_frame,
    cross_section_offset,
    generate_contact_nodes,
    normal_gap,
    select_beta,
    slip_velocity,
    surface_point,
)
from cosrod.errors import ConfigError, DegenerateFrameError
from cosrod.liegroup import Pose, exp_so3, log_so3, so3_left_jacobian
from cosrod.rod import ArcGrid, GeneralizedState, Material, RodGeometry, RodModel


def make_model(n=4, m=None, length=1.0, radius=0.02, gradient=0.0):
    geom = RodGeometry(length=length, base_radius=radius, radial_gradient=gradient)
    mat = Material(young_modulus=1e6, poisson_ratio=0.3, density=1e3)
    return RodModel(geom, mat, ArcGrid(n, m))


def straight_state(model, p0=(0.0, 0.0, 0.0), phi=(0.0, 0.0, 0.0), qdot=None):
    theta = np.zeros((model.n + 1, 6))
    st = GeneralizedState.from_parts(phi, p0, theta)
    if qdot is not None:
        st.qdot[:] = qdot
    return st


def planar_state(model, rng, height):
    """Random configuration confined to a horizontal plane at z=height."""
    n = model.n
    theta = np.zeros((n + 1, 6))
    theta[:, 2] = rng.uniform(-1.2, 1.2, n + 1)    # in-plane curvature
    theta[:, 3] = rng.uniform(-0.1, 0.1, n + 1)    # stretch deviation
    theta[:, 4] = rng.uniform(-0.1, 0.1, n + 1)    # in-plane shear
    phi = np.array([0.0, 0.0, rng.uniform(-1.0, 1.0)])
    p0 = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), height])
    return GeneralizedState.from_parts(phi, p0, theta)


def spatial_state(model, rng):
    n = model.n
    theta = rng.uniform(-0.8, 0.8, (n + 1, 6))
    theta[:, 3] = rng.uniform(-0.2, 0.2, n + 1)    # keep stretch near one
    phi = rng.uniform(-0.8, 0.8, 3)
    p0 = rng.uniform(-0.3, 0.3, 3)
    return GeneralizedState.from_parts(phi, p0, theta)


def angle_diff(a, b):
    return abs((a - b + np.pi) % (2.0 * np.pi) - np.pi)


class TestSurfaceFrame:
    def test_surface_coord_validation(self):
        with pytest.raises(ConfigError):
            SurfaceCoord(1.2, 0.0)
        assert SurfaceCoord(0.5, -np.pi / 2).beta == pytest.approx(1.5 * np.pi)

    def test_surface_point_straight_rod(self):
        model = make_model()
        st = straight_state(model, p0=(0.0, 0.0, 0.5))
        cache = model.kinematics(st.q, st.qdot)
        r = model.geometry.base_radius
        p = surface_point(cache, SurfaceCoord(0.5, np.pi / 2), model.geometry)
        np.testing.assert_allclose(p, [0.5, 0.0, 0.5 + r], atol=1e-12)

    def test_frame_orthonormal_right_handed(self):
        rng = np.random.default_rng(7)
        model = make_model(n=3)
        for _ in range(30):
            st = spatial_state(model, rng)
            cache = model.kinematics(st.q, st.qdot)
            s = float(rng.choice(cache.grid.eval_s))
            beta = rng.uniform(0.0, 2.0 * np.pi)
            frame = contact_frame(cache, SurfaceCoord(s, beta), model.geometry)
            np.testing.assert_allclose(
                frame.R.T @ frame.R, np.eye(3), atol=1e-12)
            assert np.linalg.det(frame.R) == pytest.approx(1.0, abs=1e-12)

    def test_normal_points_into_body(self):
        model = make_model()
        st = straight_state(model)
        cache = model.kinematics(st.q, st.qdot)
        r = model.geometry.base_radius
        for beta in np.linspace(0.0, 2.0 * np.pi, 9):
            coord = SurfaceCoord(0.5, beta)
            frame = contact_frame(cache, coord, model.geometry)
            d = cross_section_offset(model.geometry, 0.5, beta)
            # inward: the normal opposes the radial offset exactly
            assert frame.R[:, 0] @ d == pytest.approx(-r, abs=1e-14)

    def test_first_tangent_along_arc(self):
        model = make_model()
        st = straight_state(model)
        cache = model.kinematics(st.q, st.qdot)
        frame = contact_frame(cache, SurfaceCoord(0.25, 1.0), model.geometry)
        np.testing.assert_allclose(frame.R[:, 1], [1.0, 0.0, 0.0], atol=1e-14)

    def test_conical_normal_tilt(self):
        # widening rod: inward normal leans toward the tip by atan(k)
        gradient = 0.05
        model = make_model(radius=0.02, gradient=gradient)
        st = straight_state(model)
        cache = model.kinematics(st.q, st.qdot)
        rng = np.random.default_rng(3)
        for _ in range(10):
            beta = rng.uniform(0.0, 2.0 * np.pi)
            frame = contact_frame(cache, SurfaceCoord(0.5, beta), model.geometry)
            radial_in = -np.array([0.0, np.cos(beta), np.sin(beta)])
            tilt = np.arccos(np.clip(frame.R[:, 0] @ radial_in, -1.0, 1.0))
            assert tilt == pytest.approx(np.arctan(gradient), abs=1e-12)
            # the lean is toward +x (the wide end pushes the normal forward)
            assert frame.R[:, 0] @ np.array([1.0, 0.0, 0.0]) > 0.0

    def test_degenerate_frame_raises(self):
        model = make_model()
        theta = np.zeros((model.n + 1, 6))
        theta[:, 3] = -1.0    # cancels the reference stretch: zero tangent
        st = GeneralizedState.from_parts(np.zeros(3), np.zeros(3), theta)
        cache = model.kinematics(st.q, st.qdot)
        with pytest.raises(DegenerateFrameError):
            contact_frame(cache, SurfaceCoord(0.5, 0.3), model.geometry)


class TestPlane:
    def test_sdf_and_project(self):
        plane = PlaneObstacle(point=(0.0, 0.0, 1.0), normal=(0.0, 0.0, 2.0))
        assert plane.sdf([1.0, 2.0, 3.0]) == pytest.approx(2.0)
        np.testing.assert_allclose(
            plane.sdf(np.array([[0, 0, 1.0], [0, 0, 0.0]])), [0.0, -1.0])
        surf, nrm, d = plane.project(np.array([5.0, -1.0, 4.0]))
        np.testing.assert_allclose(surf, [5.0, -1.0, 1.0])
        np.testing.assert_allclose(nrm, [0.0, 0.0, 1.0])
        assert d == pytest.approx(3.0)
        with pytest.raises(ConfigError):
            PlaneObstacle((0, 0, 0), (0, 0, 0))

    def test_gap_equals_plane_distance(self):
        # planar rod over a horizontal plane: gap is the exact signed distance
        rng = np.random.default_rng(11)
        model = make_model(n=5, m=6)
        plane = PlaneObstacle(point=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0))
        for height in (0.5, 0.021, 0.015):    # separated, grazing, penetrating
            st = planar_state(model, rng, height)
            cache = model.kinematics(st.q, st.qdot)
            pairs = generate_contact_nodes(cache, model.geometry, [plane])
            assert len(pairs) == model.grid.m + 1
            for pair in pairs:
                np.testing.assert_allclose(
                    normal_gap(pair), plane.sdf(pair.master.p), atol=1e-12)

    def test_gap_sign_convention(self):
        model = make_model()
        plane = PlaneObstacle(point=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0))
        r = model.geometry.base_radius
        for height, sign in ((0.1, 1.0), (0.01, -1.0)):
            st = straight_state(model, p0=(0.0, 0.0, height))
            cache = model.kinematics(st.q, st.qdot)
            pairs = generate_contact_nodes(cache, model.geometry, [plane])
            for pair in pairs:
                assert np.sign(normal_gap(pair)) == sign
                assert normal_gap(pair) == pytest.approx(height - r, abs=1e-12)

    def test_selected_beta_is_lowest_point(self):
        model = make_model()
        st = straight_state(model, p0=(0.0, 0.0, 0.2))
        cache = model.kinematics(st.q, st.qdot)
        plane = PlaneObstacle(point=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0))
        pairs = generate_contact_nodes(cache, model.geometry, [plane])
        for pair in pairs:
            assert angle_diff(pair.beta, 1.5 * np.pi) < 1e-12

    def test_master_point_on_surface(self):
        rng = np.random.default_rng(4)
        model = make_model(n=3, m=5)
        plane = PlaneObstacle(point=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0))
        st = planar_state(model, rng, 0.3)
        cache = model.kinematics(st.q, st.qdot)
        for pair in generate_contact_nodes(cache, model.geometry, [plane]):
            p = surface_point(
                cache, SurfaceCoord(pair.s, pair.beta), model.geometry)
            np.testing.assert_allclose(pair.master.p, p, atol=1e-14)


class TestCapsule:
    def test_sdf_oracle(self):
        cap = CapsuleObstacle(end_a=(0, -1, 0), end_b=(0, 1, 0), radius=0.5)
        assert cap.sdf([0.0, 0.0, 2.0]) == pytest.approx(1.5)
        assert cap.sdf([0.0, 3.0, 0.0]) == pytest.approx(1.5)   # beyond the cap
        assert cap.sdf([0.0, 0.0, 0.0]) == pytest.approx(-0.5)
        vals = cap.sdf(np.array([[0, 0, 2.0], [0, 3.0, 0]]))
        np.testing.assert_allclose(vals, [1.5, 1.5])
        with pytest.raises(ConfigError):
            CapsuleObstacle((0, 0, 0), (1, 0, 0), radius=0.0)

    def test_crossing_rod_gap(self):
        height = 0.1
        model = make_model()
        cap = CapsuleObstacle(end_a=(0, -1, 0), end_b=(0, 1, 0), radius=0.05)
        st = straight_state(model, p0=(-0.5, 0.0, height))
        cache = model.kinematics(st.q, st.qdot)
        pairs = generate_contact_nodes(cache, model.geometry, [cap])
        r = model.geometry.base_radius
        mid = pairs[2]    # node above the capsule axis
        assert mid.s == pytest.approx(0.5)
        assert normal_gap(mid) == pytest.approx(height - r - 0.05, abs=1e-12)
        for pair in pairs:
            # gap measured along a tilted normal never exceeds true clearance
            assert normal_gap(pair) <= cap.sdf(pair.master.p) + 1e-12
            assert normal_gap(pair) > 0.0

    def test_projection_from_axis(self):
        cap = CapsuleObstacle(end_a=(0, 0, 0), end_b=(0, 4, 0), radius=0.3)
        surf, nrm, d = cap.project(np.array([0.0, 2.0, 0.0]))
        assert d == pytest.approx(-0.3)
        assert np.linalg.norm(nrm) == pytest.approx(1.0)
        assert np.linalg.norm(surf - np.array([0.0, 2.0, 0.0])) == (
            pytest.approx(0.3))


class TestTube:
    def make_tube(self):
        return TubeObstacle(
            center=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0),
            start_dir=(1.0, 0.0, 0.0), arc_angle=np.pi / 2,
            major_radius=0.03, bore_radius=0.004, wall_thickness=0.002,
        )

    def test_validation(self):
        with pytest.raises(ConfigError):
            TubeObstacle((0, 0, 0), (0, 0, 1), (0, 0, 1), np.pi, 0.03, 0.004,
                         0.002)
        with pytest.raises(ConfigError):
            TubeObstacle((0, 0, 0), (0, 0, 1), (1, 0, 0), np.pi, 0.03, 0.05,
                         0.002)

    def test_sdf_oracle_points(self):
        tube = self.make_tube()
        # on the bore centerline at mid-arc
        ang = np.pi / 4
        on_arc = 0.03 * np.array([np.cos(ang), np.sin(ang), 0.0])
        assert tube.sdf(on_arc) == pytest.approx(0.004)
        # centered inside the wall
        mid = (0.03 - 0.005) * np.array([np.cos(ang), np.sin(ang), 0.0])
        assert tube.sdf(mid) == pytest.approx(-0.001)
        # outside the outer wall, axially above the arc
        above = on_arc + np.array([0.0, 0.0, 0.01])
        assert tube.sdf(above) == pytest.approx(0.01 - 0.006)

    def test_projection_inner_wall(self):
        tube = self.make_tube()
        ang = 0.8
        arc = 0.03 * np.array([np.cos(ang), np.sin(ang), 0.0])
        p = arc + np.array([0.0, 0.0, 0.003])
        surf, nrm, d = tube.project(p)
        assert d == pytest.approx(0.001)
        np.testing.assert_allclose(nrm, [0.0, 0.0, -1.0], atol=1e-12)
        np.testing.assert_allclose(surf, arc + [0, 0, 0.004], atol=1e-12)

    def test_beta_matches_brute_force(self):
        tube = self.make_tube()
        rng = np.random.default_rng(21)
        rod_r = 0.0005
        for _ in range(12):
            ang = rng.uniform(0.1, np.pi / 2 - 0.1)
            arc = 0.03 * np.array([np.cos(ang), np.sin(ang), 0.0])
            # rod point inside the bore, off-center toward the wall
            off = rng.uniform(-1.0, 1.0, 3)
            off -= off @ np.array([-np.sin(ang), np.cos(ang), 0.0]) * np.array(
                [-np.sin(ang), np.cos(ang), 0.0])
            off = off / np.linalg.norm(off) * rng.uniform(0.001, 0.0025)
            p = arc + off
            R = exp_so3(rng.uniform(-2.0, 2.0, 3))
            beta = select_beta(tube, R, p, rod_r)

            grid = np.linspace(0.0, 2.0 * np.pi, 4096, endpoint=False)
            ring = p + (np.cos(grid)[:, None] * R[:, 1]
                        + np.sin(grid)[:, None] * R[:, 2]) * rod_r
            vals = tube.sdf(ring)
            k = int(np.argmin(vals))
            # refine the brute-force angle the same quadratic way
            h = 2.0 * np.pi / 4096
            f0, f1, f2 = vals[k - 1], vals[k], vals[(k + 1) % 4096]
            denom = f0 - 2.0 * f1 + f2
            b_ref = grid[k] + (0.5 * h * (f0 - f2) / denom if denom > 0 else 0.0)
            assert angle_diff(beta, b_ref) < 1e-3


class TestLipschitz:
    def sample(self, obstacle, rng, lo, hi):
        p = rng.uniform(lo, hi, (200, 3))
        q = p + rng.uniform(-0.02, 0.02, (200, 3))
        dp = np.abs(obstacle.sdf(p) - obstacle.sdf(q))
        np.testing.assert_array_less(dp, np.linalg.norm(p - q, axis=1) + 1e-9)

    def test_plane(self):
        rng = np.random.default_rng(5)
        self.sample(PlaneObstacle((0.1, 0, 0.3), (1.0, 2.0, -0.5)), rng, -1, 1)

    def test_capsule(self):
        rng = np.random.default_rng(6)
        self.sample(CapsuleObstacle((0, -0.5, 0), (0.2, 0.5, 0.1), 0.2), rng,
                    -1, 1)

    def test_tube(self):
        rng = np.random.default_rng(8)
        tube = TubeObstacle((0, 0, 0), (0, 0, 1), (1, 0, 0), np.pi / 2,
                            0.03, 0.004, 0.002)
        self.sample(tube, rng, -0.05, 0.05)

    def test_rod_surrogate(self):
        rng = np.random.default_rng(9)
        model = make_model()
        st = spatial_state(model, rng)
        cache = model.kinematics(st.q, st.qdot)
        self.sample(RodSurrogate(0, cache, model.geometry), rng, -1, 1)


class TestSlipVelocity:
    def setup_pair(self, model, st):
        cache = model.kinematics(st.q, st.qdot)
        plane = PlaneObstacle(point=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0))
        pairs = generate_contact_nodes(cache, model.geometry, [plane])
        return cache, pairs

    def test_static_rod(self):
        model = make_model()
        st = straight_state(model, p0=(0.0, 0.0, 0.02))
        cache, pairs = self.setup_pair(model, st)
        for pair in pairs:
            vt = slip_velocity(pair, cache.eta[pair.eval_idx],
                               cache.pose(pair.eval_idx))
            np.testing.assert_allclose(vt, 0.0, atol=1e-14)

    def test_axial_slide(self):
        model = make_model()
        st = straight_state(model, p0=(0.0, 0.0, 0.02))
        st.qdot[3] = 0.3    # base translation along the rod axis
        cache, pairs = self.setup_pair(model, st)
        for pair in pairs:
            vt = slip_velocity(pair, cache.eta[pair.eval_idx],
                               cache.pose(pair.eval_idx))
            np.testing.assert_allclose(vt, [0.3, 0.0], atol=1e-12)

    def test_spin_about_axis(self):
        w = 2.0
        model = make_model()
        st = straight_state(model, p0=(0.0, 0.0, 0.02))
        st.qdot[0] = w    # spin about the rod axis through the centerline
        cache, pairs = self.setup_pair(model, st)
        r = model.geometry.base_radius
        for pair in pairs:
            vt = slip_velocity(pair, cache.eta[pair.eval_idx],
                               cache.pose(pair.eval_idx))
            np.testing.assert_allclose(vt, [0.0, r * w], atol=1e-12)

    def test_matching_slave_motion_cancels(self):
        model = make_model()
        st = straight_state(model, p0=(0.0, 0.0, 0.02))
        st.qdot[3:6] = [0.2, 0.1, 0.0]
        cache, pairs = self.setup_pair(model, st)
        for pair in pairs:
            # slave translating with the same world velocity
            v_slave = pair.slave.R.T @ np.array([0.2, 0.1, 0.0])
            pair.slave_twist = np.concatenate([np.zeros(3), v_slave])
            vt = slip_velocity(pair, cache.eta[pair.eval_idx],
                               cache.pose(pair.eval_idx))
            np.testing.assert_allclose(vt, 0.0, atol=1e-12)


class TestRigidInvariance:
    def transformed(self, model, st, Rg, tg):
        phi_new = log_so3(Rg @ exp_so3(st.phi))
        p_new = Rg @ st.p0 + tg
        st2 = GeneralizedState.from_parts(phi_new, p_new, st.theta.copy())
        # same body twist: spatial angular velocity rotates with the frame
        Jl_old = so3_left_jacobian(st.phi)
        Jl_new = so3_left_jacobian(phi_new)
        st2.qdot[:3] = np.linalg.solve(Jl_new, Rg @ (Jl_old @ st.qdot[:3]))
        st2.qdot[3:6] = Rg @ st.qdot[3:6]
        st2.qdot[6:] = st.qdot[6:]
        return st2

    def test_gap_and_slip_invariant(self):
        rng = np.random.default_rng(13)
        model = make_model(n=3, m=4)
        plane = PlaneObstacle(point=(0.0, 0.0, -0.1), normal=(0.1, 0.2, 1.0))
        for _ in range(5):
            st = spatial_state(model, rng)
            st.qdot[:] = rng.uniform(-0.5, 0.5, st.qdot.size)
            cache = model.kinematics(st.q, st.qdot)
            pairs = generate_contact_nodes(cache, model.geometry, [plane])

            Rg = exp_so3(rng.uniform(-0.6, 0.6, 3))
            tg = rng.uniform(-0.5, 0.5, 3)
            plane2 = PlaneObstacle(Rg @ plane.point + tg, Rg @ plane.normal)
            st2 = self.transformed(model, st, Rg, tg)
            cache2 = model.kinematics(st2.q, st2.qdot)
            pairs2 = generate_contact_nodes(cache2, model.geometry, [plane2])

            for a, b in zip(pairs, pairs2):
                assert angle_diff(a.beta, b.beta) < 1e-9
                assert normal_gap(a) == pytest.approx(normal_gap(b), abs=1e-12)
                va = slip_velocity(a, cache.eta[a.eval_idx],
                                   cache.pose(a.eval_idx))
                vb = slip_velocity(b, cache2.eta[b.eval_idx],
                                   cache2.pose(b.eval_idx))
                np.testing.assert_allclose(va, vb, atol=1e-11)


class TestRodSurrogate:
    def parallel_rods(self, gap_z, slave_qdot=None):
        master = make_model()
        slave = make_model()
        st_m = straight_state(master, p0=(0.0, 0.0, gap_z))
        st_s = straight_state(slave, p0=(0.0, 0.0, 0.0))
        if slave_qdot is not None:
            st_s.qdot[:6] = slave_qdot
        cache_m = master.kinematics(st_m.q, st_m.qdot)
        cache_s = slave.kinematics(st_s.q, st_s.qdot)
        surrogate = RodSurrogate(1, cache_s, slave.geometry)
        pairs = generate_contact_nodes(cache_m, master.geometry, [surrogate])
        return master, cache_m, pairs

    def test_parallel_gap(self):
        height = 0.1
        master, cache, pairs = self.parallel_rods(height)
        r = master.geometry.base_radius
        for pair in pairs:
            assert normal_gap(pair) == pytest.approx(height - 2 * r, abs=1e-9)
            assert pair.slave_rod[0] == 1
            assert pair.slave_rod[1] == pytest.approx(pair.s, abs=1e-6)

    def test_static_slave_twist(self):
        _, _, pairs = self.parallel_rods(0.1)
        for pair in pairs:
            np.testing.assert_allclose(pair.slave_twist, 0.0, atol=1e-14)

    def test_moving_slave_slip(self):
        u = 0.4
        master, cache, pairs = self.parallel_rods(
            0.1, slave_qdot=[0.0, 0.0, 0.0, u, 0.0, 0.0])
        for pair in pairs:
            vt = slip_velocity(pair, cache.eta[pair.eval_idx],
                               cache.pose(pair.eval_idx))
            np.testing.assert_allclose(vt, [-u, 0.0], atol=1e-9)


class TestGeneration:
    def test_no_obstacles(self):
        model = make_model()
        st = straight_state(model)
        cache = model.kinematics(st.q, st.qdot)
        assert generate_contact_nodes(cache, model.geometry, []) == []

    def test_nearest_obstacle_wins(self):
        model = make_model()
        below = PlaneObstacle((0.0, 0.0, 0.0), (0.0, 0.0, 1.0))
        above = PlaneObstacle((0.0, 0.0, 1.0), (0.0, 0.0, -1.0))
        st = straight_state(model, p0=(0.0, 0.0, 0.2))
        cache = model.kinematics(st.q, st.qdot)
        pairs = generate_contact_nodes(cache, model.geometry, [below, above])
        assert all(pair.obstacle is below for pair in pairs)

    def test_slave_frame_shares_orientation(self):
        model = make_model()
        plane = PlaneObstacle((0.0, 0.0, 0.0), (0.0, 0.0, 1.0))
        st = straight_state(model, p0=(0.0, 0.0, 0.1))
        cache = model.kinematics(st.q, st.qdot)
        for pair in generate_contact_nodes(cache, model.geometry, [plane]):
            np.testing.assert_array_equal(pair.master.R, pair.slave.R)

    def test_ad_contact_body_reciprocal(self):
        # mapping the node twist into the contact frame preserves the screw
        rng = np.random.default_rng(17)
        model = make_model(n=3)
        plane = PlaneObstacle((0.0, 0.0, -0.5), (0.0, 0.0, 1.0))
        st = spatial_state(model, rng)
        st.qdot[:] = rng.uniform(-0.5, 0.5, st.qdot.size)
        cache = model.kinematics(st.q, st.qdot)
        for pair in generate_contact_nodes(cache, model.geometry, [plane]):
            Ad = ad_contact_body(pair, cache.pose(pair.eval_idx))
            eta_c = Ad @ cache.eta[pair.eval_idx]
            # angular part is frame-rotated only
            R_cb = pair.master.R.T @ cache.R[pair.eval_idx]
            np.testing.assert_allclose(
                eta_c[:3], R_cb @ cache.eta[pair.eval_idx][:3], atol=1e-12)
