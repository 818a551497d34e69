"""Controllers and grasp-frame math, checked against independent oracles."""

import json
import math

import numpy as np
import pytest

from tacgrasp.control import (
    ControllerConfig,
    GentleGraspConfig,
    GraspController,
    PidController,
    PidGains,
    VelocityConfig,
    grasp_frame_update,
    load_controller_config,
    rotation_sxyz,
    save_controller_config,
    scale,
    velocity_command,
)


# -- quaternion oracle (independent of the rotation-matrix path) -------------

def quat_from_axis_angle(axis, angle_rad):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = angle_rad / 2.0
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def quat_multiply(q1, q2):
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_rotate(q, v):
    qv = np.concatenate([[0.0], v])
    conj = q * np.array([1.0, -1, -1, -1])
    return quat_multiply(quat_multiply(q, qv), conj)[1:]


def angles_via_quaternions(euler_deg, gravity=(0.0, 0.0, -1.0)):
    a, b, g = (math.radians(v) for v in euler_deg)
    q = quat_multiply(
        quat_from_axis_angle([0, 0, 1], g),
        quat_multiply(
            quat_from_axis_angle([0, 1, 0], b), quat_from_axis_angle([1, 0, 0], a)
        ),
    )
    gv = np.asarray(gravity) / np.linalg.norm(gravity)
    x_axis = quat_rotate(q, np.array([1.0, 0.0, 0.0]))
    y_axis = quat_rotate(q, np.array([0.0, -1.0, 0.0]))
    tx = math.acos(float(np.clip(np.dot(gv, x_axis), -1, 1)))
    ty = math.acos(float(np.clip(np.dot(gv, y_axis), -1, 1)))
    return math.degrees(tx), math.degrees(ty)


class TestScale:
    def test_endpoints_exact(self):
        assert scale(0.0) == 1.0
        assert scale(90.0) == 0.0
        assert scale(180.0) == -1.0

    def test_affine(self):
        thetas = np.linspace(0.0, 180.0, 181)
        values = np.array([scale(t) for t in thetas])
        diffs = np.diff(values)
        assert np.allclose(diffs, diffs[0], atol=1e-12)

    def test_matches_triangular_cosine_wave(self):
        # oracle: 1 - (2a/pi) * arccos(cos(2*pi*theta/p)) with a=1, p=2*pi
        for deg in range(181):
            theta = math.radians(deg)
            oracle = 1.0 - (2.0 / math.pi) * math.acos(math.cos(theta))
            assert abs(scale(float(deg)) - oracle) < 1e-12


class TestGraspFrame:
    def test_identity_pose(self):
        state = grasp_frame_update((0.0, 0.0, 0.0))
        assert state.theta_x == pytest.approx(90.0, abs=1e-12)
        assert state.s_x == pytest.approx(0.0, abs=1e-12)
        assert state.theta_y == pytest.approx(90.0, abs=1e-12)

    def test_pitch_aligns_x_with_gravity(self):
        state = grasp_frame_update((0.0, 90.0, 0.0))
        assert state.theta_x == pytest.approx(0.0, abs=1e-6)
        assert state.s_x == pytest.approx(1.0, abs=1e-8)

    def test_roll_aligns_y_with_gravity(self):
        state = grasp_frame_update((90.0, 0.0, 0.0))
        assert state.theta_y == pytest.approx(0.0, abs=1e-6)
        assert state.s_y == pytest.approx(1.0, abs=1e-8)

    def test_rotation_composition_order(self):
        rng = np.random.default_rng(200)
        for _ in range(20):
            a, b, g = rng.uniform(-180, 180, 3)
            r = rotation_sxyz(a, b, g)
            manual = rotation_sxyz(0, 0, g) @ rotation_sxyz(0, b, 0) @ rotation_sxyz(a, 0, 0)
            np.testing.assert_allclose(r, manual, atol=1e-12)

    def test_quaternion_oracle_1000_random_triples(self):
        rng = np.random.default_rng(201)
        worst = 0.0
        for _ in range(1000):
            euler = tuple(rng.uniform(-180.0, 180.0, 3))
            state = grasp_frame_update(euler)
            otx, oty = angles_via_quaternions(euler)
            worst = max(worst, abs(math.radians(state.theta_x - otx)),
                        abs(math.radians(state.theta_y - oty)))
        assert worst < 1e-9

    def test_gravity_normalized(self):
        state = grasp_frame_update((0.0, 90.0, 0.0), gravity=(0.0, 0.0, -9.81))
        assert state.theta_x == pytest.approx(0.0, abs=1e-6)
        with pytest.raises(ValueError):
            grasp_frame_update((0, 0, 0), gravity=(0, 0, 0))


class TestPid:
    def test_zero_error_history_no_output(self):
        pid = PidController(PidGains(110.0, 0.05, 0.01))
        for _ in range(10):
            assert pid.step(0.0, 0.01) == 0.0

    def test_proportional_arithmetic(self):
        pid = PidController(PidGains(110.0, 0.0, 0.0))
        assert pid.step(0.1, 0.01) == pytest.approx(11.0)

    def test_derivative_of_ramp(self):
        pid = PidController(PidGains(0.0, 0.0, 1.0), integral_leak_s=0.0)
        dt = 0.1
        out = [pid.step(k * dt, dt) for k in range(5)]
        assert out[1:] == pytest.approx([1.0, 1.0, 1.0, 1.0])

    def test_integral_clamped(self):
        pid = PidController(PidGains(0.0, 1.0, 0.0), integral_limit=10.0,
                            integral_leak_s=0.0)
        for _ in range(10000):
            pid.step(100.0, 0.01)
        assert pid.integral == 10.0

    def test_zero_gains_never_move(self):
        pid = PidController(PidGains(0.0, 0.0, 0.0))
        rng = np.random.default_rng(202)
        assert all(pid.step(e, 0.01) == 0.0 for e in rng.normal(size=100))

    def test_bad_dt_rejected(self):
        with pytest.raises(ValueError):
            PidController(PidGains(1, 0, 0)).step(1.0, 0.0)


class TestGentleGrasp:
    def test_no_contact_closes(self):
        ctl = GraspController()
        u0 = ctl.u
        u1, grasped = ctl.gentle_step(1.0)
        assert u1 > u0 and not grasped

    def test_at_setpoint_holds_and_flags(self):
        ctl = GraspController()
        sp = ctl.config.gentle.setpoint
        u0 = ctl.u
        u1, grasped = ctl.gentle_step(sp)
        assert u1 == u0 and grasped
        assert ctl.mode == "stabilizing"

    def test_below_setpoint_opens(self):
        ctl = GraspController()
        ctl.u = 0.5
        u1, grasped = ctl.gentle_step(ctl.config.gentle.setpoint - 0.01)
        assert u1 < 0.5 and not grasped

    def test_bad_ssim_rejected(self):
        with pytest.raises(ValueError):
            GraspController().gentle_step(1.5)

    def test_threshold_ordering_validated(self):
        with pytest.raises(ValueError):
            GentleGraspConfig(contact_threshold=0.9, setpoint=0.95)


class TestVelocityLaw:
    def test_zero_force_zero_velocity(self):
        assert np.all(velocity_command(VelocityConfig(), (0, 0, 0)) == 0.0)

    def test_dead_band(self):
        cfg = VelocityConfig()
        assert velocity_command(cfg, (0.1, 0.0, 0.0))[0] == 0.0
        assert velocity_command(cfg, (0.19999, 0.0, 0.0))[0] == 0.0
        assert velocity_command(cfg, (0.25, 0.0, 0.0))[0] > 0.0

    def test_gain_arithmetic_before_saturation(self):
        cfg = VelocityConfig(k0=(500.0, 500.0, 1500.0), vmax=1e9)
        v = velocity_command(cfg, (10.0, 0.0, 0.0))
        assert v[0] == pytest.approx(500.0 * (10.0 / 20.0) * 10.0)

    def test_quadratic_law_exact(self):
        cfg = VelocityConfig(vmax=1e12)
        rng = np.random.default_rng(203)
        for _ in range(200):
            f = rng.uniform(0.2, 5.0, 3) * rng.choice([-1.0, 1.0], 3)
            v1 = velocity_command(cfg, f)
            v2 = velocity_command(cfg, 2.0 * f)
            assert np.array_equal(v2, 4.0 * v1)

    def test_oddness_and_monotonicity(self):
        cfg = VelocityConfig(vmax=1e12)
        rng = np.random.default_rng(204)
        for _ in range(200):
            f = rng.uniform(0.21, 19.0, 3)
            v_pos = velocity_command(cfg, f)
            v_neg = velocity_command(cfg, -f)
            assert np.array_equal(v_neg, -v_pos)
        mags = [velocity_command(cfg, (f, 0, 0))[0] for f in np.linspace(0.25, 19.9, 50)]
        assert all(a < b for a, b in zip(mags, mags[1:]))

    def test_saturation(self):
        cfg = VelocityConfig(vmax=100.0)
        assert velocity_command(cfg, (19.0, 0, 0))[0] == 100.0
        assert velocity_command(cfg, (-19.0, 0, 0))[0] == -100.0


class TestStabilizers:
    def test_static_not_ready_leaves_u(self):
        ctl = GraspController()
        ctl.u = 0.4
        for k in range(ctl.config.loop.delta):
            u, dfy = ctl.stabilize_static(k * ctl.dt, 1.0)
            assert dfy is None and u == 0.4

    def test_constant_force_keeps_u(self):
        ctl = GraspController()
        ctl.u = 0.4
        last = None
        for k in range(200):
            _, last = ctl.stabilize_static(k * ctl.dt, 2.5)
        assert last == pytest.approx(0.0, abs=1e-12)
        assert ctl.u == 0.4

    def test_rising_force_tightens(self):
        ctl = GraspController()
        ctl.u = 0.4
        for k in range(300):
            ctl.stabilize_static(k * ctl.dt, 0.01 * k)
        assert ctl.u > 0.4

    def test_u_floor_from_grasp(self):
        ctl = GraspController()
        ctl.u = 0.5
        ctl.gentle_step(ctl.config.gentle.setpoint)  # grasp established
        # a strong negative swing cannot open past the established grasp
        for k in range(300):
            ctl.stabilize_static(k * ctl.dt, -0.05 * k)
        assert ctl.u == 0.5

    def test_dynamic_perpendicular_axis_contributes_nothing(self):
        # s_y = 0 at 90 degrees: the y channel cannot move the hand
        ctl = GraspController()
        ctl.u = 0.4
        frame = grasp_frame_update((0.0, 0.0, 0.0))  # theta_x = theta_y = 90
        for k in range(200):
            _, dfx, dfy, ux, uy = ctl.stabilize_dynamic(k * ctl.dt, frame, 0.0, 3.0 * k)
        assert uy == pytest.approx(0.0, abs=1e-9)
        assert ctl.u == pytest.approx(0.4, abs=1e-9)

    def test_dynamic_inverted_axis_flips_sign(self):
        cfg = ControllerConfig()
        ctl = GraspController(cfg)
        ctl.u = 0.4
        up = grasp_frame_update((90.0, 0.0, 0.0))       # theta_y = 0, s_y = +1
        down = grasp_frame_update((90.0, 180.0, 0.0))   # theta_y = 180, s_y = -1
        assert down.s_y == pytest.approx(-1.0, abs=1e-9)
        rising = lambda k: 0.02 * k
        ctl_up = GraspController(cfg); ctl_up.u = 0.4
        ctl_down = GraspController(cfg); ctl_down.u = 0.4
        for k in range(200):
            _, _, _, _, uy_up = ctl_up.stabilize_dynamic(k * cfg.loop.dt, up, 0.0, rising(k))
            _, _, _, _, uy_down = ctl_down.stabilize_dynamic(k * cfg.loop.dt, down, 0.0, rising(k))
        assert uy_up > 0 and uy_down < 0
        assert uy_down == pytest.approx(-uy_up, rel=1e-9)

    def test_u_always_within_bounds(self):
        rng = np.random.default_rng(205)
        ctl = GraspController()
        frame = grasp_frame_update((90.0, 45.0, 0.0))
        for k in range(500):
            ctl.stabilize_dynamic(k * ctl.dt, frame, rng.normal() * 50, rng.normal() * 50)
            assert 0.0 <= ctl.u <= 1.0


class TestConfigFile:
    def test_round_trip(self, tmp_path):
        cfg = ControllerConfig(
            static=PidGains(110.0, 0.05, 0.01),
            dynamic_x=PidGains(300.0, 1.0, 0.1),
        )
        path = tmp_path / "gains.json"
        save_controller_config(cfg, path)
        loaded = load_controller_config(path)
        assert loaded.static == cfg.static
        assert loaded.dynamic_x == cfg.dynamic_x
        assert loaded.velocity == cfg.velocity
        assert loaded.gentle == cfg.gentle

    def test_table_keys_present(self, tmp_path):
        path = tmp_path / "gains.json"
        save_controller_config(ControllerConfig(), path)
        doc = json.loads(path.read_text())
        assert doc["static"] == {"kp": 110.0, "ki": 0.05, "kd": 0.01}
        assert doc["dynamic_x"] == {"kp": 300.0, "ki": 1.0, "kd": 0.1}
        assert doc["dynamic_y"] == {"kp": 110.0, "ki": 0.05, "kd": 0.01}
        assert doc["velocity"]["k0x"] == 500.0
        assert doc["velocity"]["k0z"] == 1500.0
        assert doc["velocity"]["deadband"] == 0.2

    def test_env_var_fallback(self, tmp_path, monkeypatch):
        path = tmp_path / "env.json"
        save_controller_config(ControllerConfig(static=PidGains(42.0, 0, 0)), path)
        monkeypatch.setenv("TACGRASP_CONFIG", str(path))
        assert load_controller_config().static.kp == 42.0
