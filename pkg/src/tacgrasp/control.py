"""Grasp controllers and grasp-frame mathematics.

Covers the SSIM-driven gentle grasp, the static and gravity-scaled PID
grasp stabilizers that act on the lagged shear-force difference, and the
force-to-velocity law used for leader-follower guidance.
"""

from __future__ import annotations

import json
import math
import os
from collections import deque
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .signals import RateEstimator

# Control loop runs at 180 Hz so the 50-sample lag of the shear-rate
# estimator spans just over a quarter of a second; see the static
# stabilizer notes.
CONTROL_RATE_HZ = 180.0
CONTROL_DT = 1.0 / CONTROL_RATE_HZ
RATE_LAG_SAMPLES = 50
FORCE_SMOOTH_WINDOW = 9

# PID outputs are in raw hand-command units (mirroring the actuator's
# native command range); the normalized closure u advances by
# output / HAND_COMMAND_UNITS. Sized so the stabilizer gains above give
# the intended closed-loop authority on the simulated hand.
HAND_COMMAND_UNITS = 78000.0

CONFIG_ENV_VAR = "TACGRASP_CONFIG"


@dataclass(frozen=True)
class PidGains:
    kp: float
    ki: float
    kd: float


# Tuned gains: static (vertical) grasp stabilization, the x/y axes of the
# moving-grasp stabilizer, and the velocity-law base gains.
STATIC_GAINS = PidGains(110.0, 0.05, 0.01)
DYNAMIC_X_GAINS = PidGains(300.0, 1.0, 0.1)
DYNAMIC_Y_GAINS = PidGains(110.0, 0.05, 0.01)


class PidController:
    """PID with anti-windup: the integral is clamped and slowly forgets.

    The leak keeps a transient error burst from biasing the output long
    after the disturbance has passed.
    """

    def __init__(self, gains: PidGains, integral_limit: float = 10.0,
                 integral_leak_s: float = 1.5):
        self.gains = gains
        self.integral_limit = integral_limit
        self.integral_leak_s = integral_leak_s
        self.integral = 0.0
        self.prev_error: float | None = None

    def step(self, error: float, dt: float) -> float:
        if dt <= 0:
            raise ValueError("dt must be positive")
        if self.integral_leak_s > 0:
            self.integral *= math.exp(-dt / self.integral_leak_s)
        self.integral += error * dt
        self.integral = float(
            np.clip(self.integral, -self.integral_limit, self.integral_limit)
        )
        derivative = 0.0 if self.prev_error is None else (error - self.prev_error) / dt
        self.prev_error = error
        g = self.gains
        return g.kp * error + g.ki * self.integral + g.kd * derivative

    def reset(self):
        self.integral = 0.0
        self.prev_error = None


def rotation_sxyz(alpha_deg: float, beta_deg: float, gamma_deg: float) -> np.ndarray:
    """Static-XYZ rotation matrix Rz(gamma) @ Ry(beta) @ Rx(alpha)."""
    a, b, g = (math.radians(v) for v in (alpha_deg, beta_deg, gamma_deg))
    ca, sa = math.cos(a), math.sin(a)
    cb, sb = math.cos(b), math.sin(b)
    cg, sg = math.cos(g), math.sin(g)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
    return rz @ ry @ rx


def scale(theta_deg: float) -> float:
    """Gravity scaling factor: affine from +1 at 0 deg to -1 at 180 deg.

    Equals 1 - 2*theta/pi for theta in radians; zero when the axis is
    perpendicular to gravity, negative when pointing away from it.
    """
    return 1.0 - theta_deg / 90.0


@dataclass(frozen=True)
class GraspFrameState:
    """Grasp frame orientation relative to gravity.

    theta_x/theta_y are the angles between gravity and the rotated grasp
    x / y axes; s_x/s_y the corresponding scaling factors.
    """

    euler: tuple
    gravity: tuple
    theta_x: float
    theta_y: float
    s_x: float
    s_y: float


def grasp_frame_update(euler, gravity=(0.0, 0.0, -1.0)) -> GraspFrameState:
    """Resolve grasp-frame axes against gravity for an SXYZ euler pose.

    The grasp x axis is the rotated [1, 0, 0], the y axis the rotated
    [0, -1, 0]; gravity is normalized internally.
    """
    g = np.asarray(gravity, dtype=float)
    norm = np.linalg.norm(g)
    if norm == 0:
        raise ValueError("gravity vector must be non-zero")
    g = g / norm
    r = rotation_sxyz(*euler)
    x_axis = r @ np.array([1.0, 0.0, 0.0])
    y_axis = r @ np.array([0.0, -1.0, 0.0])
    theta_x = math.degrees(math.acos(float(np.clip(np.dot(g, x_axis), -1.0, 1.0))))
    theta_y = math.degrees(math.acos(float(np.clip(np.dot(g, y_axis), -1.0, 1.0))))
    return GraspFrameState(
        euler=tuple(float(v) for v in euler),
        gravity=tuple(float(v) for v in g),
        theta_x=theta_x,
        theta_y=theta_y,
        s_x=scale(theta_x),
        s_y=scale(theta_y),
    )


@dataclass(frozen=True)
class GentleGraspConfig:
    """Two-phase proportional closure on the mean SSIM contact measure.

    Above contact_threshold the hand is still free-closing (coarse gain
    p1); below it the fine gain p0 regulates skin deformation toward the
    setpoint. Gains are in normalized hand command per unit SSIM error.
    """

    contact_threshold: float = 0.99965
    setpoint: float = 0.9991
    tolerance: float = 0.0005
    p0_gain: float = 1.2
    p1_gain: float = 1.8

    def __post_init__(self):
        if not 0.0 < self.setpoint < self.contact_threshold < 1.0:
            raise ValueError("need 0 < setpoint < contact_threshold < 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass(frozen=True)
class VelocityConfig:
    """Force-to-velocity law parameters (per-axis base gains, mm/s output)."""

    k0: tuple = (500.0, 500.0, 1500.0)
    fmax: tuple = (20.0, 20.0, 60.0)
    deadband: float = 0.2
    vmax: float = 100.0

    def __post_init__(self):
        if min(self.k0) <= 0 or min(self.fmax) <= 0 or self.deadband < 0 or self.vmax <= 0:
            raise ValueError("velocity-law parameters must be positive")


def velocity_command(cfg: VelocityConfig, force) -> np.ndarray:
    """Per-axis velocity from summed fingertip forces.

    Inside the dead-band the axis is still; outside, the gain itself grows
    with |F| (v = k0 * |F|/Fmax * F), clamped to +-vmax. Axes are
    independent.
    """
    f = np.asarray(force, dtype=float)
    v = np.zeros(3)
    for i in range(3):
        mag = abs(f[i])
        if mag < cfg.deadband:
            continue
        v[i] = np.clip(cfg.k0[i] * (mag / cfg.fmax[i]) * f[i], -cfg.vmax, cfg.vmax)
    return v


class _StreamingMean:
    """Causal moving average over the last `window` pushed values."""

    def __init__(self, window: int):
        self._buf = deque(maxlen=max(1, int(window)))

    def push(self, value: float) -> float:
        self._buf.append(float(value))
        return sum(self._buf) / len(self._buf)

    def reset(self):
        self._buf.clear()


@dataclass(frozen=True)
class LoopConfig:
    """Timing and scaling of the hand control loop."""

    dt: float = CONTROL_DT
    delta: int = RATE_LAG_SAMPLES
    smooth_window: int = FORCE_SMOOTH_WINDOW
    u_scale: float = HAND_COMMAND_UNITS


@dataclass(frozen=True)
class ControllerConfig:
    static: PidGains = STATIC_GAINS
    dynamic_x: PidGains = DYNAMIC_X_GAINS
    dynamic_y: PidGains = DYNAMIC_Y_GAINS
    velocity: VelocityConfig = field(default_factory=VelocityConfig)
    gentle: GentleGraspConfig = field(default_factory=GentleGraspConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)


def save_controller_config(cfg: ControllerConfig, path):
    doc = {
        "static": asdict(cfg.static),
        "dynamic_x": asdict(cfg.dynamic_x),
        "dynamic_y": asdict(cfg.dynamic_y),
        "velocity": {
            "k0x": cfg.velocity.k0[0],
            "k0y": cfg.velocity.k0[1],
            "k0z": cfg.velocity.k0[2],
            "fmax_x": cfg.velocity.fmax[0],
            "fmax_y": cfg.velocity.fmax[1],
            "fmax_z": cfg.velocity.fmax[2],
            "deadband": cfg.velocity.deadband,
            "vmax": cfg.velocity.vmax,
        },
        "gentle": asdict(cfg.gentle),
        "loop": asdict(cfg.loop),
    }
    Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")


def load_controller_config(path=None) -> ControllerConfig:
    """Load gains from JSON; falls back to TACGRASP_CONFIG, then defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
    if path is None:
        return ControllerConfig()
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    vel = doc.get("velocity", {})
    return ControllerConfig(
        static=PidGains(**doc.get("static", asdict(STATIC_GAINS))),
        dynamic_x=PidGains(**doc.get("dynamic_x", asdict(DYNAMIC_X_GAINS))),
        dynamic_y=PidGains(**doc.get("dynamic_y", asdict(DYNAMIC_Y_GAINS))),
        velocity=VelocityConfig(
            k0=(vel.get("k0x", 500.0), vel.get("k0y", 500.0), vel.get("k0z", 1500.0)),
            fmax=(vel.get("fmax_x", 20.0), vel.get("fmax_y", 20.0), vel.get("fmax_z", 60.0)),
            deadband=vel.get("deadband", 0.2),
            vmax=vel.get("vmax", 100.0),
        ),
        gentle=GentleGraspConfig(**doc.get("gentle", {})),
        loop=LoopConfig(**doc.get("loop", {})),
    )


class GraspController:
    """Hand-command state machine: establish a gentle grasp, then stabilize.

    The stabilizers feed the lagged difference of the (lightly smoothed)
    summed shear forces into PID controllers whose tick outputs advance the
    normalized hand command u, clamped to [0, 1].
    """

    def __init__(self, config: ControllerConfig | None = None):
        self.config = config or ControllerConfig()
        loop = self.config.loop
        self.dt = loop.dt
        self.u = 0.0
        self.u_floor = 0.0
        self.mode = "establishing"
        self.pid_static = PidController(self.config.static)
        self.pid_x = PidController(self.config.dynamic_x)
        self.pid_y = PidController(self.config.dynamic_y)
        self.rate_x = RateEstimator(loop.delta)
        self.rate_y = RateEstimator(loop.delta)
        self._smooth_x = _StreamingMean(loop.smooth_window)
        self._smooth_y = _StreamingMean(loop.smooth_window)

    def _apply(self, ticks: float) -> float:
        # the stabilizers modulate the established grasp but never open
        # past it: doing so would abandon the object
        self.u = float(np.clip(self.u + ticks / self.config.loop.u_scale, self.u_floor, 1.0))
        return self.u

    def _apply_normalized(self, du: float) -> float:
        self.u = float(np.clip(self.u + du, 0.0, 1.0))
        return self.u

    def gentle_step(self, ssim_avg: float):
        """One gentle-grasp iteration on the sensor-average SSIM.

        Returns (u, grasped). When the deformation reaches the setpoint
        band the mode flips to stabilizing and u holds.
        """
        if not 0.0 <= ssim_avg <= 1.0:
            raise ValueError("ssim must lie in [0, 1]")
        g = self.config.gentle
        err = ssim_avg - g.setpoint
        grasped = abs(err) < g.tolerance
        if grasped:
            self.mode = "stabilizing"
            self.u_floor = self.u
            return self.u, True
        gain = g.p1_gain if ssim_avg >= g.contact_threshold else g.p0_gain
        self._apply_normalized(gain * err)
        return self.u, False

    def stabilize_static(self, t: float, fy_sum: float):
        """Static grasp stabilization on the y-shear sum.

        Returns (u, dfy) where dfy is the lagged difference of the smoothed
        shear (None while the estimator warms up, during which the hand
        command is left unchanged).
        """
        smoothed = self._smooth_y.push(fy_sum)
        dfy = self.rate_y.update(t, smoothed)
        if dfy is None:
            return self.u, None
        self._apply(self.pid_static.step(dfy, self.dt))
        return self.u, dfy

    def stabilize_dynamic(self, t: float, frame: GraspFrameState, fx_sum: float, fy_sum: float):
        """Moving-grasp stabilization with gravity-scaled controller inputs.

        u_x = S_x * dFx and u_y = S_y * dFy feed two independent PID
        controllers whose outputs sum into one hand-command increment.
        Returns (u, dfx, dfy, ux, uy).
        """
        sx = self._smooth_x.push(fx_sum)
        sy = self._smooth_y.push(fy_sum)
        dfx = self.rate_x.update(t, sx)
        dfy = self.rate_y.update(t, sy)
        if dfx is None or dfy is None:
            return self.u, None, None, None, None
        ux = frame.s_x * dfx
        uy = frame.s_y * dfy
        self._apply(self.pid_x.step(ux, self.dt) + self.pid_y.step(uy, self.dt))
        return self.u, dfx, dfy, ux, uy

    def reset(self):
        self.u = 0.0
        self.u_floor = 0.0
        self.mode = "establishing"
        for pid in (self.pid_static, self.pid_x, self.pid_y):
            pid.reset()
        for est in (self.rate_x, self.rate_y):
            est.reset()
        self._smooth_x.reset()
        self._smooth_y.reset()
