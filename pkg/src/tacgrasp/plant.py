"""Deterministic plant: 1-DoA underactuated hand, crushable cup with
pourable rice, arm pose and gravity-induced shear.

The actuator follows the hand command through a first-order lag; finger
closures follow with fixed synergy offsets (pinky leads). Fingertip
normal forces come from squeezing the compliant cup through the fingertip
skin (series springs); the tangential load is the object weight plus any
external force resolved in the grasp frame, shared across fingers in
proportion to their normal force and capped by the friction cone. Excess
tangential load accumulates as slip; enough slip drops the object.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .control import CONTROL_DT, rotation_sxyz
from .tactile import ContactState, Sensor

# Arm pose (SXYZ euler, degrees) in which the grasp y axis points along
# gravity and the x axis is horizontal: the starting pose of every task.
NEUTRAL_EULER = (90.0, 0.0, 0.0)

GRAVITY = 9.81


@dataclass(frozen=True)
class PlantConfig:
    # grasped object (deformable cup by default)
    object_radius: float = 35.0         # mm
    object_mass: float = 0.010          # kg, empty cup
    object_height: float = 90.0         # mm, slip distance before losing the object
    object_stiffness: float = 3.0       # N/mm radial compliance
    object_friction: float = 0.45       # fingertip skin on object (cup cone)
    # crush threshold grows with fill mass: the empty cup buckles easily,
    # outward pressure from contents stiffens it
    crush_empty: float = 1.8            # N total normal force
    crush_full: float = 9.0             # N when filled
    crush_fill_mass: float = 0.15       # kg of contents for full stiffening
    crushable: bool = True
    # hand
    finger_open_radius: float = 50.0    # mm fingertip radius at u = 0
    finger_stroke: float = 25.0         # mm of radial travel over full closure
    finger_stiffness: float = 0.35      # N/mm structural compliance per finger
    actuator_tau: float = 0.080         # s first-order actuator lag
    synergy_offsets: tuple = (0.0, 0.020, 0.040, 0.060, 0.080)  # s, pinky to thumb
    # slip dynamics and pouring
    slip_viscosity: float = 0.15        # s/mm: sliding drag per N of grip
    slip_free_rate: float = 500.0       # mm/s slide rate with no grip at all
    contact_memory: float = 0.03        # fraction of peak squeeze retained on unload
    spill_angle: float = 95.0           # deg tilt where rice starts to leave
    pour_flow: float = 0.012            # kg/s per degree beyond the spill angle
    leader_force_max: float = 20.0      # N magnitude bound on applied forces

    @classmethod
    def rigid_object(cls, mass: float = 0.25) -> "PlantConfig":
        """Sensorized rigid block used for the leader-follower task.

        The hand takes a stiffer power-grasp posture on the block, so the
        finger compliance is higher than in the cup tasks.
        """
        return cls(
            object_radius=30.0,
            object_mass=mass,
            object_height=170.0,
            object_stiffness=30.0,
            finger_stiffness=2.0,
            crushable=False,
        )


@dataclass(frozen=True)
class Disturbance:
    """Scripted plant disturbance: added mass or an external force window."""

    t: float
    kind: str                      # step_mass | ramp_mass | external_force
    magnitude: float               # kg for masses, N for forces
    duration: float = 0.0          # s; ramps and force windows
    direction: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("step_mass", "ramp_mass", "external_force"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if self.magnitude < 0:
            raise ValueError("magnitude must be >= 0")


def load_disturbance_script(path) -> list[Disturbance]:
    """Parse a JSON disturbance/trajectory script."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return [
            Disturbance(
                t=float(item["t"]),
                kind=str(item["kind"]),
                magnitude=float(item["magnitude"]),
                duration=float(item.get("duration", 0.0)),
                direction=tuple(item.get("direction", (0.0, 0.0, 0.0))),
            )
            for item in doc
        ]
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: bad disturbance script ({exc})") from exc


@dataclass(frozen=True)
class SensorizedObjectReading:
    """Ground-truth external force on the object, in grasp-frame axes."""

    fx: float
    fy: float
    fz: float

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.fz])


@dataclass
class PlantStep:
    """Everything observable after one plant step."""

    t: float
    contacts: list[ContactState]
    reading: SensorizedObjectReading
    normal_sum: float              # total squeeze force on the object, N
    tangential: np.ndarray         # (2,) grasp-frame load carried as shear, N
    crush: bool
    slipping: bool
    dropped: bool
    rice_mass: float
    u_applied: float
    theta_y: float                 # cup tilt vs gravity, deg


class Plant:
    """Steps the hand/cup/arm simulation at a fixed control period."""

    def __init__(
        self,
        sensors: list[Sensor],
        config: PlantConfig = PlantConfig(),
        dt: float = CONTROL_DT,
        arm_euler=NEUTRAL_EULER,
    ):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.sensors = sensors
        self.config = config
        self.dt = dt
        self.t = 0.0
        self.arm_euler = tuple(float(v) for v in arm_euler)
        self.arm_pos = np.zeros(3)
        self.u_applied = 0.0
        self.closures = np.zeros(len(sensors))
        self.rice_mass = 0.0
        self.crush = False
        self.slip_accum = 0.0
        self.dropped = False
        self.supported = True  # object rests on its pedestal until released
        self.external_force = np.zeros(3)  # grasp-frame components
        self._schedule: list[Disturbance] = []
        self._ramp_added: dict[int, float] = {}
        self._peak_o = [0.0] * len(sensors)
        self._lag = 1.0 - math.exp(-dt / config.actuator_tau)
        offsets = [max(0, int(round(o / dt))) for o in config.synergy_offsets[: len(sensors)]]
        while len(offsets) < len(sensors):
            offsets.append(offsets[-1] if offsets else 0)
        self._offsets = offsets
        self._hist = [0.0] * (max(offsets) + 1)
        # per-finger map between fingertip/object interference and normal
        # force: fingertip skin, finger structure and object wall deform
        # in series
        self._force_tables = []
        for s in sensors:
            zs, fz = s.normal_force_table()
            interference = zs + fz / config.object_stiffness + fz / config.finger_stiffness
            self._force_tables.append((interference, fz, zs))

    # -- disturbances -----------------------------------------------------

    def schedule(self, disturbances):
        self._schedule.extend(disturbances)

    def add_rice(self, kg: float):
        if kg < 0:
            raise ValueError("mass must be >= 0")
        self.rice_mass += kg

    def apply_leader_force(self, force) -> None:
        """Set the externally applied force (grasp-frame components, N)."""
        f = np.asarray(force, dtype=float)
        if np.linalg.norm(f) > self.config.leader_force_max + 1e-9:
            raise ValueError(
                f"|force| exceeds the {self.config.leader_force_max} N bound"
            )
        self.external_force = f

    def release_support(self):
        """Remove the pedestal: from now on the grasp carries the object."""
        self.supported = False

    def _apply_schedule(self):
        for i, d in enumerate(self._schedule):
            if d.kind == "step_mass":
                if d.t <= self.t and i not in self._ramp_added:
                    self._ramp_added[i] = d.magnitude
                    self.rice_mass += d.magnitude
            elif d.kind == "ramp_mass":
                if d.t <= self.t <= d.t + d.duration and d.duration > 0:
                    done = self._ramp_added.get(i, 0.0)
                    target = d.magnitude * min(1.0, (self.t - d.t) / d.duration)
                    self.rice_mass += target - done
                    self._ramp_added[i] = target
            elif d.kind == "external_force":
                if d.t <= self.t <= d.t + d.duration:
                    self.external_force = d.magnitude * np.asarray(d.direction, dtype=float)
                elif self.t > d.t + d.duration and self._ramp_added.get(i) != -1.0:
                    self.external_force = np.zeros(3)
                    self._ramp_added[i] = -1.0

    # -- stepping ----------------------------------------------------------

    def step(self, u_cmd: float, arm_euler=None, arm_velocity=None) -> PlantStep:
        cfg = self.config
        self.t += self.dt
        self._apply_schedule()
        if arm_euler is not None:
            self.arm_euler = tuple(float(v) for v in arm_euler)
        if arm_velocity is not None:
            self.arm_pos = self.arm_pos + np.asarray(arm_velocity, dtype=float) * self.dt

        u_cmd = float(np.clip(u_cmd, 0.0, 1.0))
        self._hist.append(u_cmd)
        if len(self._hist) > max(self._offsets) + 1:
            self._hist.pop(0)
        self.u_applied += (u_cmd - self.u_applied) * self._lag
        for k in range(len(self.sensors)):
            delayed = self._hist[-1 - self._offsets[k]] if self._offsets[k] < len(self._hist) else self._hist[0]
            self.closures[k] += (delayed - self.closures[k]) * self._lag

        # squeeze forces through the series springs; the viscoelastic
        # cup/skin interface keeps a small fraction of its peak squeeze
        engage = cfg.finger_open_radius - cfg.object_radius
        normals = np.zeros(len(self.sensors))
        for k, (o_tab, f_tab, _) in enumerate(self._force_tables):
            interference = self.closures[k] * cfg.finger_stroke - engage
            self._peak_o[k] = max(self._peak_o[k], interference)
            if self._peak_o[k] > interference:
                interference += cfg.contact_memory * (self._peak_o[k] - interference)
            if interference > 0:
                normals[k] = float(np.interp(interference, o_tab, f_tab))
        n_sum = float(normals.sum())

        # grasp-frame orientation and tilt
        r = rotation_sxyz(*self.arm_euler)
        x_axis = r @ np.array([1.0, 0.0, 0.0])
        y_axis = r @ np.array([0.0, -1.0, 0.0])
        z_axis = r @ np.array([0.0, 0.0, 1.0])
        gravity = np.array([0.0, 0.0, -1.0])
        theta_y = math.degrees(math.acos(float(np.clip(np.dot(gravity, y_axis), -1, 1))))

        # pouring: rice leaves once the cup tilts past the spill angle
        if self.rice_mass > 0 and theta_y > cfg.spill_angle:
            flow = cfg.pour_flow * (theta_y - cfg.spill_angle) * self.dt
            self.rice_mass = max(0.0, self.rice_mass - flow)

        mass = cfg.object_mass + self.rice_mass
        weight = np.array([0.0, 0.0, -mass * GRAVITY])
        # external force is commanded in grasp axes; express it globally
        f_ext_global = (
            self.external_force[0] * x_axis
            + self.external_force[1] * y_axis
            + self.external_force[2] * z_axis
        )
        load = weight + f_ext_global
        if self.supported:
            load = np.zeros(3)
        tangential = np.array([float(load @ x_axis), float(load @ y_axis)])
        normal_ext = float(load @ z_axis)

        if self.dropped:
            normals = np.zeros_like(normals)
            n_sum = 0.0

        # crush threshold stiffens as the cup fills
        if cfg.crushable and not self.crush:
            fill = min(1.0, self.rice_mass / cfg.crush_fill_mass)
            threshold = cfg.crush_empty + (cfg.crush_full - cfg.crush_empty) * fill
            if n_sum >= threshold:
                self.crush = True

        # While held, the fingertips carry the tangential load up to the
        # skin's own friction cone (kinetic friction at the cup interface
        # plus viscous drag of sliding). The cup slides whenever the load
        # exceeds the cup-interface cone; sliding shows up as object
        # motion (slip_accum), and only the skin cone limits what the
        # sensors can feel.
        slipping = False
        shear = np.zeros((len(self.sensors), 2))
        obs_normals = normals.copy()
        t_mag = float(np.hypot(tangential[0], tangential[1]))
        skin_friction = self.sensors[0].geom.friction if self.sensors else 0.8
        if n_sum > 0:
            share = normals / n_sum
            obs_normals = np.clip(normals + share * normal_ext, 0.0, None)
            grip = float(obs_normals.sum())
            cup_capacity = cfg.object_friction * grip
            if t_mag > cup_capacity:
                slipping = True
                excess = t_mag - cup_capacity
                rate = (
                    excess / (cfg.slip_viscosity * grip)
                    if grip > 1e-9
                    else cfg.slip_free_rate
                )
                self.slip_accum += min(rate, cfg.slip_free_rate) * self.dt
                if self.slip_accum >= cfg.object_height:
                    self.dropped = True
            carried = min(t_mag, skin_friction * grip)
            if t_mag > 0:
                shear = share[:, None] * (tangential * (carried / t_mag))[None, :]
        elif t_mag > 0:
            # load but no grip at all: the object is simply falling out
            self.slip_accum += cfg.slip_free_rate * self.dt
            if self.slip_accum >= cfg.object_height:
                self.dropped = True

        contacts = []
        for k, s in enumerate(self.sensors):
            _, f_tab, z_tab = self._force_tables[k]
            zk = float(np.interp(obs_normals[k], f_tab, z_tab))
            sx = shear[k, 0] / s.k_shear
            sy = shear[k, 1] / s.k_shear
            contacts.append(ContactState(z=zk, shear_x=sx, shear_y=sy))

        reading = SensorizedObjectReading(
            float(self.external_force[0]),
            float(self.external_force[1]),
            float(self.external_force[2]),
        )
        return PlantStep(
            t=self.t,
            contacts=contacts,
            reading=reading,
            normal_sum=n_sum,
            tangential=tangential if n_sum > 0 else np.zeros(2),
            crush=self.crush,
            slipping=slipping,
            dropped=self.dropped,
            rice_mass=self.rice_mass,
            u_applied=self.u_applied,
            theta_y=theta_y,
        )


@dataclass
class PourTrajectory:
    """Time-indexed arm pose for the pouring motion (roll out and back)."""

    t: np.ndarray
    euler: np.ndarray     # (T, 3) SXYZ degrees
    angle: np.ndarray     # (T,) grasp-frame roll, 0 -> target -> 0


def pour_trajectory(
    gamma_target: float = 120.0,
    rate: float = 10.0,
    dt: float = CONTROL_DT,
    dwell: float = 2.0,
    base_euler=NEUTRAL_EULER,
) -> PourTrajectory:
    """Pure grasp-frame roll to the pour angle, a dwell, then the reverse.

    In base-frame SXYZ coordinates the roll appears on the middle euler
    slot because the neutral wrist pose already carries a 90 deg first
    rotation. The reverse leg mirrors the forward one exactly.
    """
    if rate <= 0:
        raise ValueError("rotation rate must be positive")
    n_up = int(round(gamma_target / rate / dt))
    forward = np.linspace(0.0, gamma_target, n_up + 1)
    hold = np.full(int(round(dwell / dt)), gamma_target)
    angle = np.concatenate([forward, hold, forward[::-1]])
    t = np.arange(len(angle)) * dt
    euler = np.tile(np.asarray(base_euler, dtype=float), (len(angle), 1))
    euler[:, 1] += angle
    return PourTrajectory(t=t, euler=euler, angle=angle)
