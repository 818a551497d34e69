"""Synthetic marker-based tactile fingertip.

Maps a contact pose/shear on the sensor dome to the 2-D displacement
field of the 217 internal markers plus the resultant contact force,
with per-sensor manufacturing variation. A rasterizer renders marker
frames to the 240x135 grayscale images used for contact detection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .signals import GrayImage

N_PINS = 217
DOME_RADIUS_MM = 10.5
LAYOUT_FILL = 0.88          # outermost pin ring sits at this fraction of the dome radius

RASTER_WIDTH = 240
RASTER_HEIGHT = 135
RASTER_PX_PER_MM = 5.0
MARKER_RADIUS_PX = 2.0

# Calibration targets: full-range pose maps to the full measured force range
# (4 mm indentation -> 12 N normal, 2 mm shear -> 4 N tangential).
CAL_MAX_INDENT_MM = 4.0
CAL_MAX_NORMAL_N = 12.0
CAL_MAX_SHEAR_MM = 2.0
CAL_MAX_SHEAR_N = 4.0


def hexagonal_layout(rings: int = 8, max_radius: float = LAYOUT_FILL * DOME_RADIUS_MM):
    """Hexagonal packing of 1 + 3*rings*(rings+1) points in a disc.

    With 8 rings this gives 217 points; the outer corners sit exactly at
    max_radius. Points are ordered ring-outward for a stable pin index.
    """
    pitch = max_radius / rings
    pts = []
    for q in range(-rings, rings + 1):
        r_lo = max(-rings, -q - rings)
        r_hi = min(rings, -q + rings)
        for r in range(r_lo, r_hi + 1):
            pts.append((pitch * (q + 0.5 * r), pitch * (math.sqrt(3) / 2.0) * r))
    pts = np.asarray(pts)
    order = np.lexsort((np.arctan2(pts[:, 1], pts[:, 0]), np.hypot(pts[:, 0], pts[:, 1])))
    return pts[order]


@dataclass(frozen=True)
class SensorGeometry:
    """Canonical dome geometry and stiffness constants for one fingertip design."""

    n_pins: int = N_PINS
    dome_radius: float = DOME_RADIUS_MM
    pin_layout: np.ndarray = field(default_factory=hexagonal_layout)
    pin_stiffness_normal: float = 1.8    # N/mm, resists pin bending under load
    pin_stiffness_shear: float = 2.0     # N/mm, tangential force per mm retained shear
    skin_stiffness: float = 6.0          # N/mm, normal force per mm mean indentation
    friction: float = 1.2                # tacky skin-on-object friction coefficient

    def __post_init__(self):
        layout = np.asarray(self.pin_layout, dtype=float)
        if layout.shape != (self.n_pins, 2):
            raise ValueError(f"pin layout must be ({self.n_pins}, 2)")
        if np.any(np.hypot(layout[:, 0], layout[:, 1]) > self.dome_radius + 1e-9):
            raise ValueError("pin layout extends beyond the dome radius")
        object.__setattr__(self, "pin_layout", layout)


def default_geometry() -> SensorGeometry:
    """Geometry with stiffnesses calibrated to the training force ranges.

    skin_stiffness is solved so that a flat 4 mm indentation produces
    exactly 12 N of normal force on the canonical layout, and
    pin_stiffness_shear so that 2 mm of retained shear produces 4 N.
    """
    geom = SensorGeometry()
    depths = _plane_depths(geom.pin_layout, geom.dome_radius, CAL_MAX_INDENT_MM, 0.0, 0.0)
    k_skin = CAL_MAX_NORMAL_N / float(depths.mean())
    k_shear = CAL_MAX_SHEAR_N / CAL_MAX_SHEAR_MM
    return replace(geom, skin_stiffness=k_skin, pin_stiffness_shear=k_shear)


@dataclass(frozen=True)
class SensorVariation:
    """Per-sensor manufacturing/assembly discrepancies.

    layout_jitter and marker_noise are Gaussian standard deviations in mm;
    stiffness_scale and optical_gain are multiplicative factors.
    """

    seed: int = 0
    layout_jitter: float = 0.0
    stiffness_scale: float = 1.0
    optical_gain: float = 1.0
    marker_noise: float = 0.0

    def __post_init__(self):
        if self.layout_jitter < 0 or self.marker_noise < 0:
            raise ValueError("noise standard deviations must be >= 0")
        if self.stiffness_scale <= 0:
            raise ValueError("stiffness_scale must be positive")

    @classmethod
    def identity(cls) -> "SensorVariation":
        return cls()

    @classmethod
    def sample(cls, seed: int) -> "SensorVariation":
        """Draw a plausible unit-to-unit variation for array sensor `seed`.

        Optical gain and layout jitter dominate (they perturb features but
        not forces); stiffness variation is kept small so measured forces
        stay within the calibrated training ranges.
        """
        rng = np.random.default_rng(1_000_003 + seed)
        stiffness = float(np.clip(1.0 + 0.02 * rng.standard_normal(), 0.95, 1.05))
        gain = float(np.clip(1.0 + 0.12 * rng.standard_normal(), 0.78, 1.22))
        return cls(
            seed=seed,
            layout_jitter=0.08,
            stiffness_scale=stiffness,
            optical_gain=gain,
            marker_noise=0.005,
        )


@dataclass(frozen=True)
class ContactState:
    """Commanded contact on the sensor dome: indentation, tilt and shear."""

    z: float = 0.0        # mm indentation depth at the dome apex
    alpha: float = 0.0    # deg tilt about the x axis
    beta: float = 0.0     # deg tilt about the y axis
    shear_x: float = 0.0  # mm tangential displacement
    shear_y: float = 0.0  # mm

    @classmethod
    def zero(cls) -> "ContactState":
        return cls()


@dataclass(frozen=True)
class MarkerFrame:
    """Timestamped displacement field of the sensor markers."""

    timestamp: float
    sensor_id: int
    displacements: np.ndarray  # (n_pins, 2) mm

    def __post_init__(self):
        d = np.asarray(self.displacements, dtype=float)
        if d.ndim != 2 or d.shape[1] != 2:
            raise ValueError("displacements must be (n_pins, 2)")
        if not np.all(np.isfinite(d)):
            raise ValueError("displacements must be finite")
        if not 0 <= self.sensor_id <= 4:
            raise ValueError("sensor_id must be in 0..4")
        object.__setattr__(self, "displacements", d)


@dataclass(frozen=True)
class ContactForce:
    """Resultant contact force in the sensor frame."""

    fx: float
    fy: float
    fz: float

    def __post_init__(self):
        if self.fz < 0:
            raise ValueError("normal force must be >= 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.fz])


def _patch_center(dome_radius, alpha_deg, beta_deg):
    """Projected contact-patch center of a tilted plane on the dome.

    On a spherical dome, tilting the contact plane shifts the patch toward
    the downhill side without changing the indentation profile: the patch
    centers where the dome surface is parallel to the plane.
    """
    return (
        -dome_radius * math.sin(math.radians(beta_deg)),
        dome_radius * math.sin(math.radians(alpha_deg)),
    )


def _plane_depths(layout, dome_radius, z, alpha_deg, beta_deg):
    """Per-pin indentation depth of a (possibly tilted) plane on the dome.

    Depth falls off from the patch center by R - sqrt(R^2 - rho^2) and is
    clipped at zero, so the resultant normal force depends on z only and
    tilt is observable through the patch location.
    """
    cx, cy = _patch_center(dome_radius, alpha_deg, beta_deg)
    dx = layout[:, 0] - cx
    dy = layout[:, 1] - cy
    rho2 = np.minimum(dx * dx + dy * dy, (0.999 * dome_radius) ** 2)
    drop = dome_radius - np.sqrt(dome_radius**2 - rho2)
    return np.clip(z - drop, 0.0, None)


class Sensor:
    """One fingertip instance: canonical geometry plus its unit variation.

    The systematic discrepancies (layout jitter, stiffness scale, optical
    gain) are frozen from the variation seed at construction; marker noise
    is drawn per observation from the rng passed to `sense`.
    """

    def __init__(self, geom: SensorGeometry, var: SensorVariation, sensor_id: int = 0):
        self.geom = geom
        self.var = var
        self.sensor_id = int(sensor_id)
        rng = np.random.default_rng(var.seed)
        layout = geom.pin_layout.copy()
        if var.layout_jitter > 0:
            layout += rng.normal(0.0, var.layout_jitter, layout.shape)
        self.layout = layout
        self.k_skin = geom.skin_stiffness * var.stiffness_scale
        self.k_shear = geom.pin_stiffness_shear * var.stiffness_scale
        self.k_pin = geom.pin_stiffness_normal * var.stiffness_scale
        # lateral spread of pins per mm of local depth at the dome rim
        self._spread = self.k_skin / self.k_pin
        self._default_rng = np.random.default_rng(rng.integers(2**63))

    def depths(self, c: ContactState) -> np.ndarray:
        if c.z <= 0.0:
            return np.zeros(self.geom.n_pins)
        return _plane_depths(self.layout, self.geom.dome_radius, c.z, c.alpha, c.beta)

    def contact_force(self, c: ContactState):
        """Post-slip contact force and slip flag, without the marker field."""
        if c.z < 0:
            raise ValueError("indentation depth must be >= 0")
        if c.z == 0.0:
            return ContactForce(0.0, 0.0, 0.0), False, np.zeros(2)
        d = self.depths(c)
        fz = self.k_skin * float(d.mean())
        shear = np.array([c.shear_x, c.shear_y])
        ft = self.k_shear * shear
        cap = self.geom.friction * fz
        mag = float(np.hypot(ft[0], ft[1]))
        slipped = mag > cap
        if slipped and mag > 0:
            scale = cap / mag
            ft = ft * scale
            shear = shear * scale
        return ContactForce(float(ft[0]), float(ft[1]), fz), slipped, shear

    def sense(self, c: ContactState, t: float = 0.0, rng: np.random.Generator | None = None):
        """Observe a contact: marker frame, resultant force and slip flag.

        Marker displacement is the elastic pin response to the local
        indentation (radial spread) plus advection by the retained
        (post-slip) shear; optical gain and marker noise apply last.
        """
        force, slipped, retained = self.contact_force(c)
        d = self.depths(c)
        cx, cy = _patch_center(self.geom.dome_radius, c.alpha, c.beta)
        offset = self.layout - np.array([cx, cy])
        dist = np.hypot(offset[:, 0], offset[:, 1])
        radial = np.where(dist[:, None] > 1e-12, offset / np.maximum(dist, 1e-12)[:, None], 0.0)
        disp = self._spread * (d * dist / self.geom.dome_radius)[:, None] * radial
        # the skin is a continuous sheet: retained shear at the contact
        # drags the whole marker field with it
        disp = disp + retained[None, :]
        disp = disp * self.var.optical_gain
        if self.var.marker_noise > 0:
            gen = rng if rng is not None else self._default_rng
            disp = disp + gen.normal(0.0, self.var.marker_noise, disp.shape)
        return MarkerFrame(t, self.sensor_id, disp), force, slipped

    def reference_image(self) -> GrayImage:
        """Render of the rest (zero-contact, noise-free) marker layout."""
        zero = MarkerFrame(0.0, self.sensor_id, np.zeros((self.geom.n_pins, 2)))
        return rasterize(zero, self.geom, layout=self.layout)

    def normal_force_table(self, z_max: float = 4.5, n: int = 200):
        """(z, fz) samples of the flat-contact normal response, for inversion."""
        zs = np.linspace(0.0, z_max, n)
        fz = np.array([self.contact_force(ContactState(z=z))[0].fz for z in zs])
        return zs, fz


def simulate_contact(
    geom: SensorGeometry,
    var: SensorVariation,
    c: ContactState,
    t: float = 0.0,
    rng: np.random.Generator | None = None,
):
    """One-shot contact observation on a freshly instantiated sensor."""
    return Sensor(geom, var).sense(c, t=t, rng=rng)


def rasterize(frame: MarkerFrame, geom: SensorGeometry, layout: np.ndarray | None = None) -> GrayImage:
    """Render a marker frame as white anti-aliased discs on black.

    Markers are drawn at rest + displacement positions at RASTER_PX_PER_MM,
    centered in a 240x135 image. Deterministic for identical inputs.
    """
    base = geom.pin_layout if layout is None else layout
    pos = base + frame.displacements
    cx = RASTER_WIDTH / 2.0 + pos[:, 0] * RASTER_PX_PER_MM
    cy = RASTER_HEIGHT / 2.0 - pos[:, 1] * RASTER_PX_PER_MM

    halfw = int(math.ceil(MARKER_RADIUS_PX + 1.5))
    offs = np.arange(-halfw, halfw + 1)
    ox, oy = np.meshgrid(offs, offs)

    col0 = np.floor(cx).astype(int)
    row0 = np.floor(cy).astype(int)
    cols = col0[:, None, None] + ox[None, :, :]
    rows = row0[:, None, None] + oy[None, :, :]
    # pixel centers at integer coordinates + 0.5
    dx = cols + 0.5 - cx[:, None, None]
    dy = rows + 0.5 - cy[:, None, None]
    dist = np.sqrt(dx * dx + dy * dy)
    cov = np.clip(MARKER_RADIUS_PX + 0.5 - dist, 0.0, 1.0)

    inside = (rows >= 0) & (rows < RASTER_HEIGHT) & (cols >= 0) & (cols < RASTER_WIDTH)
    flat = np.bincount(
        (rows[inside] * RASTER_WIDTH + cols[inside]).ravel(),
        weights=cov[inside].ravel(),
        minlength=RASTER_HEIGHT * RASTER_WIDTH,
    )
    # overlapping disc fringes accumulate; clip to the white level
    img = np.minimum(flat.reshape(RASTER_HEIGHT, RASTER_WIDTH), 1.0)
    return GrayImage(img)


def features(frame: MarkerFrame) -> np.ndarray:
    """Flatten a marker frame to the regression feature vector.

    Pin-index order, (dx, dy) interleaved: length 2 * n_pins.
    """
    return frame.displacements.ravel().copy()


def displacements_from_features(vec: np.ndarray) -> np.ndarray:
    """Inverse of `features`: reshape a flat vector back to (n_pins, 2)."""
    vec = np.asarray(vec, dtype=float)
    if vec.ndim != 1 or vec.size % 2 != 0:
        raise ValueError("feature vector length must be even")
    return vec.reshape(-1, 2)
