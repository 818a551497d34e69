"""Tap-and-shear data collection over the simulated sensors.

Reproduces the training-data protocol: contacts drawn uniformly from the
collection ranges, force readings noised and hybrid-filtered along each
tap-and-shear trajectory, labels taken post-slip at trajectory end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .signals import FilterConfig, hybrid_filter
from .tactile import ContactState, Sensor, features as frame_features

# Tap-and-shear trajectory discretization: press, then shear, then dwell so
# the hybrid filter settles before the label is read at the final step.
TAP_STEPS = 20
SHEAR_STEPS = 20
DWELL_STEPS = 60
TRAJECTORY_STEPS = TAP_STEPS + SHEAR_STEPS + DWELL_STEPS

# Residual startup transient of the hybrid label filter at trajectory end,
# measured over the collection ranges with zero sensor noise (see tests).
LABEL_FILTER_TOLERANCE_N = 0.02


@dataclass(frozen=True)
class ContactRanges:
    """Uniform sampling bounds for the collection protocol."""

    z: tuple = (0.0, 4.0)
    alpha: tuple = (-20.0, 20.0)
    beta: tuple = (-20.0, 20.0)
    shear: tuple = (-2.0, 2.0)

    def validate(self):
        for name, (lo, hi) in asdict(self).items():
            if not lo < hi:
                raise ValueError(f"invalid {name} range [{lo}, {hi}]")


@dataclass(frozen=True)
class CollectionConfig:
    n_train_val: int = 3000
    split: float = 0.8
    n_test: int = 600
    ranges: ContactRanges = field(default_factory=ContactRanges)
    ft_noise: float = 0.05          # N std per force axis, pre-filter
    seed: int = 0
    filter: FilterConfig = field(default_factory=FilterConfig)

    def __post_init__(self):
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must lie in (0, 1)")
        if self.n_train_val < 1 or self.n_test < 1:
            raise ValueError("sample counts must be >= 1")
        if self.ft_noise < 0:
            raise ValueError("ft_noise must be >= 0")
        self.ranges.validate()


@dataclass(frozen=True)
class PoseForce:
    """The six-vector of contact pose and force: label and prediction alike."""

    z: float
    alpha: float
    beta: float
    fx: float
    fy: float
    fz: float

    def as_array(self) -> np.ndarray:
        return np.array([self.z, self.alpha, self.beta, self.fx, self.fy, self.fz])

    @classmethod
    def from_array(cls, a) -> "PoseForce":
        z, alpha, beta, fx, fy, fz = (float(v) for v in a)
        return cls(z, alpha, beta, fx, fy, fz)


POSE_FORCE_NAMES = ("z", "alpha", "beta", "fx", "fy", "fz")


@dataclass
class Dataset:
    """Column-oriented labeled samples for one or more sensors."""

    sensor_ids: np.ndarray   # (n,) int
    contacts: np.ndarray     # (n, 5): z, alpha, beta, shear_x, shear_y
    forces: np.ndarray       # (n, 3): filtered post-slip fx, fy, fz labels
    features: np.ndarray     # (n, 2 * n_pins)

    def __post_init__(self):
        n = len(self.sensor_ids)
        if not (len(self.contacts) == len(self.forces) == len(self.features) == n):
            raise ValueError("dataset columns disagree in length")

    def __len__(self) -> int:
        return len(self.sensor_ids)

    def labels(self) -> np.ndarray:
        """(n, 6) regression targets [z, alpha, beta, fx, fy, fz]."""
        return np.hstack([self.contacts[:, :3], self.forces])

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.sensor_ids[idx], self.contacts[idx], self.forces[idx], self.features[idx]
        )

    @staticmethod
    def concatenate(parts) -> "Dataset":
        return Dataset(
            np.concatenate([p.sensor_ids for p in parts]),
            np.concatenate([p.contacts for p in parts]),
            np.concatenate([p.forces for p in parts]),
            np.concatenate([p.features for p in parts]),
        )

    @staticmethod
    def empty(n_features: int) -> "Dataset":
        return Dataset(
            np.zeros(0, dtype=int),
            np.zeros((0, 5)),
            np.zeros((0, 3)),
            np.zeros((0, n_features)),
        )


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed."""


def trajectory(c: ContactState) -> list[ContactState]:
    """Discretized tap-and-shear motion ending at the commanded contact."""
    steps = []
    for k in range(TRAJECTORY_STEPS):
        if k < TAP_STEPS:
            a = (k + 1) / TAP_STEPS
            steps.append(ContactState(z=a * c.z, alpha=a * c.alpha, beta=a * c.beta))
        elif k < TAP_STEPS + SHEAR_STEPS:
            a = (k + 1 - TAP_STEPS) / SHEAR_STEPS
            steps.append(
                ContactState(
                    z=c.z, alpha=c.alpha, beta=c.beta,
                    shear_x=a * c.shear_x, shear_y=a * c.shear_y,
                )
            )
        else:
            steps.append(c)
    return steps


def _collect_samples(sensor: Sensor, contacts, cfg: CollectionConfig, rng) -> Dataset:
    n = len(contacts)
    feats = np.empty((n, 2 * sensor.geom.n_pins))
    forces = np.empty((n, 3))
    rows = np.empty((n, 5))
    for i, c in enumerate(contacts):
        readings = np.empty((TRAJECTORY_STEPS, 3))
        for k, step in enumerate(trajectory(c)):
            f, _, _ = sensor.contact_force(step)
            readings[k] = (f.fx, f.fy, f.fz)
        if cfg.ft_noise > 0:
            readings += rng.normal(0.0, cfg.ft_noise, readings.shape)
        smoothed = np.column_stack(
            [hybrid_filter(readings[:, j], cfg.filter) for j in range(3)]
        )
        forces[i] = smoothed[-1]
        frame, _, _ = sensor.sense(c, rng=rng)
        feats[i] = frame_features(frame)
        rows[i] = (c.z, c.alpha, c.beta, c.shear_x, c.shear_y)
    ids = np.full(n, sensor.sensor_id, dtype=int)
    return Dataset(ids, rows, forces, feats)


def _draw_contacts(rng, n: int, r: ContactRanges) -> list[ContactState]:
    z = rng.uniform(*r.z, n)
    alpha = rng.uniform(*r.alpha, n)
    beta = rng.uniform(*r.beta, n)
    sx = rng.uniform(*r.shear, n)
    sy = rng.uniform(*r.shear, n)
    return [ContactState(z[i], alpha[i], beta[i], sx[i], sy[i]) for i in range(n)]


def collect(sensor: Sensor, cfg: CollectionConfig = CollectionConfig()):
    """Run the collection protocol; returns disjoint (train, val, test) sets.

    Deterministic under cfg.seed: the same seed reproduces the datasets
    bit for bit.
    """
    rng = np.random.default_rng(cfg.seed)
    train_val = _collect_samples(sensor, _draw_contacts(rng, cfg.n_train_val, cfg.ranges), cfg, rng)
    test = _collect_samples(sensor, _draw_contacts(rng, cfg.n_test, cfg.ranges), cfg, rng)
    n_train = int(round(cfg.split * cfg.n_train_val))
    perm = rng.permutation(cfg.n_train_val)
    train = train_val.subset(perm[:n_train])
    val = train_val.subset(perm[n_train:])
    return train, val, test


def steady_force(sensor: Sensor, c: ContactState) -> np.ndarray:
    """Unfiltered post-slip force at the end of the tap-and-shear motion."""
    f, _, _ = sensor.contact_force(c)
    return f.as_array()


def _header(n_features: int) -> str:
    cols = ["sensor_id", "z", "alpha", "beta", "shear_x", "shear_y", "fx", "fy", "fz"]
    cols += [f"f{i}" for i in range(n_features)]
    return ",".join(cols)


def save_dataset(ds: Dataset, path):
    """Write a dataset as UTF-8 CSV with >= 9 significant digits."""
    path = Path(path)
    n_features = ds.features.shape[1]
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(_header(n_features) + "\n")
        for i in range(len(ds)):
            vals = [str(int(ds.sensor_ids[i]))]
            vals += [f"{v:.12g}" for v in ds.contacts[i]]
            vals += [f"{v:.12g}" for v in ds.forces[i]]
            vals += [f"{v:.12g}" for v in ds.features[i]]
            fh.write(",".join(vals) + "\n")


def load_dataset(path) -> Dataset:
    """Parse a dataset CSV; malformed input raises DatasetFormatError
    naming the failing record."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        n_feat = len(header.split(",")) - 9
        if n_feat < 0 or header != _header(n_feat):
            raise DatasetFormatError(f"{path}: unrecognized header")
        ids, contacts, forces, feats = [], [], [], []
        for rec, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 9 + n_feat:
                raise DatasetFormatError(
                    f"{path}: record {rec}: expected {9 + n_feat} fields, got {len(parts)}"
                )
            try:
                ids.append(int(parts[0]))
                row = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise DatasetFormatError(f"{path}: record {rec}: {exc}") from exc
            contacts.append(row[0:5])
            forces.append(row[5:8])
            feats.append(row[8:])
    return Dataset(
        np.array(ids, dtype=int),
        np.array(contacts).reshape(-1, 5),
        np.array(forces).reshape(-1, 3),
        np.array(feats).reshape(-1, n_feat),
    )


def save_metadata(path, sensor: Sensor, cfg: CollectionConfig):
    """Sidecar JSON recording the filter and noise settings used for labels."""
    meta = {
        "sensor_id": sensor.sensor_id,
        "variation": asdict(sensor.var),
        "collection": {
            "n_train_val": cfg.n_train_val,
            "split": cfg.split,
            "n_test": cfg.n_test,
            "ft_noise": cfg.ft_noise,
            "seed": cfg.seed,
        },
        "label_filter": asdict(cfg.filter),
        "trajectory_steps": TRAJECTORY_STEPS,
    }
    Path(path).write_text(json.dumps(meta, indent=2), encoding="utf-8")
