"""Pose/force regression: a dense network trained with hand-written
backpropagation, the four multi-sensor training strategies, and MAE
evaluation.

The network maps marker-displacement features to the six-vector
[z, alpha, beta, fx, fy, fz]. Hidden layers use the rectifier, the output
is linear, and training minimizes a per-output-normalized mean squared
error with an adaptive-moment optimizer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datagen import Dataset

MODEL_FORMAT_VERSION = 1

# Per-output normalization of the training loss (z mm, tilts deg,
# forces N). Roughly the output spans, with the normal force kept on the
# shear scale so all three force channels train equally hard.
OUTPUT_SCALES = np.array([4.0, 20.0, 20.0, 4.0, 4.0, 6.0])

DEFAULT_LAYER_SIZES = (434, 512, 512, 6)

STRATEGIES = ("individual", "aggregate", "progressive_transfer", "standard_transfer")


class TrainingError(RuntimeError):
    """Raised when training diverges."""


class ModelFormatError(ValueError):
    """Raised when a model file cannot be loaded."""


@dataclass
class Standardizer:
    """Per-dimension z-score transform fitted on a training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        return cls(mean, std)

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


class Regressor:
    """Fully connected rectifier network with a linear output layer."""

    def __init__(self, layer_sizes=DEFAULT_LAYER_SIZES, seed: int = 0):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2:
            raise ValueError("need at least input and output layers")
        self.layer_sizes = sizes
        self.standardizer: Standardizer | None = None
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = np.sqrt(2.0 / fan_in)
            self.weights.append(rng.normal(0.0, scale, (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "Regressor":
        dup = Regressor.__new__(Regressor)
        dup.layer_sizes = list(self.layer_sizes)
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        dup.standardizer = (
            None
            if self.standardizer is None
            else Standardizer(self.standardizer.mean.copy(), self.standardizer.std.copy())
        )
        return dup

    def _forward(self, x: np.ndarray):
        """Forward pass on standardized input; returns activations per layer."""
        acts = [x]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            if i < self.n_layers - 1:
                z = np.maximum(z, 0.0)
            acts.append(z)
        return acts

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.layer_sizes[0]:
            raise ValueError(
                f"feature length {x.shape[1]} does not match input layer {self.layer_sizes[0]}"
            )
        if self.standardizer is not None:
            x = self.standardizer.transform(x)
        return self._forward(x)[-1]


def _loss_and_grads(model: Regressor, x: np.ndarray, y: np.ndarray, scales: np.ndarray):
    """Normalized batch MSE and its gradients w.r.t. every parameter.

    Loss = mean over samples and outputs of ((pred - y) / scale)^2.
    """
    acts = model._forward(x)
    pred = acts[-1]
    err = (pred - y) / scales
    loss = float(np.mean(err * err))
    n, m = y.shape
    delta = 2.0 * err / (scales * n * m)
    grads_w = [None] * model.n_layers
    grads_b = [None] * model.n_layers
    for i in range(model.n_layers - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0.0)
    return loss, grads_w, grads_b


def gradients(model: Regressor, x: np.ndarray, y: np.ndarray, scales=OUTPUT_SCALES):
    """Gradients of the normalized batch MSE for an already-standardized batch."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[1] != model.layer_sizes[0]:
        raise ValueError("batch feature length does not match the input layer")
    loss, gw, gb = _loss_and_grads(model, x, y, np.asarray(scales, dtype=float))
    return loss, gw, gb


def batch_loss(model: Regressor, x: np.ndarray, y: np.ndarray, scales=OUTPUT_SCALES) -> float:
    """Normalized MSE of the model on an already-standardized batch."""
    scales = np.asarray(scales, dtype=float)
    err = (model._forward(np.atleast_2d(x))[-1] - y) / scales
    return float(np.mean(err * err))


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    decay: float = 1e-6          # learning-rate decay per update
    epochs: int = 40
    seed: int = 0
    layer_sizes: tuple = DEFAULT_LAYER_SIZES
    output_scales: tuple = tuple(OUTPUT_SCALES)
    pretrain_epochs: int | None = None   # aggregate stage of standard transfer
    finetune_epochs: int | None = None   # per-sensor stage of transfer strategies
    finetune_lr: float | None = None

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class TrainResult:
    train_loss: list[float] = field(default_factory=list)  # per-epoch mean batch loss
    val_loss: list[float] = field(default_factory=list)


def train(
    model: Regressor,
    data: Dataset,
    cfg: TrainConfig = TrainConfig(),
    val: Dataset | None = None,
    epochs: int | None = None,
    lr: float | None = None,
) -> TrainResult:
    """Train in place; deterministic under cfg.seed.

    The feature standardizer is fitted on the first training set the model
    sees and kept through any later fine-tuning. Divergence (non-finite
    loss) raises TrainingError naming the epoch.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    x_raw = data.features
    if x_raw.shape[1] != model.layer_sizes[0]:
        raise ValueError(
            f"feature length {x_raw.shape[1]} does not match input layer {model.layer_sizes[0]}"
        )
    if model.standardizer is None:
        model.standardizer = Standardizer.fit(x_raw)
    x = model.standardizer.transform(x_raw)
    y = data.labels()
    xv = yv = None
    if val is not None and len(val) > 0:
        xv = model.standardizer.transform(val.features)
        yv = val.labels()

    n_epochs = cfg.epochs if epochs is None else epochs
    base_lr = cfg.lr if lr is None else lr
    scales = np.asarray(cfg.output_scales, dtype=float)
    rng = np.random.default_rng(cfg.seed)
    m_w = [np.zeros_like(w) for w in model.weights]
    v_w = [np.zeros_like(w) for w in model.weights]
    m_b = [np.zeros_like(b) for b in model.biases]
    v_b = [np.zeros_like(b) for b in model.biases]
    step = 0
    result = TrainResult()

    for epoch in range(n_epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(data), cfg.batch):
            idx = order[start : start + cfg.batch]
            loss, gw, gb = _loss_and_grads(model, x[idx], y[idx], scales)
            if not np.isfinite(loss):
                raise TrainingError(f"training diverged at epoch {epoch}")
            losses.append(loss)
            step += 1
            lr_t = base_lr / (1.0 + cfg.decay * step)
            corr1 = 1.0 - cfg.beta1**step
            corr2 = 1.0 - cfg.beta2**step
            for i in range(model.n_layers):
                m_w[i] = cfg.beta1 * m_w[i] + (1 - cfg.beta1) * gw[i]
                v_w[i] = cfg.beta2 * v_w[i] + (1 - cfg.beta2) * gw[i] ** 2
                m_b[i] = cfg.beta1 * m_b[i] + (1 - cfg.beta1) * gb[i]
                v_b[i] = cfg.beta2 * v_b[i] + (1 - cfg.beta2) * gb[i] ** 2
                model.weights[i] -= lr_t * (m_w[i] / corr1) / (np.sqrt(v_w[i] / corr2) + 1e-8)
                model.biases[i] -= lr_t * (m_b[i] / corr1) / (np.sqrt(v_b[i] / corr2) + 1e-8)
        result.train_loss.append(float(np.mean(losses)))
        if xv is not None:
            result.val_loss.append(batch_loss(model, xv, yv, scales))
    return result


@dataclass
class EvalResult:
    mae: np.ndarray          # (6,) mean absolute error per output
    predictions: np.ndarray  # (n, 6)
    labels: np.ndarray       # (n, 6)


def evaluate(model: Regressor, test: Dataset) -> EvalResult:
    """Per-output MAE plus the predicted-vs-label pairs for scatter export."""
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = model.predict(test.features)
    labels = test.labels()
    return EvalResult(np.abs(pred - labels).mean(axis=0), pred, labels)


def run_strategy(
    strategy: str,
    train_sets: list[Dataset],
    cfg: TrainConfig = TrainConfig(),
    val_sets: list[Dataset] | None = None,
) -> list[Regressor]:
    """Train models for one of the four multi-sensor learning approaches.

    individual            -> 5 models, one per sensor's own data
    aggregate             -> 1 model on the concatenated data
    progressive_transfer  -> 1 model trained on each sensor in turn,
                             inheriting weights between stages
    standard_transfer     -> aggregate pre-training, then one fine-tuned
                             copy per sensor

    Returns one model (aggregate, progressive) or five (individual,
    standard transfer).
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if len(train_sets) == 0 or any(ds is None or len(ds) == 0 for ds in train_sets):
        raise ValueError("every sensor needs a non-empty training set")
    vals = val_sets if val_sets is not None else [None] * len(train_sets)
    ft_epochs = cfg.finetune_epochs or cfg.epochs
    ft_lr = cfg.finetune_lr or cfg.lr

    if strategy == "individual":
        models = []
        for ds, vs in zip(train_sets, vals):
            model = Regressor(cfg.layer_sizes, seed=cfg.seed)
            train(model, ds, cfg, val=vs)
            models.append(model)
        return models

    if strategy == "aggregate":
        model = Regressor(cfg.layer_sizes, seed=cfg.seed)
        merged_val = None
        if val_sets is not None:
            merged_val = Dataset.concatenate([v for v in val_sets if v is not None])
        train(model, Dataset.concatenate(train_sets), cfg, val=merged_val)
        return [model]

    if strategy == "progressive_transfer":
        model = Regressor(cfg.layer_sizes, seed=cfg.seed)
        # standardizer from the union so later stages see comparable inputs
        model.standardizer = Standardizer.fit(Dataset.concatenate(train_sets).features)
        for ds, vs in zip(train_sets, vals):
            train(model, ds, cfg, val=vs)
        return [model]

    # standard transfer
    pre = Regressor(cfg.layer_sizes, seed=cfg.seed)
    pre_epochs = cfg.pretrain_epochs or cfg.epochs
    merged_val = None
    if val_sets is not None:
        merged_val = Dataset.concatenate([v for v in val_sets if v is not None])
    train(pre, Dataset.concatenate(train_sets), cfg, val=merged_val, epochs=pre_epochs)
    models = []
    for ds, vs in zip(train_sets, vals):
        tuned = pre.copy()
        train(tuned, ds, cfg, val=vs, epochs=ft_epochs, lr=ft_lr)
        models.append(tuned)
    return models


def save_model(model: Regressor, path):
    """Versioned JSON document; floats round-trip exactly."""
    std = model.standardizer
    if std is None:
        std = Standardizer.identity(model.layer_sizes[0])
    doc = {
        "version": MODEL_FORMAT_VERSION,
        "layer_sizes": list(model.layer_sizes),
        "standardizer": {"mean": std.mean.tolist(), "std": std.std.tolist()},
        "layers": [
            {"w": w.ravel().tolist(), "b": b.tolist()}
            for w, b in zip(model.weights, model.biases)
        ],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_model(path) -> Regressor:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        version = doc["version"]
        if version != MODEL_FORMAT_VERSION:
            raise ModelFormatError(f"{path}: unsupported model version {version}")
        sizes = [int(s) for s in doc["layer_sizes"]]
        model = Regressor(sizes, seed=0)
        model.standardizer = Standardizer(
            np.asarray(doc["standardizer"]["mean"], dtype=float),
            np.asarray(doc["standardizer"]["std"], dtype=float),
        )
        if model.standardizer.mean.shape != (sizes[0],):
            raise ModelFormatError(f"{path}: standardizer does not match input layer")
        layers = doc["layers"]
        if len(layers) != len(sizes) - 1:
            raise ModelFormatError(f"{path}: layer count does not match layer_sizes")
        for i, layer in enumerate(layers):
            w = np.asarray(layer["w"], dtype=float)
            b = np.asarray(layer["b"], dtype=float)
            if w.size != sizes[i] * sizes[i + 1] or b.size != sizes[i + 1]:
                raise ModelFormatError(f"{path}: layer {i} has wrong shape")
            model.weights[i] = w.reshape(sizes[i], sizes[i + 1])
            model.biases[i] = b
        return model
    except ModelFormatError:
        raise
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: corrupt model file ({exc})") from exc
