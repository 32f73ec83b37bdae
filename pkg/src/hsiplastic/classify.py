"""Per-pixel binary classifiers trained with mini-batch Adam.

Three model families share one optimiser loop:

* logistic regression on binary cross-entropy,
* a linear SVM on the primal hinge loss (labels mapped to -1/+1),
* a ReLU multilayer perceptron with hidden widths 100, 50, 25 and a single
  sigmoid output unit trained on binary cross-entropy.

All parameters are float64 while training. ``predict_scores`` evaluates in the
dtype of the features it is given, so float32 cubes are scored in float32.
"""

from __future__ import annotations

import enum
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Union

import numpy as np

from hsiplastic.cube_io import IGNORE, CalibrationState, LabelMask, SpectralCube

MLP_HIDDEN = (100, 50, 25)
MODEL_FORMAT_VERSION = 1
DEFAULT_SVM_L2 = 1e-4
INFERENCE_CHUNK = 1 << 16


class TrainingError(ValueError):
    pass


class ModelShapeError(ValueError):
    pass


class ModelKind(str, enum.Enum):
    LOGISTIC = "logistic"
    SVM = "svm"
    MLP = "mlp"


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.features)
        y = np.asarray(self.labels).ravel()
        if x.ndim != 2:
            raise TrainingError(f"features must be (N, B), got shape {x.shape}")
        if x.shape[0] != y.shape[0]:
            raise TrainingError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if x.shape[0] < 1 or x.shape[1] < 1:
            raise TrainingError("dataset needs at least one sample and one band")
        if not np.all(np.isfinite(x)):
            raise TrainingError("features contain non-finite values")
        if not np.all((y == 0) | (y == 1)):
            raise TrainingError("labels must be 0 or 1")
        self.features = x
        self.labels = y.astype(np.int64)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def bands(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray) -> Dataset:
        return Dataset(self.features[idx], self.labels[idx])

    def has_both_classes(self) -> bool:
        return bool(self.labels.min() == 0 and self.labels.max() == 1)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 1024
    # None selects the per-family default (0 for LR/MLP, 1e-4 for SVM)
    l2: float | None = None
    seed: int = 0
    patience: int = 5

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise TrainingError("learning_rate must be positive")
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.patience < 1:
            raise TrainingError("patience must be >= 1")

    def l2_for(self, kind: ModelKind) -> float:
        if self.l2 is not None:
            return float(self.l2)
        return DEFAULT_SVM_L2 if kind is ModelKind.SVM else 0.0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> TrainConfig:
        d = dict(d or {})
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise TrainingError(f"unknown training options {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# models


@dataclass(eq=False)
class LinearModel:
    weights: np.ndarray
    bias: float
    kind: ModelKind = ModelKind.LOGISTIC
    training_config: dict[str, Any] | None = None

    def __post_init__(self) -> None:
        self.kind = ModelKind(self.kind)
        if self.kind is ModelKind.MLP:
            raise ModelShapeError("LinearModel kind must be logistic or svm")
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.bias = float(self.bias)
        if not (np.all(np.isfinite(self.weights)) and math.isfinite(self.bias)):
            raise TrainingError("model parameters must be finite")

    @classmethod
    def zeros(cls, bands: int, kind: ModelKind | str = ModelKind.LOGISTIC) -> LinearModel:
        return cls(np.zeros(bands), 0.0, ModelKind(kind))

    @property
    def input_width(self) -> int:
        return self.weights.size

    @property
    def layer_widths(self) -> list[int]:
        return [self.input_width, 1]

    @property
    def is_probabilistic(self) -> bool:
        return self.kind is ModelKind.LOGISTIC

    def params(self) -> list[np.ndarray]:
        return [self.weights, np.array([self.bias])]

    def with_params(self, params: list[np.ndarray]) -> LinearModel:
        w, b = params
        return LinearModel(w.copy(), float(b[0]), self.kind, self.training_config)


@dataclass(eq=False)
class MLPModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    training_config: dict[str, Any] | None = None
    kind: ModelKind = field(default=ModelKind.MLP, init=False)

    def __post_init__(self) -> None:
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).ravel() for b in self.biases]
        if len(self.weights) != len(MLP_HIDDEN) + 1 or len(self.biases) != len(self.weights):
            raise ModelShapeError(f"MLP needs {len(MLP_HIDDEN) + 1} layers")
        widths = [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]
        if tuple(widths[1:]) != (*MLP_HIDDEN, 1):
            raise ModelShapeError(f"MLP layer widths must be [B, 100, 50, 25, 1], got {widths}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[0] != widths[i] or b.shape != (w.shape[1],):
                raise ModelShapeError(f"layer {i} has inconsistent shapes {w.shape} / {b.shape}")
        for p in self.params():
            if not np.all(np.isfinite(p)):
                raise TrainingError("model parameters must be finite")

    @classmethod
    def zeros(cls, bands: int) -> MLPModel:
        widths = [bands, *MLP_HIDDEN, 1]
        return cls(
            [np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])],
            [np.zeros(b) for b in widths[1:]],
        )

    @classmethod
    def initialize(cls, bands: int, rng: np.random.Generator) -> MLPModel:
        """Uniform weights in +-1/sqrt(fan_in), zero biases."""
        widths = [bands, *MLP_HIDDEN, 1]
        weights = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            lim = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        return cls(weights, [np.zeros(b) for b in widths[1:]])

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def layer_widths(self) -> list[int]:
        return [self.input_width] + [w.shape[1] for w in self.weights]

    @property
    def is_probabilistic(self) -> bool:
        return True

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def with_params(self, params: list[np.ndarray]) -> MLPModel:
        k = len(self.weights)
        return MLPModel([p.copy() for p in params[:k]], [p.copy() for p in params[k:]],
                        self.training_config)


Model = Union[LinearModel, MLPModel]


# --------------------------------------------------------------------------
# losses


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form: exact 0.5 at zero, no overflow for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _bce_from_logits(z: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(_softplus(z) - y * z))


def _mlp_forward(model: MLPModel, x: np.ndarray, keep: bool = False):
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.astype(h.dtype, copy=False) + b.astype(h.dtype, copy=False)
        h = z if i == last else np.maximum(z, 0)
        if keep:
            acts.append(h)
    return h[:, 0], acts


def loss_and_grad(model: Model, x: np.ndarray, y: np.ndarray, l2: float = 0.0) -> tuple[float, list[np.ndarray]]:
    """Mean training loss and its gradient for every entry of ``model.params()``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    n = x.shape[0]
    if isinstance(model, LinearModel):
        w = model.weights
        z = x @ w + model.bias
        if model.kind is ModelKind.LOGISTIC:
            loss = _bce_from_logits(z, y)
            dz = (_sigmoid(z) - y) / n
        else:
            ys = 2.0 * y - 1.0
            margin = ys * z
            loss = float(np.mean(np.maximum(0.0, 1.0 - margin)))
            dz = np.where(margin < 1.0, -ys, 0.0) / n
        loss += 0.5 * l2 * float(w @ w)
        gw = x.T @ dz + l2 * w
        gb = np.array([dz.sum()])
        return loss, [gw, gb]

    z, acts = _mlp_forward(model, x, keep=True)
    loss = _bce_from_logits(z, y)
    delta = ((_sigmoid(z) - y) / n)[:, None]
    k = len(model.weights)
    gws: list[np.ndarray] = [None] * k  # type: ignore[list-item]
    gbs: list[np.ndarray] = [None] * k  # type: ignore[list-item]
    for i in range(k - 1, -1, -1):
        gws[i] = acts[i].T @ delta
        gbs[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    if l2:
        loss += 0.5 * l2 * sum(float((w * w).sum()) for w in model.weights)
        gws = [g + l2 * w for g, w in zip(gws, model.weights)]
    return loss, [*gws, *gbs]


def dataset_loss(model: Model, data: Dataset, l2: float = 0.0) -> float:
    """Training objective on ``data`` without computing gradients."""
    x = np.asarray(data.features, dtype=np.float64)
    y = data.labels.astype(np.float64)
    if isinstance(model, LinearModel):
        z = x @ model.weights + model.bias
        if model.kind is ModelKind.LOGISTIC:
            loss = _bce_from_logits(z, y)
        else:
            loss = float(np.mean(np.maximum(0.0, 1.0 - (2.0 * y - 1.0) * z)))
        return loss + 0.5 * l2 * float(model.weights @ model.weights)
    z, _ = _mlp_forward(model, x)
    loss = _bce_from_logits(z, y)
    if l2:
        loss += 0.5 * l2 * sum(float((w * w).sum()) for w in model.weights)
    return loss


# --------------------------------------------------------------------------
# training


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False


def fit(model: Model, data: Dataset, cfg: TrainConfig, validation: Dataset | None = None) -> tuple[Model, TrainHistory]:
    """Run mini-batch Adam from ``model``; returns the trained model and loss history.

    When ``validation`` is given, the parameters with the lowest validation
    loss are returned and training stops after ``cfg.patience`` epochs without
    improvement. Batches cover the whole set without shuffling once
    ``batch_size >= len(data)``.
    """
    if not data.has_both_classes():
        raise TrainingError("training data must contain both classes")
    if data.bands != model.input_width:
        raise ModelShapeError(f"data has {data.bands} bands, model expects {model.input_width}")
    if validation is not None and validation.bands != data.bands:
        raise ModelShapeError("validation data band count differs from training data")

    l2 = cfg.l2_for(model.kind)
    x = np.asarray(data.features, dtype=np.float64)
    y = data.labels.astype(np.float64)
    n = len(data)
    rng = np.random.default_rng(cfg.seed)
    params = [p.copy() for p in model.params()]
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.learning_rate
    t = 0
    full_batch = cfg.batch_size >= n
    hist = TrainHistory()
    best = None
    best_val = math.inf
    stale = 0

    current = model
    for epoch in range(cfg.epochs):
        order = np.arange(n) if full_batch else rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = x if full_batch else x[idx]
            yb = y if full_batch else y[idx]
            loss, grads = loss_and_grad(current, xb, yb, l2)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            epoch_loss += loss * len(idx)
            t += 1
            c1 = 1.0 - b1**t
            c2 = 1.0 - b2**t
            for p, g, a, v in zip(params, grads, m1, m2):
                a *= b1
                a += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                p -= lr * (a / c1) / (np.sqrt(v / c2) + eps)
            current = current.with_params(params)
        hist.train_loss.append(epoch_loss / n)

        if validation is not None:
            vl = dataset_loss(current, validation, l2)
            if not math.isfinite(vl):
                raise TrainingError(f"non-finite validation loss at epoch {epoch}")
            hist.val_loss.append(vl)
            if vl < best_val:
                best_val = vl
                best = current
                hist.best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    hist.stopped_early = True
                    break

    final = best if best is not None else current
    final.training_config = cfg.to_dict()
    return final, hist


def _as_dataset(data: Dataset | tuple[np.ndarray, np.ndarray]) -> Dataset:
    return data if isinstance(data, Dataset) else Dataset(*data)


def train_logistic(data, cfg: TrainConfig | None = None, validation: Dataset | None = None) -> LinearModel:
    data = _as_dataset(data)
    cfg = cfg or TrainConfig()
    model, _ = fit(LinearModel.zeros(data.bands, ModelKind.LOGISTIC), data, cfg, validation)
    return model  # type: ignore[return-value]


def train_svm(data, cfg: TrainConfig | None = None, validation: Dataset | None = None) -> LinearModel:
    data = _as_dataset(data)
    cfg = cfg or TrainConfig()
    model, _ = fit(LinearModel.zeros(data.bands, ModelKind.SVM), data, cfg, validation)
    return model  # type: ignore[return-value]


def train_mlp(data, cfg: TrainConfig | None = None, validation: Dataset | None = None) -> MLPModel:
    data = _as_dataset(data)
    cfg = cfg or TrainConfig()
    # initialisation and batch order draw from independent streams of one seed
    init_rng = np.random.default_rng([cfg.seed, 1])
    model, _ = fit(MLPModel.initialize(data.bands, init_rng), data, cfg, validation)
    return model  # type: ignore[return-value]


TRAINERS = {
    ModelKind.LOGISTIC: train_logistic,
    ModelKind.SVM: train_svm,
    ModelKind.MLP: train_mlp,
}


def train(kind: ModelKind | str, data, cfg: TrainConfig | None = None, validation: Dataset | None = None) -> Model:
    return TRAINERS[ModelKind(kind)](data, cfg, validation)


# --------------------------------------------------------------------------
# inference


def _scores_chunk(model: Model, x: np.ndarray) -> np.ndarray:
    dt = x.dtype
    if isinstance(model, LinearModel):
        z = x @ model.weights.astype(dt) + dt.type(model.bias)
        return _sigmoid(z) if model.kind is ModelKind.LOGISTIC else z
    z, _ = _mlp_forward(model, x)
    return _sigmoid(z)


def default_threshold(model: Model) -> float:
    return 0.5 if model.is_probabilistic else 0.0


def predict_scores(model: Model, features: np.ndarray, workers: int = 1,
                   chunk: int = INFERENCE_CHUNK) -> np.ndarray:
    """Scores per row: probabilities for LR/MLP, raw margins for the SVM.

    Work is split into fixed row chunks, so results do not depend on
    ``workers``.
    """
    x = np.asarray(features)
    if x.ndim != 2:
        raise ModelShapeError(f"features must be (N, B), got shape {x.shape}")
    if x.shape[1] != model.input_width:
        raise ModelShapeError(f"features have {x.shape[1]} bands, model expects {model.input_width}")
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    n = x.shape[0]
    out = np.empty(n, dtype=x.dtype)
    starts = range(0, n, chunk)

    def run(s: int) -> None:
        out[s:s + chunk] = _scores_chunk(model, x[s:s + chunk])

    if workers <= 1 or n <= chunk:
        for s in starts:
            run(s)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, starts))
    return out


def predict_mask(model: Model, cube: SpectralCube, threshold: float | None = None,
                 valid: np.ndarray | None = None, workers: int = 1) -> LabelMask:
    """Classify every pixel: 1 iff score > threshold; pixels not ``valid`` become 255."""
    if cube.state is not CalibrationState.REFLECTANCE:
        raise ValueError("predict_mask needs a reflectance cube")
    if cube.bands != model.input_width:
        raise ModelShapeError(f"cube has {cube.bands} bands, model expects {model.input_width}")
    t = default_threshold(model) if threshold is None else threshold
    keep = np.ones(cube.height * cube.width, dtype=bool) if valid is None else np.asarray(valid, bool).ravel()
    if keep.size != cube.height * cube.width:
        raise ModelShapeError("validity mask does not match cube dimensions")
    labels = np.full(cube.height * cube.width, IGNORE, dtype=np.uint8)
    if keep.any():
        scores = predict_scores(model, cube.pixels()[keep], workers=workers)
        labels[keep] = (scores > t).astype(np.uint8)
    return LabelMask(labels.reshape(cube.height, cube.width))


# --------------------------------------------------------------------------
# model files


def model_to_dict(model: Model, seed: int | None = None) -> dict[str, Any]:
    if isinstance(model, LinearModel):
        weights = [model.weights.reshape(-1, 1).tolist()]
        biases = [[model.bias]]
    else:
        weights = [w.tolist() for w in model.weights]
        biases = [b.tolist() for b in model.biases]
    cfg = model.training_config
    if seed is None and cfg is not None:
        seed = cfg.get("seed")
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": model.kind.value,
        "layer_widths": model.layer_widths,
        "weights": weights,
        "biases": biases,
        "training_config": cfg,
        "seed": seed,
    }


def model_from_dict(d: dict[str, Any]) -> Model:
    if d.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelShapeError(f"unsupported model format version {d.get('format_version')!r}")
    kind = ModelKind(d["kind"])
    cfg = d.get("training_config")
    if kind is ModelKind.MLP:
        model: Model = MLPModel([np.array(w) for w in d["weights"]], [np.array(b) for b in d["biases"]], cfg)
    else:
        (w,), (b,) = d["weights"], d["biases"]
        model = LinearModel(np.array(w).ravel(), float(b[0]), kind, cfg)
    if list(d["layer_widths"]) != model.layer_widths:
        raise ModelShapeError(f"layer_widths {d['layer_widths']} disagree with weights {model.layer_widths}")
    return model


def save_model(model: Model, path: str | Path, seed: int | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model, seed), fh, sort_keys=True)
        fh.write("\n")


def load_model(path: str | Path) -> Model:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def zero_model(kind: ModelKind | str, bands: int) -> Model:
    kind = ModelKind(kind)
    if kind is ModelKind.MLP:
        return MLPModel.zeros(bands)
    return LinearModel.zeros(bands, kind)

