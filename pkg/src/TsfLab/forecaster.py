"""
Small channel-independent forecasters with analytic gradients.

Both architectures map the L_in-step history of channel c to the L_out-step
forecast of channel c and never mix channels:

- ``linear``: one weight matrix W_c (L_out x L_in) and bias b_c per channel.
- ``mlp``: one shared two-layer network L_in -> H -> L_out with a tanh hidden layer.

Models work on z-normalized data; a Checkpoint couples a model with the
Normalizer needed to forecast in data units.
"""

import json
import math
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from TsfLab.errors import ConfigError, DivergenceError, EmptyMaskError, WindowError
from TsfLab.series_core import FloatArray, Normalizer

logger = getLogger(__name__)

ARCHITECTURES = ("linear", "mlp")
OPTIMIZERS = ("adam", "sgd")
SMOOTH_L1_DELTA = 1.0

Params = Dict[str, FloatArray]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    loss: str = "smooth_l1"
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError(
                f"must be non-negative, got {self.learning_rate}", field="learning_rate"
            )
        if self.batch_size < 1:
            raise ConfigError(f"must be >= 1, got {self.batch_size}", field="batch_size")
        if self.loss != "smooth_l1":
            raise ConfigError(f"only smooth_l1 is supported, got '{self.loss}'", field="loss")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(
                f"must be one of {OPTIMIZERS}, got '{self.optimizer}'", field="optimizer"
            )


@dataclass
class ModelParams:
    """Parameters of one forecaster (or backcaster) and the shapes it maps between."""

    architecture: str
    n_in: int
    n_out: int
    n_channels: int
    hidden: int = 32
    weights: Params = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(
            architecture=self.architecture,
            n_in=self.n_in,
            n_out=self.n_out,
            n_channels=self.n_channels,
            hidden=self.hidden,
            weights={name: value.copy() for name, value in self.weights.items()},
        )

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(value))) for value in self.weights.values())

    def to_dict(self) -> Dict[str, object]:
        return {
            "architecture": self.architecture,
            "n_in": self.n_in,
            "n_out": self.n_out,
            "n_channels": self.n_channels,
            "hidden": self.hidden,
            "shapes": {name: list(value.shape) for name, value in self.weights.items()},
            "weights": {name: value.ravel().tolist() for name, value in self.weights.items()},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "ModelParams":
        shapes = data["shapes"]
        flat = data["weights"]
        assert isinstance(shapes, dict) and isinstance(flat, dict)
        return cls(
            architecture=str(data["architecture"]),
            n_in=int(str(data["n_in"])),
            n_out=int(str(data["n_out"])),
            n_channels=int(str(data["n_channels"])),
            hidden=int(str(data["hidden"])),
            weights={
                name: np.asarray(flat[name], dtype=np.float64).reshape(shapes[name])
                for name in flat
            },
        )


def init_params(
    architecture: str,
    n_in: int,
    n_out: int,
    n_channels: int,
    rng: np.random.Generator,
    hidden: int = 32,
) -> ModelParams:
    """Uniform fan-in initialization, biases included."""
    if architecture not in ARCHITECTURES:
        raise ValueError(f"architecture must be one of {ARCHITECTURES}, got '{architecture}'")

    def uniform(fan_in: int, shape: Tuple[int, ...]) -> FloatArray:
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    if architecture == "linear":
        weights = {
            "W": uniform(n_in, (n_channels, n_out, n_in)),
            "b": uniform(n_in, (n_channels, n_out)),
        }
    else:
        weights = {
            "W1": uniform(n_in, (hidden, n_in)),
            "b1": uniform(n_in, (hidden,)),
            "W2": uniform(hidden, (n_out, hidden)),
            "b2": uniform(hidden, (n_out,)),
        }
    return ModelParams(
        architecture=architecture,
        n_in=n_in,
        n_out=n_out,
        n_channels=n_channels,
        hidden=hidden,
        weights=weights,
    )


class _Forward(NamedTuple):
    outputs: FloatArray  # B x n_out x C
    inputs: FloatArray  # B x C x n_in
    hidden: Optional[FloatArray]  # B x C x H (mlp only)


def _forward(model: ModelParams, inputs: FloatArray) -> _Forward:
    if inputs.ndim != 3 or inputs.shape[1:] != (model.n_in, model.n_channels):
        raise WindowError(
            f"expected inputs of shape (B, {model.n_in}, {model.n_channels}), "
            f"got {inputs.shape}"
        )
    by_channel = inputs.transpose(0, 2, 1)
    weights = model.weights
    if model.architecture == "linear":
        outputs = np.einsum("col,bcl->bco", weights["W"], by_channel) + weights["b"]
        return _Forward(outputs.transpose(0, 2, 1), by_channel, None)
    hidden = np.tanh(by_channel @ weights["W1"].T + weights["b1"])
    outputs = hidden @ weights["W2"].T + weights["b2"]
    return _Forward(outputs.transpose(0, 2, 1), by_channel, hidden)


def _backward(model: ModelParams, forward: _Forward, grad_outputs: FloatArray) -> Params:
    # grad_outputs: B x n_out x C
    grad_by_channel = grad_outputs.transpose(0, 2, 1)
    if model.architecture == "linear":
        return {
            "W": np.einsum("bco,bcl->col", grad_by_channel, forward.inputs),
            "b": grad_by_channel.sum(axis=0),
        }
    assert forward.hidden is not None
    weights = model.weights
    grad_hidden = (grad_by_channel @ weights["W2"]) * (1.0 - forward.hidden**2)
    return {
        "W1": np.einsum("bch,bcl->hl", grad_hidden, forward.inputs),
        "b1": grad_hidden.sum(axis=(0, 1)),
        "W2": np.einsum("bco,bch->oh", grad_by_channel, forward.hidden),
        "b2": grad_by_channel.sum(axis=(0, 1)),
    }


def predict_batch(model: ModelParams, inputs: FloatArray) -> FloatArray:
    """Forecast a batch of B x n_in x C inputs."""
    return _forward(model, inputs).outputs


def predict(model: ModelParams, history: FloatArray) -> FloatArray:
    """Forecast one n_in x C history; returns n_out x C."""
    return predict_batch(model, history[np.newaxis])[0]


def smooth_l1(prediction: FloatArray, target: FloatArray) -> Tuple[FloatArray, FloatArray]:
    """Elementwise SmoothL1 loss (delta = 1) and its derivative w.r.t. the prediction."""
    if prediction.shape != target.shape:
        raise WindowError(
            f"prediction shape {prediction.shape} does not match target {target.shape}"
        )
    error = prediction - target
    small = np.abs(error) <= SMOOTH_L1_DELTA
    loss = np.where(
        small,
        0.5 * error**2,
        SMOOTH_L1_DELTA * (np.abs(error) - 0.5 * SMOOTH_L1_DELTA),
    )
    grad = np.where(small, error, SMOOTH_L1_DELTA * np.sign(error))
    return loss, grad


class MaskedLoss(NamedTuple):
    value: float
    grads: Params
    weight: float


def masked_loss(
    model: ModelParams, inputs: FloatArray, targets: FloatArray, mask: FloatArray
) -> MaskedLoss:
    """
    Masked empirical loss over a batch.

    Every channel-window contributes its mean SmoothL1 over the horizon, weighted by
    mask[b, c]; the sum is divided by the mask total. The whole multivariate input is
    always fed to the model.
    """
    weight = float(mask.sum())
    if weight <= 0.0:
        raise EmptyMaskError("every channel-window of the batch is masked out")
    forward = _forward(model, inputs)
    losses, grads = smooth_l1(forward.outputs, targets)
    n_out = targets.shape[1]
    window_losses = losses.mean(axis=1)
    value = float((window_losses * mask).sum() / weight)
    grad_outputs = grads * mask[:, np.newaxis, :] / (n_out * weight)
    return MaskedLoss(value=value, grads=_backward(model, forward, grad_outputs), weight=weight)


def window_losses(model: ModelParams, inputs: FloatArray, targets: FloatArray) -> FloatArray:
    """Per-window, per-channel mean SmoothL1 (N x C) without gradients."""
    outputs = predict_batch(model, inputs)
    losses, _ = smooth_l1(outputs, targets)
    return losses.mean(axis=1)


@dataclass
class OptimizerState:
    step: int = 0
    first_moment: Params = field(default_factory=dict)
    second_moment: Params = field(default_factory=dict)


class Optimizer:
    """Adam (beta1=0.9, beta2=0.999, eps=1e-8) or plain SGD, updating in place."""

    beta1 = 0.9
    beta2 = 0.999
    epsilon = 1e-8

    def __init__(self, kind: str, learning_rate: float) -> None:
        if kind not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got '{kind}'")
        self.kind = kind
        self.learning_rate = learning_rate
        self.state = OptimizerState()

    def step(self, model: ModelParams, grads: Params) -> None:
        self.state.step += 1
        if self.kind == "sgd":
            for name, grad in grads.items():
                model.weights[name] -= self.learning_rate * grad
            return
        step = self.state.step
        for name, grad in grads.items():
            first = self.state.first_moment.setdefault(name, np.zeros_like(grad))
            second = self.state.second_moment.setdefault(name, np.zeros_like(grad))
            first *= self.beta1
            first += (1.0 - self.beta1) * grad
            second *= self.beta2
            second += (1.0 - self.beta2) * grad**2
            corrected_first = first / (1.0 - self.beta1**step)
            corrected_second = second / (1.0 - self.beta2**step)
            model.weights[name] -= (
                self.learning_rate
                * corrected_first
                / (np.sqrt(corrected_second) + self.epsilon)
            )


EpochCallback = Callable[[int, ModelParams], None]


def train_epochs(  # pylint: disable=too-many-arguments
    model: ModelParams,
    inputs: FloatArray,
    targets: FloatArray,
    mask: FloatArray,
    config: TrainConfig,
    epochs: int,
    rng: Optional[np.random.Generator] = None,
    optimizer: Optional[Optimizer] = None,
    callback: Optional[EpochCallback] = None,
) -> List[float]:
    """
    Run shuffled mini-batch epochs on the masked objective; the model is updated in place.

    Windows whose mask row is all zero are dropped before batching, so masking a
    whole window is the same as removing it. Returns the mean batch loss per epoch.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    optimizer = optimizer or Optimizer(config.optimizer, config.learning_rate)
    active = np.flatnonzero(mask.sum(axis=1) > 0)
    epoch_losses: List[float] = []
    for epoch in range(epochs):
        order = active[rng.permutation(active.shape[0])]
        batch_losses: List[float] = []
        for start in range(0, order.shape[0], config.batch_size):
            batch = order[start : start + config.batch_size]
            try:
                result = masked_loss(model, inputs[batch], targets[batch], mask[batch])
            except EmptyMaskError:
                logger.warning(f"epoch {epoch}: skipped an all-masked batch")
                continue
            if not math.isfinite(result.value):
                raise DivergenceError(f"training loss became {result.value} in epoch {epoch}")
            optimizer.step(model, result.grads)
            batch_losses.append(result.value)
        if not model.is_finite():
            raise DivergenceError(f"parameters became non-finite in epoch {epoch}")
        epoch_loss = float(np.mean(batch_losses)) if batch_losses else 0.0
        epoch_losses.append(epoch_loss)
        logger.debug(f"epoch {epoch}: loss {epoch_loss:.6f} over {len(batch_losses)} batches")
        if callback is not None:
            callback(epoch, model)
    return epoch_losses


def flip(windows: FloatArray) -> FloatArray:
    """Reverse B x L x C windows along time."""
    return np.ascontiguousarray(windows[:, ::-1, :])


def train_backcaster(  # pylint: disable=too-many-arguments
    architecture: str,
    histories: FloatArray,
    futures: FloatArray,
    epochs: int,
    config: TrainConfig,
    hidden: int = 32,
    allow_untrained: bool = False,
) -> ModelParams:
    """Train a fresh model mapping the flipped future to the flipped history."""
    if epochs < 1 and not allow_untrained:
        raise ValueError(f"backcaster needs at least one epoch, got {epochs}")
    rng = np.random.default_rng(config.seed)
    n_windows, l_in, n_channels = histories.shape
    backcaster = init_params(architecture, futures.shape[1], l_in, n_channels, rng, hidden)
    train_epochs(
        backcaster,
        flip(futures),
        flip(histories),
        np.ones((n_windows, n_channels)),
        config,
        epochs,
        rng=rng,
    )
    logger.info(f"backcaster trained for {epochs} epochs on {n_windows} windows")
    return backcaster


def rcf_losses(backcaster: ModelParams, histories: FloatArray, futures: FloatArray) -> FloatArray:
    """Reverse-consistency loss of every window and channel (N x C)."""
    return window_losses(backcaster, flip(futures), flip(histories))


def rcf_loss(
    backcaster: ModelParams, history: FloatArray, future: FloatArray, channel: int
) -> float:
    """Reverse-consistency loss of one L_in x C / L_out x C window on one channel."""
    losses = rcf_losses(backcaster, history[np.newaxis], future[np.newaxis])
    return float(losses[0, channel])


@dataclass
class Checkpoint:
    """A trained model plus the normalization it was trained under."""

    model: ModelParams
    normalizer: Normalizer

    def forecast(self, histories: FloatArray) -> FloatArray:
        """Forecast B x L_in x C raw histories in data units."""
        normalized = self.normalizer.transform(histories)
        return self.normalizer.inverse_transform(predict_batch(self.model, normalized))

    def to_dict(self) -> Dict[str, object]:
        return {"model": self.model.to_dict(), "normalization": self.normalizer.to_dict()}

    def save(
        self, path: Union[str, Path], provenance: Optional[Dict[str, Any]] = None
    ) -> None:
        Path(path).write_text(
            json.dumps({**self.to_dict(), **(provenance or {})}, indent=2, sort_keys=True),
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            model=ModelParams.from_dict(data["model"]),
            normalizer=Normalizer.from_dict(data["normalization"]),
        )
