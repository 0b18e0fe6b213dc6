"""Feature extractor and optimizer.

The extractor is a small multilayer perceptron producing d-dimensional
features; each training objective consumes only that final feature, so the
architecture stays deliberately plain. Also houses the learnable head
scalars: the softmax/sigmoid peakness temperature and the raw parameter
behind the learnable rectification bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

# Keys holding head scalars inside a model's parameter dict; everything else
# is a backbone weight and receives weight decay.
ETA_KEY = "eta"
ETA_VII_KEY = "eta_vii"
PNBR_RAW_KEY = "pnbr_raw"
HEAD_KEYS = (ETA_KEY, ETA_VII_KEY, PNBR_RAW_KEY)

_ACTIVATIONS = ("relu", "tanh")


@dataclass
class BackboneConfig:
    input_dim: int
    hidden: tuple[int, ...] = (32,)
    feature_dim: int = 8
    activation: str = "relu"
    seed: int = 0
    eta_init: float = 10.0
    pnbr_bound_init: float = 0.1
    separate_vii_eta: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.hidden:
            raise ValueError("backbone needs at least one hidden layer")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {_ACTIVATIONS}")
        if not 0.0 < self.pnbr_bound_init < 1.0:
            raise ValueError("pnbr_bound_init must sit strictly inside (0, 1)")


def _tanh(t: ad.Tensor) -> ad.Tensor:
    # tanh(x) = 2*sigmoid(2x) - 1, built from the primitive set
    return ad.sub(ad.mul(2.0, ad.sigmoid(ad.mul(2.0, t))), 1.0)


class Model:
    """Live trainable model: backbone weights plus head scalars.

    Parameters are plain float64 arrays; each training step wraps them as
    tape parameters, so the arrays themselves persist across steps while
    tapes stay single-use.
    """

    def __init__(self, config: BackboneConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.params: dict[str, np.ndarray] = {}
        widths = [config.input_dim, *config.hidden, config.feature_dim]
        for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
            scale = math.sqrt(2.0 / fan_in) if config.activation == "relu" else math.sqrt(1.0 / fan_in)
            self.params[f"w{i}"] = rng.standard_normal((fan_in, fan_out)) * scale
            self.params[f"b{i}"] = np.zeros(fan_out)
        self.params[ETA_KEY] = np.asarray(float(config.eta_init))
        if config.separate_vii_eta:
            self.params[ETA_VII_KEY] = np.asarray(float(config.eta_init))
        p0 = config.pnbr_bound_init
        self.params[PNBR_RAW_KEY] = np.asarray(math.log(p0 / (1.0 - p0)))

    @property
    def backbone_keys(self) -> list[str]:
        return [k for k in self.params if k not in HEAD_KEYS]

    def layer_count(self) -> int:
        return len(self.config.hidden) + 1


def forward_features(params: dict[str, ad.Tensor], config: BackboneConfig, inputs) -> ad.Tensor:
    """Run the MLP on a constant input batch; returns an (n, d) feature tensor.

    ``params`` may hold tape parameters (training) or plain constants
    (snapshots, evaluation); the arithmetic path is identical either way.
    """
    x = ad.constant(np.atleast_2d(np.asarray(inputs, dtype=np.float64)))
    if x.shape[1] != config.input_dim:
        raise ad.ShapeError(f"input dim {x.shape[1]} != configured {config.input_dim}")
    layers = len(config.hidden) + 1
    for i in range(layers):
        x = ad.add(ad.matmul(x, params[f"w{i}"]), params[f"b{i}"])
        if i < layers - 1:
            x = ad.relu(x) if config.activation == "relu" else _tanh(x)
    if not np.isfinite(x.data).all():
        bad = int(np.flatnonzero(~np.isfinite(x.data).all(axis=1))[0])
        raise ad.DomainError(f"non-finite activation for instance {bad}", index=bad)
    return x


def extract(model: Model, inputs, tape: ad.Tape | None = None) -> ad.Tensor:
    """Features for a batch; differentiable when a tape is supplied."""
    if tape is None:
        wrapped = {k: ad.Tensor(v) for k, v in model.params.items()}
    else:
        wrapped = {k: tape.parameter(v) for k, v in model.params.items()}
    return forward_features(wrapped, model.config, inputs)


def extract_arrays(model: Model, inputs) -> np.ndarray:
    return extract(model, inputs, tape=None).data


@dataclass(frozen=True)
class ModelSnapshot:
    """Frozen end-of-task copy of the model; features never change again."""

    config: BackboneConfig
    params: dict[str, np.ndarray]

    def features(self, inputs) -> np.ndarray:
        wrapped = {k: ad.Tensor(v) for k, v in self.params.items()}
        return forward_features(wrapped, self.config, inputs).data


def snapshot(model: Model) -> ModelSnapshot:
    frozen = {}
    for k, v in model.params.items():
        c = v.copy()
        c.setflags(write=False)
        frozen[k] = c
    return ModelSnapshot(config=model.config, params=frozen)


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 160
    milestones: tuple[int, ...] = (80, 120)
    decay_factor: float = 0.1
    batch_size: int = 32

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch size must be positive")
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ValueError("milestones must be strictly increasing")
        if any(m >= self.epochs or m <= 0 for m in self.milestones):
            raise ValueError("milestones must lie strictly inside (0, epochs)")


def learning_rate_at(config: OptimizerConfig, epoch: int) -> float:
    """Schedule value for a 0-based epoch index; pure function of the index."""
    passed = sum(1 for m in config.milestones if epoch >= m)
    return config.learning_rate * config.decay_factor**passed


class SgdOptimizer:
    """SGD with classical momentum; decay applies to backbone weights only."""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], epoch: int, decay_keys) -> None:
        missing = set(params) ^ set(grads)
        if missing:
            raise KeyError(f"gradient map does not match parameters: {sorted(missing)}")
        lr = learning_rate_at(self.config, epoch)
        decay_keys = set(decay_keys)
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ad.ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
            if name in decay_keys and self.config.weight_decay:
                g = g + self.config.weight_decay * p
            if self.config.momentum:
                buf = self.buffers.get(name)
                buf = g.copy() if buf is None else self.config.momentum * buf + g
                self.buffers[name] = buf
                g = buf
            p -= lr * g
