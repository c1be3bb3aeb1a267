"""Mini-batch SGD-with-momentum training loop with validation tracking."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DivergenceError
from ..features import input_normalize
from .network import Network, mse_loss, sgd_momentum_step


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    lr_decay: float = 1.0  # per-epoch multiplicative decay
    shuffle: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    def to_dict(self):
        return {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "lr_decay": self.lr_decay,
            "shuffle": self.shuffle,
        }


@dataclass
class TrainedModel:
    """Network plus the statistics and history needed to apply it."""

    net: Network
    input_stats: object
    target_stats: object
    history: dict
    train_config: dict = field(default_factory=dict)

    def predict_normalized(self, image):
        """Normalized 7-vector prediction for a raw spectrogram image."""
        x = input_normalize(image, self.input_stats)
        return np.asarray(self.net.predict(x), dtype=np.float64)

    @property
    def best_val_mse(self):
        return min(self.history["val_mse"])


def evaluate_mse(net, images, targets, input_stats):
    """Mean MSE of the network over a stack of raw images."""
    total = 0.0
    for i in range(images.shape[0]):
        pred = net.predict(input_normalize(images[i], input_stats))
        loss, _ = mse_loss(pred, targets[i])
        total += loss
    return total / images.shape[0]


def train(ds, spec=None, cfg: TrainConfig = TrainConfig(), input_shape=None,
          log=None) -> TrainedModel:
    """Train on the dataset's training half, tracking validation MSE.

    Keeps the weights of the best validation epoch. Raises
    DivergenceError when the loss goes non-finite (a sign the learning
    rate is too high for the data scale).
    """
    from .network import DEFAULT_SPEC, DEFAULT_INPUT_SHAPE

    if spec is None:
        spec = DEFAULT_SPEC
    if input_shape is None:
        input_shape = ds.images.shape[1:] if hasattr(ds, "images") else DEFAULT_INPUT_SHAPE
    train_idx = ds.train_indices
    val_idx = ds.val_indices
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ConfigError("dataset must contain both training and validation halves")

    rng = np.random.default_rng(cfg.seed)
    net = Network(spec, input_shape=input_shape, rng=rng)
    velocity = [np.zeros_like(p) for p in net.params]

    history = {"train_mse": [], "val_mse": [], "epoch_seconds": []}
    best_val = np.inf
    best_weights = net.get_weights()
    best_epoch = -1
    lr = cfg.learning_rate

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_idx)) if cfg.shuffle else np.arange(len(train_idx))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = train_idx[order[start:start + cfg.batch_size]]
            net.zero_grad()
            batch_loss = 0.0
            for i in batch:
                x = input_normalize(ds.images[i], ds.input_stats)
                pred = net.forward(x, train=True)
                loss, dy = mse_loss(pred, ds.targets[i])
                batch_loss += loss
                net.backward(dy)
            if not np.isfinite(batch_loss):
                raise DivergenceError(
                    f"training loss became non-finite in epoch {epoch}; "
                    "reduce the learning rate"
                )
            for g in net.grads:
                g /= len(batch)
            sgd_momentum_step(net.params, velocity, net.grads, lr, cfg.momentum)
            epoch_loss += batch_loss
        epoch_loss /= len(order)
        val_mse = evaluate_mse(net, ds.images[val_idx], ds.targets[val_idx], ds.input_stats)
        history["train_mse"].append(epoch_loss)
        history["val_mse"].append(val_mse)
        history["epoch_seconds"].append(time.perf_counter() - t0)
        if val_mse < best_val:
            best_val = val_mse
            best_weights = net.get_weights()
            best_epoch = epoch
        if log is not None:
            log(epoch, epoch_loss, val_mse)
        lr *= cfg.lr_decay

    net.set_weights(best_weights)
    history["best_epoch"] = best_epoch
    return TrainedModel(
        net=net,
        input_stats=ds.input_stats,
        target_stats=ds.param_stats,
        history=history,
        train_config=cfg.to_dict(),
    )
