"""Network assembly from a declarative layer spec, loss, and persistence."""

from __future__ import annotations

import json
import os

import numpy as np

from ..errors import ConfigError, InputFormatError
from ..features import InputStats
from . import layers as L

#: layer stack for the 110x110x2 spectrogram regression task; the output
#: width must equal the number of identified parameters
DEFAULT_SPEC = (
    ("conv", {"filters": 64, "kernel": 3}),
    ("relu", {}),
    ("maxpool", {"size": 2}),
    ("conv", {"filters": 32, "kernel": 3}),
    ("relu", {}),
    ("maxpool", {"size": 2}),
    ("conv", {"filters": 16, "kernel": 3}),
    ("relu", {}),
    ("maxpool", {"size": 2}),
    ("flatten", {}),
    ("dense", {"units": 128}),
    ("relu", {}),
    ("dense", {"units": 7}),
)

DEFAULT_INPUT_SHAPE = (110, 110, 2)


def spec_to_json(spec):
    return [[kind, dict(args)] for kind, args in spec]


def spec_from_json(data):
    return tuple((kind, dict(args)) for kind, args in data)


class Network:
    """A feed-forward stack built from a spec; operates on single examples."""

    def __init__(self, spec=DEFAULT_SPEC, input_shape=DEFAULT_INPUT_SHAPE,
                 rng=None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        self.spec = tuple((kind, dict(args)) for kind, args in spec)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.layers = []
        shape = self.input_shape
        for kind, args in self.spec:
            if kind == "conv":
                if len(shape) != 3:
                    raise ConfigError("conv layer needs a 3-d input")
                layer = L.Conv2D(shape, rng=rng, dtype=dtype, **args)
            elif kind == "relu":
                layer = L.Relu()
            elif kind == "maxpool":
                if len(shape) != 3:
                    raise ConfigError("maxpool layer needs a 3-d input")
                layer = L.MaxPool2D(shape, **args)
            elif kind == "flatten":
                layer = L.Flatten(shape)
            elif kind == "dense":
                if len(shape) != 1:
                    raise ConfigError("dense layer needs a flat input")
                layer = L.Dense(shape, rng=rng, dtype=dtype, **args)
            else:
                raise ConfigError(f"unknown layer kind {kind!r}")
            self.layers.append(layer)
            shape = layer.out_shape(shape)
        self.output_shape = shape

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape != self.input_shape:
            raise ConfigError(f"input shape {x.shape} != {self.input_shape}")
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, dy):
        dy = np.asarray(dy, dtype=self.dtype)
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def predict(self, x):
        return self.forward(x, train=False)

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    @property
    def grads(self):
        return [g for layer in self.layers for g in layer.grads]

    def get_weights(self):
        return [p.copy() for p in self.params]

    def set_weights(self, weights):
        params = self.params
        if len(weights) != len(params):
            raise ConfigError("weight list length mismatch")
        for p, w in zip(params, weights):
            if p.shape != w.shape:
                raise ConfigError("weight shape mismatch")
            p[...] = w


def mse_loss(pred, target):
    """Mean squared error over outputs (and batch); returns (loss, grad).

    For a single example the gradient is 2 * (pred - target) / n_outputs;
    for a batch the batch mean is folded in.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ConfigError("pred and target shapes differ")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return loss, grad


def sgd_momentum_step(weights, velocity, gradients, lr, momentum):
    """Classical momentum update in place: v <- mu*v - lr*g; w <- w + v."""
    for w, v, g in zip(weights, velocity, gradients):
        v *= momentum
        v -= lr * g
        w += v


def save_model(path, model):
    """Write a trained model directory: manifest + weight blob."""
    os.makedirs(path, exist_ok=True)
    manifest = {
        "spec": spec_to_json(model.net.spec),
        "input_shape": list(model.net.input_shape),
        "dtype": model.net.dtype.name,
        "input_stats": model.input_stats.to_dict(),
        "target_stats": model.target_stats.to_dict(),
        "history": model.history,
        "train_config": model.train_config,
        "n_weights": len(model.net.params),
    }
    with open(os.path.join(path, "model.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    np.savez(os.path.join(path, "weights.npz"),
             **{f"w{i}": w for i, w in enumerate(model.net.params)})


def load_model(path):
    """Load a model directory written by save_model."""
    from .train import TrainedModel  # local import to avoid a cycle
    from ..dataset import NormStats

    try:
        with open(os.path.join(path, "model.json")) as fh:
            manifest = json.load(fh)
        blob = np.load(os.path.join(path, "weights.npz"))
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        raise InputFormatError(f"{path}: cannot load model: {exc}")
    net = Network(
        spec=spec_from_json(manifest["spec"]),
        input_shape=tuple(manifest["input_shape"]),
        dtype=np.dtype(manifest["dtype"]),
    )
    weights = [blob[f"w{i}"] for i in range(manifest["n_weights"])]
    net.set_weights(weights)
    return TrainedModel(
        net=net,
        input_stats=InputStats.from_dict(manifest["input_stats"]),
        target_stats=NormStats.from_dict(manifest["target_stats"]),
        history=manifest["history"],
        train_config=manifest["train_config"],
    )
