"""Small networks, their flat parameter layout, and the stochastic energy.

The energy of a mini-batch ``B`` drawn from a dataset of size ``n`` is

    U~(theta) = [ (n/|B|) * sum_{i in B} -log p(y_i | x_i, theta) + lam * ||theta||^2 ] / T

with additive normalisation constants of likelihood and prior dropped, so
energy values are only comparable within a run.  A prior precision ``lam``
corresponds to a zero-mean Gaussian prior with variance ``1 / (2 lam)``.
Classification uses a softmax likelihood, regression a unit-variance
Gaussian.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import Tape
from .errors import ConfigurationError, ContractError

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class ArchitectureConfig:
    """Either a dense network or a small 3x3 convolutional network.

    For ``kind="mlp"``, ``layer_widths`` lists every width including the input
    and the output, e.g. ``(784, 32, 10)``.  For ``kind="conv"``,
    ``input_shape`` is ``(channels, height, width)`` and the network is
    ``conv_depth`` same-padded convolutions with ``channels`` filters each,
    global average pooling and a dense read-out.  ``residual`` adds skip
    connections around every hidden layer whose input and output widths agree.
    """

    kind: str = "mlp"
    layer_widths: tuple = ()
    input_shape: tuple = ()
    channels: int = 4
    conv_depth: int = 1
    residual: bool = False
    activation: str = "relu"
    num_outputs: int = 0
    likelihood: str = "categorical"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.likelihood not in ("categorical", "gaussian"):
            raise ConfigurationError(f"unknown likelihood {self.likelihood!r}")
        if self.kind == "mlp":
            if len(self.layer_widths) < 2 or min(self.layer_widths) <= 0:
                raise ConfigurationError(f"mlp needs >= 2 positive widths, got {self.layer_widths}")
            object.__setattr__(self, "input_shape", (self.layer_widths[0],))
            object.__setattr__(self, "num_outputs", self.layer_widths[-1])
        elif self.kind == "conv":
            shape = self.input_shape
            if len(shape) == 2:
                shape = (1,) + shape
                object.__setattr__(self, "input_shape", shape)
            if len(shape) != 3 or min(shape) <= 0:
                raise ConfigurationError(f"conv input_shape must be (C, H, W), got {self.input_shape}")
            if self.channels <= 0 or self.conv_depth <= 0 or self.num_outputs <= 0:
                raise ConfigurationError("conv channels, depth and num_outputs must be positive")
        else:
            raise ConfigurationError(f"unknown architecture kind {self.kind!r}")
        if self.likelihood == "gaussian" and self.num_outputs != 1:
            raise ConfigurationError("gaussian likelihood needs exactly one output")

    @classmethod
    def mlp(cls, widths, activation="relu", residual=False, likelihood="categorical"):
        return cls(kind="mlp", layer_widths=tuple(widths), activation=activation,
                   residual=residual, likelihood=likelihood)

    @classmethod
    def conv(cls, input_shape, channels, depth, num_classes, residual=False, activation="relu"):
        return cls(kind="conv", input_shape=tuple(input_shape), channels=channels,
                   conv_depth=depth, residual=residual, activation=activation,
                   num_outputs=num_classes)

    def to_dict(self):
        return {
            "kind": self.kind,
            "layer_widths": list(self.layer_widths),
            "input_shape": list(self.input_shape),
            "channels": self.channels,
            "conv_depth": self.conv_depth,
            "residual": self.residual,
            "activation": self.activation,
            "num_outputs": self.num_outputs,
            "likelihood": self.likelihood,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class LayoutEntry(NamedTuple):
    name: str
    shape: tuple
    offset: int

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=int))


@dataclass(frozen=True)
class Layout:
    entries: tuple

    @property
    def size(self):
        if not self.entries:
            return 0
        last = self.entries[-1]
        return last.offset + last.size

    def names(self):
        return [e.name for e in self.entries]

    def unflatten(self, values):
        return {e.name: values[e.offset:e.offset + e.size].reshape(e.shape) for e in self.entries}

    def slice(self, name):
        for e in self.entries:
            if e.name == name:
                return slice(e.offset, e.offset + e.size)
        raise KeyError(name)

    def layer_of(self, index):
        for e in self.entries:
            if e.offset <= index < e.offset + e.size:
                return e.name
        raise IndexError(index)

    def to_list(self):
        return [[e.name, list(e.shape), e.offset] for e in self.entries]

    @classmethod
    def from_list(cls, items):
        return cls(tuple(LayoutEntry(n, tuple(s), int(o)) for n, s, o in items))


def _layout_from_shapes(shapes):
    entries, offset = [], 0
    for name, shape in shapes:
        entries.append(LayoutEntry(name, tuple(shape), offset))
        offset += int(np.prod(shape, dtype=int))
    return Layout(tuple(entries))


def build_layout(arch):
    shapes = []
    if arch.kind == "mlp":
        w = arch.layer_widths
        for i in range(len(w) - 1):
            shapes.append((f"dense{i}.weight", (w[i], w[i + 1])))
            shapes.append((f"dense{i}.bias", (w[i + 1],)))
    else:
        c_in = arch.input_shape[0]
        for k in range(arch.conv_depth):
            shapes.append((f"conv{k}.weight", (arch.channels, c_in if k == 0 else arch.channels, 3, 3)))
            shapes.append((f"conv{k}.bias", (arch.channels,)))
        shapes.append(("head.weight", (arch.channels, arch.num_outputs)))
        shapes.append(("head.bias", (arch.num_outputs,)))
    return _layout_from_shapes(shapes)


@dataclass
class ParamVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.layout.size,):
            raise ContractError(f"values length {self.values.shape} != layout size {self.layout.size}")

    @property
    def d(self):
        return self.layout.size

    def tensors(self):
        return self.layout.unflatten(self.values)


@dataclass
class DataBatch:
    inputs: np.ndarray
    labels: np.ndarray
    dataset_size_n: int

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ContractError("inputs and labels disagree in length")
        if len(self.inputs) == 0:
            raise ContractError("empty batch")
        if self.batch_size > self.dataset_size_n:
            raise ContractError(f"batch of {self.batch_size} exceeds dataset size {self.dataset_size_n}")

    @property
    def batch_size(self):
        return len(self.inputs)

    @property
    def scale(self):
        """The n/|B| factor that makes the mini-batch energy unbiased."""
        return self.dataset_size_n / self.batch_size


def init_params(arch, seed):
    """Fan-in scaled Gaussian weights (std sqrt(2/fan_in)); zero biases."""
    layout = build_layout(arch)
    rng = np.random.default_rng(seed)
    values = np.zeros(layout.size)
    for e in layout.entries:
        if e.name.endswith(".bias"):
            continue
        if len(e.shape) == 4:
            fan_in = e.shape[1] * e.shape[2] * e.shape[3]
        else:
            fan_in = e.shape[0]
        values[e.offset:e.offset + e.size] = rng.normal(0.0, np.sqrt(2.0 / fan_in), e.size)
    return ParamVector(values, layout)


@dataclass
class EnergyModel:
    arch: ArchitectureConfig
    prior_precision: float = 0.0
    temperature: float = 1.0
    layout: Layout = field(init=False)

    def __post_init__(self):
        if self.prior_precision < 0:
            raise ConfigurationError("prior precision must be non-negative")
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be positive")
        self.layout = build_layout(self.arch)

    @property
    def prior_variance(self):
        return np.inf if self.prior_precision == 0 else 1.0 / (2.0 * self.prior_precision)

    @property
    def d(self):
        return self.layout.size

    # -- graph construction ---------------------------------------------

    def _inputs(self, inputs):
        x = np.asarray(inputs, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ContractError("non-finite inputs")
        want = self.arch.input_shape
        if x.shape[1:] == want:
            return x
        if int(np.prod(x.shape[1:], dtype=int)) == int(np.prod(want, dtype=int)):
            return x.reshape((len(x),) + want)
        raise ContractError(f"input shape {x.shape[1:]} does not match architecture {want}")

    def _graph(self, tape, theta, grad, inputs):
        values = np.asarray(theta, dtype=float)
        if values.shape != (self.d,):
            raise ContractError(f"theta has shape {values.shape}, expected ({self.d},)")
        p = self.layout.unflatten(values)
        g = self.layout.unflatten(grad) if grad is not None else {}
        leaf = {name: tape.leaf(p[name], g.get(name)) for name in p}
        act = tape.relu if self.arch.activation == "relu" else tape.identity
        x = tape.constant(self._inputs(inputs))
        arch = self.arch
        if arch.kind == "mlp":
            n_layers = len(arch.layer_widths) - 1
            for i in range(n_layers):
                h = tape.add_bias(tape.matmul(x, leaf[f"dense{i}.weight"]), leaf[f"dense{i}.bias"])
                if i == n_layers - 1:
                    x = h
                    break
                h = act(h)
                if arch.residual and i > 0 and arch.layer_widths[i] == arch.layer_widths[i + 1]:
                    h = tape.add(x, h)
                x = h
            return x
        for k in range(arch.conv_depth):
            h = act(tape.add_bias(tape.conv2d(x, leaf[f"conv{k}.weight"]), leaf[f"conv{k}.bias"], axis=1))
            if arch.residual and k > 0:
                h = tape.add(x, h)
            x = h
        pooled = tape.mean_pool(x)
        return tape.add_bias(tape.matmul(pooled, leaf["head.weight"]), leaf["head.bias"])

    def _data_term(self, tape, out, batch):
        if self.arch.likelihood == "categorical":
            labels = np.asarray(batch.labels, dtype=int)
            if labels.min() < 0 or labels.max() >= self.arch.num_outputs:
                raise ContractError("label out of range")
            return tape.softmax_xent(out, labels)
        return tape.squared_error(out, np.asarray(batch.labels, dtype=float).reshape(-1))

    # -- public API ------------------------------------------------------

    def forward(self, theta, inputs):
        return self._graph(Tape(), _values(theta), None, inputs).value

    def value(self, theta, batch):
        theta = _values(theta)
        tape = Tape()
        nll = self._data_term(tape, self._graph(tape, theta, None, batch.inputs), batch).value
        return (batch.scale * nll + self.prior_precision * float(theta @ theta)) / self.temperature

    def grad(self, theta, batch):
        theta = _values(theta)
        grad = np.zeros(self.d)
        tape = Tape()
        out = self._graph(tape, theta, grad, batch.inputs)
        loss = self._data_term(tape, out, batch)
        tape.backward(loss, seed=batch.scale)
        grad += 2.0 * self.prior_precision * theta
        grad /= self.temperature
        return grad

    def value_and_grad(self, theta, batch):
        theta = _values(theta)
        grad = np.zeros(self.d)
        tape = Tape()
        out = self._graph(tape, theta, grad, batch.inputs)
        loss = self._data_term(tape, out, batch)
        tape.backward(loss, seed=batch.scale)
        grad += 2.0 * self.prior_precision * theta
        grad /= self.temperature
        value = (batch.scale * loss.value + self.prior_precision * float(theta @ theta)) / self.temperature
        return value, grad

    def log_likelihood(self, theta, inputs, labels):
        """Per-example log p(y | x, theta)."""
        out = self.forward(theta, inputs)
        if self.arch.likelihood == "categorical":
            return log_softmax(out)[np.arange(len(out)), np.asarray(labels, dtype=int)]
        resid = out.reshape(-1) - np.asarray(labels, dtype=float).reshape(-1)
        return -0.5 * resid ** 2 - 0.5 * np.log(2 * np.pi)

    def predict_proba(self, theta, inputs):
        return softmax(self.forward(theta, inputs))


def _values(theta):
    return theta.values if isinstance(theta, ParamVector) else np.asarray(theta, dtype=float)


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def forward(model, theta, batch):
    inputs = batch.inputs if isinstance(batch, DataBatch) else batch
    return model.forward(theta, inputs)


def energy_value(model, theta, batch):
    return model.value(theta, batch)


def energy_grad(model, theta, batch):
    return model.grad(theta, batch)


_UNIT_ROUNDOFF = np.finfo(float).eps / 2


def finite_diff_check(model, theta, batch, epsilon=1e-5, coords=None, grad=None, floor=1e-6):
    """Largest relative error between the model gradient and central differences.

    ``coords`` restricts the comparison to a subset of coordinates.  ``grad``
    replaces the analytic gradient, which is how the check is fault-tested.
    The relative error per coordinate is
    ``max(0, |a - f| - r) / max(|a|, |f|, floor)`` where
    ``r = 4 u (|U+| + |U-|) / (2 epsilon)`` bounds the rounding error of the
    central difference itself (``u`` is the unit roundoff).
    """
    if not 1e-8 <= epsilon <= 1e-2:
        raise ContractError("epsilon must lie in [1e-8, 1e-2]")
    theta = _values(theta).copy()
    analytic = model.grad(theta, batch) if grad is None else np.asarray(grad, dtype=float)
    idx = np.arange(theta.size) if coords is None else np.asarray(coords)
    worst = 0.0
    for i in idx:
        orig = theta[i]
        theta[i] = orig + epsilon
        up = model.value(theta, batch)
        theta[i] = orig - epsilon
        down = model.value(theta, batch)
        theta[i] = orig
        fd = (up - down) / (2 * epsilon)
        rounding = 4 * _UNIT_ROUNDOFF * (abs(up) + abs(down)) / (2 * epsilon)
        a = analytic[i]
        worst = max(worst, max(0.0, abs(a - fd) - rounding) / max(abs(a), abs(fd), floor))
    return worst
