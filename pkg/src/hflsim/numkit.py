"""Dense numeric core: flat parameter vectors, two small classifiers, SGD and clipping.

Models are stored as a single float64 vector plus an ordered layer layout, so that
noise, clipping, aggregation and masking all act on one array.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from hflsim.datagen import LabeledBatch
from hflsim.errors import ConfigurationError

LINEAR = "linear-softmax"
MLP = "mlp-1hidden"

_KIND_ALIASES = {
    "linear": LINEAR,
    "linear-softmax": LINEAR,
    "mlp": MLP,
    "mlp-1hidden": MLP,
}

Layout = tuple[tuple[str, tuple[int, ...]], ...]


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 parameters with a (layer-name, dims) layout."""

    values: np.ndarray
    shape: Layout

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            values = values.reshape(-1)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "shape", tuple((str(n), tuple(int(d) for d in dims)) for n, dims in self.shape))
        expected = sum(int(np.prod(dims)) for _, dims in self.shape)
        if expected != values.size:
            raise ValueError(f"layout describes {expected} elements, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise FloatingPointError("non-finite parameter values")

    @classmethod
    def flat(cls, values: np.ndarray, name: str = "flat") -> "ParamVector":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        return cls(values, ((name, (values.size,)),))

    @property
    def size(self) -> int:
        return self.values.size

    def like(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.shape)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.shape)

    def layer_slices(self) -> Iterator[tuple[str, slice, tuple[int, ...]]]:
        start = 0
        for name, dims in self.shape:
            stop = start + int(np.prod(dims))
            yield name, slice(start, stop), dims
            start = stop

    def layers(self) -> dict[str, np.ndarray]:
        return {name: self.values[sl].reshape(dims) for name, sl, dims in self.layer_slices()}

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __add__(self, other: "ParamVector") -> "ParamVector":
        return self.like(self.values + _values(other))

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        return self.like(self.values - _values(other))

    def __mul__(self, scalar: float) -> "ParamVector":
        return self.like(self.values * float(scalar))

    __rmul__ = __mul__

    def __truediv__(self, scalar: float) -> "ParamVector":
        return self.like(self.values / float(scalar))

    def __neg__(self) -> "ParamVector":
        return self.like(-self.values)

    def __repr__(self) -> str:
        return f"ParamVector(size={self.size}, layers={[n for n, _ in self.shape]})"


def _values(x: ParamVector | np.ndarray) -> np.ndarray:
    return x.values if isinstance(x, ParamVector) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class Model:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0

    def __post_init__(self) -> None:
        kind = _KIND_ALIASES.get(self.kind)
        if kind is None:
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.input_dim <= 0 or self.num_classes <= 0:
            raise ConfigurationError("input_dim and num_classes must be positive")
        if kind == MLP and self.hidden_dim <= 0:
            raise ConfigurationError("mlp-1hidden needs hidden_dim > 0")
        if kind == LINEAR and self.hidden_dim != 0:
            raise ConfigurationError("linear-softmax has hidden_dim 0")

    @property
    def layout(self) -> Layout:
        d, c, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == LINEAR:
            return (("W", (c, d)), ("b", (c,)))
        return (("W1", (h, d)), ("b1", (h,)), ("W2", (c, h)), ("b2", (c,)))

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(dims)) for _, dims in self.layout)


@dataclass(frozen=True)
class ClipMode:
    """Flat clipping with one bound, or per-layer clipping with one bound per layer."""

    mode: str = "flat"
    bound: float | tuple[float, ...] = 1.0

    def __post_init__(self) -> None:
        if self.mode not in ("flat", "per-layer"):
            raise ConfigurationError(f"unknown clip mode {self.mode!r}")
        bounds = np.atleast_1d(np.asarray(self.bound, dtype=np.float64))
        if self.mode == "flat" and bounds.size != 1:
            raise ConfigurationError("flat clipping takes a single bound")
        if np.any(bounds <= 0) or not np.all(np.isfinite(bounds)):
            raise ConfigurationError("clip bounds must be positive and finite")
        if self.mode == "per-layer":
            object.__setattr__(self, "bound", tuple(float(b) for b in bounds))
        else:
            object.__setattr__(self, "bound", float(bounds[0]))

    @property
    def sensitivity(self) -> float:
        """Bound on the l2 norm of a clipped update."""
        if self.mode == "flat":
            return float(self.bound)
        return float(np.sqrt(np.sum(np.square(self.bound))))


def init_params(model: Model, rng: np.random.Generator, zero: bool = False) -> ParamVector:
    """Glorot-style weights and zero biases; ``zero=True`` gives the all-zero model."""
    out = []
    for name, dims in model.layout:
        if zero or len(dims) == 1:
            out.append(np.zeros(int(np.prod(dims))))
        else:
            fan_out, fan_in = dims
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            out.append(rng.uniform(-limit, limit, size=fan_out * fan_in))
    return ParamVector(np.concatenate(out), model.layout)


def unpack(model: Model, values: np.ndarray) -> list[np.ndarray]:
    arrays = []
    start = 0
    for _, dims in model.layout:
        stop = start + int(np.prod(dims))
        arrays.append(values[start:stop].reshape(dims))
        start = stop
    return arrays


def _check(model: Model, params: ParamVector | np.ndarray, batch: LabeledBatch) -> np.ndarray:
    values = _values(params)
    if values.size != model.num_params:
        raise ConfigurationError(f"model expects {model.num_params} parameters, got {values.size}")
    if len(batch) == 0:
        raise ConfigurationError("empty batch")
    if batch.features.shape[1] != model.input_dim:
        raise ConfigurationError(
            f"feature dim {batch.features.shape[1]} does not match model input dim {model.input_dim}"
        )
    if batch.labels.max() >= model.num_classes:
        raise ConfigurationError("label index exceeds num_classes")
    return values


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def logits(model: Model, values: np.ndarray, x: np.ndarray) -> np.ndarray:
    layers = unpack(model, values)
    if model.kind == LINEAR:
        W, b = layers
        return x @ W.T + b
    W1, b1, W2, b2 = layers
    return np.tanh(x @ W1.T + b1) @ W2.T + b2


def _cross_entropy(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    lse = (zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)))[:, 0]
    return lse - z[np.arange(len(y)), y]


def forward_loss(model: Model, params: ParamVector, batch: LabeledBatch) -> tuple[float, float]:
    """Mean cross-entropy and accuracy of ``params`` on ``batch``."""
    values = _check(model, params, batch)
    z = logits(model, values, batch.features)
    loss = float(_cross_entropy(z, batch.labels).mean())
    acc = float(np.mean(z.argmax(axis=1) == batch.labels))
    return loss, acc


def _grad(model: Model, values: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    layers = unpack(model, values)
    if model.kind == LINEAR:
        W, b = layers
        g = softmax(x @ W.T + b)
        g[np.arange(n), y] -= 1.0
        g /= n
        return np.concatenate([(g.T @ x).ravel(), g.sum(axis=0)])
    W1, b1, W2, b2 = layers
    h = np.tanh(x @ W1.T + b1)
    g = softmax(h @ W2.T + b2)
    g[np.arange(n), y] -= 1.0
    g /= n
    da = (g @ W2) * (1.0 - h * h)
    return np.concatenate([(da.T @ x).ravel(), da.sum(axis=0), (g.T @ h).ravel(), g.sum(axis=0)])


def backward(model: Model, params: ParamVector, batch: LabeledBatch) -> ParamVector:
    """Mean gradient of the cross-entropy loss with respect to ``params``."""
    values = _check(model, params, batch)
    return ParamVector(_grad(model, values, batch.features, batch.labels), model.layout)


def sgd_epochs(
    model: Model,
    params: ParamVector,
    data: LabeledBatch,
    lr: float,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
) -> ParamVector:
    """Plain mini-batch SGD over shuffled passes of ``data``."""
    if len(data) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    if lr < 0 or epochs < 0 or batch_size <= 0:
        raise ConfigurationError("lr and epochs must be nonnegative, batch_size positive")
    values = _check(model, params, data).copy()
    if epochs == 0 or lr == 0:
        return params.like(values)
    x, y = data.features, data.labels
    n = len(data)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            values -= lr * _grad(model, values, x[idx], y[idx])
    return params.like(values)


def _scale_to(values: np.ndarray, bound: float) -> np.ndarray:
    norm = np.linalg.norm(values)
    if norm <= bound:
        return values.copy()
    factor = bound / norm
    out = values * factor
    # rounding can leave the norm a hair above the bound; shrink until it is not,
    # which also makes clipping bit-exactly idempotent
    while np.linalg.norm(out) > bound:
        factor = np.nextafter(factor, 0.0)
        out = values * factor
    return out


def clip(update: ParamVector, clip_mode: ClipMode) -> ParamVector:
    if clip_mode.mode == "flat":
        return update.like(_scale_to(update.values, float(clip_mode.bound)))
    bounds: Sequence[float] = clip_mode.bound  # type: ignore[assignment]
    if len(bounds) != len(update.shape):
        raise ConfigurationError(f"{len(bounds)} per-layer bounds for {len(update.shape)} layers")
    out = np.empty_like(update.values)
    for (_, sl, _), b in zip(update.layer_slices(), bounds):
        out[sl] = _scale_to(update.values[sl], b)
    return update.like(out)
