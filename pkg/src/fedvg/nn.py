"""Dense float64 numerical core: parameter containers, layers, cross-entropy, backprop, SGD.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. A model is described
by a topology (see :mod:`fedvg.models`), an ordered list of layer specs; only
``dense`` and ``conv`` layers carry parameters. Image batches use NHWC layout.

Layer conventions:
    dense   weight (out, in), bias (out,);  y = x @ W.T + b
    conv    weight (F, C, 3, 3), bias (F,); 3x3, stride 1, valid padding
    maxpool 2x2 window, stride 2, trailing odd row/column dropped
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError, NumericError, StructuralError

PARAM_KINDS = ("dense", "conv")


class LayeredParams:
    """Ordered mapping ``layer_id -> [tensor, ...]``.

    Used both for model parameters and for gradients (a GradSet is simply a
    LayeredParams congruent to the parameters it was computed from).
    """

    __slots__ = ("_layers",)

    def __init__(self, layers: Iterable[tuple[str, Sequence[np.ndarray]]]):
        self._layers: dict[str, list[np.ndarray]] = {}
        for layer_id, tensors in layers:
            if layer_id in self._layers:
                raise StructuralError(f"duplicate layer id {layer_id!r}")
            self._layers[layer_id] = [np.asarray(t, dtype=np.float64) for t in tensors]

    @property
    def layer_ids(self) -> list[str]:
        return list(self._layers)

    def __getitem__(self, layer_id: str) -> list[np.ndarray]:
        return self._layers[layer_id]

    def __iter__(self) -> Iterator[str]:
        return iter(self._layers)

    def __len__(self) -> int:
        return len(self._layers)

    def items(self):
        return self._layers.items()

    def shapes(self) -> list[tuple[str, list[tuple[int, ...]]]]:
        return [(lid, [t.shape for t in ts]) for lid, ts in self._layers.items()]

    def num_params(self) -> int:
        return sum(t.size for ts in self._layers.values() for t in ts)

    def copy(self) -> LayeredParams:
        return LayeredParams((lid, [t.copy() for t in ts]) for lid, ts in self._layers.items())

    def check_congruent(self, other: LayeredParams) -> None:
        if self.layer_ids != other.layer_ids:
            raise StructuralError(f"layer ids differ: {self.layer_ids} vs {other.layer_ids}")
        for lid in self._layers:
            mine, theirs = self._layers[lid], other[lid]
            if len(mine) != len(theirs) or any(a.shape != b.shape for a, b in zip(mine, theirs)):
                raise StructuralError(f"layer {lid!r}: tensor shapes differ")

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> LayeredParams:
        return LayeredParams((lid, [fn(t) for t in ts]) for lid, ts in self._layers.items())

    def zip_with(self, other: LayeredParams, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> LayeredParams:
        self.check_congruent(other)
        return LayeredParams(
            (lid, [fn(a, b) for a, b in zip(ts, other[lid])]) for lid, ts in self._layers.items()
        )

    def __add__(self, other: LayeredParams) -> LayeredParams:
        return self.zip_with(other, np.add)

    def __sub__(self, other: LayeredParams) -> LayeredParams:
        return self.zip_with(other, np.subtract)

    def scale(self, c: float) -> LayeredParams:
        return self.map(lambda t: c * t)

    def zeros_like(self) -> LayeredParams:
        return self.map(np.zeros_like)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for ts in self._layers.values() for t in ts])

    def layer_flat(self, layer_id: str) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self._layers[layer_id]])

    def with_flat(self, flat: np.ndarray) -> LayeredParams:
        """Inverse of :meth:`flat` on this structure."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_params():
            raise StructuralError(f"flat vector has {flat.size} entries, expected {self.num_params()}")
        out, pos = [], 0
        for lid, ts in self._layers.items():
            new = []
            for t in ts:
                new.append(flat[pos:pos + t.size].reshape(t.shape).copy())
                pos += t.size
            out.append((lid, new))
        return LayeredParams(out)

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for ts in self._layers.values() for t in ts)

    def equals(self, other: LayeredParams) -> bool:
        """Bitwise equality (layout, shapes and bytes)."""
        if self.shapes() != other.shapes():
            return False
        return all(
            a.tobytes() == b.tobytes() for lid in self._layers for a, b in zip(self[lid], other[lid])
        )

    def __repr__(self) -> str:
        return f"LayeredParams({self.shapes()})"


GradSet = LayeredParams


# -- layers ------------------------------------------------------------------


def _param_shapes(spec) -> list[tuple[int, ...]]:
    if spec.kind == "dense":
        out_dim, in_dim = spec.shape
        return [(out_dim, in_dim), (out_dim,)]
    if spec.kind == "conv":
        filters = spec.shape[0]
        return [tuple(spec.shape), (filters,)]
    return []


def check_params(params: LayeredParams, topology) -> None:
    expected = [(s.layer_id, _param_shapes(s)) for s in topology.layers if s.kind in PARAM_KINDS]
    if [lid for lid, _ in expected] != params.layer_ids:
        raise StructuralError(f"params layers {params.layer_ids} do not match topology {[e[0] for e in expected]}")
    for lid, shapes in expected:
        got = [t.shape for t in params[lid]]
        if got != shapes:
            raise StructuralError(f"layer {lid!r}: expected tensor shapes {shapes}, got {got}")


def _conv_patches(x: np.ndarray) -> np.ndarray:
    # (N, H, W, C) -> (N*H'*W', C*9) with trailing order (c, i, j)
    n, h, w, c = x.shape
    win = sliding_window_view(x, (3, 3), axis=(1, 2))
    return win.reshape(n * (h - 2) * (w - 2), c * 9)


def _forward(params: LayeredParams, x: np.ndarray, topology, keep: bool):
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape[1:]) != tuple(topology.input_shape):
        first = next((s.layer_id for s in topology.layers if s.layer_id), "input")
        raise StructuralError(
            f"layer {first!r}: batch feature shape {tuple(x.shape[1:])} != input shape {tuple(topology.input_shape)}"
        )
    check_params(params, topology)
    caches = []
    for spec in topology.layers:
        kind = spec.kind
        if kind == "dense":
            w, b = params[spec.layer_id]
            if x.ndim != 2 or x.shape[1] != w.shape[1]:
                raise StructuralError(f"layer {spec.layer_id!r}: input shape {x.shape} does not fit weight {w.shape}")
            cache = x
            x = x @ w.T + b
        elif kind == "conv":
            w, b = params[spec.layer_id]
            if x.ndim != 4 or x.shape[3] != w.shape[1] or x.shape[1] < 3 or x.shape[2] < 3:
                raise StructuralError(f"layer {spec.layer_id!r}: input shape {x.shape} does not fit kernel {w.shape}")
            n, h, wd, _ = x.shape
            patches = _conv_patches(x)
            cache = (x.shape, patches)
            x = (patches @ w.reshape(w.shape[0], -1).T + b).reshape(n, h - 2, wd - 2, w.shape[0])
        elif kind == "relu":
            cache = x > 0
            x = np.where(cache, x, 0.0)
        elif kind == "maxpool":
            n, h, wd, c = x.shape
            h2, w2 = h // 2, wd // 2
            if h2 == 0 or w2 == 0:
                raise StructuralError(f"maxpool: input {x.shape} too small")
            blocks = x[:, : 2 * h2, : 2 * w2, :].reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4)
            blocks = blocks.reshape(n, h2, w2, c, 4)
            arg = blocks.argmax(axis=-1)
            cache = (x.shape, arg)
            x = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        elif kind == "flatten":
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        else:
            raise StructuralError(f"unknown layer kind {kind!r}")
        if keep:
            caches.append(cache)
    return x, caches


def forward(params: LayeredParams, batch_x: np.ndarray, topology) -> np.ndarray:
    """Logits of shape (batch, num_classes)."""
    logits, _ = _forward(params, batch_x, topology, keep=False)
    return logits


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        labels_i = labels.astype(np.int64)
        if labels.ndim != 1 or not np.array_equal(labels_i, labels):
            raise InputError("labels must be a 1-D array of class indices")
        labels = labels_i
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes})")
    return labels


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    return logits - (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))


def cross_entropy(logits: np.ndarray, labels) -> float:
    """Mean negative log-softmax of the true class."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[1])
    if labels.size != logits.shape[0] or labels.size == 0:
        raise InputError("need one label per logit row and a non-empty batch")
    logp = log_softmax(logits)
    return float(-logp[np.arange(labels.size), labels].mean())


def backward(params: LayeredParams, batch_x: np.ndarray, labels, topology) -> tuple[float, GradSet]:
    """Cross-entropy loss of ``forward`` and its gradient w.r.t. every parameter."""
    logits, caches = _forward(params, batch_x, topology, keep=True)
    labels = _check_labels(labels, logits.shape[1])
    n = logits.shape[0]
    if labels.size != n or n == 0:
        raise InputError("need one label per sample and a non-empty batch")
    logp = log_softmax(logits)
    loss = float(-logp[np.arange(n), labels].mean())
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    d /= n

    grads: dict[str, list[np.ndarray]] = {}
    for spec, cache in zip(reversed(topology.layers), reversed(caches)):
        kind = spec.kind
        if kind == "dense":
            w, _ = params[spec.layer_id]
            x = cache
            grads[spec.layer_id] = [d.T @ x, d.sum(axis=0)]
            d = d @ w
        elif kind == "conv":
            w, _ = params[spec.layer_id]
            in_shape, patches = cache
            f = w.shape[0]
            d2 = d.reshape(-1, f)
            grads[spec.layer_id] = [(d2.T @ patches).reshape(w.shape), d2.sum(axis=0)]
            n_, h, wd, c = in_shape
            dx = np.zeros(in_shape)
            for i in range(3):
                for j in range(3):
                    dx[:, i:i + h - 2, j:j + wd - 2, :] += d @ w[:, :, i, j]
            d = dx
        elif kind == "relu":
            d = np.where(cache, d, 0.0)
        elif kind == "maxpool":
            in_shape, arg = cache
            n_, h, wd, c = in_shape
            h2, w2 = h // 2, wd // 2
            blocks = np.zeros((n_, h2, w2, c, 4))
            np.put_along_axis(blocks, arg[..., None], d[..., None], axis=-1)
            blocks = blocks.reshape(n_, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
            dx = np.zeros(in_shape)
            dx[:, : 2 * h2, : 2 * w2, :] = blocks.reshape(n_, 2 * h2, 2 * w2, c)
            d = dx
        elif kind == "flatten":
            d = d.reshape(cache)
    order = [lid for lid in params.layer_ids]
    return loss, LayeredParams((lid, grads[lid]) for lid in order)


def accuracy(params: LayeredParams, x: np.ndarray, labels, topology) -> float:
    """Top-1 accuracy in [0, 1]."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    pred = forward(params, x, topology).argmax(axis=1)
    return float((pred == labels).mean())


# -- optimizer ---------------------------------------------------------------


@dataclass
class SGD:
    """Plain or heavy-ball SGD. ``velocity`` is the optimizer state, never part of the params."""

    lr: float
    momentum: float = 0.0
    velocity: LayeredParams | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.lr >= 0:
            raise InputError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise InputError("momentum must lie in [0, 1)")

    def reset(self) -> None:
        self.velocity = None

    def step(self, params: LayeredParams, grads: GradSet) -> LayeredParams:
        new, self.velocity = sgd_step(params, grads, self.lr, self.momentum, self.velocity)
        return new


def sgd_step(params: LayeredParams, grads: GradSet, lr: float, momentum: float = 0.0,
             velocity: LayeredParams | None = None) -> tuple[LayeredParams, LayeredParams | None]:
    """One SGD update; returns ``(new_params, new_velocity)``."""
    params.check_congruent(grads)
    if not grads.is_finite():
        raise NumericError("non-finite gradient entry")
    if momentum == 0.0:
        return params.zip_with(grads, lambda p, g: p - lr * g), None
    if velocity is None:
        velocity = grads.zeros_like()
    velocity = velocity.zip_with(grads, lambda v, g: momentum * v + g)
    return params.zip_with(velocity, lambda p, v: p - lr * v), velocity
