"""Model builders returning a topology plus freshly initialised parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, StructuralError
from .nn import PARAM_KINDS, LayeredParams


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    layer_id: str | None = None
    # dense: (out, in); conv: (filters, in_channels, 3, 3)
    shape: tuple[int, ...] = ()


@dataclass(frozen=True)
class ModelTopology:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    num_classes: int
    block_map: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = self.param_layer_ids
        if len(set(ids)) != len(ids):
            raise StructuralError("duplicate layer ids in topology")
        missing = [lid for lid in ids if lid not in self.block_map]
        if missing:
            raise StructuralError(f"layers without a block: {missing}")

    @property
    def param_layer_ids(self) -> list[str]:
        return [s.layer_id for s in self.layers if s.kind in PARAM_KINDS]

    @property
    def blocks(self) -> list[str]:
        """Block ids in first-appearance order."""
        return list(dict.fromkeys(self.block_map[lid] for lid in self.param_layer_ids))


def init_params(topology: ModelTopology, init_seed: int) -> LayeredParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(init_seed)
    layers = []
    for spec in topology.layers:
        if spec.kind not in PARAM_KINDS:
            continue
        fan_in = int(np.prod(spec.shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=spec.shape)
        layers.append((spec.layer_id, [w, np.zeros(spec.shape[0])]))
    return LayeredParams(layers)


def build_mlp(input_dim: int, hidden_dims, num_classes: int, init_seed: int = 0):
    """Dense layers with ReLU in between; every dense layer is its own block.

    Hidden layers are named ``fc1, fc2, ...`` and the last layer ``head``.
    """
    hidden_dims = list(hidden_dims)
    dims = [input_dim, *hidden_dims, num_classes]
    if any(int(d) != d or d <= 0 for d in dims):
        raise InputError(f"all layer sizes must be positive integers, got {dims}")
    specs = []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        lid = "head" if last else f"fc{i + 1}"
        specs.append(LayerSpec("dense", lid, (int(d_out), int(d_in))))
        if not last:
            specs.append(LayerSpec("relu"))
    block_map = {s.layer_id: f"B{i}" for i, s in enumerate(s for s in specs if s.kind == "dense")}
    topo = ModelTopology(tuple(specs), (int(input_dim),), int(num_classes), block_map)
    return topo, init_params(topo, init_seed)


def build_tiny_cnn(input_shape, num_classes: int, init_seed: int = 0):
    """conv(8)-relu-pool-conv(16)-relu-pool-flatten-dense. Input is (H, W, C)."""
    h, w, c = (int(v) for v in input_shape)
    if num_classes <= 0 or c <= 0:
        raise InputError("num_classes and channels must be positive")
    if h < 8 or w < 8:
        raise InputError(f"tiny CNN needs H, W >= 8, got {h}x{w}")
    h1, w1 = (h - 2) // 2, (w - 2) // 2
    h2, w2 = (h1 - 2) // 2, (w1 - 2) // 2
    if h1 < 3 or w1 < 3 or h2 < 1 or w2 < 1:
        raise InputError(f"input {h}x{w} too small for two conv+pool stages")
    head_in = h2 * w2 * 16
    specs = (
        LayerSpec("conv", "conv1", (8, c, 3, 3)),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("conv", "conv2", (16, 8, 3, 3)),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("flatten"),
        LayerSpec("dense", "head", (int(num_classes), head_in)),
    )
    topo = ModelTopology(specs, (h, w, c), int(num_classes), {"conv1": "B0", "conv2": "B1", "head": "B2"})
    return topo, init_params(topo, init_seed)
