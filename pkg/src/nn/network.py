"""Layer stack, forward trace, backpropagation and checkpoints.

A network is ``[conv -> ReLU -> max-pool] * num_convs``, flatten,
``[dense -> ReLU -> dropout] * num_hidden_layers`` and a dense softmax output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from tabulate import tabulate

from src.errors import ConfigError, ConsistencyError, InvalidArgumentError, MalformedFileError, ShapeError
from src.io_schemas import NetworkConfig
from src.nn import functional as F
from src.tensor import Tensor, random_uniform, read_tensor, write_tensor, zeros

CHECKPOINT_MAGIC = b"NETv0001"
_CONFIG_INTS = (
    "num_convs",
    "num_hidden_layers",
    "hidden_units",
    "input_height",
    "input_width",
    "num_classes",
    "conv_maps",
    "conv_kernel",
    "pool_size",
)

Mode = Literal["train", "eval"]


@dataclass
class ConvStage:
    """Convolution with shared kernels, ReLU, then max pooling."""

    name: str
    weight: Tensor  # [maps, channels, k, k]
    bias: Tensor  # [maps]
    pool_size: int
    in_shape: Tuple[int, int, int]
    out_shape: Tuple[int, int, int]


@dataclass
class DenseLayer:
    name: str
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]
    activation: Literal["relu", "softmax"]
    dropout_p: float = 0.0


@dataclass
class LayerCache:
    name: str
    inputs: Tensor
    z: Tensor
    a: Tensor
    rectified: Optional[Tensor] = None  # conv stages: relu(z) before pooling
    argmax: Optional[np.ndarray] = None
    mask: Optional[Tensor] = None


@dataclass
class ForwardTrace:
    caches: List[LayerCache]
    mode: str
    layer_names: Tuple[str, ...]

    @property
    def probs(self) -> Tensor:
        return self.caches[-1].a

    def masks(self) -> Dict[str, Tensor]:
        """Dropout masks by layer name (train mode only)."""
        return {c.name: c.mask for c in self.caches if c.mask is not None}


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def one_hot(labels: np.ndarray, num_classes: int) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InvalidArgumentError(f"labels must be in [0, {num_classes}), got range {labels.min()}..{labels.max()}")
    out = np.zeros((labels.shape[0], num_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


@dataclass
class Network:
    config: NetworkConfig
    convs: List[ConvStage] = field(default_factory=list)
    denses: List[DenseLayer] = field(default_factory=list)

    @property
    def layers(self) -> List[ConvStage | DenseLayer]:
        return [*self.convs, *self.denses]

    @property
    def layer_names(self) -> Tuple[str, ...]:
        return tuple(layer.name for layer in self.layers)

    def parameters(self) -> Dict[str, Tensor]:
        """Parameter arrays by name, in stack order; updates act in place."""
        params: Dict[str, Tensor] = {}
        for layer in self.layers:
            params[f"{layer.name}.weight"] = layer.weight
            params[f"{layer.name}.bias"] = layer.bias
        return params

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def _prepare(self, batch: np.ndarray) -> Tensor:
        x = np.asarray(batch, dtype=np.float64)
        h, w = self.config.input_height, self.config.input_width
        if x.ndim == 2 and not self.convs and x.shape[1] == h * w:
            return x
        if x.ndim == 3:
            x = x[:, np.newaxis]
        if x.ndim != 4 or x.shape[1:] != (1, h, w):
            raise ShapeError(f"expected a batch of {h}x{w} images, got shape {x.shape}")
        return x

    def forward(
        self,
        batch: np.ndarray,
        mode: Mode = "eval",
        rng: Optional[np.random.Generator] = None,
        frozen_masks: Optional[Dict[str, Tensor]] = None,
    ) -> ForwardTrace:
        """Runs the stack and records everything backward needs.

        In train mode dropout masks are drawn from ``rng`` unless
        ``frozen_masks`` supplies them by layer name.
        """
        if mode not in ("train", "eval"):
            raise InvalidArgumentError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = self._prepare(batch)
        caches: List[LayerCache] = []
        for stage in self.convs:
            z = F.conv_forward(stage.weight, stage.bias, x)
            rectified = F.relu(z)
            pooled, argmax = F.maxpool_forward(rectified, stage.pool_size)
            caches.append(LayerCache(stage.name, x, z, pooled, rectified=rectified, argmax=argmax))
            x = pooled
        x = x.reshape(x.shape[0], -1)
        for layer in self.denses:
            z = F.dense_forward(layer.weight, layer.bias, x)
            if layer.activation == "softmax":
                caches.append(LayerCache(layer.name, x, z, F.softmax(z)))
                break
            a = F.relu(z)
            mask = None
            if mode == "train" and layer.dropout_p > 0.0:
                if frozen_masks is not None and layer.name in frozen_masks:
                    mask = frozen_masks[layer.name]
                    a = F.dropout_apply(a, mask, layer.dropout_p)
                else:
                    a, mask = F.dropout_forward(a, layer.dropout_p, "train", rng)
            caches.append(LayerCache(layer.name, x, z, a, mask=mask))
            x = a
        return ForwardTrace(caches=caches, mode=mode, layer_names=self.layer_names)

    def predict(self, batch: np.ndarray, batch_size: int = 500) -> Tensor:
        """Class probabilities in eval mode, computed in chunks."""
        x = np.asarray(batch, dtype=np.float64)
        if x.shape[0] == 0:
            return np.zeros((0, self.config.num_classes), dtype=np.float64)
        chunks = [self.forward(x[i : i + batch_size], "eval").probs for i in range(0, x.shape[0], batch_size)]
        return np.concatenate(chunks, axis=0)


def _stage_shapes(config: NetworkConfig) -> List[Tuple[Tuple[int, int, int], Tuple[int, int, int]]]:
    shapes = []
    channels, h, w = 1, config.input_height, config.input_width
    k, pool = config.conv_kernel, config.pool_size
    for i in range(1, config.num_convs + 1):
        ch, cw = h - k + 1, w - k + 1
        if ch < 1 or cw < 1:
            raise ConfigError(f"stage conv{i}: {k}x{k} kernel does not fit a {h}x{w} input")
        ph, pw = ch // pool, cw // pool
        if ph < 1 or pw < 1:
            raise ConfigError(f"stage pool{i}: {pool}x{pool} pooling collapses {ch}x{cw} to {ph}x{pw}")
        shapes.append(((channels, h, w), (config.conv_maps, ph, pw)))
        channels, h, w = config.conv_maps, ph, pw
    return shapes


def build_network(config: NetworkConfig, rng: np.random.Generator) -> Network:
    """Instantiates the layer stack with Glorot-uniform weights and zero biases."""
    net = Network(config=config)
    k = config.conv_kernel
    for i, (in_shape, out_shape) in enumerate(_stage_shapes(config), start=1):
        channels, maps = in_shape[0], out_shape[0]
        limit = glorot_limit(channels * k * k, maps * k * k)
        net.convs.append(
            ConvStage(
                name=f"conv{i}",
                weight=random_uniform((maps, channels, k, k), limit, rng),
                bias=np.zeros(maps, dtype=np.float64),
                pool_size=config.pool_size,
                in_shape=in_shape,
                out_shape=out_shape,
            )
        )
    fan_in = int(np.prod(net.convs[-1].out_shape)) if net.convs else config.input_height * config.input_width
    widths = [config.hidden_units] * config.num_hidden_layers + [config.num_classes]
    for i, width in enumerate(widths, start=1):
        is_output = i == len(widths)
        net.denses.append(
            DenseLayer(
                name=f"dense{i}",
                weight=random_uniform((width, fan_in), glorot_limit(fan_in, width), rng),
                bias=zeros([width]),
                activation="softmax" if is_output else "relu",
                dropout_p=0.0 if is_output else config.dropout_p,
            )
        )
        fan_in = width
    return net


def _check_trace(network: Network, trace: ForwardTrace) -> None:
    if trace.layer_names != network.layer_names or len(trace.caches) != len(network.layers):
        raise ConsistencyError(f"trace layers {trace.layer_names} do not match network layers {network.layer_names}")
    for layer, cache in zip(network.layers, trace.caches):
        expected = layer.bias.shape[0]
        got = cache.z.shape[1]
        if expected != got:
            raise ConsistencyError(f"{layer.name}: cached output width {got} != layer width {expected}")


def backward(network: Network, trace: ForwardTrace, targets: Tensor) -> Dict[str, Tensor]:
    """Gradients of the mean cross-entropy loss for every parameter.

    The output delta is ``(softmax - y) / m``; dropout masks and pool indices
    come from ``trace``.
    """
    _check_trace(network, trace)
    probs = trace.probs
    if targets.shape != probs.shape:
        raise ShapeError(f"targets shape {targets.shape} != predictions shape {probs.shape}")
    m = probs.shape[0]
    grads: Dict[str, Tensor] = {}
    delta = (probs - targets) / m
    n_conv = len(network.convs)
    caches = trace.caches
    for idx in range(len(network.denses) - 1, -1, -1):
        layer = network.denses[idx]
        cache = caches[n_conv + idx]
        if layer.activation == "relu":
            if cache.mask is not None:
                delta = F.dropout_backward(delta, cache.mask, layer.dropout_p)
            delta = delta * F.relu_grad(cache.z)
        d_in, d_w, d_b = F.dense_backward(layer.weight, cache.inputs, delta)
        grads[f"{layer.name}.weight"] = d_w
        grads[f"{layer.name}.bias"] = d_b
        delta = d_in
    for idx in range(n_conv - 1, -1, -1):
        stage = network.convs[idx]
        cache = caches[idx]
        d_pooled = delta.reshape(cache.a.shape)
        d_rect = F.maxpool_backward(d_pooled, cache.argmax, cache.rectified.shape, stage.pool_size)
        dz = d_rect * F.relu_grad(cache.z)
        d_in, d_w, d_b = F.conv_backward(stage.weight, cache.inputs, dz, input_grad=idx > 0)
        grads[f"{stage.name}.weight"] = d_w
        grads[f"{stage.name}.bias"] = d_b
        delta = d_in
    return {name: grads[name] for name in network.parameters()}


def describe(network: Network) -> str:
    """Per-layer shape table."""
    rows = []
    for stage in network.convs:
        k = stage.weight.shape[-1]
        rows.append([stage.name, f"conv {k}x{k} + relu + pool {stage.pool_size}x{stage.pool_size}",
                     "x".join(map(str, stage.out_shape)), stage.weight.size + stage.bias.size])
    for layer in network.denses:
        kind = "dense + softmax" if layer.activation == "softmax" else f"dense + relu + dropout {layer.dropout_p:g}"
        rows.append([layer.name, kind, str(layer.weight.shape[0]), layer.weight.size + layer.bias.size])
    table = tabulate(rows, headers=["layer", "kind", "output", "params"], tablefmt="github")
    return f"{table}\n\ntotal parameters: {network.num_parameters():,}"


def save_checkpoint(network: Network, path: str | Path) -> None:
    cfg = network.config
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<9I", *(getattr(cfg, name) for name in _CONFIG_INTS)))
        f.write(struct.pack("<d", cfg.dropout_p))
        for array in network.parameters().values():
            write_tensor(f, array)


def load_checkpoint(path: str | Path) -> Network:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise MalformedFileError(f"bad checkpoint magic {magic!r}", 0)
        header = f.read(9 * 4 + 8)
        if len(header) != 9 * 4 + 8:
            raise MalformedFileError("truncated checkpoint header", len(CHECKPOINT_MAGIC))
        ints = struct.unpack("<9I", header[:36])
        (dropout_p,) = struct.unpack("<d", header[36:])
        try:
            config = NetworkConfig(**dict(zip(_CONFIG_INTS, ints)), dropout_p=dropout_p)
        except ValueError as e:
            raise MalformedFileError(f"invalid network config in checkpoint: {e}", len(CHECKPOINT_MAGIC)) from e
        network = build_network(config, np.random.default_rng(0))
        for name, array in network.parameters().items():
            offset = f.tell()
            stored = read_tensor(f)
            if stored.shape != array.shape:
                raise MalformedFileError(f"{name}: stored shape {stored.shape} != expected {array.shape}", offset)
            array[...] = stored
    return network
