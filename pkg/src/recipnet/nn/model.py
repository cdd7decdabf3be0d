"""CNN regressor: profile tensor (4, L, W) -> path loss in dB."""
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .. import kernels
from . import ops
from .tensor import DTYPE, Tensor, backward


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel: Tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 1


DEFAULT_BLOCKS = (ConvBlock(16), ConvBlock(32), ConvBlock(64), ConvBlock(64))


@dataclass(frozen=True)
class ModelConfig:
    """Conv blocks (conv -> ReLU -> 2x2 max-pool), global average pool, dense head.

    ``dense`` lists hidden widths between the pooled features and the scalar
    output; the raw output ``y`` maps to ``mid + half_range * y`` dB over
    ``output_range``.
    """
    input_shape: Tuple[int, int, int] = (4, 256, 64)
    conv_blocks: Tuple[ConvBlock, ...] = DEFAULT_BLOCKS
    dense: Tuple[int, ...] = ()
    output_range: Tuple[float, float] = (40.0, 180.0)

    def __post_init__(self):
        self.layer_shapes()  # validates the chain

    def layer_shapes(self):
        """Shapes after every block, then the dense widths; raises if they do not chain."""
        c, h, w = self.input_shape
        shapes = []
        for k, blk in enumerate(self.conv_blocks):
            kh, kw = blk.kernel
            h = kernels.conv_out_size(h, kh, blk.stride, blk.padding)
            w = kernels.conv_out_size(w, kw, blk.stride, blk.padding)
            if h < 2 or w < 2:
                raise ValueError(f"block {k}: spatial size {h}x{w} too small to pool")
            h, w, c = h // 2, w // 2, blk.out_channels
            shapes.append((c, h, w))
        return shapes

    @property
    def output_scale(self):
        lo, hi = self.output_range
        return 0.5 * (hi - lo), 0.5 * (hi + lo)

    def param_shapes(self):
        shapes = {}
        c = self.input_shape[0]
        for k, blk in enumerate(self.conv_blocks):
            shapes[f"conv{k}.weight"] = (blk.out_channels, c) + tuple(blk.kernel)
            shapes[f"conv{k}.bias"] = (blk.out_channels,)
            c = blk.out_channels
        for k, width in enumerate(self.dense):
            shapes[f"dense{k}.weight"] = (width, c)
            shapes[f"dense{k}.bias"] = (width,)
            c = width
        shapes["out.weight"] = (1, c)
        shapes["out.bias"] = (1,)
        return shapes

    def to_dict(self):
        return {"input_shape": list(self.input_shape),
                "conv_blocks": [{"out_channels": b.out_channels, "kernel": list(b.kernel),
                                 "stride": b.stride, "padding": b.padding} for b in self.conv_blocks],
                "dense": list(self.dense), "output_range": list(self.output_range)}

    @classmethod
    def from_dict(cls, d):
        blocks = tuple(ConvBlock(b["out_channels"], tuple(b.get("kernel", (3, 3))),
                                 b.get("stride", 1), b.get("padding", 1))
                       for b in d.get("conv_blocks", [b.__dict__ for b in DEFAULT_BLOCKS]))
        return cls(tuple(d.get("input_shape", (4, 256, 64))), blocks,
                   tuple(d.get("dense", ())), tuple(d.get("output_range", (40.0, 180.0))))


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict
    init: dict = field(default_factory=dict)

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, dict(self.init))

    def num_parameters(self):
        return int(sum(v.size for v in self.tensors.values()))


def init_params(config: ModelConfig, seed=0) -> ModelParams:
    """Fan-in scaled uniform init: He bound for ReLU layers, LeCun bound for the head."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=DTYPE)
            continue
        fan_in = int(np.prod(shape[1:]))
        gain = 3.0 if name.startswith("out.") else 6.0
        bound = np.sqrt(gain / fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
    return ModelParams(config, tensors, {"scheme": "fan-in-uniform(he, lecun-head)", "seed": int(seed)})


def _graph(config, leaves, x):
    h = Tensor(x)
    for k, blk in enumerate(config.conv_blocks):
        h = ops.conv2d(h, leaves[f"conv{k}.weight"], leaves[f"conv{k}.bias"], blk.stride, blk.padding)
        h = ops.maxpool2d(ops.relu(h))
    h = ops.global_avg_pool(h)
    for k in range(len(config.dense)):
        h = ops.relu(ops.linear(h, leaves[f"dense{k}.weight"], leaves[f"dense{k}.bias"]))
    h = ops.linear(h, leaves["out.weight"], leaves["out.bias"])
    half, mid = config.output_scale
    return ops.affine(ops.flatten_scalar(h), half, mid)


def _as_batch(config, x):
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[1:] != tuple(config.input_shape):
        raise ops.ShapeError(f"input shape {x.shape[1:]} != model input {tuple(config.input_shape)}")
    return x, single


def forward(params: ModelParams, x, batch_size=256):
    """Predicted path loss in dB for one (4, L, W) input or a batch of them."""
    x, single = _as_batch(params.config, x)
    leaves = {k: Tensor(v) for k, v in params.tensors.items()}
    out = np.empty(len(x), dtype=DTYPE)
    for s in range(0, len(x), batch_size):
        out[s:s + batch_size] = _graph(params.config, leaves, x[s:s + batch_size]).data
    return out[0] if single else out


def loss_and_grads(params: ModelParams, x, y):
    """MSE loss (float64), gradients for every parameter, and predictions."""
    x, _ = _as_batch(params.config, x)
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.tensors.items()}
    pred = _graph(params.config, leaves, x)
    loss = ops.mse_loss(pred, y)
    value = float(np.mean((pred.data.astype(np.float64) - np.asarray(y, dtype=np.float64)) ** 2))
    backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return value, grads, pred.data.copy()
