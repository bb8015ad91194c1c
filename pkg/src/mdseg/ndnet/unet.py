"""Small 3-D U-Net with a shared backbone and one sigmoid head per class."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .tape import Tape, TapeError

BACKBONE = "backbone"
HEAD = "head"

# Preset from the original multi-dataset setup; far too large for CPU work.
PAPER_PATCH_SHAPE = (96, 192, 192)


@dataclass
class NetConfig:
    stages: int = 3
    base_channels: int = 8
    channel_growth: int = 2
    residual_encoder: bool = False
    normalization: str = "instance"
    leaky_slope: float = ops.LEAKY_SLOPE
    num_global_classes: int = 1
    patch_shape: tuple[int, int, int] = (32, 32, 32)
    kernel_size: int = 3
    in_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        self.patch_shape = tuple(int(p) for p in self.patch_shape)
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.normalization not in ("none", "instance"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.num_global_classes < 1:
            raise ValueError("need at least one class head")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if len(self.patch_shape) != 3:
            raise ValueError("patch_shape must have 3 entries")
        div = 2 ** (self.stages - 1)
        if any(p % div for p in self.patch_shape):
            raise ValueError(
                f"patch shape {self.patch_shape} not divisible by {div} "
                f"(required for {self.stages} stages)")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * self.channel_growth ** l for l in range(self.stages)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_shape"] = list(self.patch_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    role: str = BACKBONE
    class_index: int | None = None
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0


class Network:
    def __init__(self, config: NetConfig, parameters: list[Parameter]):
        self.config = config
        self.parameters = parameters
        self._by_name = {p.name: p for p in parameters}
        if len(self._by_name) != len(parameters):
            raise ValueError("duplicate parameter names")

    def __getitem__(self, name: str) -> np.ndarray:
        return self._by_name[name].value

    def param(self, name: str) -> Parameter:
        return self._by_name[name]

    def get(self, name: str):
        p = self._by_name.get(name)
        return None if p is None else p.value

    @property
    def heads(self) -> list[Parameter]:
        return [p for p in self.parameters if p.role == HEAD]

    @property
    def backbone(self) -> list[Parameter]:
        return [p for p in self.parameters if p.role == BACKBONE]

    @property
    def dtype(self):
        return self.parameters[0].value.dtype

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters)

    def zero_grad(self):
        for p in self.parameters:
            p.zero_grad()

    def astype(self, dtype) -> "Network":
        params = [Parameter(p.name, p.value.astype(dtype), p.role, p.class_index)
                  for p in self.parameters]
        return Network(copy.deepcopy(self.config), params)

    def copy(self) -> "Network":
        return self.astype(self.dtype)


def _he_uniform(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _conv_params(rng, name, cout, cin, k, bias, dtype, role=BACKBONE, class_index=None):
    out = [Parameter(f"{name}.weight", _he_uniform(rng, (cout, cin, k, k, k), dtype),
                     role, class_index)]
    if bias:
        out.append(Parameter(f"{name}.bias", np.zeros(cout, dtype), role, class_index))
    return out


def _norm_params(name, c, dtype):
    return [Parameter(f"{name}.gamma", np.ones(c, dtype)),
            Parameter(f"{name}.beta", np.zeros(c, dtype))]


def _block_params(rng, prefix, cout, cin, cfg, dtype):
    # a conv bias directly before instance norm is cancelled by the mean subtraction
    norm = cfg.normalization == "instance"
    params = _conv_params(rng, f"{prefix}.conv", cout, cin, cfg.kernel_size, not norm, dtype)
    if norm:
        params += _norm_params(f"{prefix}.norm", cout, dtype)
    return params


def head_parameters(rng, c: int, in_channels: int, dtype) -> list[Parameter]:
    return _conv_params(rng, f"head{c}", 1, in_channels, 1, True, dtype, HEAD, c)


def build_unet(config: NetConfig, dtype=np.float32) -> Network:
    """Create a network with He-uniform conv kernels and zero biases.

    Parameters are drawn in declaration order from ``default_rng(config.seed)``,
    so equal configs give bit-identical initial weights.
    """
    rng = np.random.default_rng(config.seed)
    ch = config.channels
    params: list[Parameter] = []
    for l in range(config.stages):
        cin = config.in_channels if l == 0 else ch[l - 1]
        params += _block_params(rng, f"enc{l}.a", ch[l], cin, config, dtype)
        params += _block_params(rng, f"enc{l}.b", ch[l], ch[l], config, dtype)
        if config.residual_encoder and cin != ch[l]:
            params += _conv_params(rng, f"enc{l}.proj", ch[l], cin, 1,
                                   config.normalization == "none", dtype)
    for l in reversed(range(config.stages - 1)):
        params += _block_params(rng, f"dec{l}.a", ch[l], ch[l + 1] + ch[l], config, dtype)
        params += _block_params(rng, f"dec{l}.b", ch[l], ch[l], config, dtype)
    for c in range(config.num_global_classes):
        params += head_parameters(rng, c, ch[0], dtype)
    return Network(config, params)


def _block(net, x, prefix, stride, tape, act=True, input_grad=True):
    cfg = net.config
    h = ops.conv3d(x, net[f"{prefix}.conv.weight"], net.get(f"{prefix}.conv.bias"),
                   stride=stride, tape=tape, name=f"{prefix}.conv", input_grad=input_grad)
    if cfg.normalization == "instance":
        h = ops.instance_norm(h, net[f"{prefix}.norm.gamma"], net[f"{prefix}.norm.beta"],
                              tape=tape, name=f"{prefix}.norm")
    if act:
        h = ops.leaky_relu(h, cfg.leaky_slope, tape=tape, name=f"{prefix}.act")
    return h


def _encoder_stage(net, x, l, tape, input_grad=True):
    cfg = net.config
    stride = 1 if l == 0 else 2
    h = _block(net, x, f"enc{l}.a", stride, tape, input_grad=input_grad)
    if not cfg.residual_encoder:
        return _block(net, h, f"enc{l}.b", 1, tape)
    h = _block(net, h, f"enc{l}.b", 1, tape, act=False)
    if net.get(f"enc{l}.proj.weight") is not None:
        skip = ops.conv3d(x, net[f"enc{l}.proj.weight"], net.get(f"enc{l}.proj.bias"),
                          stride=stride, tape=tape, name=f"enc{l}.proj",
                          input_grad=input_grad)
    elif stride == 2:
        skip = ops.subsample2(x, tape=tape, name=f"enc{l}.skip")
    else:
        skip = x
    h = ops.add(h, skip, tape=tape, name=f"enc{l}.residual")
    return ops.leaky_relu(h, cfg.leaky_slope, tape=tape, name=f"enc{l}.b.act")


def features(net: Network, x: np.ndarray, tape: Tape | None = None,
             input_grad=False) -> np.ndarray:
    """Final decoder feature map shared by all heads."""
    skips = []
    h = x
    for l in range(net.config.stages):
        h = _encoder_stage(net, h, l, tape, input_grad=input_grad or l > 0)
        skips.append(h)
    for l in reversed(range(net.config.stages - 1)):
        u = ops.upsample2(h, tape=tape, name=f"dec{l}.up")
        h = ops.concat([u, skips[l]], tape=tape, name=f"dec{l}.cat")
        h = _block(net, h, f"dec{l}.a", 1, tape)
        h = _block(net, h, f"dec{l}.b", 1, tape)
    return h


def forward(net: Network, batch: np.ndarray, tape: Tape | None = None,
            input_grad=False) -> np.ndarray:
    """Pre-sigmoid logits ``(B, C, X, Y, Z)`` for every head.

    The gradient w.r.t. ``batch`` is only propagated when ``input_grad`` is set.
    """
    cfg = net.config
    if batch.ndim != 5 or batch.shape[1] != cfg.in_channels:
        raise ValueError(f"expected (B, {cfg.in_channels}, X, Y, Z) input, got {batch.shape}")
    if tuple(batch.shape[2:]) != cfg.patch_shape:
        raise ValueError(f"input spatial shape {batch.shape[2:]} != patch shape {cfg.patch_shape}")
    batch = np.asarray(batch, dtype=net.dtype)
    feats = features(net, batch, tape, input_grad)
    outs = [ops.conv3d(feats, net[f"head{c}.weight"], net[f"head{c}.bias"],
                       tape=tape, name=f"head{c}")
            for c in range(cfg.num_global_classes)]
    return ops.concat(outs, tape=tape, name="heads")


def backward(net: Network, tape: Tape, logits_gradient: np.ndarray) -> None:
    """Accumulate d(loss)/d(parameter) into each ``Parameter.grad``."""
    if not tape.entries or tape.entries[-1].kind != "concat" or tape.entries[-1].name != "heads":
        raise TapeError("tape does not end with a network forward pass")
    logits = tape.entries[-1].output
    grads = tape.backward(logits, logits_gradient)
    for p in net.parameters:
        g = grads.get(id(p.value))
        if g is not None:
            p.grad += g
