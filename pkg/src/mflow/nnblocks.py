"""Layers and composite blocks built on :mod:`mflow.tensor`.

Parameters are registered in construction order, which is also the
order used by checkpoints and the optimizer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InvalidSpec, ShapeMismatch
from .tensor import Tensor

TNET_DROPOUT = 0.01


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype):
        for m in self.modules():
            for p in m._params.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for name in list(m._buffers):
                m.register_buffer(name, getattr(m, name).astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=0, bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.weight = _param(kaiming_uniform(rng, (cout, cin, k, k), cin * k * k), "weight")
        self.bias = _param(np.zeros(cout), "bias") if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, k, stride=2, padding=0, bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.weight = _param(kaiming_uniform(rng, (cin, cout, k, k), cout * k * k), "weight")
        self.bias = _param(np.zeros(cout), "bias") if bias else None

    def forward(self, x):
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, c, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gain = _param(np.ones(c), "gain")
        self.shift = _param(np.zeros(c), "shift")
        self.register_buffer("running_mean", np.zeros(c, dtype=np.float32))
        self.register_buffer("running_var", np.ones(c, dtype=np.float32))

    def forward(self, x):
        return T.batch_norm(x, self.gain, self.shift, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, cin, cout, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = _param(kaiming_uniform(rng, (cout, cin), cin), "weight")
        self.bias = _param(np.zeros(cout), "bias")

    def forward(self, x):
        return T.dense(x, self.weight, self.bias)


class Dropout(Module):
    """Draws masks from a generator shared by the whole model (see ``seed_dropout``)."""

    def __init__(self, rate):
        super().__init__()
        self.rate = rate
        self.rng = np.random.default_rng(0)

    def forward(self, x):
        return T.dropout(x, self.rate, self.training, self.rng)


# ------------------------------------------------------------ attention


class CAM(Module):
    """Channel attention: sigmoid(MLP(GAP F) + MLP(GMP F)) gates each channel."""

    def __init__(self, channels, reduction=16, rng=None):
        super().__init__()
        self.channels = channels
        hidden = max(channels // reduction, 4)
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def _mlp(self, pooled):
        n = pooled.shape[0]
        return self.fc2(T.relu(self.fc1(T.reshape(pooled, (n, self.channels)))))

    def gate(self, f: Tensor) -> Tensor:
        if f.ndim != 4 or f.shape[1] != self.channels:
            raise ShapeMismatch(f"CAM expects {self.channels} channels, got shape {f.shape}")
        a = self._mlp(T.reduce(f, "gap_spatial")) + self._mlp(T.reduce(f, "gmp_spatial"))
        return T.reshape(T.sigmoid(a), (f.shape[0], self.channels, 1, 1))

    def forward(self, f):
        return T.combine(f, self.gate(f), "elementwise_mul_broadcast")


class SAM(Module):
    """Spatial attention from channel-wise average and max maps (7x7 conv)."""

    def __init__(self, kernel=7, rng=None):
        super().__init__()
        self.conv = Conv2d(2, 1, kernel, padding=kernel // 2, bias=False, rng=rng)

    def gate(self, f: Tensor) -> Tensor:
        if f.ndim != 4:
            raise ShapeMismatch(f"SAM expects an NCHW tensor, got shape {f.shape}")
        pooled = T.concat([T.reduce(f, "avg_over_channels"), T.reduce(f, "max_over_channels")])
        return T.sigmoid(self.conv(pooled))

    def forward(self, f):
        return T.combine(f, self.gate(f), "elementwise_mul_broadcast")


# ------------------------------------------------------------ U-Net blocks


class DownBlock(Module):
    """MaxPool(ReLU(BatchNorm(Conv3x3(x))))."""

    def __init__(self, cin, cout, rng=None):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, padding=1, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeMismatch(f"down block needs even spatial dims, got {x.shape[2:]}")
        return T.max_pool2x2(T.relu(self.bn(self.conv(x))))


class Bottleneck(Module):
    """ReLU(BatchNorm(Conv3x3(x)))."""

    def __init__(self, cin, cout, rng=None):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, padding=1, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


class UpBlock(Module):
    """Transposed-conv upsample, concatenate the skip, then Conv3x3+BN+ReLU."""

    def __init__(self, cin, cup, cskip, cout, k=4, rng=None):
        super().__init__()
        self.up = ConvTranspose2d(cin, cup, k, stride=2, padding=(k - 2) // 2, rng=rng)
        self.conv = Conv2d(cup + cskip, cout, 3, padding=1, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x, skip):
        if skip.shape[2] != 2 * x.shape[2] or skip.shape[3] != 2 * x.shape[3]:
            raise ShapeMismatch(f"skip {skip.shape[2:]} must be twice the input {x.shape[2:]}")
        merged = T.concat([self.up(x), skip])
        return T.relu(self.bn(self.conv(merged)))


# ------------------------------------------------------------ T-Net


@dataclass(frozen=True)
class TNetBlockSpec:
    c: int | None  # output channel factor; None means "use the model's output channels"
    k: int
    s: int
    act: str | None = None  # "leaky", "relu" or None
    bn: bool = False
    dropout: float = TNET_DROPOUT

    def validate(self):
        if self.k < 1 or self.s not in (1, 2):
            raise InvalidSpec(f"invalid T-Net block spec {self}")
        if self.act not in (None, "leaky", "relu"):
            raise InvalidSpec(f"unknown activation flag {self.act!r}")


class TNetBlock(Module):
    """Activation -> convolution -> batch norm -> dropout, optional 2x upsample."""

    def __init__(self, cin, spec: TNetBlockSpec, base_width, out_channels=None, upsample=False, rng=None):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.upsample = upsample
        cout = spec.c * base_width if spec.c is not None else out_channels
        if cout is None:
            raise InvalidSpec("output block needs explicit out_channels")
        self.out_channels = cout
        self.conv = Conv2d(cin, cout, spec.k, stride=spec.s, padding=(spec.k - spec.s) // 2, rng=rng)
        self.bn = BatchNorm2d(cout) if spec.bn else None
        self.drop = Dropout(spec.dropout) if spec.dropout > 0 else None

    def forward(self, x):
        if self.spec.act == "leaky":
            x = T.leaky_relu(x)
        elif self.spec.act == "relu":
            x = T.relu(x)
        x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        if self.drop is not None:
            x = self.drop(x)
        if self.upsample:
            x = T.upsample2x(x)
        return x


def tnet_block(x: Tensor, spec: TNetBlockSpec, base_width: int, rng=None) -> Tensor:
    """Functional form: builds a fresh block and applies it."""
    return TNetBlock(x.shape[1], spec, base_width, rng=rng)(x)
