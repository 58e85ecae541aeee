"""The three surrogate architectures, inference, and checkpoint files.

All models map an N x in x H x W mask batch to an N x out x H x W field
with a linear head. ``ModelSpec.input_size`` fixes the encoder depth:
the full 128 x 256 grid gives the seven-level attention U-Net and the
fourteen-layer T-Net; small grids (tests) keep the innermost levels out.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CorruptCheckpoint, InvalidSpec, IoFailure, ShapeMismatch
from .nnblocks import (
    CAM,
    SAM,
    BatchNorm2d,
    Bottleneck,
    Conv2d,
    ConvTranspose2d,
    DownBlock,
    Dropout,
    Module,
    TNetBlock,
    TNetBlockSpec,
    UpBlock,
)
from .tensor import Tensor

ARCHITECTURES = ("unet", "tnet", "attn_unet")
ATTN_WIDTHS = (1, 2, 4, 8, 8, 8, 8)
UNET_WIDTHS = (1, 2, 4, 8)

# l1..l7 encoder, l8..l14 decoder; c=None marks the output layer
TNET_LAYERS = (
    TNetBlockSpec(1, 4, 2),
    TNetBlockSpec(2, 4, 2, "leaky", True),
    TNetBlockSpec(2, 4, 2, "leaky", True),
    TNetBlockSpec(4, 4, 2, "leaky", True),
    TNetBlockSpec(8, 2, 2, "leaky", True),
    TNetBlockSpec(8, 2, 2, "leaky", True),
    TNetBlockSpec(8, 2, 2, "leaky", False),
    TNetBlockSpec(8, 1, 1, "relu", True),
    TNetBlockSpec(8, 1, 1, "relu", True),
    TNetBlockSpec(8, 3, 1, "relu", True),
    TNetBlockSpec(4, 3, 1, "relu", True),
    TNetBlockSpec(2, 3, 1, "relu", True),
    TNetBlockSpec(2, 3, 1, "relu", True),
    TNetBlockSpec(None, 3, 1, "relu", False, dropout=0.0),
)


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "attn_unet"
    in_channels: int = 1
    out_channels: int = 1
    base_width: int = 64
    seed: int = 0
    input_size: tuple[int, int] = (128, 256)

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise InvalidSpec(f"unknown architecture {self.architecture!r}")
        if self.out_channels not in (1, 2):
            raise InvalidSpec("out_channels must be 1 (magnitude) or 2 (u, v)")
        if self.in_channels < 1:
            raise InvalidSpec("in_channels must be >= 1")
        if self.base_width < 4:
            raise InvalidSpec("base_width must be >= 4")
        h, w = self.input_size
        d = self.depth
        if d < 1 or h % 2 ** d or w % 2 ** d:
            raise InvalidSpec(f"input size {self.input_size} is not divisible by 2**{d}")

    @property
    def depth(self) -> int:
        """Number of stride-2 levels: 4 for U-Net, up to 7 for the others."""
        h = self.input_size[0]
        cap = 4 if self.architecture == "unet" else 7
        return min(cap, int(math.log2(h))) if h >= 2 else 0


class Model(Module):
    spec: ModelSpec

    def seed_dropout(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or tuple(x.shape[2:]) != tuple(self.spec.input_size):
            raise ShapeMismatch(f"expected N x C x {self.spec.input_size}, got {x.shape}")


class AttnUNet(Model):
    """Strided-conv encoder, CAM at the bottleneck, SAM-gated skips."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        d = spec.depth
        widths = [f * spec.base_width for f in ATTN_WIDTHS[:d]]
        self.widths = widths
        self.enc = []
        cin = spec.in_channels
        for i, c in enumerate(widths):
            k, p = (2, 0) if i == d - 1 else (4, 1)
            conv = Conv2d(cin, c, k, stride=2, padding=p, rng=rng)
            bn = BatchNorm2d(c)
            setattr(self, f"enc{i + 1}_conv", conv)
            setattr(self, f"enc{i + 1}_bn", bn)
            self.enc.append((conv, bn))
            cin = c
        self.cam = CAM(widths[-1], rng=rng)
        self.sams = []
        for i in range(d - 1):
            sam = SAM(rng=rng)
            setattr(self, f"sam{i + 1}", sam)
            self.sams.append(sam)
        # decoder level i (deepest first) upsamples to the resolution of skip i-1
        self.dec = []
        for i in range(d, 0, -1):
            cin = widths[-1] if i == d else 2 * widths[i - 1]
            cout = widths[i - 2] if i >= 2 else spec.base_width
            k, p = (2, 0) if i == d else (4, 1)
            up = ConvTranspose2d(cin, cout, k, stride=2, padding=p, rng=rng)
            bn = BatchNorm2d(cout)
            setattr(self, f"dec{i}_up", up)
            setattr(self, f"dec{i}_bn", bn)
            self.dec.append((up, bn))
        self.head = Conv2d(spec.base_width, spec.out_channels, 1, rng=rng)

    def forward(self, x):
        self._check_input(x)
        skips = []
        for conv, bn in self.enc:
            x = bn(T.leaky_relu(conv(x)))
            skips.append(x)
        x = self.cam(skips[-1])
        gated = [sam(s) for sam, s in zip(self.sams, skips[:-1])]
        for j, (up, bn) in enumerate(self.dec):
            if j > 0:
                x = T.concat([x, gated[-j]])
            x = bn(T.relu(up(x)))
        return self.head(x)


class UNet(Model):
    """Depth-4 U-Net built from the pooled down block, bottleneck and up block."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        widths = [f * spec.base_width for f in UNET_WIDTHS[:spec.depth]]
        self.widths = widths
        self.downs = []
        cin = spec.in_channels
        for i, c in enumerate(widths):
            blk = DownBlock(cin, c, rng=rng)
            setattr(self, f"down{i + 1}", blk)
            self.downs.append(blk)
            cin = c
        self.bottleneck = Bottleneck(widths[-1], 2 * widths[-1], rng=rng)
        # skips: outputs of down blocks 1..d-1, then the input itself at full size
        skip_ch = [spec.in_channels] + widths[:-1]
        self.ups = []
        cin = 2 * widths[-1]
        for i in range(len(widths) - 1, -1, -1):
            cout = widths[i - 1] if i >= 1 else spec.base_width
            cup = skip_ch[i] if i >= 1 else spec.base_width
            blk = UpBlock(cin, cup, skip_ch[i], cout, k=4, rng=rng)
            setattr(self, f"up{i + 1}", blk)
            self.ups.append(blk)
            cin = cout
        self.head = Conv2d(spec.base_width, spec.out_channels, 1, rng=rng)

    def forward(self, x):
        self._check_input(x)
        skips = [x]
        for blk in self.downs:
            skips.append(blk(skips[-1]))
        y = self.bottleneck(skips.pop())
        for blk in self.ups:
            y = blk(y, skips.pop())
        return self.head(y)


class TNet(Model):
    """Fourteen C blocks with concatenated skips and bilinear upsampling."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        d = spec.depth
        b = spec.base_width
        enc_specs = TNET_LAYERS[:d]
        dec_specs = TNET_LAYERS[14 - d:]
        self.in_ch = max(3, spec.in_channels)
        self.enc, self.dec = [], []
        cin, enc_ch = self.in_ch, []
        for i, s in enumerate(enc_specs):
            blk = TNetBlock(cin, s, b, rng=rng)
            setattr(self, f"l{i + 1}", blk)
            self.enc.append(blk)
            cin = blk.out_channels
            enc_ch.append(cin)
        for j, s in enumerate(dec_specs):
            if j > 0:
                cin += enc_ch[d - 1 - j]
            blk = TNetBlock(cin, s, b, out_channels=spec.out_channels, upsample=True, rng=rng)
            setattr(self, f"l{15 - d + j}", blk)
            self.dec.append(blk)
            cin = blk.out_channels

    def forward(self, x):
        self._check_input(x)
        if x.shape[1] == 1 and self.in_ch == 3:
            x = T.concat([x, x, x])
        feats = []
        for blk in self.enc:
            x = blk(x)
            feats.append(x)
        for j, blk in enumerate(self.dec):
            if j > 0:
                x = T.concat([x, feats[-1 - j]])
            x = blk(x)
        return x


_CLASSES = {"unet": UNet, "tnet": TNet, "attn_unet": AttnUNet}


def build(spec: ModelSpec) -> Model:
    spec.validate()
    return _CLASSES[spec.architecture](spec)


def forward(model: Model, x, mode: str = "eval", dropout_seed: int | None = None) -> Tensor:
    """Run the model; eval mode records no graph."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    if mode == "eval":
        model.eval()
        with T.no_grad():
            return model(x)
    model.train()
    if dropout_seed is not None:
        model.seed_dropout(dropout_seed)
    return model(x)


def param_count(model: Module) -> int:
    return int(sum(p.data.size for p in model.parameters()))


# ------------------------------------------------------------ checkpoints

MAGIC = b"MFCK"
VERSION = 1
_HEADER = struct.Struct("<4sIBBBHqHHI")


def save(model: Model, path) -> None:
    s = model.spec
    blobs = list(model.named_parameters()) + [(n, a) for n, a in model.named_buffers()]
    out = [_HEADER.pack(MAGIC, VERSION, ARCHITECTURES.index(s.architecture), s.in_channels,
                        s.out_channels, s.base_width, s.seed, *s.input_size, len(blobs))]
    for name, value in blobs:
        arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f4")
        key = name.encode("ascii")
        out.append(struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())
    try:
        Path(path).write_bytes(b"".join(out))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def _read_spec(buf: bytes) -> tuple[ModelSpec, int]:
    if len(buf) < _HEADER.size:
        raise CorruptCheckpoint("file shorter than the checkpoint header")
    magic, version, arch, cin, cout, bw, seed, h, w, count = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    if arch >= len(ARCHITECTURES):
        raise CorruptCheckpoint(f"unknown architecture id {arch}")
    spec = ModelSpec(ARCHITECTURES[arch], cin, cout, bw, seed, (h, w))
    try:
        spec.validate()
    except InvalidSpec as exc:
        raise CorruptCheckpoint(f"invalid stored spec: {exc}") from exc
    return spec, count


def load(path, expect: ModelSpec | None = None) -> Model:
    """Rebuild the model stored at ``path``.

    With ``expect`` given, a checkpoint for a different architecture or
    shape configuration is rejected.
    """
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    spec, count = _read_spec(buf)
    if expect is not None:
        if expect.architecture != spec.architecture:
            raise CorruptCheckpoint(
                f"checkpoint holds {spec.architecture}, expected {expect.architecture}")
        if asdict(expect) | {"seed": 0} != asdict(spec) | {"seed": 0}:
            raise CorruptCheckpoint("checkpoint spec does not match the expected spec")
    model = build(spec)
    targets = dict(model.named_parameters())
    buffers = {}
    for m_prefix, m in _module_prefixes(model):
        for name in m._buffers:
            buffers[m_prefix + name] = (m, name)
    if count != len(targets) + len(buffers):
        raise CorruptCheckpoint(f"checkpoint holds {count} tensors, model needs {len(targets) + len(buffers)}")
    off = _HEADER.size
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + klen].decode("ascii")
            off += klen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if off + 4 * n > len(buf):
                raise CorruptCheckpoint("checkpoint truncated inside a tensor")
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
            off += 4 * n
            if name in targets:
                p = targets[name]
                if p.shape != arr.shape:
                    raise CorruptCheckpoint(f"{name}: shape {arr.shape} != {p.shape}")
                p.data = arr
            elif name in buffers:
                m, bname = buffers[name]
                if getattr(m, bname).shape != arr.shape:
                    raise CorruptCheckpoint(f"{name}: buffer shape mismatch")
                m.register_buffer(bname, arr.copy())
            else:
                raise CorruptCheckpoint(f"unexpected tensor {name!r}")
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CorruptCheckpoint):
            raise
        raise CorruptCheckpoint(f"malformed checkpoint: {exc}") from exc
    if off != len(buf):
        raise CorruptCheckpoint("trailing bytes after the last tensor")
    return model


def _module_prefixes(module: Module, prefix: str = ""):
    yield prefix, module
    for name, child in module._children.items():
        yield from _module_prefixes(child, f"{prefix}{name}.")
