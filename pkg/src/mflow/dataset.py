"""Sample generation, the MFLO container, and seeded splitting/batching.

Container layout (little endian)::

    header   4s magic "MFLO" | u32 version | u32 count | u16 h | u16 w | u8 channels | u8 mode
    sample   u64 id | h*w mask bytes | channels*h*w float32

Duct samples carry one channel (axial speed / U); channel-mode samples
carry three (u / U, v / U, |V| / U). A text manifest ``<file>.manifest``
holds one provenance line per sample.
"""
from __future__ import annotations

import logging
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import flowsolve, geometry
from .errors import (
    CorruptContainer,
    DegenerateRadius,
    DisconnectedFluid,
    EmptyFluid,
    ExhaustedRetries,
    InvalidParams,
    InvalidSpec,
    IoFailure,
    NoThroughPath,
    NotConverged,
    OutOfCanvas,
    TooFewSamples,
    UnstableTimestep,
)
from .flowsolve import SolverConfig
from .geometry import WMParams

log = logging.getLogger(__name__)

MAGIC = b"MFLO"
VERSION = 1
HEADER = struct.Struct("<4sIIHHBB")
MODES = ("duct", "channel")
CHANNELS = {"duct": 1, "channel": 3}
SANITY_BOUND = 5.0
MAX_SAMPLE_RETRIES = 20
TRAIN_FRACTION = 0.8

_RETRYABLE = (NotConverged, UnstableTimestep, DegenerateRadius, DisconnectedFluid, EmptyFluid,
              OutOfCanvas, NoThroughPath, ExhaustedRetries, InvalidParams)


@dataclass
class FieldSample:
    id: int
    params: WMParams | None
    mask: np.ndarray  # uint8 (h, w), 0 = fluid
    channels: np.ndarray  # float32 (c, h, w), nondimensional
    residual: float
    seed: int

    def target(self, target_mode: str) -> np.ndarray:
        c = self.channels.shape[0]
        if target_mode == "magnitude":
            return self.channels[c - 1:c]
        if target_mode == "components":
            if c != 3:
                raise InvalidSpec("duct samples have no in-plane components")
            return self.channels[:2]
        raise InvalidSpec(f"unknown target mode {target_mode!r}")

    def __eq__(self, other):
        if not isinstance(other, FieldSample):
            return NotImplemented
        return (self.id == other.id and self.seed == other.seed and self.residual == other.residual
                and self.params == other.params and np.array_equal(self.mask, other.mask)
                and np.array_equal(self.channels, other.channels))


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from a tuple of integers."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def make_sample(index: int, seed: int, mode: str, cfg: SolverConfig,
                h: int = geometry.HEIGHT, w: int = geometry.WIDTH) -> FieldSample:
    """One sample; failed geometries or solves are redrawn with a retry sub-seed."""
    if mode not in MODES:
        raise InvalidParams(f"mode must be one of {MODES}")
    cfg = SolverConfig(**{**cfg.__dict__, "mode": mode})
    for retry in range(MAX_SAMPLE_RETRIES):
        sub = derive_seed(seed, index, retry)
        try:
            params = geometry.sample_params(sub, h=h, w=w)
            if mode == "duct":
                shape = geometry.sample_curve(params, center=(w / 2, h / 2))
            else:
                shape = geometry.channel_profile(params, width=w, center_y=h / 2)
            mask = geometry.validate_mask(geometry.rasterize(shape, h, w))
            field = flowsolve.solve(mask, cfg)
            if mode == "duct":
                channels = flowsolve.nondimensionalize(field, cfg, mask, "magnitude")
            else:
                channels = np.concatenate([flowsolve.nondimensionalize(field, cfg, mask, "components"),
                                           flowsolve.nondimensionalize(field, cfg, mask, "magnitude")])
            if not np.all(np.abs(channels) <= SANITY_BOUND):
                raise NotConverged(f"nondimensional values exceed {SANITY_BOUND}")
        except _RETRYABLE as exc:
            log.info("sample %d retry %d: %s: %s", index, retry, type(exc).__name__, exc)
            continue
        return FieldSample(index, params, mask, channels, float(field.converged_residual), sub)
    raise ExhaustedRetries(f"sample {index}: no valid geometry after {MAX_SAMPLE_RETRIES} retries")


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MFLOW_THREADS", "1")))
    except ValueError:
        return 1


def generate(n: int, seed: int, mode: str, cfg: SolverConfig = SolverConfig(), out_path=None,
             h: int = geometry.HEIGHT, w: int = geometry.WIDTH) -> list[FieldSample]:
    """Generate ``n`` samples and, if ``out_path`` is given, write container and manifest."""
    if n < 1:
        raise InvalidParams("n must be >= 1")
    workers = _worker_count()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(make_sample, i, seed, mode, cfg, h, w) for i in range(n)]
            samples = [f.result() for f in futures]
    else:
        samples = [make_sample(i, seed, mode, cfg, h, w) for i in range(n)]
    if out_path is not None:
        save(samples, out_path, mode)
    return samples


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def _manifest_line(s: FieldSample) -> str:
    p = s.params
    vals = (p.fractal_dim, p.spectral_exp, p.scale_const, p.n_terms, p.base_radius, p.amplitude)
    return "{} {} {!r} {!r} {!r} {} {!r} {!r} {!r}".format(s.id, s.seed, *vals, s.residual)


def save(samples: list[FieldSample], path, mode: str) -> None:
    if not samples:
        raise InvalidParams("nothing to save")
    h, w = samples[0].mask.shape
    c = samples[0].channels.shape[0]
    parts = [HEADER.pack(MAGIC, VERSION, len(samples), h, w, c, MODES.index(mode))]
    for s in samples:
        if s.mask.shape != (h, w) or s.channels.shape != (c, h, w):
            raise InvalidParams(f"sample {s.id} does not match the container shape")
        parts.append(struct.pack("<Q", s.id))
        parts.append(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())
        parts.append(np.ascontiguousarray(s.channels, dtype="<f4").tobytes())
    try:
        Path(path).write_bytes(b"".join(parts))
        manifest_path(path).write_text("".join(_manifest_line(s) + "\n" for s in samples))
    except OSError as exc:
        raise IoFailure(f"cannot write dataset {path}: {exc}") from exc


def expected_size(count: int, h: int, w: int, channels: int) -> int:
    return HEADER.size + count * (8 + h * w + channels * h * w * 4)


def read_header(path) -> dict:
    try:
        with open(path, "rb") as fh:
            head = fh.read(HEADER.size)
    except OSError as exc:
        raise IoFailure(f"cannot read dataset {path}: {exc}") from exc
    if len(head) < HEADER.size:
        raise CorruptContainer("file shorter than the container header")
    magic, version, count, h, w, c, mode = HEADER.unpack(head)
    if magic != MAGIC:
        raise CorruptContainer(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptContainer(f"unsupported container version {version}")
    if mode >= len(MODES):
        raise CorruptContainer(f"unknown mode byte {mode}")
    return {"count": count, "h": h, "w": w, "channels": c, "mode": MODES[mode]}


def load(path) -> list[FieldSample]:
    hdr = read_header(path)
    count, h, w, c = hdr["count"], hdr["h"], hdr["w"], hdr["channels"]
    buf = Path(path).read_bytes()
    if len(buf) != expected_size(count, h, w, c):
        raise CorruptContainer(f"file length {len(buf)} != {expected_size(count, h, w, c)} for {count} samples")
    try:
        lines = manifest_path(path).read_text().splitlines()
    except OSError as exc:
        raise CorruptContainer(f"missing manifest for {path}") from exc
    if len(lines) != count:
        raise CorruptContainer(f"manifest has {len(lines)} lines for {count} samples")
    samples, off = [], HEADER.size
    for line in lines:
        (sid,) = struct.unpack_from("<Q", buf, off)
        off += 8
        mask = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=off).reshape(h, w).copy()
        off += h * w
        ch = np.frombuffer(buf, dtype="<f4", count=c * h * w, offset=off).reshape(c, h, w).astype(np.float32)
        off += 4 * c * h * w
        fields = line.split()
        try:
            if len(fields) != 9 or int(fields[0]) != sid:
                raise ValueError("id mismatch")
            params = WMParams(base_radius=float(fields[6]), amplitude=float(fields[7]),
                              fractal_dim=float(fields[2]), spectral_exp=float(fields[3]),
                              n_terms=int(fields[5]), scale_const=float(fields[4]))
            samples.append(FieldSample(sid, params, mask, ch, float(fields[8]), int(fields[1])))
        except ValueError as exc:
            raise CorruptContainer(f"bad manifest line for sample {sid}: {line!r}") from exc
    return samples


def split(samples: list, seed: int) -> tuple[list, list]:
    """Seeded permutation; the first 80% train, the rest validate."""
    n = len(samples)
    if n < 5:
        raise TooFewSamples(f"need at least 5 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(TRAIN_FRACTION * n)
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


@dataclass
class Batch:
    ids: list[int]
    x: np.ndarray  # (N, 1, h, w) float32 mask
    y: np.ndarray  # (N, C, h, w) float32 targets


def batches(samples: list[FieldSample], batch_size: int, epoch_seed: int | None = None,
            target_mode: str = "magnitude") -> list[Batch]:
    """Ordered batches; ``epoch_seed`` shuffles, ``None`` keeps the given order."""
    if batch_size < 1:
        raise InvalidParams("batch_size must be >= 1")
    order = np.arange(len(samples))
    if epoch_seed is not None:
        order = np.random.default_rng(epoch_seed).permutation(len(samples))
    out = []
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        x = np.stack([s.mask for s in chunk])[:, None].astype(np.float32)
        y = np.stack([s.target(target_mode) for s in chunk]).astype(np.float32)
        out.append(Batch([s.id for s in chunk], x, y))
    return out
