"""Command-line entry point: ``mflow <subcommand> [flags]``.

Exit codes: 0 success, 1 bad flags or paths, 2 errors raised inside the
library.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset, flowsolve, geometry, models, train
from .errors import MFlowError, NonFiniteValues
from .flowsolve import SolverConfig
from .metrics import MetricsConfig
from .tensor import Tensor

log = logging.getLogger("mflow")

SPLIT_SEED = 0
DATASET_FILE = "dataset.mflo"
CHANNEL_NAMES = {"u": 0, "v": 1, "mag": 2}

# reference rows for the metrics tables (velocity magnitude, then components)
PAPER_MAGNITUDE = {
    "attn_unet": (0.00082, 0.00012, 0.92639, 0.86289, 0.00085, 0.00013, 0.92636, 0.86281),
    "tnet": (0.00399, 0.00060, 0.92535, 0.86109, 0.0040, 0.00063, 0.92530, 0.86093),
    "unet": (0.01243, 0.00189, 0.91980, 0.85149, 0.01154, 0.00179, 0.91963, 0.85128),
}
PAPER_COMPONENTS = {
    "attn_unet": (0.00310, 0.00004, 0.92687, 0.86371, 0.00369, 0.00028, 0.92691, 0.86379),
    "tnet": (0.0075, 0.00059, 0.9262, 0.8623, 0.0085, 0.0006, 0.9267, 0.8632),
    "unet": (0.04122, 0.00307, 0.90870, 0.83267, 0.04187, 0.00318, 0.90876, 0.83277),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------ heatmaps


def colorize(grid: np.ndarray, kind: str = "sequential", mask: np.ndarray | None = None) -> np.ndarray:
    """RGB uint8 image of ``grid``; non-fluid pixels (mask != 0) are black.

    sequential: t = (x - min) / (max - min) over fluid pixels, RGB = (255 t, 0, 255 (1 - t)).
    diverging: t = x / max|x|; t < 0 fades blue to white, t > 0 white to red.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise NonFiniteValues("heatmap needs a 2-D grid")
    fluid = np.ones(grid.shape, bool) if mask is None else np.asarray(mask) == 0
    vals = grid[fluid]
    if not np.all(np.isfinite(vals)):
        raise NonFiniteValues("grid contains NaN or infinite values")
    rgb = np.zeros(grid.shape + (3,), dtype=np.float64)
    if vals.size:
        if kind == "sequential":
            lo, hi = vals.min(), vals.max()
            t = (grid - lo) / (hi - lo) if hi > lo else np.zeros_like(grid)
            rgb[..., 0] = 255.0 * t
            rgb[..., 2] = 255.0 * (1.0 - t)
        elif kind == "diverging":
            a = np.abs(vals).max()
            t = grid / a if a > 0 else np.zeros_like(grid)
            neg = np.clip(-t, 0, 1)
            pos = np.clip(t, 0, 1)
            rgb[..., 0] = 255.0 * (1.0 - neg)
            rgb[..., 1] = 255.0 * (1.0 - np.maximum(neg, pos))
            rgb[..., 2] = 255.0 * (1.0 - pos)
        else:
            raise ValueError(f"unknown colormap kind {kind!r}")
    rgb[~fluid] = 0.0
    return np.rint(rgb).astype(np.uint8)


def render_heatmap(grid, kind: str = "sequential", path=None, mask=None) -> bytes:
    """PPM (P6) bytes of the colorized grid, also written to ``path`` if given."""
    rgb = colorize(grid, kind, mask)
    h, w = rgb.shape[:2]
    data = f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()
    if path is not None:
        Path(path).write_bytes(data)
    return data


def _kind_for(channel: str) -> str:
    return "sequential" if channel == "mag" else "diverging"


# ------------------------------------------------------------ helpers


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {path}")
    return p


def _outdir(path: str) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from exc
    return p


def _sample_by_id(samples, sample_id: int):
    for s in samples:
        if s.id == sample_id:
            return s
    raise UsageError(f"sample id {sample_id} not in dataset")


def _channel_names(n_channels: int) -> list[str]:
    return ["mag"] if n_channels == 1 else ["u", "v", "mag"]


def _target_mode(out_channels: int) -> str:
    return "magnitude" if out_channels == 1 else "components"


# ------------------------------------------------------------ subcommands


def cmd_generate(a) -> int:
    out = _outdir(a.out)
    dataset.generate(a.n, a.seed, a.mode, SolverConfig(mode=a.mode), out / DATASET_FILE)
    print(f"wrote {a.n} {a.mode} samples to {out / DATASET_FILE}")
    return 0


def _parse_params(text: str) -> geometry.WMParams:
    try:
        d, g, amp_c, n, r0, amp = text.split(",")
        return geometry.WMParams(base_radius=float(r0), amplitude=float(amp), fractal_dim=float(d),
                                 spectral_exp=float(g), n_terms=int(n), scale_const=float(amp_c))
    except ValueError as exc:
        raise UsageError(f"--params expects D,gamma,A,N,R0,amp: {exc}") from exc


def cmd_solve(a) -> int:
    if (a.seed is None) == (a.params is None):
        raise UsageError("give exactly one of --seed or --params")
    out = _outdir(a.out)
    params = geometry.sample_params(a.seed) if a.params is None else _parse_params(a.params)
    params.validate()
    if a.mode == "duct":
        shape = geometry.sample_curve(params)
    else:
        shape = geometry.channel_profile(params)
    mask = geometry.validate_mask(geometry.rasterize(shape))
    cfg = SolverConfig(mode=a.mode)
    t0 = time.perf_counter()
    field = flowsolve.solve(mask, cfg)
    elapsed = time.perf_counter() - t0
    geometry.write_pgm(mask, out / "mask.pgm")
    grids = {"mag": field.magnitude} if a.mode == "duct" else {"u": field.u, "v": field.v, "mag": field.magnitude}
    for name, grid in grids.items():
        flowsolve.write_field_dump(grid, CHANNEL_NAMES[name], out / f"{name}.mfld")
        render_heatmap(grid, _kind_for(name), out / f"{name}.ppm", mask)
    print(f"solved {a.mode} in {elapsed:.2f}s, residual {field.converged_residual:.3e}, outputs in {out}")
    return 0


def cmd_train(a) -> int:
    samples = dataset.load(_existing(a.data))
    out = _outdir(a.out)
    target = "magnitude" if a.target == "mag" else "components"
    spec = models.ModelSpec(a.model, 1, 1 if target == "magnitude" else 2, a.width, a.seed)
    model = models.build(spec)
    tr, va = dataset.split(samples, SPLIT_SEED)
    cfg = train.TrainConfig(initial_lr=a.lr, batch_size=a.batch, epochs=a.epochs, seed=a.seed,
                            target_mode=target)
    _, hist = train.fit(model, tr, va, cfg, out_dir=out,
                        progress=lambda r: log.info("epoch %d train %.5f val %.5f", r.epoch, r.train_loss, r.val_loss))
    print(hist.to_table(), end="")
    print(f"best epoch {hist.best_epoch}; checkpoint {out / 'best.mfck'}")
    return 0


def metrics_table(rows: dict[str, tuple], title: str) -> str:
    nw = max([10] + [len(name) for name in rows])
    head = f"{'Model':<{nw}} | {'Training':^47} | {'Validation':^47}\n"
    sub = f"{'':<{nw}} | " + " ".join(f"{c:>11}" for c in ("Loss", "MRE", "DICE", "IOU")) + " | " \
        + " ".join(f"{c:>11}" for c in ("Loss", "MRE", "DICE", "IOU")) + "\n"
    body = ""
    for name, vals in rows.items():
        body += f"{name:<{nw}} | " + " ".join(f"{v:>11.5g}" for v in vals[:4]) + " | " \
            + " ".join(f"{v:>11.5g}" for v in vals[4:]) + "\n"
    return f"{title}\n{head}{sub}{body}"


def cmd_eval(a) -> int:
    samples = dataset.load(_existing(a.data))
    model = models.load(_existing(a.ckpt))
    target = _target_mode(model.spec.out_channels)
    tr, va = dataset.split(samples, SPLIT_SEED)
    mcfg = MetricsConfig(variant=a.variant)
    row = train.evaluate(model, tr, target, metrics_cfg=mcfg) + train.evaluate(model, va, target, metrics_cfg=mcfg)
    ref = (PAPER_MAGNITUDE if target == "magnitude" else PAPER_COMPONENTS)[model.spec.architecture]
    print(metrics_table({model.spec.architecture: row, "(paper)": ref},
                        f"{target} metrics, variant {a.variant}"), end="")
    return 0


def cmd_predict(a) -> int:
    samples = dataset.load(_existing(a.data))
    model = models.load(_existing(a.ckpt))
    s = _sample_by_id(samples, a.sample_id)
    target = _target_mode(model.spec.out_channels)
    truth = s.target(target)
    pred = models.forward(model, s.mask[None, None].astype(np.float32)).data[0]
    out = _outdir(a.out)
    names = ["mag"] if target == "magnitude" else ["u", "v"]
    for k, name in enumerate(names):
        flowsolve.write_field_dump(pred[k], CHANNEL_NAMES[name], out / f"pred_{name}.mfld")
        render_heatmap(pred[k], _kind_for(name), out / f"pred_{name}.ppm", s.mask)
        err = np.abs(pred[k] - truth[k])
        flowsolve.write_field_dump(err, CHANNEL_NAMES[name], out / f"error_{name}.mfld")
        render_heatmap(err, "sequential", out / f"error_{name}.ppm")
    print(f"sample {s.id}: mean |pred - truth| = {np.abs(pred - truth).mean():.5g}; outputs in {out}")
    return 0


def cmd_plot(a) -> int:
    samples = dataset.load(_existing(a.data))
    s = _sample_by_id(samples, a.sample_id)
    names = _channel_names(s.channels.shape[0])
    if a.channel not in names:
        raise UsageError(f"channel {a.channel} not stored in this dataset (has {', '.join(names)})")
    render_heatmap(s.channels[names.index(a.channel)], _kind_for(a.channel), a.out, s.mask)
    print(f"wrote {a.out}")
    return 0


def _median_ms(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def benchmark(samples, nets: dict, mode: str = "channel", repeats: int = 5) -> dict:
    """Per-sample median times (ms) for the solver and each model on the same masks."""
    cfg = SolverConfig(mode=mode)
    out = {"solver": [], **{name: [] for name in nets}}
    for s in samples:
        out["solver"].append(_median_ms(lambda: flowsolve.solve(s.mask, cfg), repeats))
        x = Tensor(s.mask[None, None].astype(np.float32))
        for name, net in nets.items():
            models.forward(net, x)  # warm-up
            out[name].append(_median_ms(lambda: models.forward(net, x), repeats))
    return out


def bench_table(times: dict) -> str:
    solver = np.asarray(times["solver"])
    lines = [f"{'method':<12} {'ms/sample':>12} {'times better':>14}",
             f"{'solver':<12} {np.median(solver):>12.2f} {'1':>14}"]
    for name, t in times.items():
        if name == "solver":
            continue
        ratio = np.median(solver / np.asarray(t))
        lines.append(f"{name:<12} {np.median(t):>12.2f} {ratio:>14.1f}")
    return "\n".join(lines) + "\n"


def cmd_bench(a) -> int:
    path = _existing(a.data)
    mode = dataset.read_header(path)["mode"]
    samples = dataset.load(path)[:a.samples]
    nets = {}
    for ck in a.ckpts:
        net = models.load(_existing(ck))
        nets[f"{net.spec.architecture}:{Path(ck).stem}"] = net
    print(bench_table(benchmark(samples, nets, mode, a.repeats)), end="")
    return 0


# ------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mflow", description="Fractal microchannel flow data and surrogate models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="generate a dataset container")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--mode", choices=dataset.MODES, default="channel")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    s = sub.add_parser("solve", help="solve one geometry")
    s.add_argument("--seed", type=int)
    s.add_argument("--params", help="D,gamma,A,N,R0,amp")
    s.add_argument("--mode", choices=dataset.MODES, default="channel")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_solve)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--model", choices=models.ARCHITECTURES, required=True)
    t.add_argument("--target", choices=("mag", "uv"), default="mag")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--lr", type=float, default=4e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--width", type=int, default=64, help="base channel width")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="metrics of a checkpoint on train/validation splits")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--variant", choices=("soft_squared", "paper_literal"), default="soft_squared")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("predict", help="predict one sample and its error map")
    r.add_argument("--data", required=True)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--sample-id", type=int, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_predict)

    pl = sub.add_parser("plot", help="heatmap of a stored channel")
    pl.add_argument("--data", required=True)
    pl.add_argument("--sample-id", type=int, required=True)
    pl.add_argument("--channel", choices=tuple(CHANNEL_NAMES), required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(fn=cmd_plot)

    b = sub.add_parser("bench", help="solver vs model inference time")
    b.add_argument("--data", required=True)
    b.add_argument("--ckpts", nargs="+", required=True)
    b.add_argument("--samples", type=int, default=3)
    b.add_argument("--repeats", type=int, default=5)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"mflow: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"mflow: error: {exc}", file=sys.stderr)
        return 1
    except MFlowError as exc:
        print(f"mflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is internal
        print(f"mflow: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
