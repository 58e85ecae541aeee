"""Train the three architectures on a generated dataset and print a metrics table.

The published reference rows are printed under each model for comparison.
"""
import argparse
import time
from pathlib import Path

from mflow import cli
from mflow import dataset as D
from mflow import models as M
from mflow import train as TR


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--mode", choices=D.MODES, default="channel")
    p.add_argument("--target", choices=("magnitude", "components"), default="magnitude")
    p.add_argument("--width", type=int, default=4)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--out", default="runs/desk_study")
    a = p.parse_args()

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    data = out / cli.DATASET_FILE
    samples = D.load(data) if data.exists() else D.generate(a.n, a.seed, a.mode, out_path=data)
    tr, va = D.split(samples, cli.SPLIT_SEED)
    cfg = TR.TrainConfig(batch_size=a.batch, epochs=a.epochs, target_mode=a.target)
    n_out = 1 if a.target == "magnitude" else 2
    paper = cli.PAPER_MAGNITUDE if a.target == "magnitude" else cli.PAPER_COMPONENTS
    rows = {}
    for arch in M.ARCHITECTURES:
        t0 = time.perf_counter()
        model = M.build(M.ModelSpec(arch, out_channels=n_out, base_width=a.width, seed=0))
        model, _ = TR.fit(model, tr, va, cfg, out_dir=out / arch)
        rows[arch] = TR.evaluate(model, tr, a.target) + TR.evaluate(model, va, a.target)
        rows[f"{arch} (paper)"] = paper[arch]
        print(f"{arch}: {time.perf_counter() - t0:.0f}s", flush=True)
    table = cli.metrics_table(rows, f"{a.target} target, {len(samples)} {a.mode} samples, base width {a.width}, "
                                    f"{a.epochs} epochs")
    (out / "metrics.txt").write_text(table)
    print(table, end="")


if __name__ == "__main__":
    main()
