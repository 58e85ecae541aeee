"""Time the channel solver against untrained networks of each architecture."""
import argparse

from mflow import cli
from mflow import dataset as D
from mflow import models as M


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--samples", type=int, default=3)
    p.add_argument("--seed", type=int, default=5)
    p.add_argument("--widths", type=int, nargs="+", default=[8, 16])
    p.add_argument("--repeats", type=int, default=3)
    a = p.parse_args()

    samples = D.generate(a.samples, a.seed, "channel")
    nets = {f"{arch}/{w}": M.build(M.ModelSpec(arch, base_width=w, seed=0))
            for w in a.widths for arch in M.ARCHITECTURES}
    print(cli.bench_table(cli.benchmark(samples, nets, "channel", a.repeats)), end="")


if __name__ == "__main__":
    main()
