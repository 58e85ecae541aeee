"""Overfit the attention U-Net on a handful of duct samples and log progress."""
import argparse
import time

from mflow import dataset as D
from mflow import models as M
from mflow import train as TR


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--decay", type=float, default=0.8)
    p.add_argument("--every", type=int, default=20, help="log interval in epochs")
    a = p.parse_args()

    samples = D.generate(a.n, a.seed, "duct")
    model = M.build(M.ModelSpec("attn_unet", base_width=a.width, seed=0))
    cfg = TR.TrainConfig(initial_lr=a.lr, decay_factor=a.decay, batch_size=a.batch, epochs=a.epochs)
    t0 = time.perf_counter()

    def progress(r):
        if r.epoch % a.every == 0 or r.epoch == a.epochs - 1:
            print(f"epoch {r.epoch:4d} lr {r.lr:.3g} loss {r.train_loss:.5f} MRE {r.train_mre:.4f} "
                  f"Dice {r.train_dice:.4f}  {time.perf_counter() - t0:.0f}s", flush=True)

    model, _ = TR.fit(model, samples, [], cfg, progress=progress)
    loss, mre, dice, iou = TR.evaluate(model, samples, "magnitude")
    print(f"eval mode: loss {loss:.5f} MRE {mre:.4f} Dice {dice:.4f} IoU {iou:.4f}")


if __name__ == "__main__":
    main()
