"""Train the 4-layer CNN on MNIST with learnable companding quantizers.

The desk-scale recipe: a stratified 10k-image training subset, three epochs,
Nesterov SGD with cosine decay and half-an-epoch linear warm-up.  Compares a
quantized run against the full-precision baseline and prints the learned
clip values.

    python demos/train_mnist.py --method lcq --bits 2/2
"""

import argparse
import sys
import time

import numpy as np

from compandq.train import TrainConfig, train_loop


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--method", default="lcq",
                    choices=["lcq", "uniform", "lcq-no-lwn", "fp"])
    ap.add_argument("--bits", default="2/2")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-root", default="data")
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--limit", type=int, default=10_000)
    ap.add_argument("--out", default="runs/mnist_demo")
    args = ap.parse_args()
    w_bits, a_bits = (int(b) for b in args.bits.split("/"))

    cfg = TrainConfig(
        dataset="mnist", data_root=args.data_root, train_limit=args.limit,
        epochs=args.epochs, batch_size=125, lr_weights=0.15, lr_quant=0.02,
        warmup_epochs=0.5, w_bits=w_bits, a_bits=a_bits, method=args.method,
        seed=args.seed, out_dir=args.out,
    )
    t0 = time.time()
    model, metrics = train_loop(cfg, quiet=False)
    test = [m for m in metrics if m["split"] == "test"]
    print(f"\n{args.method} W{w_bits}/A{a_bits}: "
          f"final test top1 {test[-1]['top1']:.2f}% "
          f"({time.time() - t0:.0f}s)")
    if args.method != "fp":
        print("learned clip values:", model.alpha_summary())
    return 0


if __name__ == "__main__":
    sys.exit(main())
