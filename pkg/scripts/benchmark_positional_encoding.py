"""Train the transformer model with and without positional encoding on synthetic data.

Prints the best validation L1 loss of each variant per seed, plus wall time.

    python scripts/benchmark_positional_encoding.py --regions 10 --seeds 0 1 2 --max-epochs 100
"""
import argparse
import time

import numpy as np

from epiforecast.features import RATIO_SIR, build_frame, build_windows
from epiforecast.models import build_transenc_cultd_sir
from epiforecast.nn.training import TrainConfig, train
from epiforecast.sir_dynamics import synthetic_dataset


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--regions", type=int, default=10)
    parser.add_argument("--days", type=int, default=150)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--max-epochs", type=int, default=100)
    args = parser.parse_args()

    dataset = synthetic_dataset(args.regions, args.days, seed=0)
    samples = [w for key, series in dataset.regions.items()
               for w in build_windows(build_frame(series, dataset.culture_for(key)), 21, RATIO_SIR)]
    print(f"{len(samples)} windows from {args.regions} regions")

    results = {True: [], False: []}
    for seed in args.seeds:
        for positional in (True, False):
            model = build_transenc_cultd_sir(positional_encoding=positional, seed=seed)
            start = time.perf_counter()
            history = train(model, samples, TrainConfig(max_epochs=args.max_epochs, seed=seed))
            results[positional].append(history.best_val_loss)
            print(f"seed {seed} positional={positional!s:5s} best val L1 {history.best_val_loss:.6f} "
                  f"(epoch {history.best_epoch}, {time.perf_counter() - start:.1f}s)")
    for positional, losses in results.items():
        print(f"positional={positional!s:5s} mean best val L1 {np.mean(losses):.6f} +/- {np.std(losses):.6f}")


if __name__ == "__main__":
    main()
