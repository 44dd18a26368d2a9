"""Finite-difference gradient check of every differentiable op, as a table.

    python scripts/gradcheck_report.py --seeds 20
"""
import argparse
import pathlib
import sys
import time

from epiforecast.nn.gradcheck import check_gradients

# the op cases live with the test suite
sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "tests"))
from gradient_cases import ALL_CASES  # noqa: E402


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, default=20)
    parser.add_argument("--eps", type=float, default=1e-5)
    parser.add_argument("--tol", type=float, default=1e-4)
    args = parser.parse_args()

    start = time.perf_counter()
    failed = 0
    print(f"{'op':24s} {'worst rel err':>14s}  status")
    for name, builder in ALL_CASES.items():
        worst = max(max(check_gradients(*builder(seed), eps=args.eps).values()) for seed in range(args.seeds))
        ok = worst < args.tol
        failed += not ok
        print(f"{name:24s} {worst:14.2e}  {'ok' if ok else 'FAIL'}")
    print(f"{len(ALL_CASES)} ops x {args.seeds} seeds in {time.perf_counter() - start:.1f}s, {failed} failing")
    sys.exit(1 if failed else 0)


if __name__ == "__main__":
    main()
