"""Write a synthetic OxCGRT-style CSV plus a culture table.

    python scripts/make_synthetic_fixture.py out/fixture --regions 10 --days 366 --seed 0
"""
import argparse
import pathlib

from epiforecast.data_ingest import write_culture_csv, write_oxcgrt_csv
from epiforecast.sir_dynamics import synthetic_dataset


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir")
    parser.add_argument("--regions", type=int, default=10)
    parser.add_argument("--days", type=int, default=366)
    parser.add_argument("--start", default="2020-01-01")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--noise", type=float, default=0.05)
    args = parser.parse_args()

    dataset = synthetic_dataset(args.regions, args.days, start_date=args.start, seed=args.seed, noise=args.noise)
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "data.csv").write_text(write_oxcgrt_csv(dataset.regions.values()))
    (out / "culture.csv").write_text(write_culture_csv(dataset.culture))
    print(f"wrote {len(dataset.regions)} regions x {args.days} days to {out}/data.csv and {out}/culture.csv")


if __name__ == "__main__":
    main()
