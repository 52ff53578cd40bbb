"""Train and score the full baseline ladder on freshly generated data.

Prints the median table over seeds and writes it (plus per-seed tables) to
JSON. With all four kinds and three seeds this takes well over an hour on a
single core; ``--kinds`` and ``--seeds`` trim it.
"""

import argparse
import json
import os
import time

from contactdyn.cli import suite_config
from contactdyn.config import RunConfig, load_config
from contactdyn.evaluation import baseline_suite, median_table, table_rows
from contactdyn.model import KINDS
from contactdyn.simenv import generate_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--kinds", default=",".join(KINDS))
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--n-sim", type=int, default=2000)
    ap.add_argument("--n-real", type=int, default=200)
    ap.add_argument("--n-test", type=int, default=50)
    ap.add_argument("--out", default="results/benchmark_all.json")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else RunConfig()
    real_env = cfg.env.with_domain("real-twin")
    t0 = time.time()
    sim = generate_dataset(cfg.env, args.n_sim, cfg.data.T, seed=0)
    real = generate_dataset(real_env, args.n_real, cfg.data.T, seed=100_000)
    test = generate_dataset(real_env, args.n_test, cfg.data.T, seed=200_000)
    print(f"data ready in {time.time() - t0:.0f} s")

    kinds = tuple(args.kinds.split(","))
    tables = []
    for s in (int(x) for x in args.seeds.split(",")):
        tables.append(baseline_suite(sim, real, test, kinds, suite_config(cfg), seed=s))
        print(f"seed {s} done at {time.time() - t0:.0f} s")
    med = median_table(tables)
    rows = table_rows(med)
    for r in rows:
        print(" | ".join(str(x) for x in r))
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump({"median": med, "rows": rows, "per_seed": tables}, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
