#!/usr/bin/env python3
"""Reproduce the benchmark trend experiments.

Trains (or reloads) the benchmark bundle, then measures how the mean
displacement error moves with communication delay, with the number of
collaborating robots, and with sensor noise for all four pipeline
variants. CSVs land under --out together with a plain-text summary.

The full set takes on the order of ten minutes on one core; pass
--seeds 2 for a quick look.
"""

import argparse
import pathlib
import sys
import time

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from coloc.evaluate import run_baseline, sweep, sweep_to_csv
from coloc.scenarios import benchmark_config, train_benchmark_bundle
from coloc.stgl import load_bundle, save_bundle

DELAYS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
ROBOTS = (1, 2, 3, 4, 5, 6)
NOISES = (0.5, 1.0, 2.0, 3.0, 4.0)
VARIANTS = ("full", "learning-only", "model-only", "measurement-only")


def bundle_for(path: pathlib.Path):
    if path.exists():
        print(f"reusing bundle {path}")
        return load_bundle(str(path))
    t0 = time.perf_counter()
    predictor, compensator = train_benchmark_bundle()
    path.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(str(path), predictor, compensator)
    print(f"trained bundle in {time.perf_counter() - t0:.0f}s -> {path}")
    return predictor, compensator


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/sweeps", help="artifact directory")
    ap.add_argument("--seeds", type=int, default=5, help="seeds per grid point")
    args = ap.parse_args(argv)

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    predictor, compensator = bundle_for(out / "bundle.json")
    base = benchmark_config()
    seeds = tuple(range(args.seeds))
    lines = []

    say = lines.append
    on = run_baseline("full", base, predictor, compensator, seeds=seeds)
    off = run_baseline("full", base, predictor, compensator, seeds=seeds,
                       compensation=False)
    say(f"compensation: DE {on.de:.4f} with vs {off.de:.4f} without "
        f"({(off.de - on.de) / off.de:.1%} lower)")

    lat = sweep("latency", DELAYS, base, predictor, compensator, seeds=seeds)
    (out / "latency.csv").write_text(sweep_to_csv(lat))
    say(f"latency 0->0.7s: DE {lat.mean_de[0]:.4f} -> {lat.mean_de[-1]:.4f}")

    rob = sweep("robots", ROBOTS, base, predictor, compensator, seeds=seeds)
    (out / "robots.csv").write_text(sweep_to_csv(rob))
    say("robots 1->6: DE " + " ".join(f"{v:.4f}" for v in rob.mean_de))

    for kind in VARIANTS:
        res = sweep("noise", NOISES, base, predictor, compensator,
                    seeds=seeds, kind=kind)
        (out / f"noise_{kind}.csv").write_text(sweep_to_csv(res))
        say(f"noise auc {kind}: {res.auc:.4f}")

    summary = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(summary)
    print(summary, end="")
    print(f"csv files under {out}/")
    return 0


if __name__ == "__main__":
    sys.exit(run())
