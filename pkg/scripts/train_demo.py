#!/usr/bin/env python3
"""End-to-end demo: generate, train, run, score.

Drives the installed CLI against configs/demo.yaml: writes ground truth,
trains the two ensembles, runs one collaborative episode and then scores
all four pipeline variants over a few seeds. Expect the training step to
take a couple of minutes on one core.
"""

import argparse
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from coloc.cli import main as cli


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/demo.yaml")
    ap.add_argument("--out", default="runs/demo", help="artifact directory")
    args = ap.parse_args(argv)

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = out / "bundle.json"

    for step in (
        ["gen", "--config", args.config, "--out", str(out / "truth")],
        ["train", "--config", args.config, "--out", str(bundle)],
        ["run", "--config", args.config, "--bundle", str(bundle),
         "--out", str(out / "episode")],
        ["eval", "--config", args.config, "--bundle", str(bundle), "--seeds", "3"],
    ):
        print(f"$ coloc {' '.join(step)}")
        code = cli(step)
        if code != 0:
            return code
    print(f"artifacts under {out}/")
    return 0


if __name__ == "__main__":
    sys.exit(run())
