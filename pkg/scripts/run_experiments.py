"""Populate the desk-scale result cache used by tests/test_acceptance.py.

Usage: python3 scripts/run_experiments.py [table2 table3 table4 sizes] [--out runs/acceptance]

Cells already on disk are reused, so the script can be interrupted and rerun.
"""
import argparse
import json
import logging
from pathlib import Path

import torch

from noisyseg.evalreport import ExperimentConfig, run_experiment

ROOT = Path(__file__).resolve().parents[1]
NAMES = ("table2", "table3", "table4", "sizes")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="*", default=list(NAMES), choices=NAMES)
    ap.add_argument("--config", default=ROOT / "configs" / "desk.yaml")
    ap.add_argument("--out", default=ROOT / "runs" / "acceptance")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(args.threads)
    exp = ExperimentConfig.from_file(args.config)
    for name in args.names:
        result = run_experiment(name, exp, args.out)
        print(json.dumps({"table": name, "compute_seconds": round(result["compute_seconds"], 1),
                          "summary": result["summary"]}), flush=True)


if __name__ == "__main__":
    main()
