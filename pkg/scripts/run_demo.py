#!/usr/bin/env python3
"""Run the four-phase demo and print the per-phase summary.

    python3 scripts/run_demo.py [--resolution N] [--out-dir DIR]
"""

import argparse
import json
import logging

from fracthm.app import demo_scenario, phase_summary, run_scenario, with_overrides


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--resolution", type=int)
    ap.add_argument("--out-dir", default="demo_output")
    ap.add_argument("--no-vtk", action="store_true")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    sc = with_overrides(demo_scenario(), resolution=args.resolution)
    res = run_scenario(sc, args.out_dir, vtk=False if args.no_vtk else None)
    print(f"{len(res.records)} steps in {res.runtime:.1f} s")
    print(json.dumps(phase_summary(res.records), indent=2))


if __name__ == "__main__":
    main()
