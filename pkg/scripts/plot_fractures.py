#!/usr/bin/env python3
"""Plot jump norms and Newton iterations from a ``fractures.csv`` file.

    python3 scripts/plot_fractures.py demo_output/fractures.csv [-o fig.png]

Needs matplotlib; without it the per-phase end values are printed instead.
"""

import argparse
from collections import defaultdict

from fracthm.io import read_fracture_timeseries


def series(rows):
    by_id = defaultdict(lambda: ([], [], []))
    iters = {}
    for r in rows:
        s = by_id[int(r["fracture_id"])]
        s[0].append(int(r["step"]))
        s[1].append(float(r["jump_n_norm"]))
        s[2].append(float(r["jump_t_norm"]))
        iters[int(r["step"])] = int(r["newton_iterations"])
    return dict(by_id), iters


def phase_ends(rows):
    last = {}
    for r in rows:
        last[(r["phase"], int(r["fracture_id"]))] = r
    return last


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("csv")
    ap.add_argument("-o", "--output", default="fractures.png")
    args = ap.parse_args()
    rows = read_fracture_timeseries(args.csv)
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print(f"{'phase':<8}{'id':>4}{'jump_n':>14}{'jump_t':>14}  open/stick/slide")
        for (phase, fid), r in phase_ends(rows).items():
            counts = f"{r['open']}/{r['stick']}/{r['slide']}"
            print(f"{phase:<8}{fid:>4}{float(r['jump_n_norm']):>14.4e}{float(r['jump_t_norm']):>14.4e}  {counts}")
        return
    by_id, iters = series(rows)
    fig, ax = plt.subplots(3, 1, sharex=True, figsize=(7, 8))
    for fid, (steps, jn, jt) in sorted(by_id.items()):
        ax[0].plot(steps, jn, label=f"fracture {fid}")
        ax[1].plot(steps, jt)
    ax[2].bar(list(iters), list(iters.values()))
    ax[0].set_ylabel("normal jump norm [m]")
    ax[1].set_ylabel("tangential jump norm [m]")
    ax[2].set_ylabel("Newton iterations")
    ax[2].set_xlabel("time step")
    ax[0].legend(fontsize="small", ncol=2)
    fig.tight_layout()
    fig.savefig(args.output, dpi=150)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
