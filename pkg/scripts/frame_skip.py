"""Bend fixture processed at every n-th frame: how tracking degrades with speed."""

import argparse
import json
import logging

from nrfusion.fixtures import bend_config, bend_scene, render, run_with_truth
from nrfusion.synthcam import frame_skip


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=60)
    ap.add_argument("--skips", default="1,3,6")
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)

    frames, truth = render(bend_scene(args.frames))
    rows = {}
    for n in (int(s) for s in args.skips.split(",")):
        f, t = frame_skip(frames, truth, n)
        out = run_with_truth(f, t, bend_config(), track_drift=True)
        rows[n] = {"frames": len(f), "drift_mean": out["drift_mean"],
                   "surface_mean": out["surface"]["mean"]}
        print(n, json.dumps(rows[n]), flush=True)
    print(json.dumps(rows, indent=1))


if __name__ == "__main__":
    main()
