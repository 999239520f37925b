"""Slow bend of a textured cylinder: canonical surface error and drift."""

import argparse
import json
import logging
import time

from nrfusion.fixtures import bend_config, bend_scene, render, run_with_truth


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=60)
    ap.add_argument("--no-features", action="store_true")
    ap.add_argument("--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR)

    frames, truth = render(bend_scene(args.frames))
    config = bend_config(use_features=not args.no_features)
    t0 = time.perf_counter()
    out = run_with_truth(frames, truth, config, track_drift=True)
    h = config.voxel_size
    print(json.dumps({
        "frames": args.frames,
        "surface_mean": out["surface"]["mean"],
        "surface_max": out["surface"]["max"],
        "drift_mean": out["drift_mean"],
        "drift_per_frame": out["drift"],
        "surface_ok": out["surface"]["mean"] < 2 * h,
        "drift_ok": out["drift_mean"] < 3 * h,
        "seconds": time.perf_counter() - t0,
    }, indent=1))


if __name__ == "__main__":
    main()
