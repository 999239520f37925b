"""Tangentially sliding textured plane with and without sparse feature constraints."""

import argparse
import json
import logging

from nrfusion.fixtures import plane_config, plane_scene, render, run_with_truth


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=20)
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)

    frames, truth = render(plane_scene(args.frames))
    res = {}
    for name, use in (("dense_only", False), ("sparse_dense", True)):
        out = run_with_truth(frames, truth, plane_config(use_features=use), track_drift=True)
        res[name] = {"drift_mean": out["drift_mean"], "drift_per_frame": out["drift"]}
        print(name, out["drift_mean"], flush=True)
    res["ratio"] = res["sparse_dense"]["drift_mean"] / res["dense_only"]["drift_mean"]
    print(json.dumps(res, indent=1))


if __name__ == "__main__":
    main()
