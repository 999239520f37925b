"""Command line: reconstruct, synth, eval, export-mesh."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .camera import read_frames, write_sequence
from .config import Config
from .isosurface import extract_mesh, read_ply, write_ply
from .pipeline import Reconstructor
from .synthcam import (SceneSpec, evaluate_drift, load_truth, render_sequence, save_truth,
                       surface_error)
from .volume import GlobalPose, load_volume, save_volume

log = logging.getLogger("nrfusion")


def _mesh_colors(volume, mesh):
    if mesh.n_vertices == 0:
        return None
    from .volume import interpolate
    return np.clip(np.rint(interpolate(volume, volume.color, mesh.vertices_canonical)), 0, 255).astype(np.uint8)


def write_mesh(path, volume, mesh, deformed=False):
    verts = mesh.vertices_deformed if deformed else mesh.vertices_canonical
    write_ply(path, verts, mesh.triangles, colors=_mesh_colors(volume, mesh))


def cmd_reconstruct(args):
    config = Config.from_file(args.config) if args.config else Config()
    print("# configuration")
    print(config.to_text(), end="", flush=True)
    frames = list(read_frames(args.input))
    if config.max_frames:
        frames = frames[:config.max_frames]
    if not frames:
        raise ValueError(f"{args.input}: no frames to reconstruct")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    per_frame = out / "frames"
    if args.save_per_frame:
        per_frame.mkdir(exist_ok=True)
    with (open(out / "trace.jsonl", "w") as trace, open(out / "metrics.jsonl", "w") as metrics,
          open(out / "timing.jsonl", "w") as timing):
        rec = Reconstructor(config, trace_sink=trace)
        for j, frame in enumerate(frames):
            report = rec.process(frame)
            row = json.loads(report.to_json())
            row["position"] = j
            # wall time goes to its own file so metrics are reproducible byte for byte
            timing.write(json.dumps({"position": j, "seconds": row.pop("seconds")}) + "\n")
            metrics.write(json.dumps(row, sort_keys=True) + "\n")
            metrics.flush()
            if args.save_per_frame:
                stem = f"{j:06d}"
                save_volume(rec.volume, per_frame / f"volume_{stem}.bin")
                write_mesh(per_frame / f"deformed_{stem}.ply", rec.volume, rec.deformed_mesh(), deformed=True)
            print(f"frame {j} ({frame.index}): dense {report.n_dense} sparse {report.n_sparse} "
                  f"active {report.n_active} E {report.energy_initial:.4g} -> {report.energy_final:.4g}",
                  flush=True)
    save_volume(rec.volume, out / "volume.bin")
    write_mesh(out / "canonical.ply", rec.volume, rec.canonical_mesh())
    write_mesh(out / "deformed.ply", rec.volume, rec.deformed_mesh(), deformed=True)
    return 0


def cmd_synth(args):
    try:
        spec = SceneSpec.from_dict(json.loads(Path(args.spec).read_text()))
    except (TypeError, KeyError) as e:
        raise ValueError(f"{args.spec}: invalid scene: {e}") from None
    frames, truth = render_sequence(spec)
    out = Path(args.out)
    write_sequence(out, frames)
    save_truth(truth, out / "truth")
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def _read_metrics(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def evaluate_run(recon_dir, truth_dir):
    """Surface error of the canonical mesh and drift from per-frame snapshots, as a dict."""
    recon, truth = Path(recon_dir), Path(truth_dir)
    if (truth / "truth" / "truth.json").exists():
        truth = truth / "truth"
    gt = load_truth(truth)
    metrics = _read_metrics(recon / "metrics.jsonl")
    if len(metrics) != len(gt.frame_ids):
        raise ValueError(f"sequence mismatch: reconstruction has {len(metrics)} frames, "
                         f"ground truth has {len(gt.frame_ids)}")
    ids = [m["frame"] for m in metrics]
    if ids != list(gt.frame_ids):
        raise ValueError(f"sequence mismatch: frame ids {ids[:5]}... vs {list(gt.frame_ids)[:5]}...")
    verts, _ = read_ply(recon / "canonical.ply")[:2]
    report = {"surface": surface_error(verts, gt)}
    snaps = sorted((recon / "frames").glob("volume_*.bin"))

    def states():
        for p in snaps:
            j = int(p.stem.split("_")[1])
            if j > 0:
                yield j, load_volume(p), GlobalPose.from_dict(metrics[j]["pose"])

    report["drift"] = evaluate_drift(gt, states()) if snaps else None
    return report


def cmd_eval(args):
    report = evaluate_run(args.recon, args.truth)
    Path(args.out).write_text(json.dumps(report, indent=1))
    s = report["surface"]
    print(f"surface: mean {s['mean']:.6g} max {s['max']:.6g} over {s['n_vertices']} vertices")
    if report["drift"]:
        print(f"drift: mean {report['drift']['mean']}")
    return 0


def cmd_export_mesh(args):
    vol = load_volume(args.volume)
    mesh = extract_mesh(vol, GlobalPose())
    write_mesh(args.out, vol, mesh)
    print(f"{mesh.n_vertices} vertices, {mesh.n_triangles} triangles")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="nrfusion", description="Non-rigid RGB-D reconstruction")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("reconstruct", help="run the reconstruction on a frame directory")
    p.add_argument("--input", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--save-per-frame", action="store_true")
    p.set_defaults(func=cmd_reconstruct)
    p = sub.add_parser("synth", help="render a synthetic sequence from a JSON scene")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    p = sub.add_parser("eval", help="compare a reconstruction with ground truth")
    p.add_argument("--recon", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("export-mesh", help="canonical mesh of a volume snapshot")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_mesh)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
