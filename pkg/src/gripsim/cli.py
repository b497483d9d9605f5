"""grip-engine command line: synth, validate, bench, metrics, report.

Configuration comes from a TOML scene file plus flag overrides; bad
config exits with status 2 and a field diagnostic.  Partial batch
failures are data, not errors: validate exits 0 and reports failure
counts in its summary.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="global RNG seed")
    p.add_argument("--deterministic", action="store_true", default=True,
                   help="deterministic mode (fixed candidate ordering; default on)")
    p.add_argument("--envs", type=str, default="0",
                   help="parallel environments (workers); 0 = serial")


def build_parser():
    ap = argparse.ArgumentParser(prog="grip-engine",
                                 description="grasp simulation engine and dataset pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate grasp candidates")
    _add_common(p)
    p.add_argument("--scene", required=True, help="TOML scene file")
    p.add_argument("--out", required=True, help="output candidates JSON")
    p.add_argument("--n", type=int, default=0, help="override candidate count")
    p.add_argument("--bimanual", action="store_true", help="compose bimanual candidates")
    p.add_argument("--left", help="left-hand candidates JSON (bimanual)")
    p.add_argument("--right", help="right-hand candidates JSON (bimanual)")
    p.add_argument("--k", type=int, default=26, help="k-means cluster count")
    p.add_argument("--r1", type=float, default=0.25, help="cluster-pair retention fraction")
    p.add_argument("--n-target", type=int, default=100, help="target bimanual count")

    p = sub.add_parser("validate", help="run grasp trials and emit the dataset")
    _add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--candidates", help="candidates JSON (default: synthesize)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--no-metrics", action="store_true", help="skip D1/D2 computation")

    p = sub.add_parser("bench", help="multi-environment speedup table")
    _add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--env-counts", "--counts", dest="env_counts", default=None,
                   help="comma-separated env counts (falls back to --envs)")
    p.add_argument("--out", default="bench.csv", help="output CSV")
    p.add_argument("--svg", default=None, help="optional SVG plot path")
    p.add_argument("--workers", type=int, default=0, help="pool size (0 = cpu count)")

    p = sub.add_parser("metrics", help="D1/D2 summary over an emitted dataset")
    _add_common(p)
    p.add_argument("--dataset", required=True)

    p = sub.add_parser("report", help="aggregate CSV and SVG plots for a dataset")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    return ap


def _load_scene_or_die(path):
    from gripsim.pipeline import ConfigError, load_scene

    try:
        return load_scene(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        sys.exit(2)
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        sys.exit(2)


def cmd_synth(args):
    from gripsim import synth as sy
    from gripsim.geometry import build_sdf

    scene = _load_scene_or_die(args.scene)
    if args.bimanual:
        if not (args.left and args.right):
            print("config error: --bimanual requires --left and --right", file=sys.stderr)
            return 2
        left = sy.load_candidates(args.left)
        right = sy.load_candidates(args.right)
        params = sy.BimanualComposeParams(k=args.k, r1=args.r1, n_target=args.n_target)
        composed = sy.compose_bimanual(left, right, params, seed=args.seed)
        Path(args.out).write_text(json.dumps([c.to_dict() for c in composed], indent=1, sort_keys=True))
        print(f"composed {len(composed)} bimanual candidates "
              f"(k={params.k}, r1={params.r1}, n_target={params.n_target}) -> {args.out}")
        return 0

    surface = scene.object.surface()
    sdf = build_sdf(surface, resolution=scene.synth.sdf_resolution)
    n = args.n or scene.synth.n_candidates
    cands = sy.sample_antipodal(
        surface, scene.gripper.gripper, n,
        seed=args.seed or scene.synth.seed, sdf=sdf, mu=scene.synth.mu,
        dhat=scene.contact.dhat,
        n_surface_points=scene.synth.surface_points,
        approach_attempts=scene.synth.approach_attempts,
    )
    sy.save_candidates(cands, args.out)
    print(f"sampled {len(cands)} antipodal candidates -> {args.out}")
    return 0


def cmd_validate(args):
    from gripsim import synth as sy
    from gripsim.geometry import build_sdf
    from gripsim.pipeline import validate_candidates

    scene = _load_scene_or_die(args.scene)
    if args.candidates:
        cands = sy.load_candidates(args.candidates)
    else:
        surface = scene.object.surface()
        sdf = build_sdf(surface, resolution=scene.synth.sdf_resolution)
        cands = sy.sample_antipodal(
            surface, scene.gripper.gripper, scene.synth.n_candidates,
            seed=args.seed or scene.synth.seed, sdf=sdf, mu=scene.synth.mu,
            dhat=scene.contact.dhat,
            n_surface_points=scene.synth.surface_points,
            approach_attempts=scene.synth.approach_attempts,
        )
    if not cands:
        print("no candidates to validate")
        return 0
    workers = int(args.envs)
    records, manifest = validate_candidates(
        scene, cands, out_dir=args.out, max_workers=workers,
        seed=args.seed, with_metrics=not args.no_metrics,
    )
    counts = {}
    for r in records:
        counts[r.verdict] = counts.get(r.verdict, 0) + 1
    print(f"validated {len(records)} trials -> {args.out}")
    print("verdicts: " + json.dumps(counts, sort_keys=True))
    return 0


def _bench_rows_to_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["env_count", "batched_s", "sequential_s", "speedup"])
        for r in rows:
            w.writerow([r["env_count"], f"{r['batched_s']:.6f}",
                        f"{r['sequential_s']:.6f}", f"{r['speedup']:.4f}"])


def cmd_bench(args):
    from gripsim.pipeline import bench_speedup

    scene = _load_scene_or_die(args.scene)
    spec = args.env_counts if args.env_counts is not None else args.envs
    counts = [int(x) for x in str(spec).split(",") if int(x or 0) > 0]
    if not counts:
        print("config error: --envs/--env-counts must list positive env counts", file=sys.stderr)
        return 2
    workers = args.workers or (os.cpu_count() or 1)
    rows = bench_speedup(scene, counts, max_workers=workers, seed=args.seed)
    _bench_rows_to_csv(rows, args.out)
    for r in rows:
        print(f"N={r['env_count']:4d}  batched={r['batched_s']:.3f}s  "
              f"sequential={r['sequential_s']:.3f}s  speedup={r['speedup']:.2f}x")
    print(f"wrote {args.out}")
    if args.svg:
        _bench_svg(rows, args.svg)
        print(f"wrote {args.svg}")
    return 0


def _bench_svg(rows, path):
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    n = [r["env_count"] for r in rows]
    s = [r["speedup"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(n, s, "o-", label="measured speedup")
    ax.plot(n, n, "k:", alpha=0.4, label="ideal")
    ax.set_xlabel("parallel environments")
    ax.set_ylabel("speedup vs sequential")
    ax.set_xscale("log", base=2)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_metrics(args):
    from gripsim.pipeline import load_manifest

    manifest = load_manifest(args.dataset)
    d1 = [t["D1"] for t in manifest["trials"] if t["D1"] is not None]
    d2 = [t["D2"] for t in manifest["trials"] if t["D2"] is not None]
    counts = {}
    for t in manifest["trials"]:
        counts[t["verdict"]] = counts.get(t["verdict"], 0) + 1
    print(f"trials: {manifest['n_trials']}  verdicts: {json.dumps(counts, sort_keys=True)}")
    if d1:
        print(f"D1 (m): max={max(d1):.6g} mean={np.mean(d1):.6g}  "
              f"nonzero={sum(1 for x in d1 if x > 0)}/{len(d1)}")
        print(f"D2 (m): mean={np.mean(d2):.6g} min={min(d2):.6g} max={max(d2):.6g}")
    return 0


def cmd_report(args):
    from gripsim.pipeline import load_manifest, load_trial

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.dataset)
    rows = []
    for t in manifest["trials"]:
        meta = json.loads((Path(args.dataset) / t["dir"] / "meta.json").read_text())
        rows.append({
            "id": t["id"], "verdict": t["verdict"],
            "D1": t["D1"], "D2": t["D2"],
            "n_steps": meta["n_steps"],
            "final_disp": meta["metrics"].get("final_phase_com_disp"),
        })
    with open(out / "trials.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()) if rows else ["id"])
        w.writeheader()
        for r in rows:
            w.writerow(r)

    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    d2 = [r["D2"] for r in rows if r["D2"] is not None]
    if d2:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.hist(np.array(d2) * 1000.0, bins=20)
        ax.set_xlabel("D2 (mm)")
        ax.set_ylabel("trials")
        fig.tight_layout()
        fig.savefig(out / "d2_hist.svg")
        plt.close(fig)
    print(f"wrote report to {out}")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "validate": cmd_validate,
        "bench": cmd_bench,
        "metrics": cmd_metrics,
        "report": cmd_report,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
