"""Dataset emission: per-trial binary trajectories, stress, contact logs, manifest.

Formats (all little-endian FP64 / int64):

  traj.bin    magic "GRIPTRJ1", n_steps, n_points; per step: step index,
              time, positions (n_points x 3), velocities (n_points x 3).
  stress.bin  magic "GRIPSTR1", n_steps, n_tets, reserved; per step:
              n_tets x 7 (Cauchy xx, yy, zz, xy, yz, xz, von Mises).
  contacts.jsonl / steps.jsonl   one JSON record per step.
  meta.json   candidate, parameters, verdict, metrics, phase markers.
  manifest.json (top level) content hashes of every emitted file.

Loaders round-trip the binary arrays bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

TRAJ_MAGIC = b"GRIPTRJ1"
STRESS_MAGIC = b"GRIPSTR1"


def write_traj(path, times, positions, velocities):
    n_steps = len(times)
    n_points = positions.shape[1] if n_steps else 0
    with open(path, "wb") as f:
        f.write(TRAJ_MAGIC)
        f.write(np.array([n_steps, n_points], dtype="<i8").tobytes())
        for i in range(n_steps):
            f.write(np.array([i], dtype="<i8").tobytes())
            f.write(np.array([times[i]], dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(positions[i], dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(velocities[i], dtype="<f8").tobytes())


def load_traj(path):
    with open(path, "rb") as f:
        if f.read(8) != TRAJ_MAGIC:
            raise ValueError("bad traj magic")
        n_steps, n_points = np.frombuffer(f.read(16), dtype="<i8")
        times = np.empty(n_steps)
        positions = np.empty((n_steps, n_points, 3))
        velocities = np.empty((n_steps, n_points, 3))
        for i in range(n_steps):
            step = np.frombuffer(f.read(8), dtype="<i8")[0]
            if step != i:
                raise ValueError("traj frame index mismatch")
            times[i] = np.frombuffer(f.read(8), dtype="<f8")[0]
            positions[i] = np.frombuffer(f.read(24 * n_points), dtype="<f8").reshape(n_points, 3)
            velocities[i] = np.frombuffer(f.read(24 * n_points), dtype="<f8").reshape(n_points, 3)
    return times, positions, velocities


def write_stress(path, stress):
    n_steps = stress.shape[0]
    n_tets = stress.shape[1] if stress.ndim == 3 else 0
    with open(path, "wb") as f:
        f.write(STRESS_MAGIC)
        f.write(np.array([n_steps, n_tets, 0], dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(stress, dtype="<f8").tobytes())


def load_stress(path):
    with open(path, "rb") as f:
        if f.read(8) != STRESS_MAGIC:
            raise ValueError("bad stress magic")
        n_steps, n_tets, _ = np.frombuffer(f.read(24), dtype="<i8")
        data = np.frombuffer(f.read(8 * n_steps * n_tets * 7), dtype="<f8")
    return data.reshape(n_steps, n_tets, 7).copy()


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default))


def emit_trial(record, trial_dir, params=None):
    """Write one TrialRecord to trial_dir; returns {filename: sha256}."""
    trial_dir = Path(trial_dir)
    trial_dir.mkdir(parents=True, exist_ok=True)
    files = {}

    if record.positions is not None and len(record.positions):
        write_traj(trial_dir / "traj.bin", record.times, record.positions, record.velocities)
        files["traj.bin"] = _sha256(trial_dir / "traj.bin")
        stress = record.stress if record.stress is not None else np.zeros((len(record.times), 0, 7))
        write_stress(trial_dir / "stress.bin", stress)
        files["stress.bin"] = _sha256(trial_dir / "stress.bin")

        with open(trial_dir / "contacts.jsonl", "w") as f:
            for i, events in enumerate(record.contacts):
                f.write(json.dumps({"step": i, "events": events}, sort_keys=True, default=_json_default) + "\n")
        files["contacts.jsonl"] = _sha256(trial_dir / "contacts.jsonl")

        with open(trial_dir / "steps.jsonl", "w") as f:
            for rep in record.step_reports:
                f.write(json.dumps(rep, sort_keys=True, default=_json_default) + "\n")
        files["steps.jsonl"] = _sha256(trial_dir / "steps.jsonl")

    meta = {
        "candidate": record.candidate,
        "verdict": record.verdict,
        "failure": record.failure,
        "phase_markers": record.phase_markers,
        "metrics": record.metrics,
        "com_displacement": record.com_displacement,
        "halt_forces": record.halt_forces,
        "finger_forces": record.finger_forces,
        "n_steps": record.n_steps,
        "object_body": record.object_body,
        "gripper_bodies": list(record.gripper_bodies),
        "params": params or {},
    }
    _dump_json(meta, trial_dir / "meta.json")
    files["meta.json"] = _sha256(trial_dir / "meta.json")
    return files


def emit_dataset(records, out_dir, params=None):
    """Write every trial plus a top-level manifest with content hashes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trials = []
    for i, record in enumerate(records):
        name = f"trial_{i:04d}"
        files = emit_trial(record, out_dir / name, params=params)
        trials.append(
            {
                "id": i,
                "dir": name,
                "verdict": record.verdict,
                "D1": record.metrics.get("D1"),
                "D2": record.metrics.get("D2"),
                "files": files,
            }
        )
    manifest = {
        "format": "gripsim-dataset-v1",
        "n_trials": len(trials),
        "trials": trials,
    }
    _dump_json(manifest, out_dir / "manifest.json")
    return manifest


def load_manifest(out_dir):
    return json.loads((Path(out_dir) / "manifest.json").read_text())


def load_trial(trial_dir):
    trial_dir = Path(trial_dir)
    out = {"meta": json.loads((trial_dir / "meta.json").read_text())}
    if (trial_dir / "traj.bin").exists():
        out["times"], out["positions"], out["velocities"] = load_traj(trial_dir / "traj.bin")
        out["stress"] = load_stress(trial_dir / "stress.bin")
        out["contacts"] = [
            json.loads(line) for line in (trial_dir / "contacts.jsonl").read_text().splitlines()
        ]
    return out
