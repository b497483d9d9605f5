"""Grasp validation pipeline: protocol execution, quality metrics, dataset emission."""

from __future__ import annotations

import numpy as np

from gripsim.multienv import AssetCache, run_batch_trials
from gripsim.pipeline import config as cfg
from gripsim.pipeline import dataset as ds
from gripsim.pipeline import metrics as qm
from gripsim.pipeline.config import ConfigError, SceneConfig, build_trial_env, load_scene
from gripsim.pipeline.dataset import emit_dataset, load_manifest, load_trial
from gripsim.pipeline.metrics import (
    absolute_distance_D2,
    penetration_distance_D1,
    trial_quality_metrics,
)
from gripsim.pipeline.protocol import TrialProtocol, TrialRecord, finger_contact_force, run_grasp_trial
from gripsim.synth import GraspCandidate

# per-process cache of rest-shape SDFs; reused across trials in one worker
_WORKER_CACHE = AssetCache()


def _validation_worker(_env_unused, payload):
    """Run one grasp trial end to end (module-level so pools can pickle it)."""
    scene, cand_dict, trial_index, seed, with_metrics = payload
    candidate = GraspCandidate.from_dict(cand_dict)
    rng = np.random.default_rng(seed + 7919 * trial_index)
    material = cfg.randomized_material(scene.object.material, scene.randomization, rng)
    override = material if scene.randomization.enabled else None
    env, object_body, finger_links = build_trial_env(
        scene, candidate, env_id=trial_index, material_override=override
    )
    record = run_grasp_trial(env, scene.protocol, object_body, finger_links)
    record.candidate = cand_dict
    if with_metrics and record.verdict != "sim-failed":
        d1, d2, spacing = trial_quality_metrics(
            env, object_body, record.gripper_bodies,
            resolution=scene.metrics_resolution,
            n_samples=scene.metrics_samples,
            seed=seed, cache=_WORKER_CACHE,
        )
        record.metrics["D1"] = d1
        record.metrics["D2"] = d2
        record.metrics["sdf_grid_spacing"] = spacing
    return record


def validate_candidates(scene, candidates, out_dir=None, max_workers=0, seed=0,
                        with_metrics=True):
    """Run the validation protocol on every candidate; optionally emit a dataset.

    Trials map one-to-one onto environments; failures are data (recorded
    with their phase and reason), not errors.  Deterministic for fixed
    (scene, candidates, seed) regardless of worker count.
    """
    jobs = [
        (None, (scene, c.to_dict() if hasattr(c, "to_dict") else c, i, seed, with_metrics))
        for i, c in enumerate(candidates)
    ]
    records = run_batch_trials(_validation_worker, jobs, max_workers=max_workers)
    manifest = None
    if out_dir is not None:
        manifest = emit_dataset(records, out_dir, params=scene.params_dict())
    return records, manifest
