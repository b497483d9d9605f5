"""Batched execution of independent environments.

Environments advance in lockstep per time step, but Newton iteration
sweeps proceed per environment: an environment that meets its stopping
criterion is frozen for the remainder of the current solve and consumes
no further work, and each environment's CCD step bound is computed
independently (never min-reduced across the batch).  Failures (NaN/Inf
state, non-convergence, CCD protocol violations, linear-solve breakdown)
are quarantined: the environment is excluded, its memory released, and
its partial logs retained, while every other environment proceeds
bit-for-bit as if the failure had never happened.
"""

from __future__ import annotations

import hashlib
import multiprocessing as mp
import os
import time
from dataclasses import dataclass, field

import numpy as np


@dataclass
class SchedulerConfig:
    max_workers: int = 0          # 0 = serial in-process execution
    deterministic: bool = True
    seed: int = 0


@dataclass
class BatchReport:
    """Accumulated per-env step reports plus batch-level accounting."""

    step_reports: list = field(default_factory=list)   # one list per env
    wall_clock: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def update_counts(self, batch):
        c = {"active": 0, "frozen": 0, "failed": 0, "done": 0}
        for s in batch.statuses:
            c[s] = c.get(s, 0) + 1
        self.counts = c
        return c


class AssetCache:
    """Content-hash keyed, read-only shared assets (meshes, SDFs)."""

    def __init__(self):
        self._store = {}

    @staticmethod
    def key_of(*arrays):
        h = hashlib.sha256()
        for a in arrays:
            a = np.ascontiguousarray(a)
            h.update(str(a.dtype).encode())
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
        return h.hexdigest()

    def get_or_build(self, key, builder):
        if key not in self._store:
            self._store[key] = builder()
        return self._store[key]

    def __len__(self):
        return len(self._store)


class Batch:
    """A set of isolated environments stepped together."""

    def __init__(self, envs, scheduler=None):
        self.envs = list(envs)
        self.scheduler = scheduler or SchedulerConfig()
        self.statuses = ["active"] * len(self.envs)
        self.report = BatchReport(step_reports=[[] for _ in self.envs])
        for i, env in enumerate(self.envs):
            env.env_id = i
            if env.status == "failed":
                self.statuses[i] = "failed"

    # -- status bookkeeping ---------------------------------------------------

    def active_ids(self):
        return [i for i, s in enumerate(self.statuses) if s == "active"]

    def freeze_converged(self, newton_states):
        """Mark envs whose current solve finished; frozen until the step ends."""
        for i, ns in newton_states.items():
            if ns is not None and ns.done and self.statuses[i] == "active":
                self.statuses[i] = "frozen"
        return list(self.statuses)

    def quarantine_failures(self):
        """Fail envs with non-finite state or a failed solve; release their memory."""
        for i, env in enumerate(self.envs):
            if self.statuses[i] in ("failed", "done") or env is None:
                continue
            bad = env.status == "failed"
            reason = env.fail_reason
            if not bad and env.n_dofs and not np.all(np.isfinite(env.x)):
                bad = True
                reason = "non-finite state"
                env.status = "failed"
                env.fail_reason = reason
            if bad:
                self.statuses[i] = "failed"
                self._release(i, reason)
        return list(self.statuses)

    def _release(self, i, reason):
        env = self.envs[i]
        if env is None:
            return
        self.report.step_reports[i].append(
            {"env": i, "status": "failed", "reason": reason, "step": env.step_index}
        )
        # drop the heavy state, keep the header info for post-mortems
        self.envs[i] = _FailedEnvTombstone(i, env.name, reason, env.step_index)

    def mark_done(self, i):
        self.statuses[i] = "done"

    # -- stepping ---------------------------------------------------------------

    def step(self):
        """One lockstep time step over all active envs with per-env freezing.

        Newton sweeps run one iteration per active env per pass; envs
        that converge are frozen out of later passes, so a 2-iteration
        env does exactly 2 iterations while a neighbor runs 30.
        """
        self.quarantine_failures()
        ids = self.active_ids()
        t0 = time.perf_counter()
        if self.scheduler.max_workers and len(ids) > 1:
            reports = self._step_parallel(ids)
        else:
            reports = self._step_serial_sweeps(ids)
        self.report.wall_clock["step"] = self.report.wall_clock.get("step", 0.0) + (
            time.perf_counter() - t0
        )
        for i, rep in zip(ids, reports):
            if rep is not None:
                self.report.step_reports[i].append(rep.to_dict())
        # thaw frozen envs for the next time step
        for i, s in enumerate(self.statuses):
            if s == "frozen":
                self.statuses[i] = "active"
        self.quarantine_failures()
        self.report.update_counts(self)
        return reports

    def _step_serial_sweeps(self, ids):
        states = {}
        for i in ids:
            states[i] = self.envs[i].begin_step()
        pending = [i for i in ids if not states[i].done]
        while pending:
            for i in pending:
                self.envs[i].newton_iteration(states[i])
            self.freeze_converged({i: states[i] for i in pending})
            pending = [i for i in pending if not states[i].done]
        return [self.envs[i].finalize_step(states[i]) for i in ids]

    def _step_parallel(self, ids):
        ctx = mp.get_context("fork")
        with ctx.Pool(processes=min(self.scheduler.max_workers, len(ids))) as pool:
            out = pool.map(_step_env_worker, [self.envs[i] for i in ids])
        reports = []
        for i, (env, rep) in zip(ids, out):
            self.envs[i] = env
            reports.append(rep)
        return reports


class _FailedEnvTombstone:
    """Placeholder keeping identity and failure cause after memory release."""

    def __init__(self, env_id, name, reason, step_index):
        self.env_id = env_id
        self.name = name
        self.status = "failed"
        self.fail_reason = reason
        self.step_index = step_index
        self.n_dofs = 0
        self.x = np.zeros(0)


def _step_env_worker(env):
    rep = env.step()
    return env, rep


def _run_trial_worker(args):
    fn, env, payload = args
    return fn(env, payload)


def run_batch_trials(trial_fn, envs_payloads, max_workers=0, chunksize=1):
    """Run one independent trial per (env, payload) pair, optionally on a pool.

    trial_fn(env, payload) must be a module-level callable (picklable).
    Results keep input order; execution order cannot matter because
    environments are isolated.
    """
    jobs = [(trial_fn, env, payload) for (env, payload) in envs_payloads]
    if max_workers and len(jobs) > 1:
        ctx = mp.get_context("fork")
        with ctx.Pool(processes=max_workers) as pool:
            return pool.map(_run_trial_worker, jobs, chunksize=chunksize)
    return [_run_trial_worker(j) for j in jobs]


def measure_speedup(make_env, trial_fn, env_counts, max_workers=None, payload=None):
    """Fig-style scaling table: batched vs sequential runtime for N environments.

    make_env(i) builds environment i from the shared scene template;
    trial_fn(env, payload) runs its full workload.  The speedup of N
    parallel environments is the runtime ratio against running the same
    N environments sequentially in-process.  Returns a list of dict rows
    {env_count, batched_s, sequential_s, speedup}.
    """
    if max_workers is None:
        max_workers = os.cpu_count() or 1
    rows = []
    for n in env_counts:
        envs = [make_env(i) for i in range(n)]
        jobs = [(env, payload) for env in envs]

        t0 = time.perf_counter()
        run_batch_trials(trial_fn, jobs, max_workers=0)
        sequential = time.perf_counter() - t0

        envs = [make_env(i) for i in range(n)]
        jobs = [(env, payload) for env in envs]
        t0 = time.perf_counter()
        run_batch_trials(
            trial_fn, jobs, max_workers=min(max_workers, n),
            chunksize=max(1, n // (4 * max_workers) or 1),
        )
        batched = time.perf_counter() - t0

        rows.append(
            {
                "env_count": n,
                "batched_s": batched,
                "sequential_s": sequential,
                "speedup": sequential / batched if batched > 0 else float("inf"),
            }
        )
    return rows
