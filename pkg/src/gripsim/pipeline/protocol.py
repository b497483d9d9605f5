"""Automated grasp validation protocol.

A trial runs phases: settle (gravity off), contact-aware closing with a
per-finger force halt, hold to steady state, then six axis-aligned
gravity phases.  The grasp is stable iff the object is still in contact
with the gripper at the final step and its center of mass moved less
than a threshold proportional to eps_v * dt during the final phase.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gripsim import contact as ct
from gripsim import materials as mat
from gripsim import solver as sv

GRAVITY_DIRECTIONS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.float64
)


@dataclass
class TrialProtocol:
    """Phase durations, closing speed, halt force, and gravity schedule."""

    settle_duration: float = 0.05
    closing_speed: float = 0.05          # m/s per jaw
    force_halt: float = 50.0             # N
    gravity_magnitude: float = 9.8       # m/s^2
    gravity_phase_duration: float = 0.1  # s per direction
    steady_speed_steps: int = 5
    steady_max_duration: float = 1.0
    stability_constant: float = 1.0

    def __post_init__(self):
        if min(self.settle_duration, self.gravity_phase_duration, self.steady_max_duration) <= 0:
            raise ValueError("durations must be positive")
        if self.force_halt <= 0 or self.closing_speed <= 0:
            raise ValueError("closing speed and halt threshold must be positive")

    @property
    def gravity_directions(self):
        return GRAVITY_DIRECTIONS.copy()


@dataclass
class TrialRecord:
    """Everything one trial produced, ready for dataset emission."""

    candidate: dict
    verdict: str = "unstable"            # stable | unstable | sim-failed
    failure: dict = field(default_factory=dict)
    phase_markers: dict = field(default_factory=dict)
    positions: np.ndarray = None         # (n_steps, n_points, 3)
    velocities: np.ndarray = None
    times: np.ndarray = None
    contacts: list = field(default_factory=list)    # per step: list of events
    stress: np.ndarray = None            # (n_steps, n_tets, 7)
    step_reports: list = field(default_factory=list)
    com_displacement: dict = field(default_factory=dict)
    halt_forces: dict = field(default_factory=dict)
    finger_forces: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    object_body: int = 0
    gripper_bodies: tuple = ()
    n_steps: int = 0


def contact_events_now(env):
    """Active contact stencil events at the current state (one broad phase)."""
    cs = env.contact_set_now()
    return cs.stencil_forces(env.surface_positions(), env.contact_params)


def finger_contact_force(env, finger_bodies, events=None):
    """Sum of barrier-force magnitudes over stencils touching the finger's mesh."""
    ids = {finger_bodies} if np.isscalar(finger_bodies) else set(finger_bodies)
    bad = [b for b in ids if b < 0 or b >= len(env.records)]
    if bad:
        raise KeyError(f"unknown finger link id(s): {bad}")
    if events is None:
        events = contact_events_now(env)
    return sum(ev["lambda"] for ev in events if ids.intersection(ev["bodies"]))


def object_gripper_contact(env, object_body, gripper_bodies, events=None):
    """True iff at least one object-gripper stencil is within dhat."""
    if events is None:
        events = contact_events_now(env)
    gids = set(gripper_bodies)
    for ev in events:
        bodies = set(ev["bodies"])
        if object_body in bodies and bodies & gids:
            return True
    return False


class _Recorder:
    def __init__(self, env, object_body, full=True):
        self.env = env
        self.object_body = object_body
        self.full = full
        self.positions = []
        self.velocities = []
        self.times = []
        self.contacts = []
        self.stress = []
        self.reports = []
        self.finger_forces = []
        self._soft_recs = [r for r in env.records if r["kind"] == "soft"]
        self.n_tets = sum(len(r["elements"].tets) for r in self._soft_recs)

    def _kin_state(self):
        pos, vel = [], []
        for rec in self.env.records:
            if rec["kind"] == "kinematic":
                pos.append(rec["positions"])
                vel.append(np.tile(rec["body"].velocity, (rec["n_sv"], 1)))
        return pos, vel

    def snapshot(self, events, report=None, finger_forces=None):
        env = self.env
        kin_p, kin_v = self._kin_state()
        self.positions.append(np.concatenate([env.node_positions()] + kin_p) if kin_p else env.node_positions().copy())
        self.velocities.append(np.concatenate([env.v.reshape(-1, 3)] + kin_v) if kin_v else env.v.reshape(-1, 3).copy())
        self.times.append(env.time)
        self.contacts.append(events)
        row = np.zeros((self.n_tets, 7))
        off = 0
        for rec in self._soft_recs:
            xs = env.x[rec["dof0"] : rec["dof0"] + rec["ndof"]].reshape(-1, 3)
            sf = mat.compute_stress(rec["elements"], xs, rec["body"].material)
            k = len(rec["elements"].tets)
            c = sf.cauchy
            row[off : off + k, 0] = c[:, 0, 0]
            row[off : off + k, 1] = c[:, 1, 1]
            row[off : off + k, 2] = c[:, 2, 2]
            row[off : off + k, 3] = c[:, 0, 1]
            row[off : off + k, 4] = c[:, 1, 2]
            row[off : off + k, 5] = c[:, 0, 2]
            row[off : off + k, 6] = sf.von_mises
            off += k
        self.stress.append(row)
        if report is not None:
            self.reports.append(report.to_dict())
        self.finger_forces.append(finger_forces or {})


def run_grasp_trial(env, protocol, object_body, finger_links, record=True):
    """Execute the full validation protocol on a prepared environment.

    finger_links maps finger name -> tuple of body ids driven as that
    finger (a soft-pad finger spans pad and backing bodies).  The
    environment must start intersection-free at >= dhat clearance.
    Returns a TrialRecord.
    """
    dt = env.solver_params.dt
    rec = _Recorder(env, object_body)
    markers = {}
    halt_forces = {}
    gripper_bodies = tuple(sorted({b for ids in finger_links.values() for b in ids}))
    record_obj = TrialRecord(candidate={}, object_body=object_body, gripper_bodies=gripper_bodies)

    def fail(phase, report):
        record_obj.verdict = "sim-failed"
        record_obj.failure = {
            "phase": phase,
            "reason": report.reason if report else env.fail_reason,
            "step": env.step_index,
        }

    def run_phase(name, n_steps, per_step=None, early_stop=None):
        start = len(rec.times)
        for _ in range(n_steps):
            report = env.step()
            events = contact_events_now(env)
            forces = {f: finger_contact_force(env, ids, events) for f, ids in finger_links.items()}
            rec.snapshot(events, report, forces)
            if per_step is not None:
                per_step(forces)
            if report.status == "failed":
                fail(name, report)
                return False
            if early_stop is not None and early_stop():
                break
        markers[name] = [start, len(rec.times)]
        return True

    # phase 0: settle, gravity disabled so the object cannot fall pre-grasp
    env.gravity = np.zeros(3)
    for _, ids in finger_links.items():
        for b in ids:
            body = env.records[b]["body"]
            body.velocity = np.zeros(3)
    n_settle = int(np.ceil(protocol.settle_duration / dt))
    ok = run_phase("settle", n_settle)

    # phase 1: close fingers kinematically, halt each at force > threshold
    if ok:
        halted = {f: False for f in finger_links}
        closing_dirs = {}
        for f, ids in finger_links.items():
            d = env.records[ids[0]].get("closing_dir")
            closing_dirs[f] = d if d is not None else np.zeros(3)
            for b in ids:
                env.records[b]["body"].velocity = closing_dirs[f] * protocol.closing_speed
        opening = float(np.asarray(env.records[finger_links[list(finger_links)[0]][0]].get("opening", 0.08)))
        max_close_steps = int(np.ceil((opening / 2.0) / (protocol.closing_speed * dt))) + 5

        def per_step(forces):
            for f in finger_links:
                if not halted[f] and forces[f] > protocol.force_halt:
                    halted[f] = True
                    halt_forces[f] = {"force": forces[f], "step": len(rec.times) - 1}
                    for b in finger_links[f]:
                        env.records[b]["body"].velocity = np.zeros(3)

        ok = run_phase("close", max_close_steps, per_step=per_step,
                       early_stop=lambda: all(halted.values()))
        for f, ids in finger_links.items():
            for b in ids:
                env.records[b]["body"].velocity = np.zeros(3)

    # phase 2: hold until steady state
    if ok:
        quiet = [0]

        def steady():
            if env.max_point_speed() < env.contact_params.eps_v:
                quiet[0] += 1
            else:
                quiet[0] = 0
            return quiet[0] >= protocol.steady_speed_steps

        ok = run_phase("hold", int(np.ceil(protocol.steady_max_duration / dt)), early_stop=steady)

    # phase 3: six axis-aligned gravity phases
    com_disp = {}
    n_grav = int(np.ceil(protocol.gravity_phase_duration / dt))
    phase_names = ["gravity+x", "gravity-x", "gravity+y", "gravity-y", "gravity+z", "gravity-z"]
    if ok:
        for name, direction in zip(phase_names, GRAVITY_DIRECTIONS):
            env.gravity = protocol.gravity_magnitude * direction
            com0 = env.body_com(object_body).copy()
            ok = run_phase(name, n_grav)
            com_disp[name] = float(np.linalg.norm(env.body_com(object_body) - com0))
            if not ok:
                break

    # verdict
    if record_obj.verdict != "sim-failed":
        threshold = protocol.stability_constant * n_grav * env.contact_params.eps_v * dt
        final_events = rec.contacts[-1] if rec.contacts else contact_events_now(env)
        in_contact = object_gripper_contact(env, object_body, gripper_bodies, final_events)
        final_disp = com_disp.get(phase_names[-1], np.inf)
        stable = in_contact and final_disp < threshold
        record_obj.verdict = "stable" if stable else "unstable"
        record_obj.metrics["final_phase_com_disp"] = final_disp
        record_obj.metrics["stability_threshold"] = threshold
        record_obj.metrics["final_contact"] = bool(in_contact)

    record_obj.phase_markers = markers
    record_obj.com_displacement = com_disp
    record_obj.halt_forces = halt_forces
    record_obj.n_steps = len(rec.times)
    if record:
        record_obj.positions = np.array(rec.positions)
        record_obj.velocities = np.array(rec.velocities)
        record_obj.times = np.array(rec.times)
        record_obj.contacts = rec.contacts
        record_obj.stress = np.array(rec.stress) if rec.n_tets else np.zeros((len(rec.times), 0, 7))
        record_obj.step_reports = rec.reports
        record_obj.finger_forces = rec.finger_forces
    return record_obj
