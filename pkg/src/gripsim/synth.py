"""Grasp candidate generation and composition.

Parallel-gripper candidates come from a built-in analytic antipodal
sampler (two surface points with anti-aligned normals inside the
friction cone, a clearance-checked approach direction, and an opening
within the gripper's travel).  Dexterous candidates are ingested from
files.  Bimanual candidates are composed from unimanual ones by k-means
clustering on contact centers, max-distance cluster-pair selection, and
force-closure filtering.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from gripsim.geometry.mesh import TriSurface, box_surface
from gripsim.geometry.sdf import build_sdf


def quat_wxyz_from_rotation(R):
    """Rotation matrix to unit quaternion (w, x, y, z)."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2.0
        q = np.zeros(4)
        q[1 + i] = 0.25 * s
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
        w, x, y, z = q
    q = np.array([w, x, y, z])
    return q / np.linalg.norm(q)


def rotation_from_quat_wxyz(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass
class Contact:
    """One contact: position, hand-frame normal, object normal, link index."""

    p: np.ndarray
    n_h: np.ndarray
    n_o: np.ndarray
    link: int = 0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(3)
        self.n_h = np.asarray(self.n_h, dtype=np.float64).reshape(3)
        self.n_o = np.asarray(self.n_o, dtype=np.float64).reshape(3)


@dataclass
class GraspCandidate:
    """Gripper root pose + joint/opening configuration targeting one object."""

    gripper_id: str
    rotation: np.ndarray                 # (3, 3) root rotation
    translation: np.ndarray              # (3,)
    joints: np.ndarray                   # opening width for parallel grippers
    contacts: list
    provenance: str = "sampled"          # sampled | ingested | composed
    link_rotations: list = None          # per-link rotation, default root

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.joints = np.atleast_1d(np.asarray(self.joints, dtype=np.float64))
        err = np.linalg.norm(self.rotation.T @ self.rotation - np.eye(3))
        if err >= 1e-9:
            raise ValueError(f"pose rotation not orthonormal (|R^T R - I| = {err:.2e})")

    def link_rotation(self, link):
        if self.link_rotations is not None:
            return self.link_rotations[link]
        return self.rotation

    def contact_center(self):
        return np.mean([c.p for c in self.contacts], axis=0)

    def to_dict(self):
        return {
            "gripper_id": self.gripper_id,
            "pose": {
                "quaternion_wxyz": quat_wxyz_from_rotation(self.rotation).tolist(),
                "translation": self.translation.tolist(),
            },
            "joints": self.joints.tolist(),
            "contacts": [
                {"p": c.p.tolist(), "n_h": c.n_h.tolist(), "n_o": c.n_o.tolist(), "link": c.link}
                for c in self.contacts
            ],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            gripper_id=d["gripper_id"],
            rotation=rotation_from_quat_wxyz(d["pose"]["quaternion_wxyz"]),
            translation=np.array(d["pose"]["translation"]),
            joints=np.array(d["joints"]),
            contacts=[Contact(c["p"], c["n_h"], c["n_o"], c.get("link", 0)) for c in d["contacts"]],
            provenance=d.get("provenance", "ingested"),
        )


def save_candidates(candidates, path):
    Path(path).write_text(json.dumps([c.to_dict() for c in candidates], indent=1, sort_keys=True))


def load_candidates(path):
    return [GraspCandidate.from_dict(d) for d in json.loads(Path(path).read_text())]


# ---------------------------------------------------------------------------
# parallel gripper model
# ---------------------------------------------------------------------------


@dataclass
class ParallelGripper:
    """Two-jaw gripper in its own frame: closing axis x, fingers extend +z.

    Fingertip plane sits at z = 0; the palm bridges the fingers at
    z = finger_length.  Inner finger faces are at x = +-opening/2.
    """

    gripper_id: str = "parallel"
    max_opening: float = 0.08
    finger_length: float = 0.05
    finger_width: float = 0.02      # y extent
    finger_thickness: float = 0.01  # x extent of each finger block
    palm_thickness: float = 0.015
    finger_subdiv: int = 2

    def finger_center(self, side, opening):
        # side = 0 -> -x finger, 1 -> +x finger
        s = -1.0 if side == 0 else 1.0
        return np.array([s * (opening / 2.0 + self.finger_thickness / 2.0), 0.0, self.finger_length / 2.0])

    def finger_inner_normal(self, side):
        """Hand-frame contact normal of the finger's gripping face."""
        return np.array([1.0, 0.0, 0.0]) if side == 0 else np.array([-1.0, 0.0, 0.0])

    def body_meshes(self, opening):
        """(finger0, finger1, palm) TriSurfaces in the gripper frame."""
        f0 = box_surface(
            (self.finger_thickness, self.finger_width, self.finger_length),
            center=self.finger_center(0, opening), subdivisions=self.finger_subdiv,
        )
        f1 = box_surface(
            (self.finger_thickness, self.finger_width, self.finger_length),
            center=self.finger_center(1, opening), subdivisions=self.finger_subdiv,
        )
        palm_w = opening + 2.0 * self.finger_thickness
        palm = box_surface(
            (palm_w, self.finger_width, self.palm_thickness),
            center=(0.0, 0.0, self.finger_length + self.palm_thickness / 2.0),
            subdivisions=self.finger_subdiv,
        )
        return f0, f1, palm

    def posed_meshes(self, rotation, translation, opening):
        return [
            m.transformed(rotation=rotation, translation=translation)
            for m in self.body_meshes(opening)
        ]

    def surface_samples(self, rotation, translation, opening, n, rng):
        """Area-weighted samples over the full gripper surface at a pose."""
        meshes = self.posed_meshes(rotation, translation, opening)
        areas = np.array([m.triangle_areas().sum() for m in meshes])
        counts = np.maximum(1, np.round(n * areas / areas.sum()).astype(int))
        pts = [m.sample_surface(c, rng)[0] for m, c in zip(meshes, counts)]
        return np.concatenate(pts)[:n]

    def fingertip_points(self, rotation, translation, opening):
        """Centers of the two gripping faces at the fingertip level, world frame."""
        tips = []
        for side in (0, 1):
            s = -1.0 if side == 0 else 1.0
            local = np.array([s * opening / 2.0, 0.0, self.finger_width / 4.0])
            tips.append(rotation @ local + translation)
        return np.array(tips)


# ---------------------------------------------------------------------------
# candidate generation
# ---------------------------------------------------------------------------


def _orthonormal_frame(x_axis, phi):
    """Right-handed frame with the given x axis; phi spins about it."""
    x = x_axis / np.linalg.norm(x_axis)
    ref = np.array([0.0, 0.0, 1.0]) if abs(x[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    y0 = np.cross(ref, x)
    y0 /= np.linalg.norm(y0)
    z0 = np.cross(x, y0)
    y = np.cos(phi) * y0 + np.sin(phi) * z0
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=1)


def sample_antipodal(surface, gripper, n, seed, sdf=None, mu=0.5,
                     clearance_factor=2.0, dhat=1e-3, n_surface_points=400,
                     approach_attempts=30):
    """Antipodal candidates for a parallel gripper on a watertight surface.

    Pairs of surface samples must have anti-aligned normals within the
    friction-cone half-angle atan(mu) and separation at most the usable
    opening; each pair tries up to `approach_attempts` spin angles and
    keeps the first pose whose swept closing volume clears the object
    SDF by at least dhat everywhere.  Deterministic in (inputs, seed).
    """
    if not surface.is_watertight():
        raise ValueError("antipodal sampling requires a watertight surface")
    if sdf is None:
        sdf = build_sdf(surface, resolution=48)
    rng = np.random.default_rng(seed)
    pts, normals, _ = surface.sample_surface(n_surface_points, rng)

    cos_half = np.cos(np.arctan(mu))
    clearance = clearance_factor * dhat
    usable = gripper.max_opening - 2.0 * clearance

    diff = pts[None, :, :] - pts[:, None, :]
    dist = np.linalg.norm(diff, axis=2)
    ndots = normals @ normals.T
    iu, ju = np.triu_indices(len(pts), k=1)
    ok = (
        (ndots[iu, ju] < -cos_half)
        & (dist[iu, ju] < usable)
        & (dist[iu, ju] > 4.0 * dhat)
    )
    # axis must lie inside both friction cones
    axis = diff[iu, ju] / np.maximum(dist[iu, ju][:, None], 1e-300)
    ok &= np.einsum("kj,kj->k", axis, -normals[iu]) > cos_half
    ok &= np.einsum("kj,kj->k", axis, normals[ju]) > cos_half
    pairs = np.stack([iu[ok], ju[ok]], axis=1)
    if len(pairs) == 0:
        return []
    order = rng.permutation(len(pairs))

    candidates = []
    for k in order:
        if len(candidates) >= n:
            break
        i, j = pairs[k]
        center = 0.5 * (pts[i] + pts[j])
        x_axis = pts[j] - pts[i]
        opening = float(np.linalg.norm(x_axis) + 2.0 * clearance)
        phis = rng.uniform(0.0, 2.0 * np.pi, approach_attempts)
        for phi in phis:
            R = _orthonormal_frame(x_axis, float(phi))
            tip_local = np.array([0.0, 0.0, gripper.finger_width / 4.0])
            T = center - R @ tip_local
            probe = gripper.surface_samples(R, T, opening, 600, np.random.default_rng(seed ^ 0x5F))
            lo, hi = sdf.bounds()
            inside = np.all((probe >= lo) & (probe <= hi), axis=1)
            vals = np.full(len(probe), np.inf)
            if inside.any():
                vals[inside] = sdf.query(probe[inside])
            if np.min(vals) >= dhat:
                contacts = [
                    Contact(pts[i], gripper.finger_inner_normal(0), normals[i], link=0),
                    Contact(pts[j], gripper.finger_inner_normal(1), normals[j], link=1),
                ]
                candidates.append(
                    GraspCandidate(
                        gripper_id=gripper.gripper_id,
                        rotation=R, translation=T,
                        joints=[opening], contacts=contacts,
                        provenance="sampled",
                    )
                )
                break
    return candidates


def normal_alignment_energy(candidate):
    """sum_i ((R_i n_i^h) . n_i^o + 1)^2; zero iff every rotated hand normal
    exactly opposes its object normal.  Errors on non-unit normals."""
    total = 0.0
    for c in candidate.contacts:
        if abs(np.linalg.norm(c.n_h) - 1.0) > 1e-8 or abs(np.linalg.norm(c.n_o) - 1.0) > 1e-8:
            raise ValueError("contact normals must be unit length")
        R = candidate.link_rotation(c.link)
        total += (float((R @ c.n_h) @ c.n_o) + 1.0) ** 2
    return total


def force_closure_metric(points, normals):
    """||G n||_2 with G the 6 x 3n grasp map about the contact centroid.

    Lower is better; exactly zero for perfectly opposing wrench-free
    contact sets; invariant under global rotation.  Errors on < 2 contacts.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    normals = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    if len(points) < 2:
        raise ValueError("force closure needs at least 2 contacts")
    c = points.mean(axis=0)
    rel = points - c
    f = normals.sum(axis=0)
    tau = np.cross(rel, normals).sum(axis=0)
    return float(np.sqrt(f @ f + tau @ tau))


def repair_penetration(candidate, sdf, dhat, gripper, max_iters=20, n_probe=2000,
                       damping=1e-4, seed=0):
    """Push fingertips along object surface normals until clearance >= dhat.

    Damped least squares on the opening DOF; candidates whose residual
    penetration cannot be fixed (palm contact, bad pose) are rejected by
    the final SDF resample.  Returns the repaired candidate or None.
    """
    rng = np.random.default_rng(seed)

    def min_clear(opening):
        probe = gripper.surface_samples(candidate.rotation, candidate.translation,
                                        opening, n_probe, np.random.default_rng(seed ^ 0xA5))
        lo, hi = sdf.bounds()
        inside = np.all((probe >= lo) & (probe <= hi), axis=1)
        vals = np.full(len(probe), np.inf)
        if inside.any():
            vals[inside] = sdf.query(probe[inside])
        return float(vals.min())

    opening = float(candidate.joints[0])
    if min_clear(opening) >= dhat:
        return candidate

    for _ in range(max_iters):
        tips = gripper.fingertip_points(candidate.rotation, candidate.translation, opening)
        lo, hi = sdf.bounds()
        inside = np.all((tips >= lo) & (tips <= hi), axis=1)
        if not inside.any():
            break
        d = sdf.query(tips[inside])
        g = sdf.gradient(tips[inside])
        g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
        deficit = np.maximum(0.0, dhat - d)
        if np.all(deficit <= 0.0):
            break
        # target displacement of each fingertip along the object normal
        targets = deficit[:, None] * g
        # jacobian of tip positions wrt opening: +-(R x)/2
        sides = np.array([-0.5, 0.5])[inside]
        J = sides[:, None] * (candidate.rotation @ np.array([1.0, 0.0, 0.0]))[None, :]
        Jf = J.reshape(-1)
        rf = targets.reshape(-1)
        dw = float(Jf @ rf / (Jf @ Jf + damping))
        if abs(dw) < 1e-9:
            break
        opening = min(opening + abs(dw) * 2.0, gripper.max_opening)
        if min_clear(opening) >= dhat:
            break

    if min_clear(opening) >= dhat and opening <= gripper.max_opening:
        out = GraspCandidate(
            gripper_id=candidate.gripper_id,
            rotation=candidate.rotation.copy(),
            translation=candidate.translation.copy(),
            joints=[opening],
            contacts=candidate.contacts,
            provenance=candidate.provenance,
        )
        return out
    return None


# ---------------------------------------------------------------------------
# bimanual composition
# ---------------------------------------------------------------------------


@dataclass
class BimanualComposeParams:
    k: int = 26
    r1: float = 0.25
    n_target: int = 100

    def __post_init__(self):
        if self.k < 1 or not (0.0 < self.r1 <= 1.0) or self.n_target < 1:
            raise ValueError("invalid bimanual composition parameters")


@dataclass
class BimanualCandidate:
    left: GraspCandidate
    right: GraspCandidate
    metric: float
    cluster_pair: tuple
    provenance: str = "composed"

    def contacts(self):
        return self.left.contacts + self.right.contacts

    def to_dict(self):
        return {
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
            "metric": self.metric,
            "cluster_pair": list(self.cluster_pair),
            "contacts": [
                {"p": c.p.tolist(), "n_h": c.n_h.tolist(), "n_o": c.n_o.tolist(), "link": c.link}
                for c in self.contacts()
            ],
            "provenance": self.provenance,
        }


def kmeans(points, k, seed, max_iters=100):
    """Deterministic Lloyd's algorithm with k-means++ seeding.

    Ties in assignment break toward the lowest cluster index; empty
    clusters are reseeded on the farthest point.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    k = min(k, n)
    rng = np.random.default_rng(seed)

    centers = np.empty((k, 3))
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers[j] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(dists, axis=1)
        for j in range(k):
            m = new_labels == j
            if m.any():
                centers[j] = points[m].mean(axis=0)
            else:
                far = int(np.argmax(dists.min(axis=1)))
                centers[j] = points[far]
                new_labels[far] = j
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels, centers


def compose_bimanual(left, right, params, seed):
    """Bimanual candidates from two unimanual pools.

    k-means on contact centers per hand; keep the top ceil(r1 k^2)
    cluster pairs by distance between cluster mean contact centers;
    within each kept pair enumerate all combinations (n_filtered total)
    and retain the bottom r2 = n_target/n_filtered fraction per pair by
    force-closure metric of the union contact set.
    """
    if not left or not right:
        raise ValueError("both candidate lists must be non-empty")
    k = params.k
    if k > min(len(left), len(right)):
        k = min(len(left), len(right))
        warnings.warn(f"k clamped to {k} (fewer candidates than clusters)")

    lab_l, cen_l = kmeans([c.contact_center() for c in left], k, seed)
    lab_r, cen_r = kmeans([c.contact_center() for c in right], k, seed + 1)

    pair_dist = np.linalg.norm(cen_l[:, None, :] - cen_r[None, :, :], axis=2)
    flat = [(-pair_dist[i, j], i, j) for i in range(k) for j in range(k)]
    flat.sort()
    n_keep = int(np.ceil(params.r1 * k * k))
    kept = [(i, j) for (_, i, j) in flat[:n_keep]]

    members_l = {i: np.nonzero(lab_l == i)[0] for i in range(k)}
    members_r = {j: np.nonzero(lab_r == j)[0] for j in range(k)}
    n_filtered = sum(len(members_l[i]) * len(members_r[j]) for (i, j) in kept)
    if n_filtered == 0:
        return []
    r2 = min(1.0, params.n_target / n_filtered)
    if n_filtered < params.n_target:
        warnings.warn(f"only {n_filtered} combinations available for n_target={params.n_target}")

    out = []
    for (i, j) in kept:
        combos = []
        for li in members_l[i]:
            for rj in members_r[j]:
                cl, cr = left[li], right[rj]
                union = cl.contacts + cr.contacts
                metric = force_closure_metric(
                    [c.p for c in union], [-c.n_o for c in union]
                )
                combos.append((metric, int(li), int(rj)))
        combos.sort()
        take = int(np.ceil(r2 * len(combos)))
        for (metric, li, rj) in combos[:take]:
            out.append(BimanualCandidate(left[li], right[rj], metric, (i, j)))
    return out
