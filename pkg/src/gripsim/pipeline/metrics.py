"""Grasp quality metrics over the manipuland's signed distance field.

The metric-side convention follows the grasp-quality definitions where
the object's distance field is positive INSIDE (penetration) and
negative outside; the geometry module's SDF is negative inside, so it
is negated exactly once here.  Both metrics sample the gripper surface
(50,000 area-weighted points by default, seed-deterministic):

    D1 = max(0, max_p d_o(p))    penetration depth
    D2 = |max_p d_o(p)|          unsigned gripper-object distance
"""

from __future__ import annotations

import numpy as np

from gripsim.geometry.mesh import TriSurface
from gripsim.geometry.sdf import build_sdf


class PosedSdf:
    """Rest-shape SDF queried through a rigid pose (distance-preserving)."""

    def __init__(self, base, rotation, translation):
        self.base = base
        self.rotation = np.asarray(rotation, dtype=np.float64)
        self.translation = np.asarray(translation, dtype=np.float64)
        self.spacing = base.spacing
        self.values = base.values

    def _to_body(self, points):
        return (np.atleast_2d(points) - self.translation) @ self.rotation

    def bounds(self):
        lo, hi = self.base.bounds()
        corners = np.array([[a, b, c] for a in (lo[0], hi[0]) for b in (lo[1], hi[1]) for c in (lo[2], hi[2])])
        world = corners @ self.rotation.T + self.translation
        return world.min(axis=0), world.max(axis=0)

    def contains(self, points):
        lo, hi = self.base.bounds()
        body = self._to_body(points)
        return np.all((body >= lo) & (body <= hi), axis=1)

    def query(self, points):
        return self.base.query(self._to_body(points))


def _polar_rotation(A):
    U, _, Vt = np.linalg.svd(A)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R


def _object_signed_inside(sdf, points):
    """d_o (positive inside) for points; out-of-grid points sit far outside."""
    points = np.atleast_2d(points)
    if hasattr(sdf, "contains"):
        inside = sdf.contains(points)
    else:
        lo, hi = sdf.bounds()
        inside = np.all((points >= lo) & (points <= hi), axis=1)
    d_o = np.full(len(points), -np.inf)
    if inside.any():
        d_o[inside] = -sdf.query(points[inside])
    if (~inside).any():
        # conservative far-field: at least the distance to the grid box
        lo, hi = sdf.bounds()
        out = points[~inside]
        gap = np.maximum(lo - out, 0.0) + np.maximum(out - hi, 0.0)
        d_o[~inside] = -np.linalg.norm(gap, axis=1)
    return d_o


def _sample_surfaces(surfaces, n_samples, seed):
    rng = np.random.default_rng(seed)
    areas = np.array([s.triangle_areas().sum() for s in surfaces])
    counts = np.maximum(1, np.floor(n_samples * areas / areas.sum()).astype(int))
    counts[0] += n_samples - counts.sum()
    pts = [s.sample_surface(int(c), rng)[0] for s, c in zip(surfaces, counts)]
    return np.concatenate(pts)


def penetration_distance_D1(sdf, gripper_surfaces, n_samples=50_000, seed=0):
    """D1 = max(0, max_p d_o(p)) over gripper surface samples (m)."""
    pts = _sample_surfaces(gripper_surfaces, n_samples, seed)
    return float(max(0.0, _object_signed_inside(sdf, pts).max()))


def absolute_distance_D2(sdf, gripper_surfaces, n_samples=50_000, seed=0):
    """D2 = |max_p d_o(p)|: grasp tightness (m); small = hugging the surface."""
    pts = _sample_surfaces(gripper_surfaces, n_samples, seed)
    return float(abs(_object_signed_inside(sdf, pts).max()))


def gripper_surfaces_from_env(env, gripper_bodies):
    """Collision surfaces of the gripper bodies at the current state."""
    sv = env.surface_positions()
    out = []
    for bid in gripper_bodies:
        rec = env.records[bid]
        if rec["kind"] == "soft":
            surf, _ = rec["body"].mesh.boundary_surface()
            tris = surf.triangles
        else:
            tris = rec["body"].surface.triangles
        a = rec["surf0"]
        out.append(TriSurface(sv[a : a + rec["n_sv"]], tris))
    return out


def object_surface_from_env(env, object_body):
    sv = env.surface_positions()
    rec = env.records[object_body]
    if rec["kind"] == "soft":
        surf, _ = rec["body"].mesh.boundary_surface()
        tris = surf.triangles
    else:
        tris = rec["body"].surface.triangles
    a = rec["surf0"]
    return TriSurface(sv[a : a + rec["n_sv"]], tris)


def object_sdf_from_env(env, object_body, resolution=128, cache=None):
    """SDF of the object at its CURRENT (possibly deformed) configuration.

    Rigid (affine) objects reuse a rest-shape SDF, posed through the
    polar rotation of their linear map (the orthogonality stiffness
    keeps the non-rigid part negligible); soft objects rebuild from
    the deformed boundary surface.
    """
    rec = env.records[object_body]
    if rec["kind"] == "affine":
        rest = TriSurface(rec["xi"], rec["body"].surface.triangles)
        if cache is not None:
            from gripsim.multienv import AssetCache

            key = AssetCache.key_of(rest.vertices, rest.triangles, np.array([resolution]))
            base = cache.get_or_build(key, lambda: build_sdf(rest, resolution=resolution))
        else:
            base = build_sdf(rest, resolution=resolution)
        q = env.x[rec["dof0"] : rec["dof0"] + 12]
        R = _polar_rotation(q[3:].reshape(3, 3))
        return PosedSdf(base, R, q[:3])
    surface = object_surface_from_env(env, object_body)
    if cache is not None:
        from gripsim.multienv import AssetCache

        key = AssetCache.key_of(surface.vertices, surface.triangles, np.array([resolution]))
        return cache.get_or_build(key, lambda: build_sdf(surface, resolution=resolution))
    return build_sdf(surface, resolution=resolution)


def trial_quality_metrics(env, object_body, gripper_bodies, resolution=128,
                          n_samples=50_000, seed=0, cache=None):
    """(D1, D2, grid_spacing) for the environment's final state."""
    sdf = object_sdf_from_env(env, object_body, resolution=resolution, cache=cache)
    grips = gripper_surfaces_from_env(env, gripper_bodies)
    d1 = penetration_distance_D1(sdf, grips, n_samples=n_samples, seed=seed)
    d2 = absolute_distance_D2(sdf, grips, n_samples=n_samples, seed=seed)
    return d1, d2, float(sdf.spacing.max())
