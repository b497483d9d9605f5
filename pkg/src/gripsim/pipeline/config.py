"""TOML scene configuration and trial environment construction.

A scene file describes one object, one gripper, the validation protocol,
and solver/contact parameters (all engine constants default to the
standard values: dt = 0.01 s, kappa = 3e6, dhat = 1e-3 m, eps_v = 1e-3,
rel_tol = 1e-3, 100 Newton iterations, 50 N halt force, 9.8 m/s^2
gravity for 0.1 s per direction).  Domain randomization of material
parameters is off by default and seeded when enabled.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from gripsim import contact as ct
from gripsim import solver as sv
from gripsim.geometry import (
    box_surface,
    box_tet_lattice,
    icosphere,
    load_mesh,
    mug_surface,
    sphere_tet_lattice,
)
from gripsim.geometry.mesh import TetMesh, TriSurface
from gripsim.materials import MaterialParams
from gripsim.pipeline.protocol import TrialProtocol
from gripsim.synth import ParallelGripper


class ConfigError(ValueError):
    """Scene configuration problem, with the offending field in the message."""


def _material(d, where):
    try:
        return MaterialParams(
            young_modulus=float(d.get("young_modulus", 1e5)),
            poisson_ratio=float(d.get("poisson_ratio", 0.3)),
            density=float(d.get("density", 1000.0)),
            friction_coefficient=float(d.get("friction_coefficient", 0.5)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


@dataclass
class ObjectSpec:
    kind: str = "box"            # box | sphere | mug | mesh
    soft: bool = False
    size: float = 0.05           # box edge / sphere diameter / mug height
    resolution: int = 3          # tet lattice cells or icosphere level
    mesh_path: str = ""
    scale: float = 1.0
    material: MaterialParams = field(default_factory=lambda: MaterialParams(
        young_modulus=1e5, poisson_ratio=0.4, density=500.0, friction_coefficient=0.5))

    def surface(self):
        """Rest collision/synthesis surface at world origin."""
        s = self.size * self.scale
        if self.kind == "box":
            return box_surface(s, subdivisions=max(2, self.resolution))
        if self.kind == "sphere":
            if self.soft:
                surf, _ = sphere_tet_lattice(s / 2.0, max(4, 2 * self.resolution)).boundary_surface()
                return surf
            return icosphere(s / 2.0, level=3)
        if self.kind == "mug":
            return mug_surface(outer_radius=0.45 * s, height=s, wall=0.16 * s, segments=20)
        if self.kind == "mesh":
            m = load_mesh(self.mesh_path)
            surf = m if isinstance(m, TriSurface) else m.boundary_surface()[0]
            return surf.transformed(scale=self.scale) if self.scale != 1.0 else surf
        raise ConfigError(f"[object].kind: unknown kind {self.kind!r}")

    def build_body(self):
        s = self.size * self.scale
        if self.soft:
            if self.kind == "box":
                mesh = box_tet_lattice(s, self.resolution)
            elif self.kind == "sphere":
                mesh = sphere_tet_lattice(s / 2.0, max(4, 2 * self.resolution))
            elif self.kind == "mesh":
                m = load_mesh(self.mesh_path)
                if not isinstance(m, TetMesh):
                    raise ConfigError("[object]: soft mesh objects need a tetrahedral mesh file")
                mesh = TetMesh(m.vertices * self.scale, m.tets) if self.scale != 1.0 else m
            else:
                raise ConfigError(f"[object]: soft {self.kind} is not supported")
            return sv.SoftBody(mesh, self.material, name="object")
        return sv.AffineBody(self.surface(), self.material, name="object")


@dataclass
class GripperSpec:
    soft_fingers: bool = False
    gripper: ParallelGripper = field(default_factory=ParallelGripper)
    pad_material: MaterialParams = field(default_factory=lambda: MaterialParams(
        young_modulus=9.4e6, poisson_ratio=0.3, density=1000.0, friction_coefficient=3.5))
    pad_resolution: int = 2
    palm_gap: float = 2e-3


@dataclass
class SynthSpec:
    n_candidates: int = 8
    mu: float = 0.5
    seed: int = 0
    surface_points: int = 400
    approach_attempts: int = 30
    sdf_resolution: int = 48


@dataclass
class RandomizationSpec:
    enabled: bool = False
    young_modulus_log10: tuple = (4.0, 7.0)
    friction: tuple = (0.1, 1.0)
    scale: tuple = (0.8, 1.25)


@dataclass
class SceneConfig:
    object: ObjectSpec = field(default_factory=ObjectSpec)
    gripper: GripperSpec = field(default_factory=GripperSpec)
    synth: SynthSpec = field(default_factory=SynthSpec)
    protocol: TrialProtocol = field(default_factory=TrialProtocol)
    solver: sv.SolverParams = field(default_factory=sv.SolverParams)
    contact: ct.ContactParams = field(default_factory=ct.ContactParams)
    randomization: RandomizationSpec = field(default_factory=RandomizationSpec)
    metrics_resolution: int = 128
    metrics_samples: int = 50_000
    name: str = "scene"

    def params_dict(self):
        return {
            "solver": asdict(self.solver),
            "contact": asdict(self.contact),
            "protocol": asdict(self.protocol),
            "object": {"kind": self.object.kind, "soft": self.object.soft,
                       "size": self.object.size, "scale": self.object.scale,
                       "material": asdict(self.object.material)},
            "gripper": {"soft_fingers": self.gripper.soft_fingers,
                        **asdict(self.gripper.gripper)},
        }


def _apply(dc, table, where, casts=None):
    for key, val in table.items():
        if isinstance(val, dict):
            continue
        if not hasattr(dc, key):
            raise ConfigError(f"[{where}].{key}: unknown field")
        cur = getattr(dc, key)
        try:
            if isinstance(cur, bool):
                setattr(dc, key, bool(val))
            elif isinstance(cur, int) and not isinstance(val, bool):
                setattr(dc, key, int(val))
            elif isinstance(cur, float):
                setattr(dc, key, float(val))
            elif isinstance(cur, tuple):
                setattr(dc, key, tuple(val))
            else:
                setattr(dc, key, val)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{where}].{key}: {exc}") from exc


def load_scene(path):
    """Parse and validate a TOML scene file; raises ConfigError with diagnostics."""
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return scene_from_dict(raw, name=Path(path).stem)


def scene_from_dict(raw, name="scene"):
    scene = SceneConfig(name=raw.get("name", name))
    if "object" in raw:
        t = raw["object"]
        _apply(scene.object, {k: v for k, v in t.items() if k != "material"}, "object")
        if "mesh" in t:
            scene.object.mesh_path = t["mesh"]
        if "material" in t:
            scene.object.material = _material(t["material"], "object.material")
    if "gripper" in raw:
        t = raw["gripper"]
        _apply(scene.gripper, {k: v for k, v in t.items()
                               if k not in ("material", "pad_material") and not hasattr(scene.gripper.gripper, k)},
               "gripper")
        _apply(scene.gripper.gripper, {k: v for k, v in t.items()
                                       if hasattr(scene.gripper.gripper, k)}, "gripper")
        if "pad_material" in t:
            scene.gripper.pad_material = _material(t["pad_material"], "gripper.pad_material")
    for section, target in (("synth", scene.synth), ("protocol", scene.protocol),
                            ("solver", scene.solver), ("contact", scene.contact),
                            ("randomization", scene.randomization)):
        if section in raw:
            _apply(target, raw[section], section)
            try:
                target.__post_init__()
            except AttributeError:
                pass
            except ValueError as exc:
                raise ConfigError(f"[{section}]: {exc}") from exc
    if "metrics" in raw:
        m = raw["metrics"]
        scene.metrics_resolution = int(m.get("resolution", scene.metrics_resolution))
        scene.metrics_samples = int(m.get("samples", scene.metrics_samples))
    return scene


# ---------------------------------------------------------------------------
# trial environment construction
# ---------------------------------------------------------------------------


def _soft_finger_body(gspec, side, opening):
    g = gspec.gripper
    size = (g.finger_thickness, g.finger_width, g.finger_length)
    res = (gspec.pad_resolution, gspec.pad_resolution, 2 * gspec.pad_resolution)
    mesh = box_tet_lattice(size, res, center=g.finger_center(side, opening))
    # drive the outer face; the pad side facing the object stays compliant
    outer_x = g.finger_center(side, opening)[0] + (0.5 if side == 1 else -0.5) * g.finger_thickness
    mask = np.isclose(mesh.rest_vertices[:, 0], outer_x, atol=1e-9)
    return sv.SoftBody(mesh, gspec.pad_material, name=f"finger{side}", kinematic_mask=mask)


def build_trial_env(scene, candidate, env_id=0, material_override=None):
    """Environment for one grasp trial: object plus posed gripper bodies.

    Returns (env, object_body_id, finger_links) where finger_links maps
    finger name -> body id tuple.  Gripper meshes are posed rigidly by
    the candidate; soft finger pads get their rest state posed as well
    (the pad is glued to the jaw by its masked outer-face vertices).
    """
    R = candidate.rotation
    T = candidate.translation
    opening = float(candidate.joints[0])
    gspec = scene.gripper
    g = gspec.gripper

    obj_spec = scene.object
    if material_override is not None:
        obj_spec = ObjectSpec(**{**asdict(obj_spec), "material": material_override})
        obj_spec.material = material_override
    obj = obj_spec.build_body()

    bodies = [obj]
    finger_links = {}
    pairs_off = []
    f0_surf, f1_surf, palm_surf = g.body_meshes(opening)
    palm_surf = TriSurface(palm_surf.vertices + np.array([0.0, 0.0, gspec.palm_gap]),
                           palm_surf.triangles)
    if gspec.soft_fingers:
        for side in (0, 1):
            body = _soft_finger_body(gspec, side, opening)
            body.mesh.vertices[:] = body.mesh.vertices @ R.T + T
            body.mesh.rest_vertices[:] = body.mesh.vertices
            bodies.append(body)
            finger_links[f"finger{side}"] = (len(bodies) - 1,)
        # soft pads re-derive elements from the posed rest state
        for side in (0, 1):
            b = bodies[1 + side]
            b.mesh.__post_init__()
    else:
        for side, surf in ((0, f0_surf), (1, f1_surf)):
            body = sv.KinematicBody(surf.transformed(rotation=R, translation=T),
                                    MaterialParams(
                                        young_modulus=1e9, poisson_ratio=0.3,
                                        density=2000.0,
                                        friction_coefficient=gspec.pad_material.friction_coefficient),
                                    name=f"finger{side}")
            bodies.append(body)
            finger_links[f"finger{side}"] = (len(bodies) - 1,)
    palm = sv.KinematicBody(palm_surf.transformed(rotation=R, translation=T),
                            MaterialParams(young_modulus=1e9, poisson_ratio=0.3,
                                           density=2000.0, friction_coefficient=0.3),
                            name="palm")
    bodies.append(palm)
    palm_id = len(bodies) - 1
    for side in (0, 1):
        pairs_off.append((finger_links[f"finger{side}"][0], palm_id))

    env = sv.Environment(
        bodies, gravity=(0.0, 0.0, 0.0),
        contact_params=scene.contact, solver_params=scene.solver,
        name=f"{scene.name}-env{env_id}", env_id=env_id,
        collide_pairs_off=pairs_off,
    )
    close_axis = R @ np.array([1.0, 0.0, 0.0])
    for side in (0, 1):
        bid = finger_links[f"finger{side}"][0]
        env.records[bid]["closing_dir"] = close_axis if side == 0 else -close_axis
        env.records[bid]["opening"] = opening
    return env, 0, finger_links


def randomized_material(base, rand, rng):
    """Domain-randomized copy of a material (E log-uniform, mu uniform)."""
    if not rand.enabled:
        return base
    e = 10.0 ** rng.uniform(*rand.young_modulus_log10)
    mu = rng.uniform(*rand.friction)
    return MaterialParams(young_modulus=e, poisson_ratio=base.poisson_ratio,
                          density=base.density, friction_coefficient=mu)
