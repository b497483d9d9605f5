"""Meshes, distance queries, SDFs, CCD, and the environment-isolated broad phase."""

from gripsim.geometry.distances import (
    Region,
    StencilKind,
    edge_edge_closest,
    edge_edge_distance,
    edge_edge_mollifier,
    point_triangle_closest,
    point_triangle_distance,
)
from gripsim.geometry.mesh import (
    TetMesh,
    TriSurface,
    box_surface,
    box_tet_lattice,
    icosphere,
    load_mesh,
    load_msh_v2,
    load_obj,
    load_vtk_legacy,
    mug_surface,
    save_msh_v2,
    save_obj,
    save_vtk_legacy,
    sphere_tet_lattice,
)
from gripsim.geometry.sdf import Sdf, build_sdf, load_sdf, save_sdf
from gripsim.geometry.broadphase import CollisionSoup, broad_phase
from gripsim.geometry.ccd import ccd_max_step, tet_inversion_step_filter

__all__ = [
    "Region",
    "StencilKind",
    "TriSurface",
    "TetMesh",
    "Sdf",
    "CollisionSoup",
    "point_triangle_distance",
    "point_triangle_closest",
    "edge_edge_distance",
    "edge_edge_closest",
    "edge_edge_mollifier",
    "build_sdf",
    "save_sdf",
    "load_sdf",
    "broad_phase",
    "ccd_max_step",
    "tet_inversion_step_filter",
    "box_surface",
    "icosphere",
    "mug_surface",
    "box_tet_lattice",
    "sphere_tet_lattice",
    "load_obj",
    "load_msh_v2",
    "load_vtk_legacy",
    "load_mesh",
    "save_obj",
    "save_msh_v2",
    "save_vtk_legacy",
]
