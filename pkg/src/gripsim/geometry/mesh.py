"""Triangle surfaces and tetrahedral meshes, plus primitive generators and file I/O.

The engine ingests pre-tetrahedralized meshes (Gmsh MSH v2 ASCII or VTK
legacy ASCII) and OBJ surfaces.  A trivial lattice tetrahedralizer for
boxes and spheres is provided for tests and demo scenes; production
assets are expected to arrive already meshed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_MIN_TRI_AREA = 1e-12  # m^2

# outward faces of a positively oriented tet (a, b, c, d)
_TET_FACES = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]], dtype=np.int64)


def _as_f64(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


def _as_i64(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.int64))


@dataclass
class TriSurface:
    """Collision surface: vertex positions (m), triangle index triples, rest positions."""

    vertices: np.ndarray
    triangles: np.ndarray
    rest_vertices: np.ndarray = None

    def __post_init__(self):
        self.vertices = _as_f64(self.vertices).reshape(-1, 3)
        self.triangles = _as_i64(self.triangles).reshape(-1, 3)
        if self.rest_vertices is None:
            self.rest_vertices = self.vertices.copy()
        else:
            self.rest_vertices = _as_f64(self.rest_vertices).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        areas = self.triangle_areas()
        if np.any(areas <= _MIN_TRI_AREA):
            raise ValueError("degenerate triangle (area <= 1e-12 m^2)")
        self._edges = None
        self._watertight = None

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def triangle_areas(self, use_rest=False):
        v = self.rest_vertices if use_rest else self.vertices
        t = self.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return 0.5 * np.linalg.norm(n, axis=1)

    def triangle_normals(self):
        v, t = self.vertices, self.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def edges(self):
        """Unique undirected edges, sorted lexicographically."""
        if self._edges is None:
            t = self.triangles
            e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
            e = np.sort(e, axis=1)
            self._edges = np.unique(e, axis=0)
        return self._edges

    def is_watertight(self):
        """True iff every edge is shared by exactly two consistently oriented triangles."""
        if self._watertight is None:
            t = self.triangles
            directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
            und = np.sort(directed, axis=1)
            _, counts = np.unique(und, axis=0, return_counts=True)
            if np.any(counts != 2):
                self._watertight = False
            else:
                # consistent orientation: each directed edge appears exactly once
                _, dcounts = np.unique(directed, axis=0, return_counts=True)
                self._watertight = bool(np.all(dcounts == 1))
        return self._watertight

    def bbox(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def enclosed_volume(self):
        """Signed volume via the divergence theorem (positive for outward orientation)."""
        v, t = self.vertices, self.triangles
        return float(np.einsum("ij,ij->i", v[t[:, 0]], np.cross(v[t[:, 1]], v[t[:, 2]])).sum() / 6.0)

    def vertex_normals(self):
        """Angle-weighted vertex pseudonormals (unit length)."""
        v, t = self.vertices, self.triangles
        fn = self.triangle_normals()
        normals = np.zeros_like(v)
        for k in range(3):
            a = v[t[:, (k + 1) % 3]] - v[t[:, k]]
            b = v[t[:, (k + 2) % 3]] - v[t[:, k]]
            cosang = np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            ang = np.arccos(np.clip(cosang, -1.0, 1.0))
            np.add.at(normals, t[:, k], ang[:, None] * fn)
        return normals / np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-300)

    def sample_surface(self, n, rng):
        """Area-weighted uniform surface samples: (points, normals, triangle ids)."""
        areas = self.triangle_areas()
        probs = areas / areas.sum()
        tri_idx = rng.choice(len(self.triangles), size=n, p=probs)
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        w0 = 1.0 - r1
        w1 = r1 * (1.0 - r2)
        w2 = r1 * r2
        t = self.triangles[tri_idx]
        v = self.vertices
        pts = w0[:, None] * v[t[:, 0]] + w1[:, None] * v[t[:, 1]] + w2[:, None] * v[t[:, 2]]
        return pts, self.triangle_normals()[tri_idx], tri_idx

    def transformed(self, rotation=None, translation=None, scale=None):
        v = self.vertices
        if scale is not None:
            v = v * float(scale)
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=np.float64).T
        if translation is not None:
            v = v + np.asarray(translation, dtype=np.float64)
        return TriSurface(v, self.triangles.copy())


def tet_volumes(vertices, tets):
    v = vertices
    d1 = v[tets[:, 1]] - v[tets[:, 0]]
    d2 = v[tets[:, 2]] - v[tets[:, 0]]
    d3 = v[tets[:, 3]] - v[tets[:, 0]]
    return np.einsum("ij,ij->i", np.cross(d1, d2), d3) / 6.0


@dataclass
class TetMesh:
    """Volumetric simulation mesh with rest state and derived boundary surface."""

    vertices: np.ndarray
    tets: np.ndarray
    rest_vertices: np.ndarray = None
    rest_volumes: np.ndarray = field(init=False, default=None)

    def __post_init__(self):
        self.vertices = _as_f64(self.vertices).reshape(-1, 3)
        self.tets = _as_i64(self.tets).reshape(-1, 4)
        if self.rest_vertices is None:
            self.rest_vertices = self.vertices.copy()
        else:
            self.rest_vertices = _as_f64(self.rest_vertices).reshape(-1, 3)
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= len(self.vertices)):
            raise ValueError("tet index out of range")
        self.rest_volumes = tet_volumes(self.rest_vertices, self.tets)
        if np.any(self.rest_volumes <= 0.0):
            raise ValueError("tet with non-positive rest volume")
        self._boundary = None

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_tets(self):
        return len(self.tets)

    def volumes(self):
        return tet_volumes(self.vertices, self.tets)

    def boundary_faces(self):
        """Outward-oriented boundary triangles (indices into this mesh's vertices)."""
        faces = self.tets[:, _TET_FACES].reshape(-1, 3)
        key = np.sort(faces, axis=1)
        _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        return faces[counts[inv] == 1]

    def boundary_surface(self):
        """Boundary as a compacted TriSurface sharing this mesh's geometry.

        Returns (surface, vertex_map) where vertex_map[i] is the tet-mesh
        vertex index of surface vertex i.
        """
        if self._boundary is None:
            faces = self.boundary_faces()
            used = np.unique(faces)
            remap = np.full(self.n_vertices, -1, dtype=np.int64)
            remap[used] = np.arange(len(used))
            surf = TriSurface(
                self.vertices[used],
                remap[faces],
                rest_vertices=self.rest_vertices[used],
            )
            self._boundary = (surf, used)
        return self._boundary


# ---------------------------------------------------------------------------
# primitive generators
# ---------------------------------------------------------------------------


def _orient_outward(vertices, triangles):
    s = TriSurface(vertices, triangles)
    if s.enclosed_volume() < 0.0:
        s = TriSurface(vertices, triangles[:, [0, 2, 1]])
    return s


def box_surface(size, center=(0.0, 0.0, 0.0), subdivisions=1):
    """Axis-aligned box surface; each face split into subdivisions^2 quads."""
    size = np.broadcast_to(np.asarray(size, dtype=np.float64), (3,))
    center = np.asarray(center, dtype=np.float64)
    n = int(subdivisions)
    verts = {}
    tris = []

    def vid(p):
        key = (round(p[0], 12), round(p[1], 12), round(p[2], 12))
        if key not in verts:
            verts[key] = len(verts)
        return verts[key]

    for axis in range(3):
        for sign in (-1.0, 1.0):
            u_ax, v_ax = (axis + 1) % 3, (axis + 2) % 3
            for i in range(n):
                for j in range(n):
                    corners = []
                    for (di, dj) in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = sign * 0.5
                        p[u_ax] = -0.5 + (i + di) / n
                        p[v_ax] = -0.5 + (j + dj) / n
                        corners.append(vid(tuple(p)))
                    a, b, c, d = corners
                    if sign > 0:
                        tris += [[a, b, c], [a, c, d]]
                    else:
                        tris += [[a, c, b], [a, d, c]]
    v = np.array(list(verts.keys()), dtype=np.float64) * size + center
    return _orient_outward(v, np.array(tris, dtype=np.int64))


def icosphere(radius=0.5, level=2, center=(0.0, 0.0, 0.0)):
    """Subdivided icosahedron scaled to the given radius."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(level):
        midpoint = {}
        verts = list(v)
        new_f = []

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                m = verts[i] + verts[j]
                m /= np.linalg.norm(m)
                midpoint[key] = len(verts)
                verts.append(m)
            return midpoint[key]

        for (a, b, c) in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_f += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        v = np.array(verts)
        f = np.array(new_f, dtype=np.int64)
    return _orient_outward(v * radius + np.asarray(center, dtype=np.float64), f)


def mug_surface(outer_radius=0.04, height=0.09, wall=0.008, segments=24, center=(0.0, 0.0, 0.0)):
    """Watertight cup geometry: revolved wall profile with an open bore."""
    r_in = outer_radius - wall
    profile = [
        (0.0, 0.0),
        (outer_radius, 0.0),
        (outer_radius, height),
        (r_in, height),
        (r_in, wall),
        (0.0, wall),
    ]
    return revolved_surface(profile, segments=segments, center=center)


def revolved_surface(profile, segments=24, center=(0.0, 0.0, 0.0)):
    """Revolve a closed (r, z) polygon around the z axis into a TriSurface.

    Profile points with r = 0 become single apex vertices; consecutive
    duplicate radii are fine.  Orientation is fixed to outward normals.
    """
    profile = [(float(r), float(z)) for (r, z) in profile]
    npts = len(profile)
    theta = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    index = {}
    verts = []

    def vid(i, k):
        r, z = profile[i]
        if r == 0.0:
            key = (i, -1)
        else:
            key = (i, k % segments)
        if key not in index:
            if r == 0.0:
                verts.append([0.0, 0.0, z])
            else:
                t = theta[k % segments]
                verts.append([r * np.cos(t), r * np.sin(t), z])
            index[key] = len(verts) - 1
        return index[key]

    tris = []
    for i in range(npts):
        j = (i + 1) % npts
        r1, r2 = profile[i][0], profile[j][0]
        if r1 == 0.0 and r2 == 0.0:
            continue
        for k in range(segments):
            if r1 > 0.0 and r2 > 0.0:
                a, b = vid(i, k), vid(j, k)
                c, d = vid(j, k + 1), vid(i, k + 1)
                tris += [[a, b, c], [a, c, d]]
            elif r1 == 0.0:
                tris.append([vid(i, 0), vid(j, k), vid(j, k + 1)])
            else:
                tris.append([vid(i, k), vid(j, 0), vid(i, k + 1)])
    v = np.array(verts, dtype=np.float64) + np.asarray(center, dtype=np.float64)
    return _orient_outward(v, np.array(tris, dtype=np.int64))


# Freudenthal 6-tet cube subdivision; conforming across a uniform lattice.
_CUBE_TETS = np.array(
    [
        [0b000, 0b100, 0b110, 0b111],
        [0b000, 0b110, 0b010, 0b111],
        [0b000, 0b010, 0b011, 0b111],
        [0b000, 0b011, 0b001, 0b111],
        [0b000, 0b001, 0b101, 0b111],
        [0b000, 0b101, 0b100, 0b111],
    ],
    dtype=np.int64,
)


def box_tet_lattice(size, resolution=3, center=(0.0, 0.0, 0.0)):
    """Tetrahedralized axis-aligned box: resolution^3 cells, 6 tets per cell."""
    size = np.broadcast_to(np.asarray(size, dtype=np.float64), (3,))
    center = np.asarray(center, dtype=np.float64)
    res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,))
    nx, ny, nz = (int(r) for r in res)
    xs = [np.linspace(-0.5 * size[i], 0.5 * size[i], (nx, ny, nz)[i] + 1) for i in range(3)]
    gx, gy, gz = np.meshgrid(*xs, indexing="ij")
    verts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3) + center

    def vidx(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                corner = np.array(
                    [vidx(i + (c >> 2 & 1), j + (c >> 1 & 1), k + (c & 1)) for c in range(8)]
                )
                tets.extend(corner[_CUBE_TETS])
    return TetMesh(verts, np.array(tets, dtype=np.int64))


def sphere_tet_lattice(radius=0.05, resolution=6, center=(0.0, 0.0, 0.0)):
    """Blocky tetrahedralized ball: lattice tets whose centroid lies inside the sphere."""
    full = box_tet_lattice(2.0 * radius, resolution, center=center)
    centroids = full.vertices[full.tets].mean(axis=1)
    keep = np.linalg.norm(centroids - np.asarray(center), axis=1) <= radius
    tets = full.tets[keep]
    used = np.unique(tets)
    remap = np.full(full.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TetMesh(full.vertices[used], remap[tets])


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def load_obj(path):
    """Wavefront OBJ surface loader (v/f records; polygons fan-triangulated)."""
    verts, tris = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            for k in range(1, len(idx) - 1):
                tris.append([idx[0], idx[k], idx[k + 1]])
    return TriSurface(np.array(verts), np.array(tris, dtype=np.int64))


def save_obj(surface, path):
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for (x, y, z) in surface.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for (a, b, c) in surface.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def load_msh_v2(path):
    """Gmsh MSH v2 ASCII tet-mesh loader (element type 4)."""
    lines = Path(path).read_text().splitlines()
    node_ids, nodes, tets = [], [], []
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        if line == "$Nodes":
            count = int(lines[i + 1])
            for k in range(count):
                parts = lines[i + 2 + k].split()
                node_ids.append(int(parts[0]))
                nodes.append([float(x) for x in parts[1:4]])
            i += 2 + count
        elif line == "$Elements":
            count = int(lines[i + 1])
            for k in range(count):
                parts = [int(x) for x in lines[i + 2 + k].split()]
                etype, ntags = parts[1], parts[2]
                if etype == 4:
                    tets.append(parts[3 + ntags : 7 + ntags])
            i += 2 + count
        else:
            i += 1
    if not tets:
        raise ValueError(f"no tetrahedra in {path}")
    remap = {nid: k for k, nid in enumerate(node_ids)}
    tets = np.array([[remap[n] for n in t] for t in tets], dtype=np.int64)
    return TetMesh(np.array(nodes), tets)


def save_msh_v2(mesh, path):
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$Nodes", str(mesh.n_vertices)]
    out += [f"{i + 1} {x:.17g} {y:.17g} {z:.17g}" for i, (x, y, z) in enumerate(mesh.vertices)]
    out += ["$EndNodes", "$Elements", str(mesh.n_tets)]
    out += [
        f"{i + 1} 4 2 0 0 {a + 1} {b + 1} {c + 1} {d + 1}"
        for i, (a, b, c, d) in enumerate(mesh.tets)
    ]
    out += ["$EndElements"]
    Path(path).write_text("\n".join(out) + "\n")


def load_vtk_legacy(path):
    """VTK legacy ASCII unstructured-grid loader (cell type 10 = tet)."""
    tokens = Path(path).read_text().split()
    pts, cells, cell_types = [], [], []
    i = 0
    while i < len(tokens):
        tok = tokens[i].upper()
        if tok == "POINTS":
            n = int(tokens[i + 1])
            vals = [float(x) for x in tokens[i + 3 : i + 3 + 3 * n]]
            pts = np.array(vals).reshape(n, 3)
            i += 3 + 3 * n
        elif tok == "CELLS":
            n = int(tokens[i + 1])
            total = int(tokens[i + 2])
            vals = [int(x) for x in tokens[i + 3 : i + 3 + total]]
            j = 0
            for _ in range(n):
                cnt = vals[j]
                cells.append(vals[j + 1 : j + 1 + cnt])
                j += 1 + cnt
            i += 3 + total
        elif tok == "CELL_TYPES":
            n = int(tokens[i + 1])
            cell_types = [int(x) for x in tokens[i + 2 : i + 2 + n]]
            i += 2 + n
        else:
            i += 1
    tets = [c for c, t in zip(cells, cell_types) if t == 10]
    if not tets:
        raise ValueError(f"no tetrahedra in {path}")
    return TetMesh(pts, np.array(tets, dtype=np.int64))


def save_vtk_legacy(mesh, path):
    out = [
        "# vtk DataFile Version 3.0",
        "gripsim tet mesh",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_vertices} double",
    ]
    out += [f"{x:.17g} {y:.17g} {z:.17g}" for (x, y, z) in mesh.vertices]
    out.append(f"CELLS {mesh.n_tets} {5 * mesh.n_tets}")
    out += [f"4 {a} {b} {c} {d}" for (a, b, c, d) in mesh.tets]
    out.append(f"CELL_TYPES {mesh.n_tets}")
    out += ["10"] * mesh.n_tets
    Path(path).write_text("\n".join(out) + "\n")


def load_mesh(path):
    """Dispatch on suffix: .obj -> TriSurface, .msh/.vtk -> TetMesh."""
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return load_obj(path)
    if suffix == ".msh":
        return load_msh_v2(path)
    if suffix == ".vtk":
        return load_vtk_legacy(path)
    raise ValueError(f"unsupported mesh format: {suffix}")


def surface_mass_properties(surface, density):
    """Mass, center of mass, and second moment (at the COM) of the enclosed solid.

    Integrals are taken by signed decomposition into origin-apex tets,
    so the surface must be watertight and outward-oriented.
    """
    v, t = surface.vertices, surface.triangles
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    vols = np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0
    V = vols.sum()
    if V <= 0.0:
        raise ValueError("surface encloses non-positive volume")
    centroids = (a + b + c) / 4.0
    com = (vols[:, None] * centroids).sum(axis=0) / V
    s = a + b + c
    second = (
        vols[:, None, None]
        / 20.0
        * (
            np.einsum("ni,nj->nij", a, a)
            + np.einsum("ni,nj->nij", b, b)
            + np.einsum("ni,nj->nij", c, c)
            + np.einsum("ni,nj->nij", s, s)
        )
    ).sum(axis=0)
    mass = density * V
    second_at_com = density * second - mass * np.outer(com, com)
    return mass, com, second_at_com
