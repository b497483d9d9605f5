"""Grid signed distance fields with pseudonormal sign and trilinear queries.

Negative inside, positive outside.  Near the surface (the narrow band)
distances are exact point-to-triangle queries signed by the angle-weighted
pseudonormal of the closest feature; the far field falls back to a dense
surface point cloud, with inside/outside resolved by flood fill over the
cells not cut by any triangle (a 6-connected path of uncut cells cannot
cross the watertight surface, so the labeling is leak-free).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from gripsim.geometry.distances import point_triangle_closest

SDF_MAGIC = b"GRIPSDF1"


@dataclass
class Sdf:
    """Sampled signed distance grid (m); trilinear interpolation."""

    origin: np.ndarray
    spacing: np.ndarray
    values: np.ndarray
    interpolation_order: int = 1
    source: str = ""

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def resolution(self):
        return self.values.shape

    def bounds(self):
        hi = self.origin + self.spacing * (np.array(self.values.shape) - 1)
        return self.origin.copy(), hi

    def contains(self, points):
        lo, hi = self.bounds()
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.all((points >= lo) & (points <= hi), axis=1)

    def _local(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        g = (points - self.origin) / self.spacing
        lo = np.zeros(3)
        hi = np.array(self.values.shape) - 1
        if np.any(g < lo - 1e-9) or np.any(g > hi + 1e-9):
            raise ValueError("query point outside SDF grid bounds")
        g = np.clip(g, lo, hi - 1e-12)
        i = np.minimum(g.astype(np.int64), (np.array(self.values.shape) - 2))
        f = g - i
        return i, f

    def query(self, points):
        """Trilinear signed distance at the given points (inside grid bounds)."""
        i, f = self._local(points)
        v = self.values
        ix, iy, iz = i[:, 0], i[:, 1], i[:, 2]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        c = np.empty((len(i), 2, 2, 2))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    c[:, dx, dy, dz] = v[ix + dx, iy + dy, iz + dz]
        wx = np.stack([1.0 - fx, fx], axis=1)
        wy = np.stack([1.0 - fy, fy], axis=1)
        wz = np.stack([1.0 - fz, fz], axis=1)
        return np.einsum("nxyz,nx,ny,nz->n", c, wx, wy, wz)

    def gradient(self, points):
        """Analytic gradient of the trilinear interpolant (not unit length)."""
        i, f = self._local(points)
        v = self.values
        ix, iy, iz = i[:, 0], i[:, 1], i[:, 2]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        c = np.empty((len(i), 2, 2, 2))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    c[:, dx, dy, dz] = v[ix + dx, iy + dy, iz + dz]
        wx = np.stack([1.0 - fx, fx], axis=1)
        wy = np.stack([1.0 - fy, fy], axis=1)
        wz = np.stack([1.0 - fz, fz], axis=1)
        dwx = np.stack([-np.ones_like(fx), np.ones_like(fx)], axis=1)
        gx = np.einsum("nxyz,nx,ny,nz->n", c, dwx, wy, wz) / self.spacing[0]
        gy = np.einsum("nxyz,nx,ny,nz->n", c, wx, dwx, wz) / self.spacing[1]
        gz = np.einsum("nxyz,nx,ny,nz->n", c, wx, wy, dwx) / self.spacing[2]
        return np.stack([gx, gy, gz], axis=1)


def _feature_pseudonormals(surface):
    """Face, edge, and angle-weighted vertex pseudonormals."""
    v, t = surface.vertices, surface.triangles
    fn = surface.triangle_normals()
    vn = surface.vertex_normals()
    edges = {}
    for ti, tri in enumerate(t):
        for k in range(3):
            key = tuple(sorted((tri[k], tri[(k + 1) % 3])))
            edges.setdefault(key, np.zeros(3))
            edges[key] += fn[ti]
    en = {k: n / max(np.linalg.norm(n), 1e-300) for k, n in edges.items()}
    return fn, en, vn


def build_sdf(surface, resolution=128, padding_cells=4, band_cells=4.0, seed=0):
    """Sample a signed distance grid for a watertight surface.

    resolution is the cell count along the longest bbox axis; cells are
    cubic.  Raises on non-watertight input (sign undefined).
    """
    if not surface.is_watertight():
        raise ValueError("SDF requires a watertight surface")
    lo, hi = surface.bbox()
    extent = hi - lo
    h = float(extent.max()) / float(resolution)
    dims = np.ceil(extent / h).astype(np.int64) + 1 + 2 * padding_cells
    origin = lo - padding_cells * h
    spacing = np.full(3, h)

    gx = origin[0] + h * np.arange(dims[0])
    gy = origin[1] + h * np.arange(dims[1])
    gz = origin[2] + h * np.arange(dims[2])
    X, Y, Z = np.meshgrid(gx, gy, gz, indexing="ij")
    pts = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)

    rng = np.random.default_rng(seed)
    n_cloud = int(min(400_000, max(20_000, 4.0 * surface.triangle_areas().sum() / (h * h))))
    cloud, _, _ = surface.sample_surface(n_cloud, rng)
    cloud = np.concatenate([cloud, surface.vertices])
    cloud_tree = cKDTree(cloud)
    d_cloud, _ = cloud_tree.query(pts, k=1)

    # leak-free occupancy: cells overlapped by any triangle AABB are cut
    occupied = np.zeros(tuple(dims), dtype=bool)
    tv = surface.vertices[surface.triangles]
    tlo = ((tv.min(axis=1) - origin) / h).astype(np.int64)
    thi = np.ceil((tv.max(axis=1) - origin) / h).astype(np.int64)
    tlo = np.clip(tlo, 0, dims - 1)
    thi = np.clip(thi, 0, dims - 1)
    for (l, u) in zip(tlo, thi):
        occupied[l[0] : u[0] + 1, l[1] : u[1] + 1, l[2] : u[2] + 1] = True

    # outside = uncut region connected to the grid boundary
    labels, _ = ndimage.label(~occupied)
    boundary_labels = np.unique(
        np.concatenate(
            [labels[0].ravel(), labels[-1].ravel(), labels[:, 0].ravel(), labels[:, -1].ravel(),
             labels[:, :, 0].ravel(), labels[:, :, -1].ravel()]
        )
    )
    boundary_labels = boundary_labels[boundary_labels != 0]
    outside = np.isin(labels, boundary_labels)
    sign_far = np.where(outside.reshape(-1), 1.0, -1.0)

    band = (d_cloud <= band_cells * h) | occupied.reshape(-1)
    values = sign_far * d_cloud
    if band.any():
        values[band] = _exact_signed_distance(surface, pts[band])

    return Sdf(origin, spacing, values.reshape(tuple(dims)), source=f"grid{resolution}")


def _exact_signed_distance(surface, pts, k=16):
    """Exact signed distance via closest-feature search with pseudonormal sign."""
    v, t = surface.vertices, surface.triangles
    tv = v[t]
    centroids = tv.mean(axis=1)
    circum = np.linalg.norm(tv - centroids[:, None, :], axis=2).max(axis=1)
    rmax = float(circum.max())
    tree = cKDTree(centroids)
    k = min(k, len(t))
    fn, en, vn = _feature_pseudonormals(surface)

    out = np.empty(len(pts))
    chunk = 65536
    for s0 in range(0, len(pts), chunk):
        p = pts[s0 : s0 + chunk]
        cd, ci = tree.query(p, k=k)
        if k == 1:
            cd, ci = cd[:, None], ci[:, None]
        cand = t[ci]  # (n, k, 3)
        n, kk = ci.shape
        prep = np.repeat(p, kk, axis=0)
        D, bary, region = point_triangle_closest(
            prep, v[cand[:, :, 0].ravel()], v[cand[:, :, 1].ravel()], v[cand[:, :, 2].ravel()]
        )
        D = D.reshape(n, kk)
        best = np.argmin(D, axis=1)
        rows = np.arange(n)
        d = np.sqrt(D[rows, best])

        # certificate: no non-candidate triangle can be closer
        uncertain = d > cd[:, -1] - rmax
        for i in np.nonzero(uncertain)[0]:
            ball = tree.query_ball_point(p[i], d[i] + rmax + 1e-12)
            if len(ball) > kk:
                tri_ids = np.array(ball)
                Db, bb, rb = point_triangle_closest(
                    np.repeat(p[i][None, :], len(tri_ids), axis=0),
                    v[t[tri_ids, 0]], v[t[tri_ids, 1]], v[t[tri_ids, 2]],
                )
                j = int(np.argmin(Db))
                if Db[j] < D[i, best[i]]:
                    d[i] = np.sqrt(Db[j])
                    ci[i, best[i]] = tri_ids[j]
                    bary[i * kk + best[i]] = bb[j]
                    region[i * kk + best[i]] = rb[j]

        bary = bary.reshape(n, kk, 3)[rows, best]
        region = region.reshape(n, kk)[rows, best]
        tri_best = t[ci[rows, best]]
        closest = np.einsum("nk,nkj->nj", bary, v[tri_best])

        normal = np.empty((n, 3))
        face_m = region == 6
        normal[face_m] = fn[ci[rows, best]][face_m]
        for code, (a, b) in enumerate([(0, 1), (1, 2), (2, 0)]):
            m = region == 3 + code
            if m.any():
                keys = [tuple(sorted((tri_best[i, a], tri_best[i, b]))) for i in np.nonzero(m)[0]]
                normal[m] = np.array([en[key] for key in keys])
        for code in range(3):
            m = region == code
            if m.any():
                normal[m] = vn[tri_best[m, code]]

        sign = np.where(np.einsum("ij,ij->i", p - closest, normal) >= 0.0, 1.0, -1.0)
        out[s0 : s0 + chunk] = sign * d
    return out


def save_sdf(sdf, path):
    """Flat binary cache: magic, resolution triple, origin, spacing (LE FP64), then samples."""
    with open(path, "wb") as f:
        f.write(SDF_MAGIC)
        header = np.array(
            [*[float(r) for r in sdf.values.shape], *sdf.origin, *sdf.spacing], dtype="<f8"
        )
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(sdf.values, dtype="<f8").tobytes())


def load_sdf(path):
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != SDF_MAGIC:
            raise ValueError(f"bad SDF magic: {magic!r}")
        header = np.frombuffer(f.read(9 * 8), dtype="<f8")
        dims = tuple(int(x) for x in header[:3])
        origin = header[3:6]
        spacing = header[6:9]
        values = np.frombuffer(f.read(8 * dims[0] * dims[1] * dims[2]), dtype="<f8").reshape(dims)
        return Sdf(origin.copy(), spacing.copy(), values.copy())
