"""Continuous collision detection and inversion step filters.

ccd_max_step runs additive conservative advancement per candidate
stencil: each advance moves by 0.9x the guaranteed-safe fraction
(current distance over the stencil's closing-speed bound), so the
trajectory never reaches zero distance.  The tet filter bounds the step
by the smallest positive root of the per-element volume cubic.
"""

from __future__ import annotations

import numpy as np

from gripsim.geometry.distances import edge_edge_closest, point_triangle_closest

_EPS_DIST = 1e-14


class IntersectionError(RuntimeError):
    """Raised when a CCD or filter query starts from an already-invalid state."""


def _stencil_distances(x, pt, ee):
    d_pt = d_ee = None
    if len(pt):
        D, _, _ = point_triangle_closest(x[pt[:, 0]], x[pt[:, 1]], x[pt[:, 2]], x[pt[:, 3]])
        d_pt = np.sqrt(D)
    if len(ee):
        D, _, _ = edge_edge_closest(x[ee[:, 0]], x[ee[:, 1]], x[ee[:, 2]], x[ee[:, 3]])
        d_ee = np.sqrt(D)
    return d_pt, d_ee


def ccd_max_step(x, p, pt, ee, scaling=0.9, max_iters=32, min_separation=0.0):
    """Largest step fraction alpha such that x + t*alpha*p stays intersection-free.

    x: (n, 3) positions, p: (n, 3) displacement direction; pt: (k, 4)
    [point, t0, t1, t2] index rows; ee: (m, 4) [a0, a1, b0, b1].
    The result applies to one environment only and is never reduced
    across environments.  Raises IntersectionError if any stencil starts
    at non-positive distance.
    """
    pt = np.asarray(pt, dtype=np.int64).reshape(-1, 4)
    ee = np.asarray(ee, dtype=np.int64).reshape(-1, 4)
    if len(pt) == 0 and len(ee) == 0:
        return 1.0

    stencils = []
    if len(pt):
        stencils.append((pt, 1, point_triangle_closest))
    if len(ee):
        stencils.append((ee, 2, edge_edge_closest))

    alpha = 1.0
    for idx, split, closest in stencils:
        xs = x[idx]                      # (n, 4, 3)
        ps = p[idx]
        mean = ps.mean(axis=1, keepdims=True)
        rel = ps - mean
        la = np.linalg.norm(rel[:, :split], axis=2).max(axis=1)
        lb = np.linalg.norm(rel[:, split:], axis=2).max(axis=1)
        lp = la + lb

        def dist_at(t, xs=xs, ps=ps, closest=closest, split=split):
            q = xs + t[:, None, None] * ps
            if split == 1:
                D, _, _ = closest(q[:, 0], q[:, 1], q[:, 2], q[:, 3])
            else:
                D, _, _ = closest(q[:, 0], q[:, 1], q[:, 2], q[:, 3])
            return np.sqrt(D)

        t = np.zeros(len(idx))
        d = dist_at(t)
        if np.any(d <= _EPS_DIST):
            raise IntersectionError("CCD called from an intersecting or touching state")
        gap = min_separation * d
        active = lp > 0.0
        t[~active] = 1.0
        for _ in range(max_iters):
            if not active.any():
                break
            t_l = np.zeros_like(t)
            t_l[active] = scaling * np.maximum(d[active] - gap[active], 0.0) / lp[active]
            t_new = t + t_l
            finished = active & (t_new >= 1.0)
            t[finished] = 1.0
            active &= ~finished
            if not active.any():
                break
            t[active] = t_new[active]
            d[active] = dist_at(t)[active]
            stalled = active & (d <= gap + _EPS_DIST)
            active &= ~stalled
        alpha = min(alpha, float(t.min()))
    return max(alpha, 0.0)


def _cofactor(M):
    """Batched cofactor matrix: cof(M) columns are cross products of M's columns."""
    c0 = np.cross(M[..., :, 1], M[..., :, 2], axis=-1)
    c1 = np.cross(M[..., :, 2], M[..., :, 0], axis=-1)
    c2 = np.cross(M[..., :, 0], M[..., :, 1], axis=-1)
    return np.stack([c0, c1, c2], axis=-1)


def smallest_positive_cubic_root(c0, c1, c2, c3, t_max=1.0):
    """Vectorized smallest real root in (0, t_max] of c0 + c1 t + c2 t^2 + c3 t^3.

    Returns t_max + 1 where no root lies in the interval.
    """
    c0, c1, c2, c3 = np.broadcast_arrays(
        *(np.asarray(c, dtype=np.float64) for c in (c0, c1, c2, c3))
    )
    n = c0.shape[0] if c0.ndim else 1
    roots = np.full((n, 3), np.inf)
    scale = np.maximum.reduce([np.abs(c0), np.abs(c1), np.abs(c2), np.abs(c3), np.full_like(c0, 1e-30)])
    is_cubic = np.abs(c3) > 1e-14 * scale
    is_quad = ~is_cubic & (np.abs(c2) > 1e-14 * scale)
    is_lin = ~is_cubic & ~is_quad & (np.abs(c1) > 1e-14 * scale)

    if is_lin.any():
        roots[is_lin, 0] = -c0[is_lin] / c1[is_lin]

    if is_quad.any():
        a, b, c = c2[is_quad], c1[is_quad], c0[is_quad]
        disc = b * b - 4.0 * a * c
        ok = disc >= 0.0
        sq = np.sqrt(np.maximum(disc, 0.0))
        r1 = np.where(ok, (-b - sq) / (2.0 * a), np.inf)
        r2 = np.where(ok, (-b + sq) / (2.0 * a), np.inf)
        block = roots[is_quad]
        block[:, 0], block[:, 1] = r1, r2
        roots[is_quad] = block

    if is_cubic.any():
        a = c2[is_cubic] / c3[is_cubic]
        b = c1[is_cubic] / c3[is_cubic]
        c = c0[is_cubic] / c3[is_cubic]
        p = b - a * a / 3.0
        q = 2.0 * a**3 / 27.0 - a * b / 3.0 + c
        disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
        block = np.full((is_cubic.sum(), 3), np.inf)

        one = disc > 0.0
        if one.any():
            sq = np.sqrt(disc[one])
            u = np.cbrt(-q[one] / 2.0 + sq)
            v = np.cbrt(-q[one] / 2.0 - sq)
            block[one, 0] = u + v - a[one] / 3.0

        three = ~one
        if three.any():
            pm = np.minimum(p[three], -1e-300)
            r = np.sqrt(-pm / 3.0)
            arg = np.clip(3.0 * q[three] / (2.0 * pm * r), -1.0, 1.0)
            phi = np.arccos(arg)
            for k in range(3):
                block[three, k] = 2.0 * r * np.cos((phi - 2.0 * np.pi * k) / 3.0) - a[three] / 3.0
        roots[is_cubic] = block

    roots = np.where((roots > 1e-12) & (roots <= t_max), roots, np.inf)
    best = roots.min(axis=1)
    return np.where(np.isfinite(best), best, t_max + 1.0)


def pencil_det_positive_step(M0, dM, scaling=0.9):
    """Step bound keeping det(M0 + t dM) > 0 for all batched 3x3 pencils."""
    M0 = np.asarray(M0, dtype=np.float64).reshape(-1, 3, 3)
    dM = np.asarray(dM, dtype=np.float64).reshape(-1, 3, 3)
    det0 = np.linalg.det(M0)
    if np.any(det0 <= 0.0):
        raise IntersectionError("step filter called with non-positive determinant state")
    c0 = det0
    c1 = np.einsum("nij,nij->n", _cofactor(M0), dM)
    c2 = np.einsum("nij,nij->n", _cofactor(dM), M0)
    c3 = np.linalg.det(dM)
    t = smallest_positive_cubic_root(c0, c1, c2, c3, t_max=1.0)
    t_min = float(t.min())
    if t_min > 1.0:
        return 1.0
    alpha = scaling * t_min
    # guard against root-polish error: shrink until strictly positive
    for _ in range(60):
        det = np.linalg.det(M0 + alpha * dM)
        if np.all(det > 0.0):
            return alpha
        alpha *= 0.5
    return 0.0


def tet_inversion_step_filter(x, p, tets, scaling=0.9):
    """Largest step bound along p keeping every tet volume positive."""
    tets = np.asarray(tets, dtype=np.int64).reshape(-1, 4)
    if len(tets) == 0:
        return 1.0
    if not np.any(p[tets].reshape(len(tets), -1)):
        return 1.0
    M0 = np.stack(
        [x[tets[:, k + 1]] - x[tets[:, 0]] for k in range(3)], axis=-1
    )
    dM = np.stack(
        [p[tets[:, k + 1]] - p[tets[:, 0]] for k in range(3)], axis=-1
    )
    return pencil_det_positive_step(M0, dM, scaling=scaling)
