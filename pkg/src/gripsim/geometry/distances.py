"""Elementary unsigned distance queries between collision primitives.

All queries work on squared distances internally; callers that need the
metric distance take a square root at the boundary.  For every stencil
type (point-point, point-edge, point-triangle, edge-edge) the module
provides batched closest-point classification plus analytic gradients
and Hessians of the squared distance with respect to the stacked vertex
coordinates.  The Hessians are exact: they are assembled from small
closed-form cores in reduced variables (w, u, v) and chained through
the constant incidence maps, plus the cross-product curvature term for
the normal-based formulas.
"""

from __future__ import annotations

import enum

import numpy as np

_DEGENERATE_SQ = 1e-24  # squared length/area floor below which inputs error


class Region(enum.Enum):
    """Voronoi region realizing a closest-point query."""

    FACE = "face"
    EDGE = "edge"
    VERTEX = "vertex"


class StencilKind(enum.IntEnum):
    POINT_POINT = 0
    POINT_EDGE = 1
    POINT_TRIANGLE = 2
    EDGE_EDGE = 3


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def _cross_matrix(c):
    """Batched matrix M with M @ y = c x y."""
    c = np.asarray(c, dtype=np.float64)
    z = np.zeros(c.shape[:-1])
    return np.stack(
        [
            np.stack([z, -c[..., 2], c[..., 1]], axis=-1),
            np.stack([c[..., 2], z, -c[..., 0]], axis=-1),
            np.stack([-c[..., 1], c[..., 0], z], axis=-1),
        ],
        axis=-2,
    )


# ---------------------------------------------------------------------------
# closest-point classification
# ---------------------------------------------------------------------------


def point_triangle_closest(p, t0, t1, t2):
    """Closest point on a (closed) triangle, batched.

    Returns (dist_sq, bary, region_code) where bary are the barycentric
    weights of the closest point and region_code is 0..2 for vertices
    t0/t1/t2, 3..5 for edges (t0t1, t1t2, t2t0), 6 for the face interior.
    """
    p, t0, t1, t2 = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (p, t0, t1, t2))
    ab = t1 - t0
    ac = t2 - t0
    ap = p - t0
    d1 = _dot(ab, ap)
    d2 = _dot(ac, ap)
    bp = p - t1
    d3 = _dot(ab, bp)
    d4 = _dot(ac, bp)
    cp = p - t2
    d5 = _dot(ab, cp)
    d6 = _dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    n = p.shape[0]
    bary = np.zeros((n, 3))
    region = np.full(n, 6, dtype=np.int64)
    done = np.zeros(n, dtype=bool)

    def settle(mask, w0, w1, w2, code):
        m = mask & ~done
        bary[m, 0] = np.broadcast_to(w0, mask.shape)[m]
        bary[m, 1] = np.broadcast_to(w1, mask.shape)[m]
        bary[m, 2] = np.broadcast_to(w2, mask.shape)[m]
        region[m] = code
        done[m] = True

    settle((d1 <= 0.0) & (d2 <= 0.0), 1.0, 0.0, 0.0, 0)
    settle((d3 >= 0.0) & (d4 <= d3), 0.0, 1.0, 0.0, 1)
    settle((d6 >= 0.0) & (d5 <= d6), 0.0, 0.0, 1.0, 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = np.where(d1 != d3, d1 / (d1 - d3), 0.0)
        v_ac = np.where(d2 != d6, d2 / (d2 - d6), 0.0)
        num_bc = d4 - d3
        den_bc = (d4 - d3) + (d5 - d6)
        v_bc = np.where(den_bc != 0.0, num_bc / den_bc, 0.0)
    settle((vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0), 1.0 - v_ab, v_ab, 0.0, 3)
    settle((vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0), 1.0 - v_ac, 0.0, v_ac, 5)
    settle((va <= 0.0) & (d4 - d3 >= 0.0) & (d5 - d6 >= 0.0), 0.0, 1.0 - v_bc, v_bc, 4)

    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(denom != 0.0, vb / denom, 0.0)
        w = np.where(denom != 0.0, vc / denom, 0.0)
    m = ~done
    bary[m, 0] = (1.0 - v - w)[m]
    bary[m, 1] = v[m]
    bary[m, 2] = w[m]

    closest = bary[:, :1] * t0 + bary[:, 1:2] * t1 + bary[:, 2:3] * t2
    diff = p - closest
    return _dot(diff, diff), bary, region


def edge_edge_closest(a0, a1, b0, b1):
    """Closest points between two segments, batched.

    Returns (dist_sq, s, t) with s the parameter on segment a and t on
    segment b, both clamped to [0, 1].  Parallel configurations resolve
    to a boundary parameter on one segment (Ericson's algorithm).
    """
    a0, a1, b0, b1 = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (a0, a1, b0, b1))
    d1 = a1 - a0
    d2 = b1 - b0
    r = a0 - b0
    a = _dot(d1, d1)
    e = _dot(d2, d2)
    f = _dot(d2, r)
    c = _dot(d1, r)
    b = _dot(d1, d2)
    denom = a * e - b * b

    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 0.0, np.clip((b * f - c * e) / denom, 0.0, 1.0), 0.0)
        t = (b * s + f) / e
        s_new = np.where(t < 0.0, np.clip(-c / a, 0.0, 1.0), np.where(t > 1.0, np.clip((b - c) / a, 0.0, 1.0), s))
    t = np.clip(t, 0.0, 1.0)
    s = s_new

    pa = a0 + s[..., None] * d1
    pb = b0 + t[..., None] * d2
    diff = pa - pb
    return _dot(diff, diff), s, t


# ---------------------------------------------------------------------------
# squared-distance derivative kernels (batched; grad/hess over stacked coords)
# ---------------------------------------------------------------------------


def pp_grad_hess(a, b):
    """D = |a-b|^2 over stacked (a, b); returns (D, grad (n,6), hess (n,6,6))."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    n = a.shape[0]
    d = a - b
    D = _dot(d, d)
    grad = np.concatenate([2.0 * d, -2.0 * d], axis=1)
    eye = np.eye(3)
    hess = np.zeros((n, 6, 6))
    hess[:, :3, :3] = 2.0 * eye
    hess[:, 3:, 3:] = 2.0 * eye
    hess[:, :3, 3:] = -2.0 * eye
    hess[:, 3:, :3] = -2.0 * eye
    return D, grad, hess


def _pe_core(w, u):
    """Derivatives of D = |w|^2 - (w.u)^2/|u|^2 in reduced vars (w, u)."""
    q = _dot(u, u)
    s = _dot(w, u)
    iq = 1.0 / q
    sq = s * iq
    gw = 2.0 * w - 2.0 * sq[..., None] * u
    gu = -2.0 * sq[..., None] * w + 2.0 * (sq * sq)[..., None] * u
    eye = np.eye(3)
    uu = np.einsum("ni,nj->nij", u, u)
    uw = np.einsum("ni,nj->nij", u, w)
    ww = np.einsum("ni,nj->nij", w, w)
    Hww = 2.0 * eye - 2.0 * iq[..., None, None] * uu
    Hwu = (
        -2.0 * iq[..., None, None] * uw
        - 2.0 * sq[..., None, None] * eye
        + 4.0 * (sq * iq)[..., None, None] * uu
    )
    Huu = (
        -2.0 * iq[..., None, None] * ww
        + 4.0 * (sq * iq)[..., None, None] * (uw + uw.transpose(0, 2, 1))
        + 2.0 * (sq * sq)[..., None, None] * eye
        - 8.0 * (sq * sq * iq)[..., None, None] * uu
    )
    D = _dot(w, w) - s * sq
    return D, gw, gu, Hww, Hwu, Huu


def pe_grad_hess(p, e0, e1):
    """Interior point-edge squared distance over stacked (p, e0, e1)."""
    p, e0, e1 = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (p, e0, e1))
    w = p - e0
    u = e1 - e0
    D, gw, gu, Hww, Hwu, Huu = _pe_core(w, u)
    n = p.shape[0]
    grad = np.zeros((n, 9))
    grad[:, 0:3] = gw
    grad[:, 3:6] = -gw - gu
    grad[:, 6:9] = gu
    Huw = Hwu.transpose(0, 2, 1)
    hess = np.zeros((n, 9, 9))
    hess[:, 0:3, 0:3] = Hww
    hess[:, 0:3, 3:6] = -Hww - Hwu
    hess[:, 0:3, 6:9] = Hwu
    hess[:, 3:6, 3:6] = Hww + Hwu + Huw + Huu
    hess[:, 3:6, 6:9] = -Hwu - Huu
    hess[:, 6:9, 6:9] = Huu
    hess[:, 3:6, 0:3] = hess[:, 0:3, 3:6].transpose(0, 2, 1)
    hess[:, 6:9, 0:3] = hess[:, 0:3, 6:9].transpose(0, 2, 1)
    hess[:, 6:9, 3:6] = hess[:, 3:6, 6:9].transpose(0, 2, 1)
    return D, grad, hess


def _plane_core(w, u, v):
    """Derivatives of D = (w.n)^2/|n|^2, n = u x v, over (w, u, v).

    Shared by the interior point-triangle and interior edge-edge
    formulas; only the incidence chaining differs.
    """
    n = np.cross(u, v)
    q = _dot(n, n)
    s = _dot(w, n)
    iq = 1.0 / q
    sq = s * iq
    D = s * sq

    gw = 2.0 * sq[..., None] * n
    gn = 2.0 * sq[..., None] * w - 2.0 * (sq * sq)[..., None] * n

    eye = np.eye(3)
    nn = np.einsum("ni,nj->nij", n, n)
    nw = np.einsum("ni,nj->nij", n, w)
    ww = np.einsum("ni,nj->nij", w, w)
    Hww = 2.0 * iq[..., None, None] * nn
    Hwn = (
        2.0 * iq[..., None, None] * nw
        + 2.0 * sq[..., None, None] * eye
        - 4.0 * (sq * iq)[..., None, None] * nn
    )
    Hnn = (
        2.0 * iq[..., None, None] * ww
        - 4.0 * (sq * iq)[..., None, None] * (nw + nw.transpose(0, 2, 1))
        - 2.0 * (sq * sq)[..., None, None] * eye
        + 8.0 * (sq * sq * iq)[..., None, None] * nn
    )

    # chain n(u, v): dn/du = -X(v), dn/dv = X(u); curvature couples u and v
    Xu = _cross_matrix(u)
    Xv = _cross_matrix(v)
    Ju = -Xv
    Jv = Xu
    gu = np.einsum("nki,nk->ni", Ju, gn)
    gv = np.einsum("nki,nk->ni", Jv, gn)
    curv = -_cross_matrix(gn)  # sum_k gn_k d2n_k/(du dv)

    Hwu = np.einsum("nik,nkj->nij", Hwn, Ju)
    Hwv = np.einsum("nik,nkj->nij", Hwn, Jv)
    Huu = np.einsum("nki,nkl,nlj->nij", Ju, Hnn, Ju)
    Hvv = np.einsum("nki,nkl,nlj->nij", Jv, Hnn, Jv)
    Huv = np.einsum("nki,nkl,nlj->nij", Ju, Hnn, Jv) + curv
    return D, gw, gu, gv, Hww, Hwu, Hwv, Huu, Huv, Hvv


def _assemble4(gy, Hy, chain):
    """Chain reduced (w,u,v) derivatives onto 4 stacked points.

    chain[k] is a list of (reduced index, sign) contributions of point k,
    encoding w/u/v as signed sums of the point coordinates.
    """
    gw, gu, gv = gy
    Hww, Hwu, Hwv, Huu, Huv, Hvv = Hy
    g_red = (gw, gu, gv)
    H_red = {
        (0, 0): Hww, (0, 1): Hwu, (0, 2): Hwv,
        (1, 0): Hwu.transpose(0, 2, 1), (1, 1): Huu, (1, 2): Huv,
        (2, 0): Hwv.transpose(0, 2, 1), (2, 1): Huv.transpose(0, 2, 1), (2, 2): Hvv,
    }
    n = gw.shape[0]
    grad = np.zeros((n, 12))
    hess = np.zeros((n, 12, 12))
    for k in range(4):
        for (ri, si) in chain[k]:
            grad[:, 3 * k : 3 * k + 3] += si * g_red[ri]
    for k in range(4):
        for m in range(4):
            blk = np.zeros((n, 3, 3))
            for (ri, si) in chain[k]:
                for (rj, sj) in chain[m]:
                    blk += si * sj * H_red[(ri, rj)]
            hess[:, 3 * k : 3 * k + 3, 3 * m : 3 * m + 3] = blk
    return grad, hess


def pt_grad_hess(p, t0, t1, t2):
    """Interior point-triangle squared distance over stacked (p, t0, t1, t2)."""
    p, t0, t1, t2 = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (p, t0, t1, t2))
    w = p - t0
    u = t1 - t0
    v = t2 - t0
    D, gw, gu, gv, *Hy = _plane_core(w, u, v)
    # w = p - t0, u = t1 - t0, v = t2 - t0
    chain = [
        [(0, 1.0)],
        [(0, -1.0), (1, -1.0), (2, -1.0)],
        [(1, 1.0)],
        [(2, 1.0)],
    ]
    grad, hess = _assemble4((gw, gu, gv), tuple(Hy), chain)
    return D, grad, hess


def ee_grad_hess(a0, a1, b0, b1):
    """Interior edge-edge squared distance over stacked (a0, a1, b0, b1)."""
    a0, a1, b0, b1 = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (a0, a1, b0, b1))
    w = b0 - a0
    u = a1 - a0
    v = b1 - b0
    D, gw, gu, gv, *Hy = _plane_core(w, u, v)
    # w = b0 - a0, u = a1 - a0, v = b1 - b0
    chain = [
        [(0, -1.0), (1, -1.0)],
        [(1, 1.0)],
        [(0, 1.0), (2, -1.0)],
        [(2, 1.0)],
    ]
    grad, hess = _assemble4((gw, gu, gv), tuple(Hy), chain)
    return D, grad, hess


def cross_norm_sq_grad_hess(a0, a1, b0, b1):
    """c = |u x v|^2 for u = a1-a0, v = b1-b0, with grad/hess over 4 points.

    Used by the edge-edge mollifier; computed through the Lagrange
    identity c = |u|^2 |v|^2 - (u.v)^2 so all derivatives are polynomial.
    """
    a0, a1, b0, b1 = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (a0, a1, b0, b1))
    u = a1 - a0
    v = b1 - b0
    qu = _dot(u, u)
    qv = _dot(v, v)
    s = _dot(u, v)
    c = qu * qv - s * s
    gu = 2.0 * qv[..., None] * u - 2.0 * s[..., None] * v
    gv = 2.0 * qu[..., None] * v - 2.0 * s[..., None] * u
    eye = np.eye(3)
    uu = np.einsum("ni,nj->nij", u, u)
    vv = np.einsum("ni,nj->nij", v, v)
    uv = np.einsum("ni,nj->nij", u, v)
    Huu = 2.0 * qv[..., None, None] * eye - 2.0 * vv
    Hvv = 2.0 * qu[..., None, None] * eye - 2.0 * uu
    Huv = 4.0 * uv - 2.0 * uv.transpose(0, 2, 1) - 2.0 * s[..., None, None] * eye

    n = u.shape[0]
    grad = np.zeros((n, 12))
    grad[:, 0:3] = -gu
    grad[:, 3:6] = gu
    grad[:, 6:9] = -gv
    grad[:, 9:12] = gv
    hess = np.zeros((n, 12, 12))
    sign = {0: -1.0, 1: 1.0, 2: -1.0, 3: 1.0}
    var = {0: "u", 1: "u", 2: "v", 3: "v"}
    blocks = {("u", "u"): Huu, ("u", "v"): Huv, ("v", "u"): Huv.transpose(0, 2, 1), ("v", "v"): Hvv}
    for k in range(4):
        for m in range(4):
            hess[:, 3 * k : 3 * k + 3, 3 * m : 3 * m + 3] = sign[k] * sign[m] * blocks[(var[k], var[m])]
    return c, grad, hess


# ---------------------------------------------------------------------------
# public scalar queries
# ---------------------------------------------------------------------------


def point_triangle_distance(p, tri):
    """Exact distance from a point to a closed triangle.

    Returns (distance, region) with region in Region.  Ties at Voronoi
    boundaries report FACE when the point projects into the closed
    triangle at positive distance (a point coincident with a vertex or
    edge still reports that feature).  Errors on a degenerate triangle
    (area below 1e-12 m^2).
    """
    p = np.asarray(p, dtype=np.float64)
    tri = np.asarray(tri, dtype=np.float64)
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    if _dot(n, n) <= (2.0 * 1e-12) ** 2:
        raise ValueError("degenerate triangle")
    D, _, region = point_triangle_closest(p, tri[0], tri[1], tri[2])
    d = float(np.sqrt(D[0]))
    code = int(region[0])
    kind = Region.VERTEX if code < 3 else (Region.EDGE if code < 6 else Region.FACE)
    if kind is not Region.FACE and d > 1e-12:
        # plane projection barycentrics; all >= 0 means the minimum is
        # realized on the face boundary as well
        q = _dot(n, n)
        w = p - tri[0]
        proj = w - (_dot(w, n) / q) * n
        u = tri[1] - tri[0]
        v = tri[2] - tri[0]
        a00, a01, a11 = _dot(u, u), _dot(u, v), _dot(v, v)
        b0, b1 = _dot(proj, u), _dot(proj, v)
        det = a00 * a11 - a01 * a01
        bu = (a11 * b0 - a01 * b1) / det
        bv = (a00 * b1 - a01 * b0) / det
        if bu >= -1e-12 and bv >= -1e-12 and bu + bv <= 1.0 + 1e-12:
            kind = Region.FACE
    return d, kind


def edge_edge_distance(e1, e2):
    """Exact distance between two segments plus the parallel-edge mollifier weight.

    The mollifier threshold is evaluated with the input edges standing in
    for their rest shapes (eps = 1e-3 |e1|^2 |e2|^2 on the squared
    cross-product norm).  Errors on segments shorter than 1e-12 m.
    """
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    u = e1[1] - e1[0]
    v = e2[1] - e2[0]
    if _dot(u, u) <= _DEGENERATE_SQ or _dot(v, v) <= _DEGENERATE_SQ:
        raise ValueError("degenerate segment")
    D, s, t = edge_edge_closest(e1[0], e1[1], e2[0], e2[1])
    interior_s = (s[0] > 0.0) and (s[0] < 1.0)
    interior_t = (t[0] > 0.0) and (t[0] < 1.0)
    if interior_s and interior_t:
        kind = StencilKind.EDGE_EDGE
    elif interior_s or interior_t:
        kind = StencilKind.POINT_EDGE
    else:
        kind = StencilKind.POINT_POINT
    c = _dot(u, u) * _dot(v, v) - _dot(u, v) ** 2
    weight = edge_edge_mollifier(np.array([c]), np.array([_dot(u, u) * _dot(v, v)]))[0][0]
    return float(np.sqrt(D[0])), kind, float(weight)


def edge_edge_mollifier(c, eps_x_base, threshold=1e-3):
    """Quadratic mollifier m(c) on the squared cross-product norm.

    eps_x_base is |e_a_rest|^2 |e_b_rest|^2; the support threshold is
    eps = threshold * eps_x_base.  Returns (m, dm/dc, d2m/dc2), with m
    smoothly reaching 1 at c = eps and 0 at parallel edges (c = 0).
    """
    c = np.asarray(c, dtype=np.float64)
    eps = threshold * np.asarray(eps_x_base, dtype=np.float64)
    x = c / eps
    inside = x < 1.0
    m = np.where(inside, x * (2.0 - x), 1.0)
    dm = np.where(inside, (2.0 - 2.0 * x) / eps, 0.0)
    d2m = np.where(inside, -2.0 / (eps * eps), 0.0)
    return m, dm, d2m
