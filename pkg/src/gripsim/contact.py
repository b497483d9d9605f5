"""Barrier-based contact potential and smoothly mollified lagged friction.

The barrier is the compact-support log barrier

    b(d) = -(d - dhat)^2 ln(d / dhat)   for 0 < d < dhat, else 0

evaluated through squared distances internally (the composition
b(sqrt(D)) is smooth for D > 0, so no gradient singularity bookkeeping
is needed).  Edge-edge stencils are multiplied by a quadratic mollifier
in the squared cross-product norm of the edge directions, which removes
the non-smoothness at parallel edges.  Friction is lagged: normal force
magnitudes and tangent frames are frozen from the previous converged
state, making the per-step problem smooth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gripsim.geometry.distances import (
    cross_norm_sq_grad_hess,
    edge_edge_closest,
    ee_grad_hess,
    pe_grad_hess,
    point_triangle_closest,
    pp_grad_hess,
    pt_grad_hess,
)
from gripsim.materials import spd_project


@dataclass
class ContactParams:
    """kappa (kg s^-2), dhat (m), eps_v (m/s), and friction knobs."""

    kappa: float = 3e6
    dhat: float = 1e-3
    eps_v: float = 1e-3
    friction_combination: str = "geometric"
    friction_iterations: int = 1

    def __post_init__(self):
        if self.kappa <= 0.0 or self.dhat <= 0.0 or self.eps_v <= 0.0:
            raise ValueError("kappa, dhat, eps_v must all be positive")


def barrier(d, dhat):
    """Log barrier value and first two derivatives with respect to d.

    Errors on d <= 0 (an intersection-free invariant breach).
    """
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0.0):
        raise ValueError("barrier evaluated at non-positive distance")
    inside = d < dhat
    dd = d - dhat
    with np.errstate(divide="ignore", invalid="ignore"):
        ln = np.where(inside, np.log(d / dhat), 0.0)
    b = np.where(inside, -dd * dd * ln, 0.0)
    db = np.where(inside, -2.0 * dd * ln - dd * dd / d, 0.0)
    d2b = np.where(inside, -2.0 * ln - 4.0 * dd / d + (dd / d) ** 2, 0.0)
    return b, db, d2b


def barrier_sq(D, dhat):
    """Barrier composed with sqrt: value and derivatives with respect to D = d^2."""
    D = np.asarray(D, dtype=np.float64)
    if np.any(D <= 0.0):
        raise ValueError("barrier evaluated at non-positive squared distance")
    d = np.sqrt(D)
    b, db, d2b = barrier(d, dhat)
    f1 = db / (2.0 * d)
    f2 = (d2b * d - db) / (4.0 * d * D)
    return b, f1, f2


def friction_mollifier(y, eps_v, dt):
    """Smooth static-dynamic transition (f0, f1) on per-step slip y (m).

    f1(y) = -y^2/h^2 + 2y/h for y < h = eps_v*dt, else 1; f0 is the C1
    antiderivative with f0(0) = 0.
    """
    y = np.asarray(y, dtype=np.float64)
    h = eps_v * dt
    inside = y < h
    f1 = np.where(inside, 2.0 * y / h - (y / h) ** 2, 1.0)
    f0 = np.where(inside, y * y / h - y**3 / (3.0 * h * h), y - h / 3.0)
    return f0, f1


def combine_friction(mu_a, mu_b, rule="geometric"):
    if rule == "geometric":
        return np.sqrt(np.asarray(mu_a) * np.asarray(mu_b))
    if rule == "min":
        return np.minimum(mu_a, mu_b)
    raise ValueError(f"unknown friction combination rule: {rule}")


# region -> (kernel point slots within the 4-vertex stencil layout)
_PT_EDGE_SLOTS = {3: (1, 2), 4: (2, 3), 5: (3, 1)}


def _expand_rows(grad_small, hess_small, slots):
    """Embed kernel grad/hess over k points into the 4-point (12-dof) layout."""
    g, k3 = grad_small.shape
    k = k3 // 3
    grad = np.zeros((g, 12))
    hess = np.zeros((g, 12, 12)) if hess_small is not None else None
    for a in range(k):
        sa = slots[:, a]
        cols = (3 * sa[:, None] + np.arange(3)[None, :])
        np.put_along_axis(grad, cols, grad_small[:, 3 * a : 3 * a + 3], axis=1)
    if hess_small is not None:
        for a in range(k):
            for b in range(k):
                sa, sb = slots[:, a], slots[:, b]
                block = hess_small[:, 3 * a : 3 * a + 3, 3 * b : 3 * b + 3]
                for i in range(3):
                    cols = 3 * sb[:, None] + np.arange(3)[None, :]
                    rows = 3 * sa + i
                    np.put_along_axis(
                        hess[np.arange(g), rows], cols, block[:, i, :], axis=1
                    )
    return grad, hess


class ContactSet:
    """Candidate stencils of one environment, re-classified at every query point.

    pt rows are [point, t0, t1, t2] surface-vertex indices; ee rows are
    [a0, a1, b0, b1] with per-row mollifier scale eps_x (rest edge length
    product).  Body ids and combined friction coefficients ride along for
    force reporting and anchors.
    """

    def __init__(self, pt, ee, ee_eps_x=None, pt_bodies=None, ee_bodies=None,
                 pt_mu=None, ee_mu=None):
        self.pt = np.asarray(pt, dtype=np.int64).reshape(-1, 4)
        self.ee = np.asarray(ee, dtype=np.int64).reshape(-1, 4)
        self.ee_eps_x = (
            np.ones(len(self.ee)) if ee_eps_x is None else np.asarray(ee_eps_x, dtype=np.float64)
        )
        self.pt_bodies = pt_bodies if pt_bodies is not None else np.zeros((len(self.pt), 2), np.int64)
        self.ee_bodies = ee_bodies if ee_bodies is not None else np.zeros((len(self.ee), 2), np.int64)
        self.pt_mu = pt_mu if pt_mu is not None else np.zeros(len(self.pt))
        self.ee_mu = ee_mu if ee_mu is not None else np.zeros(len(self.ee))

    def __len__(self):
        return len(self.pt) + len(self.ee)

    def distances_sq(self, x):
        """(pt_D, ee_D) squared distances of every stencil at x."""
        pt_D = np.zeros(0)
        ee_D = np.zeros(0)
        if len(self.pt):
            pt_D, _, _ = point_triangle_closest(
                x[self.pt[:, 0]], x[self.pt[:, 1]], x[self.pt[:, 2]], x[self.pt[:, 3]]
            )
        if len(self.ee):
            ee_D, _, _ = edge_edge_closest(
                x[self.ee[:, 0]], x[self.ee[:, 1]], x[self.ee[:, 2]], x[self.ee[:, 3]]
            )
        return pt_D, ee_D

    def min_distance(self, x):
        pt_D, ee_D = self.distances_sq(x)
        candidates = [np.inf]
        if len(pt_D):
            candidates.append(pt_D.min())
        if len(ee_D):
            candidates.append(ee_D.min())
        return float(np.sqrt(min(candidates)))

    # -- derivative machinery ------------------------------------------------

    def _pt_terms(self, x, order):
        """Region-dispatched (D, grad, hess) for active PT rows; 12-dof layout."""
        rows = self.pt
        D, bary, region = point_triangle_closest(x[rows[:, 0]], x[rows[:, 1]], x[rows[:, 2]], x[rows[:, 3]])
        if order == 0:
            return D, None, None
        grad = np.zeros((len(rows), 12))
        hess = np.zeros((len(rows), 12, 12)) if order >= 2 else None

        face = region == 6
        if face.any():
            _, g, H = pt_grad_hess(x[rows[face, 0]], x[rows[face, 1]], x[rows[face, 2]], x[rows[face, 3]])
            grad[face] = g
            if order >= 2:
                hess[face] = H
        for code, (sa, sb) in _PT_EDGE_SLOTS.items():
            m = region == code
            if m.any():
                _, g, H = pe_grad_hess(x[rows[m, 0]], x[rows[m, sa]], x[rows[m, sb]])
                slots = np.tile(np.array([0, sa, sb]), (int(m.sum()), 1))
                ge, He = _expand_rows(g, H if order >= 2 else None, slots)
                grad[m] = ge
                if order >= 2:
                    hess[m] = He
        for code in range(3):
            m = region == code
            if m.any():
                _, g, H = pp_grad_hess(x[rows[m, 0]], x[rows[m, 1 + code]])
                slots = np.tile(np.array([0, 1 + code]), (int(m.sum()), 1))
                ge, He = _expand_rows(g, H if order >= 2 else None, slots)
                grad[m] = ge
                if order >= 2:
                    hess[m] = He
        return D, grad, hess

    def _ee_terms(self, x, order):
        """Region-dispatched derivatives for EE rows (pre-mollifier)."""
        rows = self.ee
        D, s, t = edge_edge_closest(x[rows[:, 0]], x[rows[:, 1]], x[rows[:, 2]], x[rows[:, 3]])
        if order == 0:
            return D, None, None
        grad = np.zeros((len(rows), 12))
        hess = np.zeros((len(rows), 12, 12)) if order >= 2 else None
        s_int = (s > 0.0) & (s < 1.0)
        t_int = (t > 0.0) & (t < 1.0)

        both = s_int & t_int
        if both.any():
            _, g, H = ee_grad_hess(x[rows[both, 0]], x[rows[both, 1]], x[rows[both, 2]], x[rows[both, 3]])
            grad[both] = g
            if order >= 2:
                hess[both] = H
        for (mask, point_slot_fn, edge_slots) in (
            (s_int & ~t_int, lambda rr, tt: np.where(tt < 0.5, 2, 3), (0, 1)),
            (~s_int & t_int, lambda rr, tt: np.where(tt < 0.5, 0, 1), (2, 3)),
        ):
            if mask.any():
                par = t[mask] if edge_slots == (0, 1) else s[mask]
                pslot = point_slot_fn(None, par)
                pid = rows[mask][np.arange(int(mask.sum())), pslot]
                _, g, H = pe_grad_hess(x[pid], x[rows[mask, edge_slots[0]]], x[rows[mask, edge_slots[1]]])
                slots = np.stack([pslot, np.full_like(pslot, edge_slots[0]), np.full_like(pslot, edge_slots[1])], axis=1)
                ge, He = _expand_rows(g, H if order >= 2 else None, slots)
                grad[mask] = ge
                if order >= 2:
                    hess[mask] = He
        neither = ~s_int & ~t_int
        if neither.any():
            sa = np.where(s[neither] < 0.5, 0, 1)
            sb = np.where(t[neither] < 0.5, 2, 3)
            ia = rows[neither][np.arange(int(neither.sum())), sa]
            ib = rows[neither][np.arange(int(neither.sum())), sb]
            _, g, H = pp_grad_hess(x[ia], x[ib])
            slots = np.stack([sa, sb], axis=1)
            ge, He = _expand_rows(g, H if order >= 2 else None, slots)
            grad[neither] = ge
            if order >= 2:
                hess[neither] = He
        return D, grad, hess

    def _mollifier(self, x, order):
        rows = self.ee
        c, gc, Hc = cross_norm_sq_grad_hess(x[rows[:, 0]], x[rows[:, 1]], x[rows[:, 2]], x[rows[:, 3]])
        eps = 1e-3 * self.ee_eps_x
        xr = c / eps
        inside = xr < 1.0
        m = np.where(inside, xr * (2.0 - xr), 1.0)
        if order == 0:
            return m, None, None, None, None
        dm_dc = np.where(inside, (2.0 - 2.0 * xr) / eps, 0.0)
        d2m_dc2 = np.where(inside, -2.0 / (eps * eps), 0.0)
        return m, dm_dc, d2m_dc2, gc, Hc

    def potential(self, x, params, order=2, project=True):
        """kappa * sum_k [m_k] b(d_k(x)): energy, gradient, per-stencil Hessians.

        Returns (energy, grad (n_verts, 3), idx (G, 4), blocks (G, 12, 12)).
        Raises on any non-positive stencil distance.
        """
        kappa, dhat = params.kappa, params.dhat
        n_verts = len(x)
        energy = 0.0
        grad = np.zeros((n_verts, 3))
        idx_out, blk_out = [], []

        if len(self.pt):
            D, gD, HD = self._pt_terms(x, order)
            if np.any(D <= 0.0):
                raise ValueError("contact stencil at non-positive distance")
            active = D < dhat * dhat
            if active.any():
                b, b1, b2 = barrier_sq(D[active], dhat)
                energy += kappa * float(b.sum())
                if order >= 1:
                    gA = kappa * b1[:, None] * gD[active]
                    rows = self.pt[active]
                    np.add.at(grad, rows.reshape(-1), gA.reshape(-1, 4, 3).reshape(-1, 3))
                if order >= 2:
                    H = kappa * (
                        b2[:, None, None] * np.einsum("ni,nj->nij", gD[active], gD[active])
                        + b1[:, None, None] * HD[active]
                    )
                    if project:
                        H = spd_project(H)
                    idx_out.append(rows)
                    blk_out.append(H)

        if len(self.ee):
            D, gD, HD = self._ee_terms(x, order)
            if np.any(D <= 0.0):
                raise ValueError("contact stencil at non-positive distance")
            active = D < dhat * dhat
            if active.any():
                m, dm, d2m, gc, Hc = self._mollifier(x, order)
                b, b1, b2 = barrier_sq(D[active], dhat)
                m_a = m[active]
                energy += kappa * float((m_a * b).sum())
                if order >= 1:
                    gb = b1[:, None] * gD[active]
                    gm = dm[active, None] * gc[active]
                    gA = kappa * (m_a[:, None] * gb + b[:, None] * gm)
                    rows = self.ee[active]
                    np.add.at(grad, rows.reshape(-1), gA.reshape(-1, 4, 3).reshape(-1, 3))
                if order >= 2:
                    Hb = (
                        b2[:, None, None] * np.einsum("ni,nj->nij", gD[active], gD[active])
                        + b1[:, None, None] * HD[active]
                    )
                    Hm = (
                        d2m[active, None, None] * np.einsum("ni,nj->nij", gc[active], gc[active])
                        + dm[active, None, None] * Hc[active]
                    )
                    cross = np.einsum("ni,nj->nij", gm, gb)
                    H = kappa * (
                        m_a[:, None, None] * Hb
                        + b[:, None, None] * Hm
                        + cross
                        + cross.transpose(0, 2, 1)
                    )
                    if project:
                        H = spd_project(H)
                    idx_out.append(rows)
                    blk_out.append(H)

        idx = np.concatenate(idx_out) if idx_out else np.zeros((0, 4), dtype=np.int64)
        blocks = np.concatenate(blk_out) if blk_out else np.zeros((0, 12, 12))
        return energy, grad, idx, blocks

    # -- stencil-level reporting ----------------------------------------------

    def stencil_forces(self, x, params):
        """Per active stencil: (kind, bodies, d, lambda = kappa*m*|b'(d)|)."""
        out = []
        pt_D, ee_D = self.distances_sq(x)
        dhat = params.dhat
        if len(pt_D):
            act = pt_D < dhat * dhat
            if act.any():
                d = np.sqrt(pt_D[act])
                _, db, _ = barrier(d, dhat)
                lam = params.kappa * np.abs(db)
                for row, bodies, dd, ll in zip(self.pt[act], self.pt_bodies[act], d, lam):
                    out.append({"kind": "point-triangle", "bodies": tuple(int(b) for b in bodies),
                                "verts": [int(v) for v in row], "d": float(dd), "lambda": float(ll)})
        if len(ee_D):
            act = ee_D < dhat * dhat
            if act.any():
                d = np.sqrt(ee_D[act])
                m, _, _, _, _ = self._mollifier(x, 0)
                _, db, _ = barrier(d, dhat)
                lam = params.kappa * m[act] * np.abs(db)
                for row, bodies, dd, ll in zip(self.ee[act], self.ee_bodies[act], d, lam):
                    out.append({"kind": "edge-edge", "bodies": tuple(int(b) for b in bodies),
                                "verts": [int(v) for v in row], "d": float(dd), "lambda": float(ll)})
        return out


# ---------------------------------------------------------------------------
# lagged friction
# ---------------------------------------------------------------------------


@dataclass
class FrictionAnchors:
    """Lagged friction state frozen from the previous converged solve."""

    verts: np.ndarray    # (n, 4) surface vertex ids (unused slots repeat id 0 with weight 0)
    gamma: np.ndarray    # (n, 4) signed closest-point weights (side A positive)
    tangent: np.ndarray  # (n, 3, 2) orthonormal tangent basis
    lam: np.ndarray      # (n,) lagged normal force magnitude (N)
    mu: np.ndarray       # (n,) combined friction coefficient
    bodies: np.ndarray   # (n, 2)

    def __len__(self):
        return len(self.lam)


def _empty_anchors():
    return FrictionAnchors(
        verts=np.zeros((0, 4), np.int64), gamma=np.zeros((0, 4)),
        tangent=np.zeros((0, 3, 2)), lam=np.zeros(0), mu=np.zeros(0),
        bodies=np.zeros((0, 2), np.int64),
    )


def _tangent_basis(normals):
    ref = np.zeros_like(normals)
    smallest = np.argmin(np.abs(normals), axis=1)
    ref[np.arange(len(normals)), smallest] = 1.0
    t1 = np.cross(ref, normals)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(normals, t1)
    return np.stack([t1, t2], axis=2)


def update_friction_anchors(contact_set, x, params):
    """Build friction anchors from a converged state.

    lambda_k is the barrier-force magnitude kappa * m * |b'(d)| at the
    converged state; the tangent basis is orthonormal to the current
    contact normal.  Stencils at or beyond dhat carry lambda = 0 and are
    dropped.
    """
    dhat = params.dhat
    rows_v, rows_g, normals, lams, mus, bodies = [], [], [], [], [], []

    if len(contact_set.pt):
        rows = contact_set.pt
        D, bary, _ = point_triangle_closest(x[rows[:, 0]], x[rows[:, 1]], x[rows[:, 2]], x[rows[:, 3]])
        act = D < dhat * dhat
        if act.any():
            d = np.sqrt(D[act])
            _, db, _ = barrier(d, dhat)
            pa = x[rows[act, 0]]
            pb = np.einsum("nk,nkj->nj", bary[act], x[rows[act, 1:]])
            n = (pa - pb) / d[:, None]
            rows_v.append(rows[act])
            g = np.concatenate([np.ones((int(act.sum()), 1)), -bary[act]], axis=1)
            rows_g.append(g)
            normals.append(n)
            lams.append(params.kappa * np.abs(db))
            mus.append(contact_set.pt_mu[act])
            bodies.append(contact_set.pt_bodies[act])

    if len(contact_set.ee):
        rows = contact_set.ee
        D, s, t = edge_edge_closest(x[rows[:, 0]], x[rows[:, 1]], x[rows[:, 2]], x[rows[:, 3]])
        act = D < dhat * dhat
        if act.any():
            d = np.sqrt(D[act])
            m, _, _, _, _ = contact_set._mollifier(x, 0)
            _, db, _ = barrier(d, dhat)
            sa, ta = s[act], t[act]
            pa = (1.0 - sa)[:, None] * x[rows[act, 0]] + sa[:, None] * x[rows[act, 1]]
            pb = (1.0 - ta)[:, None] * x[rows[act, 2]] + ta[:, None] * x[rows[act, 3]]
            n = (pa - pb) / d[:, None]
            rows_v.append(rows[act])
            g = np.stack([1.0 - sa, sa, -(1.0 - ta), -ta], axis=1)
            rows_g.append(g)
            normals.append(n)
            lams.append(params.kappa * m[act] * np.abs(db))
            mus.append(contact_set.ee_mu[act])
            bodies.append(contact_set.ee_bodies[act])

    if not rows_v:
        return _empty_anchors()
    normals = np.concatenate(normals)
    return FrictionAnchors(
        verts=np.concatenate(rows_v),
        gamma=np.concatenate(rows_g),
        tangent=_tangent_basis(normals),
        lam=np.concatenate(lams),
        mu=np.concatenate(mus),
        bodies=np.concatenate(bodies),
    )


def friction_potential(anchors, x, x_prev, params, dt, order=2):
    """Lagged friction dissipation sum_k mu_k lam_k f0(|slip_k|).

    Slip is the tangential relative displacement of the anchored closest
    points between x_prev and x, with weights and frame held fixed.
    Returns (energy, grad (n_verts, 3), idx (n, 4), blocks (n, 12, 12));
    the per-anchor Hessian is PSD by construction.
    """
    n_verts = len(x)
    if len(anchors) == 0:
        return 0.0, np.zeros((n_verts, 3)), np.zeros((0, 4), np.int64), np.zeros((0, 12, 12))

    h = params.eps_v * dt
    disp = x[anchors.verts] - x_prev[anchors.verts]          # (n, 4, 3)
    u_rel = np.einsum("nk,nkj->nj", anchors.gamma, disp)     # (n, 3)
    slip = np.einsum("nji,nj->ni", anchors.tangent, u_rel)   # (n, 2)
    y = np.linalg.norm(slip, axis=1)
    f0, f1 = friction_mollifier(y, params.eps_v, dt)
    scale = anchors.mu * anchors.lam
    energy = float((scale * f0).sum())
    if order == 0:
        return energy, None, None, None

    # f1(y)/y -> 2/h smoothly as y -> 0
    ratio = np.where(y > 1e-14, f1 / np.maximum(y, 1e-300), 2.0 / h)
    g2 = ratio[:, None] * slip                                # (n, 2)
    g3 = np.einsum("nij,nj->ni", anchors.tangent, g2)         # (n, 3)
    grad_rows = scale[:, None, None] * anchors.gamma[:, :, None] * g3[:, None, :]
    grad = np.zeros((n_verts, 3))
    np.add.at(grad, anchors.verts.reshape(-1), grad_rows.reshape(-1, 3))

    if order < 2:
        return energy, grad, anchors.verts, None

    df1 = np.where(y < h, 2.0 / h - 2.0 * y / (h * h), 0.0)
    uhat = np.where(y[:, None] > 1e-14, slip / np.maximum(y, 1e-300)[:, None], 0.0)
    eye2 = np.eye(2)
    M2 = (
        df1[:, None, None] * np.einsum("ni,nj->nij", uhat, uhat)
        + ratio[:, None, None] * (eye2[None] - np.einsum("ni,nj->nij", uhat, uhat))
    )
    M3 = np.einsum("nik,nkl,njl->nij", anchors.tangent, M2, anchors.tangent)
    blocks = (
        scale[:, None, None, None, None]
        * anchors.gamma[:, :, None, None, None]
        * anchors.gamma[:, None, :, None, None]
        * M3[:, None, None, :, :]
    )
    blocks = blocks.transpose(0, 1, 3, 2, 4).reshape(-1, 12, 12)
    return energy, grad, anchors.verts, blocks
