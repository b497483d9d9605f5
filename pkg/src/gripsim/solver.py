"""Per-environment implicit time stepper.

Each step minimizes the incremental potential

    E(x) = 1/2 (x - xhat)^T M (x - xhat)
           + dt^2 [ Psi_elastic(x) + ortho(x) + contact(x) + friction(x) ]

with xhat = x_t + dt v_t + dt^2 a_ext (implicit Euler), using Projected
Newton: SPD-projected element Hessians, a CCD plus inversion step-size
filter, and backtracking line search on E.  Prescribed (kinematic) DOFs
are moved to their per-step targets before the solve, with the motion
itself CCD-filtered so a fast-closing gripper cannot tunnel; they are
excluded from the Newton system but participate in barriers and CCD.

Body kinds: soft FEM (per-vertex DOFs, optionally with a prescribed
vertex mask), affine rigid (12 DOFs: translation plus linear map, held
near-orthogonal by a stiff penalty), and fully scripted kinematic
colliders (no DOFs).
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from gripsim import contact as ct
from gripsim import materials as mat
from gripsim.geometry import ccd as ccd_mod
from gripsim.geometry.broadphase import CollisionSoup, broad_phase
from gripsim.geometry.mesh import surface_mass_properties


@dataclass
class SolverParams:
    """Time step, Newton tolerances, and line-search/CCD knobs."""

    dt: float = 0.01
    rel_tol: float = 1e-3
    max_iters: int = 100
    fp_precision: str = "fp64"
    linear_solver: str = "direct"   # "direct" | "cg"
    length_scale_floor: float = 0.05
    max_line_search: int = 50
    ccd_scaling: float = 0.9
    ccd_max_iters: int = 32
    kinematic_ccd_guard: float = 0.1

    def __post_init__(self):
        if self.dt <= 0.0 or self.rel_tol <= 0.0 or self.max_iters < 1:
            raise ValueError("invalid solver parameters")
        if self.fp_precision != "fp64":
            raise ValueError("only fp64 is supported")


@dataclass
class StepReport:
    """Outcome of one implicit time step of one environment."""

    status: str                    # converged | frozen | failed
    iterations: int
    residual: float
    alpha_history: list
    min_distance: float
    energy: float
    kinematic_blocked: bool = False
    regularized: bool = False
    reason: str = ""
    env_id: int = 0
    step_index: int = 0
    time: float = 0.0

    def to_dict(self):
        return {
            "env": self.env_id, "step": self.step_index, "t": self.time,
            "status": self.status, "iterations": self.iterations,
            "residual": self.residual, "alphas": list(self.alpha_history),
            "min_distance": self.min_distance, "energy": self.energy,
            "kinematic_blocked": self.kinematic_blocked,
            "regularized": self.regularized, "reason": self.reason,
        }


class SolveBreakdown(RuntimeError):
    pass


def linear_solve(H, g, mode="direct", report=None):
    """Solve H p = -g for SPD sparse H; regularize and retry on breakdown.

    Direct mode targets ||H p + g|| <= 1e-10 ||g|| via one round of
    iterative refinement; cg mode targets 1e-6 relative residual.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.size == 0:
        return np.zeros(0)
    norm_g = np.linalg.norm(g)
    if norm_g == 0.0:
        return np.zeros_like(g)
    H = H.tocsc()

    if mode == "cg":
        p, info = spla.cg(H, -g, rtol=1e-8, atol=1e-12, maxiter=10 * H.shape[0])
        if info != 0 or np.linalg.norm(H @ p + g) > 1e-6 * norm_g:
            raise SolveBreakdown("cg failed to reach tolerance")
        return p

    for attempt in range(2):
        try:
            lu = spla.splu(H)
            p = lu.solve(-g)
            if not np.all(np.isfinite(p)):
                raise RuntimeError("non-finite solution")
            r = H @ p + g
            if np.linalg.norm(r) > 1e-10 * norm_g:
                p -= lu.solve(r)
                r = H @ p + g
            if np.linalg.norm(r) <= 1e-8 * norm_g:
                return p
            raise RuntimeError("residual too large")
        except RuntimeError:
            if attempt == 1:
                raise SolveBreakdown("linear solve failed after regularization")
            shift = 1e-8 * max(float(H.diagonal().max()), 1.0)
            H = (H + shift * sp.identity(H.shape[0], format="csc")).tocsc()
            if report is not None:
                report.regularized = True
    raise SolveBreakdown("unreachable")


# ---------------------------------------------------------------------------
# bodies
# ---------------------------------------------------------------------------


@dataclass
class SoftBody:
    """FEM body; kinematic_mask marks prescribed vertices driven at `velocity`."""

    mesh: object
    material: mat.MaterialParams
    name: str = "soft"
    kinematic_mask: np.ndarray = None
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    collide_self: bool = False

    def __post_init__(self):
        if self.kinematic_mask is None:
            self.kinematic_mask = np.zeros(self.mesh.n_vertices, dtype=bool)
        self.kinematic_mask = np.asarray(self.kinematic_mask, dtype=bool)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(3)


@dataclass
class AffineBody:
    """Rigid body as a 12-DOF affine map over its collision surface."""

    surface: object
    material: mat.MaterialParams
    name: str = "rigid"
    kappa: float = 1e8


@dataclass
class KinematicBody:
    """Fully scripted collider (no DOFs); moves at `velocity` each step."""

    surface: object
    material: mat.MaterialParams
    name: str = "kinematic"
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(3)


class NewtonState:
    """Resumable Newton solve bookkeeping for one environment."""

    def __init__(self, energy):
        self.energy = energy
        self.iterations = 0
        self.alphas = []
        self.done = False
        self.status = "running"
        self.residual = np.inf
        self.reason = ""
        self.regularized = False
        self.kinematic_blocked = False


class Environment:
    """One independent scene: bodies, DOF state, contact state, stepping."""

    def __init__(self, bodies, gravity=(0.0, 0.0, 0.0), contact_params=None,
                 solver_params=None, name="env", env_id=0, collide_pairs_off=()):
        self.bodies = list(bodies)
        self.gravity = np.asarray(gravity, dtype=np.float64).reshape(3)
        self.contact_params = contact_params or ct.ContactParams()
        self.solver_params = solver_params or SolverParams()
        self.name = name
        self.env_id = env_id
        self.status = "active"
        self.fail_reason = ""
        self.time = 0.0
        self.step_index = 0
        self._build(collide_pairs_off)

    # -- construction --------------------------------------------------------

    def _build(self, collide_pairs_off):
        n_b = len(self.bodies)
        self.records = []
        dof0 = 0
        surf0 = 0
        surf_chunks_rest = []
        edges_chunks, tris_chunks = [], []
        vert_body = []
        G_rows, G_cols, G_vals = [], [], []
        M_rows, M_cols, M_vals = [], [], []
        self._tets_node = []        # global node-space tets for the inversion filter
        mu_body = np.zeros(n_b)
        kin_body = np.zeros(n_b, dtype=bool)

        for bid, body in enumerate(self.bodies):
            rec = {"body": body, "id": bid, "dof0": dof0, "surf0": surf0, "name": body.name}
            mu_body[bid] = body.material.friction_coefficient
            if isinstance(body, SoftBody):
                mesh = body.mesh
                n_v = mesh.n_vertices
                rec["kind"] = "soft"
                rec["ndof"] = 3 * n_v
                rec["elements"] = mat.TetElements(mesh.rest_vertices, mesh.tets)
                rec["masses"] = mat.lumped_vertex_masses(mesh, body.material.density)
                surf, vmap = mesh.boundary_surface()
                rec["surf_map"] = vmap
                rec["n_sv"] = len(vmap)
                surf_chunks_rest.append(mesh.rest_vertices[vmap])
                tris_chunks.append(surf.triangles + surf0)
                edges_chunks.append(surf.edges() + surf0)
                vert_body += [bid] * len(vmap)
                dof_idx = (dof0 + 3 * vmap[:, None] + np.arange(3)[None, :]).ravel()
                sv_idx = 3 * (surf0 + np.arange(len(vmap)))[:, None] + np.arange(3)[None, :]
                G_rows.append(sv_idx.ravel())
                G_cols.append(dof_idx)
                G_vals.append(np.ones(3 * len(vmap)))
                md = np.repeat(rec["masses"], 3)
                M_rows.append(dof0 + np.arange(3 * n_v))
                M_cols.append(dof0 + np.arange(3 * n_v))
                M_vals.append(md)
                self._tets_node.append(mesh.tets + dof0 // 3)
                rec["x0"] = mesh.vertices.reshape(-1)
                surf0 += len(vmap)
                dof0 += 3 * n_v
            elif isinstance(body, AffineBody):
                rec["kind"] = "affine"
                rec["ndof"] = 12
                mass, com, second = surface_mass_properties(body.surface, body.material.density)
                xi = body.surface.vertices - com
                rec["xi"] = xi
                rec["mass"] = mass
                rec["volume"] = body.surface.enclosed_volume()
                rec["n_sv"] = len(xi)
                M12 = np.zeros((12, 12))
                M12[:3, :3] = mass * np.eye(3)
                for a in range(3):
                    M12[3 + 3 * a : 6 + 3 * a, 3 + 3 * a : 6 + 3 * a] = second
                rec["M12"] = M12
                surf_chunks_rest.append(xi)
                surf, _ = body.surface, None
                tris_chunks.append(body.surface.triangles + surf0)
                edges_chunks.append(body.surface.edges() + surf0)
                vert_body += [bid] * len(xi)
                # x_i = p + A xi_i is linear in q: J = [I | blkdiag(xi^T)]
                for local, xv in enumerate(xi):
                    base = 3 * (surf0 + local)
                    for a in range(3):
                        G_rows.append(np.array([base + a]))
                        G_cols.append(np.array([dof0 + a]))
                        G_vals.append(np.array([1.0]))
                        G_rows.append(np.full(3, base + a))
                        G_cols.append(dof0 + 3 + 3 * a + np.arange(3))
                        G_vals.append(xv)
                ii, jj = np.nonzero(M12)
                M_rows.append(dof0 + ii)
                M_cols.append(dof0 + jj)
                M_vals.append(M12[ii, jj])
                q0 = np.zeros(12)
                q0[:3] = com
                q0[3:] = np.eye(3).reshape(-1)
                rec["x0"] = q0
                surf0 += len(xi)
                dof0 += 12
            elif isinstance(body, KinematicBody):
                rec["kind"] = "kinematic"
                rec["ndof"] = 0
                rec["n_sv"] = body.surface.n_vertices
                rec["positions"] = body.surface.vertices.copy()
                kin_body[bid] = True
                surf_chunks_rest.append(body.surface.rest_vertices)
                tris_chunks.append(body.surface.triangles + surf0)
                edges_chunks.append(body.surface.edges() + surf0)
                vert_body += [bid] * body.surface.n_vertices
                surf0 += body.surface.n_vertices
            else:
                raise TypeError(f"unknown body type: {type(body)}")
            self.records.append(rec)

        self.n_dofs = dof0
        self.n_sv = surf0
        self.x = np.concatenate([r["x0"] for r in self.records if r["ndof"] > 0]) if dof0 else np.zeros(0)
        self.v = np.zeros(self.n_dofs)
        self.surf_rest = np.concatenate(surf_chunks_rest) if surf_chunks_rest else np.zeros((0, 3))
        edges = np.concatenate(edges_chunks) if edges_chunks else np.zeros((0, 2), np.int64)
        tris = np.concatenate(tris_chunks) if tris_chunks else np.zeros((0, 3), np.int64)

        collide = np.ones((n_b, n_b), dtype=bool)
        for bid, body in enumerate(self.bodies):
            collide[bid, bid] = getattr(body, "collide_self", False)
        for (a, b) in collide_pairs_off:
            collide[a, b] = collide[b, a] = False
        rest_len_sq = np.einsum(
            "ij,ij->i",
            self.surf_rest[edges[:, 1]] - self.surf_rest[edges[:, 0]],
            self.surf_rest[edges[:, 1]] - self.surf_rest[edges[:, 0]],
        ) if len(edges) else np.zeros(0)
        self.soup = CollisionSoup(
            vertex_body=np.asarray(vert_body, dtype=np.int64),
            edges=edges, triangles=tris,
            body_kinematic=kin_body, collide=collide,
            edge_rest_len_sq=rest_len_sq,
        )
        self.mu_body = mu_body

        if dof0:
            self.G = sp.coo_matrix(
                (np.concatenate(G_vals), (np.concatenate(G_rows), np.concatenate(G_cols))),
                shape=(3 * self.n_sv, self.n_dofs),
            ).tocsr()
            self.M = sp.coo_matrix(
                (np.concatenate(M_vals), (np.concatenate(M_rows), np.concatenate(M_cols))),
                shape=(self.n_dofs, self.n_dofs),
            ).tocsr()
        else:
            self.G = sp.csr_matrix((3 * self.n_sv, 0))
            self.M = sp.csr_matrix((0, 0))

        free = np.ones(self.n_dofs, dtype=bool)
        for rec in self.records:
            if rec["kind"] == "soft":
                maskbits = np.repeat(rec["body"].kinematic_mask, 3)
                free[rec["dof0"] : rec["dof0"] + rec["ndof"]] = ~maskbits
        self.free = free
        self.free_idx = np.nonzero(free)[0]
        self._tets_node = np.concatenate(self._tets_node) if self._tets_node else np.zeros((0, 4), np.int64)
        self.anchors = ct._empty_anchors()
        self._kin_vert_slices = [
            (rec["surf0"], rec["surf0"] + rec["n_sv"], rec)
            for rec in self.records if rec["kind"] == "kinematic"
        ]

    # -- state access ---------------------------------------------------------

    def surface_positions(self, x=None):
        x = self.x if x is None else x
        sv = (self.G @ x).reshape(-1, 3) if self.n_dofs else np.zeros((self.n_sv, 3))
        for (a, b, rec) in self._kin_vert_slices:
            sv[a:b] = rec["positions"]
        return sv

    def node_positions(self, x=None):
        x = self.x if x is None else x
        return x.reshape(-1, 3) if self.n_dofs else np.zeros((0, 3))

    def bbox_diagonal(self):
        sv = self.surface_positions()
        if not len(sv):
            return 0.0
        return float(np.linalg.norm(sv.max(axis=0) - sv.min(axis=0)))

    def body_com(self, bid):
        rec = self.records[bid]
        if rec["kind"] == "soft":
            xs = self.x[rec["dof0"] : rec["dof0"] + rec["ndof"]].reshape(-1, 3)
            m = rec["masses"]
            return (m[:, None] * xs).sum(axis=0) / m.sum()
        if rec["kind"] == "affine":
            return self.x[rec["dof0"] : rec["dof0"] + 3].copy()
        return rec["positions"].mean(axis=0)

    def body_velocity_com(self, bid):
        rec = self.records[bid]
        if rec["kind"] == "soft":
            vs = self.v[rec["dof0"] : rec["dof0"] + rec["ndof"]].reshape(-1, 3)
            m = rec["masses"]
            return (m[:, None] * vs).sum(axis=0) / m.sum()
        if rec["kind"] == "affine":
            return self.v[rec["dof0"] : rec["dof0"] + 3].copy()
        return rec["body"].velocity.copy()

    def total_linear_momentum(self):
        mom = np.zeros(3)
        for rec in self.records:
            if rec["kind"] == "soft":
                vs = self.v[rec["dof0"] : rec["dof0"] + rec["ndof"]].reshape(-1, 3)
                mom += (rec["masses"][:, None] * vs).sum(axis=0)
            elif rec["kind"] == "affine":
                mom += rec["mass"] * self.v[rec["dof0"] : rec["dof0"] + 3]
        return mom

    def max_point_speed(self):
        """Max surface-vertex speed, prescribed bodies included."""
        speeds = [0.0]
        for rec in self.records:
            if rec["kind"] == "soft":
                vs = self.v[rec["dof0"] : rec["dof0"] + rec["ndof"]].reshape(-1, 3)
                speeds.append(float(np.linalg.norm(vs, axis=1).max()))
            elif rec["kind"] == "affine":
                vq = self.v[rec["dof0"] : rec["dof0"] + 12]
                dA = vq[3:].reshape(3, 3)
                vs = vq[None, :3] + rec["xi"] @ dA.T
                speeds.append(float(np.linalg.norm(vs, axis=1).max()))
            else:
                speeds.append(float(np.linalg.norm(rec["body"].velocity)))
        return max(speeds)

    # -- contact plumbing ------------------------------------------------------

    def _candidates(self, sv, radius):
        return broad_phase([self.soup], [sv], radius)[0]

    def _contact_set(self, cands):
        soup = self.soup
        pt = cands["pt"]
        ee = cands["ee"]
        pt_bodies = np.stack(
            [soup.vertex_body[pt[:, 0]], soup.vertex_body[pt[:, 1]]], axis=1
        ) if len(pt) else np.zeros((0, 2), np.int64)
        ee_bodies = np.stack(
            [soup.vertex_body[ee[:, 0]], soup.vertex_body[ee[:, 2]]], axis=1
        ) if len(ee) else np.zeros((0, 2), np.int64)
        pt_mu = ct.combine_friction(
            self.mu_body[pt_bodies[:, 0]], self.mu_body[pt_bodies[:, 1]],
            self.contact_params.friction_combination,
        ) if len(pt) else np.zeros(0)
        ee_mu = ct.combine_friction(
            self.mu_body[ee_bodies[:, 0]], self.mu_body[ee_bodies[:, 1]],
            self.contact_params.friction_combination,
        ) if len(ee) else np.zeros(0)
        eps_x = (
            soup.edge_rest_len_sq[cands["ee_edges"][:, 0]]
            * soup.edge_rest_len_sq[cands["ee_edges"][:, 1]]
        ) if len(ee) else np.zeros(0)
        return ct.ContactSet(pt, ee, eps_x, pt_bodies, ee_bodies, pt_mu, ee_mu)

    def contact_set_now(self, radius_factor=1.05):
        sv = self.surface_positions()
        return self._contact_set(self._candidates(sv, self.contact_params.dhat * radius_factor))

    def min_contact_distance(self, radius_factor=2.0):
        cs = self.contact_set_now(radius_factor)
        if len(cs) == 0:
            return np.inf
        return cs.min_distance(self.surface_positions())

    def min_tet_volume(self):
        vols = [np.inf]
        nodes = self.node_positions()
        if len(self._tets_node):
            d1 = nodes[self._tets_node[:, 1]] - nodes[self._tets_node[:, 0]]
            d2 = nodes[self._tets_node[:, 2]] - nodes[self._tets_node[:, 0]]
            d3 = nodes[self._tets_node[:, 3]] - nodes[self._tets_node[:, 0]]
            vols.append(float((np.einsum("ij,ij->i", np.cross(d1, d2), d3) / 6.0).min()))
        for rec in self.records:
            if rec["kind"] == "affine":
                A = self.x[rec["dof0"] + 3 : rec["dof0"] + 12].reshape(3, 3)
                vols.append(float(np.linalg.det(A)))
        return min(vols)

    # -- energy / assembly ------------------------------------------------------

    def _elastic(self, x, order):
        E = 0.0
        grad = np.zeros(self.n_dofs) if order >= 1 else None
        blocks = []
        for rec in self.records:
            if rec["kind"] == "soft":
                xs = x[rec["dof0"] : rec["dof0"] + rec["ndof"]].reshape(-1, 3)
                mu_l, lam_l = rec["body"].material.lame()
                e, g, H = mat.neo_hookean_energy(
                    rec["elements"], xs, mu_l, lam_l,
                    with_hessian=(order >= 2), project=True,
                )
                E += e
                if order >= 1:
                    grad[rec["dof0"] : rec["dof0"] + rec["ndof"]] += g.reshape(-1)
                if order >= 2:
                    idx = rec["dof0"] + (3 * rec["elements"].tets[:, :, None] + np.arange(3)).reshape(-1, 12)
                    blocks.append((idx, H))
            elif rec["kind"] == "affine":
                state = mat.AffineBodyState(
                    x[rec["dof0"] : rec["dof0"] + 3],
                    x[rec["dof0"] + 3 : rec["dof0"] + 12].reshape(3, 3),
                    kappa=rec["body"].kappa,
                )
                e, g, H = mat.abd_orthogonality_energy(state, rec["volume"], with_hessian=(order >= 2))
                E += e
                if order >= 1:
                    grad[rec["dof0"] : rec["dof0"] + 12] += g
                if order >= 2:
                    idx = (rec["dof0"] + np.arange(12))[None, :]
                    blocks.append((idx, mat.spd_project(H[None])))
        return E, grad, blocks

    def _energy_only(self, x, cset, xhat, surf_prev):
        """Full incremental potential; +inf for invalid (inverted/penetrating) states."""
        dt = self.solver_params.dt
        dx = x - xhat
        E = 0.5 * float(dx @ (self.M @ dx))
        try:
            e_el, _, _ = self._elastic(x, order=0)
            sv = self.surface_positions(x)
            e_c, _, _, _ = cset.potential(sv, self.contact_params, order=0)
            e_f, _, _, _ = ct.friction_potential(
                self.anchors, sv, surf_prev, self.contact_params, dt, order=0
            )
        except ValueError:
            return np.inf
        total = E + dt * dt * (e_el + e_c + e_f)
        return total if np.isfinite(total) else np.inf

    @staticmethod
    def _block_coo(idx, blocks):
        n, w = idx.shape
        rows = np.repeat(idx, w, axis=1).reshape(n, w, w)
        cols = np.tile(idx[:, None, :], (1, w, 1))
        return rows.reshape(-1), cols.reshape(-1), blocks.reshape(-1)

    def _assemble(self, x, cset, xhat, surf_prev):
        dt = self.solver_params.dt
        dx = x - xhat
        Mdx = self.M @ dx
        E = 0.5 * float(dx @ Mdx)
        grad = Mdx.copy()
        rows, cols, vals = [], [], []

        e_el, g_el, blocks_el = self._elastic(x, order=2)
        E += dt * dt * e_el
        grad += dt * dt * g_el
        for (idx, H) in blocks_el:
            r, c, v = self._block_coo(idx, dt * dt * H)
            rows.append(r); cols.append(c); vals.append(v)

        sv = self.surface_positions(x)
        e_c, g_c, idx_c, H_c = cset.potential(sv, self.contact_params, order=2)
        e_f, g_f, idx_f, H_f = ct.friction_potential(
            self.anchors, sv, surf_prev, self.contact_params, dt, order=2
        )
        E += dt * dt * (e_c + e_f)
        g_sv = dt * dt * (g_c + g_f)
        grad += self.G.T @ g_sv.reshape(-1)

        sv_rows, sv_cols, sv_vals = [], [], []
        for (idx, H) in ((idx_c, H_c), (idx_f, H_f)):
            if len(idx):
                cols12 = (3 * idx[:, :, None] + np.arange(3)).reshape(len(idx), 12)
                r, c, v = self._block_coo(cols12, dt * dt * H)
                sv_rows.append(r); sv_cols.append(c); sv_vals.append(v)
        if sv_rows:
            H_sv = sp.coo_matrix(
                (np.concatenate(sv_vals), (np.concatenate(sv_rows), np.concatenate(sv_cols))),
                shape=(3 * self.n_sv, 3 * self.n_sv),
            ).tocsr()
            H_cf = (self.G.T @ H_sv @ self.G).tocoo()
            rows.append(H_cf.row); cols.append(H_cf.col); vals.append(H_cf.data)

        H = self.M.tocoo()
        rows.append(H.row); cols.append(H.col); vals.append(H.data)
        H_full = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_dofs, self.n_dofs),
        ).tocsr()
        return E, grad, H_full

    # -- stepping ----------------------------------------------------------------

    def begin_step(self):
        """Prescribed-motion pre-move (CCD-guarded) and implicit-Euler target."""
        prm = self.solver_params
        cp = self.contact_params
        self._x_t = self.x.copy()
        self._surf_prev = self.surface_positions()

        ns = NewtonState(energy=np.inf)

        # prescribed displacement field over surface vertices
        dx_dof = np.zeros(self.n_dofs)
        kin_disp = np.zeros((self.n_sv, 3))
        moving = False
        for rec in self.records:
            if rec["kind"] == "kinematic" and np.any(rec["body"].velocity):
                kin_disp[rec["surf0"] : rec["surf0"] + rec["n_sv"]] = rec["body"].velocity * prm.dt
                moving = True
            elif rec["kind"] == "soft" and np.any(rec["body"].kinematic_mask) and np.any(rec["body"].velocity):
                mask3 = np.repeat(rec["body"].kinematic_mask, 3)
                dof_slice = slice(rec["dof0"], rec["dof0"] + rec["ndof"])
                dx_local = np.zeros(rec["ndof"])
                dx_local[mask3] = np.tile(rec["body"].velocity * prm.dt, int(rec["body"].kinematic_mask.sum()))
                dx_dof[dof_slice] = dx_local
                moving = True

        alpha_kin = 1.0
        if moving:
            sv = self.surface_positions()
            disp = (self.G @ dx_dof).reshape(-1, 3) + kin_disp
            max_disp = float(np.linalg.norm(disp, axis=1).max())
            cands = self._candidates(sv, cp.dhat + 2.0 * max_disp)
            if len(cands["pt"]) or len(cands["ee"]):
                alpha_kin = ccd_mod.ccd_max_step(
                    sv, disp, cands["pt"], cands["ee"],
                    scaling=prm.ccd_scaling, max_iters=prm.ccd_max_iters,
                    min_separation=prm.kinematic_ccd_guard,
                )
            self.x += alpha_kin * dx_dof
            for rec in self.records:
                if rec["kind"] == "kinematic":
                    rec["positions"] = rec["positions"] + alpha_kin * rec["body"].velocity * prm.dt
            ns.kinematic_blocked = alpha_kin < 1.0 - 1e-12
        self._kin_alpha = alpha_kin

        a_ext = np.zeros(self.n_dofs)
        for rec in self.records:
            if rec["kind"] == "soft":
                a_loc = np.tile(self.gravity, rec["ndof"] // 3)
                a_ext[rec["dof0"] : rec["dof0"] + rec["ndof"]] = a_loc
            elif rec["kind"] == "affine":
                a_ext[rec["dof0"] : rec["dof0"] + 3] = self.gravity
        xhat = self.x + prm.dt * self.v + prm.dt * prm.dt * a_ext
        xhat[~self.free] = self.x[~self.free]
        self._xhat = xhat
        self._ell = max(self.bbox_diagonal(), prm.length_scale_floor)
        return ns

    def newton_iteration(self, ns):
        """One Projected Newton iteration; sets ns.done when finished."""
        prm = self.solver_params
        cp = self.contact_params
        try:
            cands = self._candidates(self.surface_positions(), cp.dhat * 1.05)
            cset = self._contact_set(cands)
            E, grad, H = self._assemble(self.x, cset, self._xhat, self._surf_prev)
            if not (np.isfinite(E) and np.all(np.isfinite(grad))):
                raise FloatingPointError("non-finite assembly")
            g_f = grad[self.free_idx]
            H_ff = H[self.free_idx][:, self.free_idx]
            rep = StepReport("running", 0, 0.0, [], 0.0, 0.0)
            p_f = linear_solve(H_ff, g_f, mode=prm.linear_solver, report=rep)
            ns.regularized |= rep.regularized

            tol = prm.rel_tol * prm.dt * self._ell
            res = float(np.abs(p_f).max()) if len(p_f) else 0.0
            ns.residual = res
            if res < tol:
                ns.done = True
                ns.status = "converged"
                ns.energy = E
                return ns

            if ns.iterations >= prm.max_iters:
                ns.done = True
                ns.status = "failed"
                ns.reason = "non-convergence"
                return ns

            p = np.zeros(self.n_dofs)
            p[self.free_idx] = p_f
            disp = (self.G @ p).reshape(-1, 3)
            max_disp = float(np.linalg.norm(disp, axis=1).max()) if len(disp) else 0.0
            cands2 = self._candidates(self.surface_positions(), cp.dhat + 2.0 * max_disp)
            cset2 = self._contact_set(cands2)
            alpha0 = 1.0
            if len(cset2):
                alpha0 = min(alpha0, ccd_mod.ccd_max_step(
                    self.surface_positions(), disp, cands2["pt"], cands2["ee"],
                    scaling=prm.ccd_scaling, max_iters=prm.ccd_max_iters,
                ))
            nodes = self.node_positions()
            pn = p.reshape(-1, 3)
            if len(self._tets_node):
                alpha0 = min(alpha0, ccd_mod.tet_inversion_step_filter(
                    nodes, pn, self._tets_node, scaling=prm.ccd_scaling))
            for rec in self.records:
                if rec["kind"] == "affine":
                    A = self.x[rec["dof0"] + 3 : rec["dof0"] + 12].reshape(1, 3, 3)
                    dA = p[rec["dof0"] + 3 : rec["dof0"] + 12].reshape(1, 3, 3)
                    if np.any(dA):
                        alpha0 = min(alpha0, ccd_mod.pencil_det_positive_step(A, dA, scaling=prm.ccd_scaling))

            E0 = self._energy_only(self.x, cset2, self._xhat, self._surf_prev)
            alpha = alpha0
            accepted = False
            for _ in range(prm.max_line_search):
                E_trial = self._energy_only(self.x + alpha * p, cset2, self._xhat, self._surf_prev)
                if E_trial < E0:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                if res < 10.0 * tol:
                    ns.done = True
                    ns.status = "converged"
                    ns.energy = E0
                    return ns
                ns.done = True
                ns.status = "failed"
                ns.reason = "line-search-failure"
                return ns

            self.x = self.x + alpha * p
            ns.iterations += 1
            ns.alphas.append(float(alpha))
            ns.energy = E_trial
            return ns
        except (ct.np.linalg.LinAlgError, FloatingPointError, SolveBreakdown, ValueError, ccd_mod.IntersectionError) as exc:
            ns.done = True
            ns.status = "failed"
            ns.reason = type(exc).__name__ + ": " + str(exc)
            return ns

    def finalize_step(self, ns):
        prm = self.solver_params
        min_dist = np.inf
        if ns.status == "failed":
            self.status = "failed"
            self.fail_reason = ns.reason
        else:
            self.v = (self.x - self._x_t) / prm.dt
            cset = self.contact_set_now()
            sv = self.surface_positions()
            self.anchors = ct.update_friction_anchors(cset, sv, self.contact_params)
            if len(cset):
                min_dist = cset.min_distance(sv)
        report = StepReport(
            status=ns.status,
            iterations=ns.iterations,
            residual=ns.residual,
            alpha_history=ns.alphas,
            min_distance=float(min_dist),
            energy=float(ns.energy) if np.isfinite(ns.energy) else float("inf"),
            kinematic_blocked=ns.kinematic_blocked,
            regularized=ns.regularized,
            reason=ns.reason,
            env_id=self.env_id,
            step_index=self.step_index,
            time=self.time,
        )
        self.time += prm.dt
        self.step_index += 1
        return report

    def newton_step(self):
        """One full implicit time step (begin, iterate to convergence, finalize)."""
        if self.status != "active":
            raise RuntimeError(f"stepping a {self.status} environment")
        ns = self.begin_step()
        while not ns.done:
            self.newton_iteration(ns)
        return self.finalize_step(ns)

    step = newton_step
