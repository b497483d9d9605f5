"""Elastic energy models, their derivatives, and stress extraction.

Soft bodies use a Neo-Hookean energy density

    Psi(F) = mu/2 (Ic - 3) - mu ln J + lambda/2 (J - 1)^2

which is zero exactly on rotations, nonnegative for J > 0, and blows up
as J -> 0+ so that, combined with the inversion step filter, elements can
never invert.  Affine (rigid) bodies carry a stiff orthogonality
potential kappa * V * ||A^T A - I||_F^2 on their linear map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MaterialParams:
    """E (Pa), nu (unitless), rho (kg/m^3), mu friction (unitless)."""

    young_modulus: float = 1e5
    poisson_ratio: float = 0.3
    density: float = 1000.0
    friction_coefficient: float = 0.5

    def __post_init__(self):
        if self.young_modulus <= 0.0:
            raise ValueError("young_modulus must be > 0")
        if not (0.0 <= self.poisson_ratio < 0.5):
            raise ValueError("poisson_ratio must be in [0, 0.5)")
        if self.density <= 0.0:
            raise ValueError("density must be > 0")
        if self.friction_coefficient < 0.0:
            raise ValueError("friction_coefficient must be >= 0")

    def lame(self):
        return lame_from_young_poisson(self.young_modulus, self.poisson_ratio)


def lame_from_young_poisson(E, nu):
    """(mu, lambda) from Young's modulus and Poisson ratio."""
    if nu >= 0.5:
        raise ValueError("poisson_ratio must be < 0.5")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


@dataclass
class StressField:
    """Per-tet Cauchy stress (Pa) and von Mises scalar (Pa)."""

    cauchy: np.ndarray     # (n_tets, 3, 3)
    von_mises: np.ndarray  # (n_tets,)


@dataclass
class AffineBodyState:
    """12-DOF affine rigid body: translation p, linear map A, stiffness kappa."""

    translation: np.ndarray
    linear: np.ndarray
    kappa: float = 1e8

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.linear = np.asarray(self.linear, dtype=np.float64).reshape(3, 3)


class TetElements:
    """Precomputed per-element quantities for a tet mesh's rest state."""

    def __init__(self, rest_vertices, tets):
        self.tets = np.asarray(tets, dtype=np.int64).reshape(-1, 4)
        rv = np.asarray(rest_vertices, dtype=np.float64)
        Dm = np.stack([rv[self.tets[:, k + 1]] - rv[self.tets[:, 0]] for k in range(3)], axis=-1)
        self.rest_volumes = np.linalg.det(Dm) / 6.0
        if np.any(self.rest_volumes <= 0.0):
            raise ValueError("non-positive rest volume")
        self.Dm_inv = np.linalg.inv(Dm)
        # w maps vertex displacement -> deformation gradient columns:
        # dF_ab/dx_{m,c} = delta_ac * w[m, b]
        w = np.empty((len(self.tets), 4, 3))
        w[:, 1:, :] = self.Dm_inv
        w[:, 0, :] = -self.Dm_inv.sum(axis=1)
        self.w = w

    @property
    def n_tets(self):
        return len(self.tets)

    def deformation_gradients(self, positions):
        x = positions
        Ds = np.stack([x[self.tets[:, k + 1]] - x[self.tets[:, 0]] for k in range(3)], axis=-1)
        return Ds @ self.Dm_inv


def spd_project(blocks, rel_floor=1e-12):
    """Eigen-clamp a batch of symmetric matrices to be positive semidefinite.

    Eigenvalues are clamped to rel_floor times the per-matrix spectral
    radius (not exactly zero) so the reconstructed matrix stays PSD
    despite floating-point reassembly error.
    """
    blocks = 0.5 * (blocks + blocks.transpose(0, 2, 1))
    vals, vecs = np.linalg.eigh(blocks)
    floor = rel_floor * np.abs(vals).max(axis=1, keepdims=True)
    vals = np.maximum(vals, floor)
    out = np.einsum("nik,nk,njk->nij", vecs, vals, vecs)
    return 0.5 * (out + out.transpose(0, 2, 1))


def neo_hookean_energy(elements, positions, mu, lam, with_hessian=True, project=True):
    """Total elastic energy of a tet mesh with gradient and per-element Hessians.

    Returns (energy, grad (n_verts, 3), hess_blocks (n_tets, 12, 12) or None).
    Assumes det(F) > 0 for every element (guaranteed by the step filter).
    """
    F = elements.deformation_gradients(positions)
    J = np.linalg.det(F)
    if np.any(J <= 0.0):
        raise ValueError("inverted element passed to elastic energy")
    Finv = np.linalg.inv(F)
    A = Finv.transpose(0, 2, 1)  # F^{-T}
    Ic = np.einsum("nab,nab->n", F, F)
    lnJ = np.log(J)
    V0 = elements.rest_volumes

    psi = 0.5 * mu * (Ic - 3.0) - mu * lnJ + 0.5 * lam * (J - 1.0) ** 2
    energy = float(np.sum(V0 * psi))

    P = mu * F + (lam * (J - 1.0) * J - mu)[:, None, None] * A
    grad_tet = np.einsum("nmb,ncb->nmc", elements.w, P) * V0[:, None, None]
    grad = np.zeros((len(positions), 3))
    np.add.at(grad, elements.tets.reshape(-1), grad_tet.reshape(-1, 3))

    if not with_hessian:
        return energy, grad, None

    # dP/dF as a (3,3,3,3) tensor per tet:
    #   mu * I + [mu - lam(J-1)J] A dF^T A + lam(2J-1)J (A:dF) A
    n = len(F)
    eye = np.eye(3)
    M = mu * np.einsum("ac,bd->abcd", eye, eye)[None, :, :, :, :] * np.ones((n, 1, 1, 1, 1))
    coef2 = mu - lam * (J - 1.0) * J
    M += coef2[:, None, None, None, None] * np.einsum("nad,ncb->nabcd", A, A)
    coef3 = lam * (2.0 * J - 1.0) * J
    M += coef3[:, None, None, None, None] * np.einsum("nab,ncd->nabcd", A, A)

    # chain dF/dx through the per-tet incidence weights
    H = np.einsum("ncbCB,nmb,nMB->nmcMC", M.transpose(0, 1, 2, 3, 4), elements.w, elements.w)
    H = H.reshape(n, 12, 12) * V0[:, None, None]
    if project:
        H = spd_project(H)
    return energy, grad, H


def abd_orthogonality_energy(state, volume, with_hessian=True, project=False):
    """Orthogonality potential of an affine body over its 12 DOFs.

    E = kappa * volume * ||A^T A - I||_F^2; zero iff A is orthogonal.
    DOF order: translation (3), then A rows (9).  The translation block
    is identically zero.
    """
    A = state.linear
    kV = state.kappa * volume
    S = A.T @ A - np.eye(3)
    energy = kV * float(np.sum(S * S))
    gA = 4.0 * kV * (A @ S)
    grad = np.zeros(12)
    grad[3:] = gA.reshape(-1)
    if not with_hessian:
        return energy, grad, None
    eye = np.eye(3)
    AAt = A @ A.T
    H9 = 4.0 * kV * (
        np.einsum("ac,db->abcd", eye, S)
        + np.einsum("ad,cb->abcd", A, A)
        + np.einsum("ac,bd->abcd", AAt, eye)
    ).reshape(9, 9)
    H = np.zeros((12, 12))
    H[3:, 3:] = H9
    if project:
        H = spd_project(H[None])[0]
    return energy, grad, H


def compute_stress(elements, positions, params):
    """Per-tet Cauchy stress and von Mises scalar from the Neo-Hookean model."""
    mu, lam = params.lame()
    F = elements.deformation_gradients(positions)
    J = np.linalg.det(F)
    if np.any(J <= 0.0):
        raise ValueError("inverted element passed to stress computation")
    A = np.linalg.inv(F).transpose(0, 2, 1)
    P = mu * F + (lam * (J - 1.0) * J - mu)[:, None, None] * A
    cauchy = np.einsum("n,nab,ncb->nac", 1.0 / J, P, F)
    cauchy = 0.5 * (cauchy + cauchy.transpose(0, 2, 1))
    tr = np.trace(cauchy, axis1=1, axis2=2)
    dev = cauchy - (tr / 3.0)[:, None, None] * np.eye(3)
    vm = np.sqrt(1.5 * np.einsum("nab,nab->n", dev, dev))
    return StressField(cauchy=cauchy, von_mises=vm)


def lumped_vertex_masses(mesh, density):
    """Diagonal (per-vertex) masses: each tet spreads rho*V0/4 to its corners."""
    m = np.zeros(mesh.n_vertices)
    share = density * mesh.rest_volumes / 4.0
    np.add.at(m, mesh.tets.reshape(-1), np.repeat(share, 4))
    return m
