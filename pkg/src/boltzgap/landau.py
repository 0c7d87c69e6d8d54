"""Landau coefficient diagnostics: sigma tensors, the lambda_1/lambda_2
eigenvalue split along and across v, and the Landau dissipation norm.

Diagnostic only; nothing here feeds time evolution. The projection kernel
phi^{ij}(z) = (delta_ij - z_i z_j / |z|^2) |z|^{gamma_L + 2} is mollified
with the same cell-scale policy as the collision module: |z|^2 is replaced
by |z|^2 + eps^2, which keeps phi positive semidefinite (the eigenvalue
along z becomes eps^2 (|z|^2 + eps^2)^{gamma_L/2} >= 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .velocity import VelocityGrid

__all__ = [
    "LandauCoefficients",
    "assemble_sigma",
    "landau_eigs",
    "eig_profile",
    "landau_dissipation_norm",
    "dissipation_surrogate",
]


@dataclass(frozen=True)
class LandauCoefficients:
    gamma_L: float
    sigma_ij: np.ndarray  # (N, 3, 3), symmetric PSD per node
    sigma_i: np.ndarray  # (N, 3), sigma^{ij}(v) v_j


def assemble_sigma(
    grid: VelocityGrid, gamma_L: float, epsilon_reg: float | None = None
) -> LandauCoefficients:
    """sigma^{ij}(v) = sum_{v'} phi^{ij}(v - v') mu(v') dv^3 over grid nodes.

    The raw lattice sum carries only cubic symmetry and leaves an O(dv^2)
    anisotropic remnant (~5e-3 on the default grid), so the tensor is
    projected onto its exact rotational form lam1 P_v + lam2 (I - P_v)
    afterwards. The scalar profiles lam1, lam2 keep their quadrature values
    and sigma(v) v becomes parallel to v at round-off.
    """
    if not (-3.0 <= gamma_L < -2.0):
        raise ValueError(f"gamma_L must lie in [-3, -2), got {gamma_L}")
    eps = grid.delta_v / 2.0 if epsilon_reg is None else epsilon_reg
    nodes = grid.nodes
    mu_w = grid.mu * grid.quad_weights
    n = grid.n_nodes
    sigma = np.empty((n, 3, 3))
    step = max(1, int(2.5e5 / n))
    eye = np.eye(3)
    for lo in range(0, n, step):
        hi = min(lo + step, n)
        z = nodes[lo:hi, None, :] - nodes[None, :, :]
        r2m = np.einsum("rjk,rjk->rj", z, z) + eps * eps
        # (r2m)^{(g+2)/2} I  -  z (x) z (r2m)^{g/2}
        hi_pow = r2m ** ((gamma_L + 2.0) / 2.0) * mu_w[None, :]
        lo_pow = r2m ** (gamma_L / 2.0) * mu_w[None, :]
        iso = hi_pow.sum(axis=1)
        outer = np.einsum("rj,rjk,rjl->rkl", lo_pow, z, z)
        sigma[lo:hi] = iso[:, None, None] * eye[None, :, :] - outer

    speed2 = grid.speed_sq
    tr = np.trace(sigma, axis1=1, axis2=2)
    at_origin = speed2 == 0.0
    safe2 = np.where(at_origin, 1.0, speed2)
    lam1 = np.einsum("nk,nkl,nl->n", nodes, sigma, nodes) / safe2
    lam1 = np.where(at_origin, tr / 3.0, lam1)
    lam2 = np.where(at_origin, tr / 3.0, 0.5 * (tr - lam1))
    proj = np.einsum("nk,nl->nkl", nodes, nodes) / safe2[:, None, None]
    proj[at_origin] = 0.0
    sigma = lam2[:, None, None] * eye[None, :, :] + (lam1 - lam2)[
        :, None, None
    ] * proj
    sigma_i = np.einsum("nkl,nl->nk", sigma, nodes)
    return LandauCoefficients(gamma_L=gamma_L, sigma_ij=sigma, sigma_i=sigma_i)


def landau_eigs(coeffs: LandauCoefficients, node: int):
    """(lambda_1, lambda_2): eigenvalue along v and the double one on v-perp.

    sigma(v) v is parallel to v, so sigma_i[node] supplies the lambda_1
    direction; v = 0 gives the triple eigenvalue, returned as a pair.
    """
    s = coeffs.sigma_ij[node]
    u = coeffs.sigma_i[node]
    tr = float(np.trace(s))
    uu = float(u @ u)
    if uu == 0.0:
        lam = tr / 3.0
        return lam, lam
    lam1 = float(u @ (s @ u)) / uu
    lam2 = 0.5 * (tr - lam1)
    return lam1, lam2


def eig_profile(coeffs: LandauCoefficients, grid: VelocityGrid) -> np.ndarray:
    """Rows (|v|, lambda_1, lambda_2) for every node, sorted by |v|."""
    out = np.empty((grid.n_nodes, 3))
    speeds = np.sqrt(grid.speed_sq)
    for i in range(grid.n_nodes):
        l1, l2 = landau_eigs(coeffs, i)
        out[i] = (speeds[i], l1, l2)
    return out[np.argsort(out[:, 0], kind="stable")]


def _grad_v(grid: VelocityGrid, f: np.ndarray) -> np.ndarray:
    """Centered differences on the node cube, one-sided at the faces."""
    n = grid.n_per_axis
    cube = f.reshape(n, n, n)
    out = np.empty((3, n, n, n))
    for a in range(3):
        out[a] = np.gradient(cube, grid.delta_v, axis=a, edge_order=1)
    return out.reshape(3, -1)


def landau_dissipation_norm(
    grid: VelocityGrid, coeffs: LandauCoefficients, f: np.ndarray
) -> float:
    """|f|^2 in the sigma-weighted metric:
    integral of sigma^{ij} d_i f d_j f + sigma^{ij} (v_i/2)(v_j/2) f^2."""
    f = np.asarray(f, dtype=float)
    grad = _grad_v(grid, f)
    s = coeffs.sigma_ij
    grad_term = np.einsum("nkl,kn,ln->n", s, grad, grad)
    zero_term = 0.25 * np.einsum("nk,nk->n", coeffs.sigma_i, grid.nodes) * f * f
    total = float(np.sum((grad_term + zero_term) * grid.quad_weights))
    # PSD sigma makes both terms nonnegative; clip float dust
    return max(total, 0.0)


def dissipation_surrogate(
    grid: VelocityGrid, gamma_L: float, f: np.ndarray
) -> float:
    """Bracket-weighted comparison norm: |<v>^{g/2} P_v grad f|^2 +
    |<v>^{(g+2)/2} (I - P_v) grad f|^2 + |<v>^{(g+2)/2} f|^2."""
    f = np.asarray(f, dtype=float)
    grad = _grad_v(grid, f)
    v = grid.nodes
    speed2 = grid.speed_sq
    br = grid.bracket()
    unit = np.where(speed2[:, None] > 0, v / np.sqrt(np.maximum(speed2, 1e-300))[:, None], 0.0)
    par = np.einsum("nk,kn->n", unit, grad)
    perp2 = np.einsum("kn,kn->n", grad, grad) - par**2
    vals = (
        br**gamma_L * par**2
        + br ** (gamma_L + 2.0) * np.clip(perp2, 0.0, None)
        + br ** (gamma_L + 2.0) * f * f
    )
    return float(np.sum(vals * grid.quad_weights))
