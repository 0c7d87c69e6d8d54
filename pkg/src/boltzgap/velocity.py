"""Truncated velocity grids, Gaussian reference data, quadrature and the
macroscopic projection P.

The velocity domain is the cube [-v_max, v_max]^3 sampled on a uniform
tensor grid with an odd number of nodes per axis, so that v = 0 is a grid
node and every velocity with a vanishing component (the grazing set of a
flat boundary) is represented exactly. Quadrature is the equal-weight rule
with weight dv^3 per node.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "VelocityGrid",
    "MomentCoefficients",
    "build_grid",
    "integrate",
    "project_P",
    "trilinear_weights",
]

#: (2 pi)^(-3/4), normalization of mu^(1/2).
MU_HALF_NORM = (2.0 * np.pi) ** (-0.75)

#: dimension of the collision-invariant subspace {mu^(1/2), v_i mu^(1/2), |v|^2 mu^(1/2)}
N_INVARIANTS = 5


@dataclass(frozen=True)
class VelocityGrid:
    """Uniform tensor grid on [-v_max, v_max]^3 with Gaussian reference data.

    Attributes
    ----------
    n_per_axis : int
        Number of nodes per axis (odd, >= 3).
    v_max : float
        Truncation radius per axis; nodes span [-v_max, v_max] inclusive.
    nodes : ndarray, shape (N, 3)
        Grid nodes, x-major ordering (index = (ix*n + iy)*n + iz).
    quad_weights : ndarray, shape (N,)
        Equal quadrature weights dv^3.
    mu_half : ndarray, shape (N,)
        mu^(1/2)(v) = (2 pi)^(-3/4) exp(-|v|^2/4) at the nodes.
    invariants_basis : ndarray, shape (5, N)
        Rows span {mu^(1/2), v_1 mu^(1/2), v_2 mu^(1/2), v_3 mu^(1/2),
        |v|^2 mu^(1/2)} sampled on the nodes.
    delta_v : float
        Node spacing 2 v_max / (n_per_axis - 1).
    tol_q : float
        Quadrature fidelity scale |1 - quad(mu)| + dv^2, fixed at build
        time; downstream tolerances scale from it.
    """

    n_per_axis: int
    v_max: float
    nodes: np.ndarray = field(repr=False)
    quad_weights: np.ndarray = field(repr=False)
    mu_half: np.ndarray = field(repr=False)
    invariants_basis: np.ndarray = field(repr=False)
    delta_v: float
    tol_q: float

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def axis(self) -> np.ndarray:
        """The 1D node coordinates shared by all three axes."""
        return np.linspace(-self.v_max, self.v_max, self.n_per_axis)

    @property
    def mu(self) -> np.ndarray:
        """The Maxwellian mu = (2 pi)^(-3/2) exp(-|v|^2/2) at the nodes."""
        return self.mu_half ** 2

    @property
    def speed_sq(self) -> np.ndarray:
        """|v|^2 at the nodes."""
        return np.einsum("ij,ij->i", self.nodes, self.nodes)

    def bracket(self) -> np.ndarray:
        """<v> = sqrt(1 + |v|^2) at the nodes."""
        return np.sqrt(1.0 + self.speed_sq)


@dataclass(frozen=True)
class MomentCoefficients:
    """Coefficients of P f = (a + b . v + c |v|^2) mu^(1/2)."""

    a: float
    b: np.ndarray
    c: float


def build_grid(n_per_axis: int, v_max: float) -> VelocityGrid:
    """Construct a VelocityGrid.

    Parameters
    ----------
    n_per_axis : int
        Odd node count per axis, >= 3 (odd so v = 0 is a node).
    v_max : float
        Positive truncation radius.

    Returns
    -------
    VelocityGrid

    Raises
    ------
    ValueError
        If n_per_axis is even or < 3, or v_max <= 0, or the invariant
        basis is numerically rank deficient.
    """
    if n_per_axis < 3 or n_per_axis % 2 == 0:
        raise ValueError(
            f"n_per_axis must be odd and >= 3 (got {n_per_axis}); an even count "
            "has no v=0 node and breaks grazing-set handling"
        )
    if v_max <= 0:
        raise ValueError(f"v_max must be positive (got {v_max})")

    axis = np.linspace(-v_max, v_max, n_per_axis)
    delta_v = 2.0 * v_max / (n_per_axis - 1)
    vx, vy, vz = np.meshgrid(axis, axis, axis, indexing="ij")
    nodes = np.stack([vx.ravel(), vy.ravel(), vz.ravel()], axis=1)
    speed_sq = np.einsum("ij,ij->i", nodes, nodes)
    mu_half = MU_HALF_NORM * np.exp(-speed_sq / 4.0)
    n_nodes = nodes.shape[0]
    quad_weights = np.full(n_nodes, delta_v**3)

    basis = np.empty((N_INVARIANTS, n_nodes))
    basis[0] = mu_half
    basis[1] = nodes[:, 0] * mu_half
    basis[2] = nodes[:, 1] * mu_half
    basis[3] = nodes[:, 2] * mu_half
    basis[4] = speed_sq * mu_half

    mass = float(np.dot(mu_half**2, quad_weights))
    tol_q = abs(1.0 - mass) + delta_v**2

    gram = (basis * quad_weights) @ basis.T
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1.0 / np.finfo(float).eps:
        raise ValueError(
            f"invariant basis is rank deficient on this grid (cond={cond:.3e})"
        )

    return VelocityGrid(
        n_per_axis=n_per_axis,
        v_max=float(v_max),
        nodes=nodes,
        quad_weights=quad_weights,
        mu_half=mu_half,
        invariants_basis=basis,
        delta_v=delta_v,
        tol_q=tol_q,
    )


def integrate(grid: VelocityGrid, values: np.ndarray) -> float:
    """Quadrature sum_j values[j] * quad_weights[j].

    Parameters
    ----------
    grid : VelocityGrid
    values : ndarray, shape (N,)
        One entry per grid node.

    Returns
    -------
    float
    """
    values = np.asarray(values)
    if values.shape != (grid.n_nodes,):
        raise ValueError(
            f"values has shape {values.shape}, expected ({grid.n_nodes},)"
        )
    return float(np.dot(values, grid.quad_weights))


def gram_matrix(grid: VelocityGrid) -> np.ndarray:
    """The 5x5 Gram matrix of the invariant basis in discrete L^2_v."""
    basis = grid.invariants_basis
    return (basis * grid.quad_weights) @ basis.T


def project_P(
    grid: VelocityGrid, f: np.ndarray
) -> tuple[MomentCoefficients, np.ndarray]:
    """Project f onto the discrete collision-invariant subspace.

    Solves the 5x5 Gram system for the coefficients of
    P f = (a + b . v + c |v|^2) mu^(1/2); no orthogonalization is applied,
    keeping the (a, b, c) convention.

    Parameters
    ----------
    grid : VelocityGrid
    f : ndarray, shape (N,)

    Returns
    -------
    (MomentCoefficients, ndarray)
        The coefficients and the vector P f on the grid.

    Raises
    ------
    np.linalg.LinAlgError
        If the Gram matrix is singular (degenerate grid).
    """
    f = np.asarray(f, dtype=float)
    if f.shape != (grid.n_nodes,):
        raise ValueError(f"f has shape {f.shape}, expected ({grid.n_nodes},)")
    basis = grid.invariants_basis
    gram = (basis * grid.quad_weights) @ basis.T
    rhs = basis @ (grid.quad_weights * f)
    try:
        coef = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(
            f"singular Gram matrix on grid n={grid.n_per_axis}, "
            f"v_max={grid.v_max}: {err}"
        ) from err
    pf = coef @ basis
    return MomentCoefficients(a=float(coef[0]), b=coef[1:4].copy(), c=float(coef[4])), pf


def projector_Q(grid: VelocityGrid) -> np.ndarray:
    """Dense N x N matrix of Q = I - P_h, the invariant-orthogonal projector.

    Quadrature weights are uniform, so orthogonality in discrete L^2_v
    coincides with Euclidean orthogonality against the basis rows.
    """
    basis = grid.invariants_basis
    gram = basis @ basis.T
    # P_h = B^T G^{-1} B with Euclidean Gram (uniform weights cancel)
    coefs = np.linalg.solve(gram, basis)
    q = -basis.T @ coefs
    q[np.diag_indices_from(q)] += 1.0
    return q


def trilinear_weights(
    grid: VelocityGrid, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Trilinear interpolation stencils on the velocity grid.

    Parameters
    ----------
    grid : VelocityGrid
    points : ndarray, shape (M, 3)
        Evaluation points.

    Returns
    -------
    idx : ndarray of int, shape (M, 8)
        Flat node indices of the stencil corners.
    w : ndarray, shape (M, 8)
        Convex interpolation weights; rows of points outside the closed
        cube are zeroed.
    inside : ndarray of bool, shape (M,)
        True where the point lies inside [-v_max, v_max]^3.
    """
    points = np.asarray(points, dtype=float)
    n = grid.n_per_axis
    dv = grid.delta_v
    t = (points + grid.v_max) / dv
    # tolerate round-off at the faces before declaring a point outside
    eps = 1e-12 * max(1.0, grid.v_max / dv)
    inside = np.all((t >= -eps) & (t <= (n - 1) + eps), axis=1)
    t = np.clip(t, 0.0, n - 1)
    i0 = np.minimum(t.astype(np.int64), n - 2)
    frac = t - i0

    wx = np.stack([1.0 - frac[:, 0], frac[:, 0]], axis=1)
    wy = np.stack([1.0 - frac[:, 1], frac[:, 1]], axis=1)
    wz = np.stack([1.0 - frac[:, 2], frac[:, 2]], axis=1)

    # corner order: (dx, dy, dz) in lexicographic order over {0,1}^3
    w = (
        wx[:, [0, 0, 0, 0, 1, 1, 1, 1]]
        * wy[:, [0, 0, 1, 1, 0, 0, 1, 1]]
        * wz[:, [0, 1, 0, 1, 0, 1, 0, 1]]
    )
    ix = i0[:, 0][:, None] + np.array([0, 0, 0, 0, 1, 1, 1, 1])
    iy = i0[:, 1][:, None] + np.array([0, 0, 1, 1, 0, 0, 1, 1])
    iz = i0[:, 2][:, None] + np.array([0, 1, 0, 1, 0, 1, 0, 1])
    idx = (ix * n + iy) * n + iz
    w = w * inside[:, None]
    return idx, w, inside
