"""Cutoff collision operator assembly: collision frequency nu, compact part K,
L = -nu + K with symmetry and null-space corrections, the bilinear form Gamma,
and coercivity diagnostics.

Kernel: B(v - v_*, omega) = |v - v_*|^gamma * b_coeff * |cos theta| with the
singularity mollified as (|v - v_*|^2 + eps^2)^(gamma/2). Post-collision
velocities use the omega-representation
    v'   = v   - ((v - v_*) . omega) omega,
    v'_* = v_* + ((v - v_*) . omega) omega,
and off-grid values are gathered by Maxwellian-weighted trilinear
interpolation: a distribution F is evaluated as F(p) = mu(p) * tri[F/mu](p),
i.e. the smooth ratio F/mu is interpolated and the Gaussian envelope is kept
analytic. Trilinear interpolation reproduces constants, so the equilibrium
identities K mu^(1/2) = nu mu^(1/2), Gamma(mu^(1/2), mu^(1/2)) = 0, and
L f = Gamma(mu^(1/2), f) + Gamma(f, mu^(1/2)) hold exactly on the grid (up to
tail truncation, which only removes gain and keeps L dissipative). Points
whose stencil leaves the grid contribute zero.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg as sla

from .velocity import VelocityGrid, projector_Q, trilinear_weights

__all__ = [
    "CollisionKernel",
    "CollisionOperator",
    "collision_frequency",
    "assemble_K",
    "assemble_L",
    "coercivity_constant",
    "plain_l2_gap",
    "gamma_bilinear",
    "build_gamma_tensor",
    "nu2_constant",
    "operator_cache_key",
    "save_operator",
    "load_operator",
    "get_operator",
    "validate_operator",
]

_CACHE_MAGIC = b"BGOP1\n"


@dataclass(frozen=True)
class CollisionKernel:
    """Soft-potential cutoff kernel parameters.

    gamma in (-3, 0); hard exponents (0 < gamma <= 1) are accepted only with
    hard_control=True, reserved for the labeled diagnostics-only control run.
    epsilon_reg=None means the per-grid default dv/2.
    """

    gamma: float = -1.0
    b_coeff: float = 1.0
    n_angle: int = 8
    epsilon_reg: float | None = None
    hard_control: bool = False

    def __post_init__(self):
        if self.hard_control:
            if not (0.0 < self.gamma <= 1.0):
                raise ValueError(
                    f"hard control kernel requires gamma in (0, 1], got {self.gamma}"
                )
        elif not (-3.0 < self.gamma < 0.0):
            raise ValueError(
                f"gamma must lie in (-3, 0) for soft potentials, got {self.gamma}"
            )
        if self.b_coeff <= 0:
            raise ValueError(f"b_coeff must be positive, got {self.b_coeff}")
        if self.n_angle < 2:
            raise ValueError(f"n_angle must be >= 2, got {self.n_angle}")
        if self.epsilon_reg is not None and self.epsilon_reg < 0:
            raise ValueError(f"epsilon_reg must be >= 0, got {self.epsilon_reg}")

    def resolve_eps(self, grid: VelocityGrid) -> float:
        return grid.delta_v / 2.0 if self.epsilon_reg is None else self.epsilon_reg


@dataclass
class CollisionOperator:
    """Assembled nu vector plus dense K and corrected L on one grid."""

    nu: np.ndarray
    K: np.ndarray
    L: np.ndarray
    asymmetry: float  # ||K - K^T||_F / ||K||_F before symmetrization
    c1_estimate: float | None = None

    @property
    def n(self) -> int:
        return self.nu.shape[0]


def angular_quadrature(n_angle: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes/weights in cos(theta) and uniform azimuth angles.

    The rule is composite over [-1,0] and [0,1] when n_angle is even, because
    b(cos theta) = b_coeff |cos theta| has a kink at the equator; each panel
    then sees a smooth integrand.
    """
    if n_angle % 2 == 0:
        x, w = np.polynomial.legendre.leggauss(n_angle // 2)
        cosr = np.concatenate((0.5 * (x - 1.0), 0.5 * (x + 1.0)))
        glw = np.concatenate((0.5 * w, 0.5 * w))
    else:
        cosr, glw = np.polynomial.legendre.leggauss(n_angle)
    phi = 2.0 * np.pi * np.arange(n_angle) / n_angle
    return cosr, glw, phi


def _angular_mass(kernel: CollisionKernel) -> float:
    # discrete integral of b over the sphere; K's loss term must use the
    # same value so that L annihilates mu^(1/2) consistently
    cosr, glw, phi = angular_quadrature(kernel.n_angle)
    return float(np.sum(glw * kernel.b_coeff * np.abs(cosr)) * 2.0 * np.pi)


def _pair_geometry(vi: np.ndarray, nodes: np.ndarray):
    # d = v_i - v_*, plus an orthonormal frame (e1, e2, e3) with e3 || d
    d = vi[:, None, :] - nodes[None, :, :]
    dn = np.sqrt(np.einsum("rjk,rjk->rj", d, d))
    safe = np.where(dn > 0, dn, 1.0)
    e3 = d / safe[..., None]
    e3[dn == 0] = np.array([0.0, 0.0, 1.0])
    # least-aligned axis keeps the perpendicular well conditioned
    pick = np.argmin(np.abs(e3), axis=2)
    e1 = -e3 * np.take_along_axis(e3, pick[..., None], axis=2)
    np.put_along_axis(e1, pick[..., None], 1.0 + np.take_along_axis(e1, pick[..., None], axis=2), axis=2)
    e1 /= np.sqrt(np.einsum("rjk,rjk->rj", e1, e1))[..., None]
    e2 = np.cross(e3, e1)
    return d, dn, e3, e1, e2


def _row_chunks(n_rows: int, n_nodes: int, target: float = 2.5e5):
    step = max(1, int(target / max(1, n_nodes)))
    for lo in range(0, n_rows, step):
        yield lo, min(lo + step, n_rows)


def collision_frequency(grid: VelocityGrid, kernel: CollisionKernel) -> np.ndarray:
    """nu(v_j) = integral of B(v_j - v_*, omega) mu(v_*) over (v_*, omega)."""
    eps = kernel.resolve_eps(grid)
    amass = _angular_mass(kernel)
    nodes = grid.nodes
    mu_w = grid.mu * grid.quad_weights
    nu = np.empty(grid.n_nodes)
    for lo, hi in _row_chunks(grid.n_nodes, grid.n_nodes):
        d = nodes[lo:hi, None, :] - nodes[None, :, :]
        dn2 = np.einsum("rjk,rjk->rj", d, d) + eps * eps
        nu[lo:hi] = amass * (dn2 ** (kernel.gamma / 2.0)) @ mu_w
    return nu


def assemble_K(grid: VelocityGrid, kernel: CollisionKernel) -> np.ndarray:
    """Dense gain/loss matrix K by gather-form quadrature over (v_*, omega)."""
    n = grid.n_nodes
    if n > 6000:
        raise MemoryError(
            f"dense K would need {n}^2 entries; shrink the velocity grid"
        )
    eps = kernel.resolve_eps(grid)
    cosr, glw, phi = angular_quadrature(kernel.n_angle)
    sinr = np.sqrt(np.clip(1.0 - cosr**2, 0.0, None))
    dphi = 2.0 * np.pi / kernel.n_angle
    amass = _angular_mass(kernel)
    nodes = grid.nodes
    mu_half = grid.mu_half
    wq = grid.quad_weights
    K = np.zeros((n, n))

    for lo, hi in _row_chunks(n, n):
        vi = nodes[lo:hi]
        nr = hi - lo
        d, dn, e3, e1, e2 = _pair_geometry(vi, nodes)
        dn2m = dn * dn + eps * eps
        base_h = (dn2m ** (kernel.gamma / 2.0)) * (wq[None, :] * mu_half[None, :])
        # loss term: -mu^(1/2)(v_*) mu^(1/2)(v_i) f(v_*), angular part summed
        Kblk = -(amass * base_h) * mu_half[lo:hi, None]
        # gain prefactor per pair: B~ dv^3 mu(v_*) mu^(1/2)(v_i). With the
        # deposit weights w_a / tri[mu^(1/2)](v') this realizes
        # f(v') = mu^(1/2)(v') tri[f](v') / tri[mu^(1/2)](v'): the Gaussian
        # reduction mu^(1/2)(v')mu^(1/2)(v'_*) = mu^(1/2)(v)mu^(1/2)(v_*) is
        # exact and f = mu^(1/2) is reproduced exactly, so K mu^(1/2) equals
        # nu mu^(1/2) up to tail truncation alone.
        pre = ((base_h * mu_half[None, :]) * mu_half[lo:hi, None]).ravel()
        flatsz = nr * n
        rows = np.repeat(np.arange(nr), n)
        for k in range(kernel.n_angle):
            wang = kernel.b_coeff * abs(cosr[k]) * glw[k] * dphi
            if wang == 0.0:
                continue
            s = dn * cosr[k]  # (v_i - v_*) . omega, exact in this frame
            for l in range(kernel.n_angle):
                omega = (
                    cosr[k] * e3
                    + sinr[k] * (np.cos(phi[l]) * e1 + np.sin(phi[l]) * e2)
                )
                vp = (vi[:, None, :] - s[..., None] * omega).reshape(-1, 3)
                vps = (nodes[None, :, :] + s[..., None] * omega).reshape(-1, 3)
                idx_p, w_p, _ = trilinear_weights(grid, vp)
                idx_s, w_s, _ = trilinear_weights(grid, vps)
                trimh_p = np.sum(w_p * mu_half[idx_p], axis=1)
                trimh_s = np.sum(w_s * mu_half[idx_s], axis=1)
                inv_p = np.divide(
                    wang * pre, trimh_p, out=np.zeros_like(pre), where=trimh_p > 0
                )
                inv_s = np.divide(
                    wang * pre, trimh_s, out=np.zeros_like(pre), where=trimh_s > 0
                )
                # gain 1: deposit onto the stencil of v'
                Kblk.ravel()[:] += np.bincount(
                    (rows[:, None] * n + idx_p).ravel(),
                    weights=(inv_p[:, None] * w_p).ravel(),
                    minlength=flatsz,
                )
                # gain 2: deposit onto the stencil of v'_*
                Kblk.ravel()[:] += np.bincount(
                    (rows[:, None] * n + idx_s).ravel(),
                    weights=(inv_s[:, None] * w_s).ravel(),
                    minlength=flatsz,
                )
        K[lo:hi] = Kblk
    return K


def assemble_L(
    nu: np.ndarray, K: np.ndarray, grid: VelocityGrid
) -> CollisionOperator:
    """L = Q ((-diag(nu) + K)_sym) Q: symmetrize, then project out the
    five invariants so the kernel is exact."""
    l_raw = K - np.diag(nu)
    asym = float(np.linalg.norm(K - K.T) / max(np.linalg.norm(K), 1e-300))
    l_sym = 0.5 * (l_raw + l_raw.T)
    q = projector_Q(grid)
    L = q @ l_sym @ q
    L = 0.5 * (L + L.T)
    return CollisionOperator(nu=nu, K=K, L=L, asymmetry=asym)


def microscopic_basis(grid: VelocityGrid) -> np.ndarray:
    """Orthonormal (Euclidean) basis of the invariant-orthogonal complement."""
    return sla.null_space(grid.invariants_basis)


def coercivity_constant(op: CollisionOperator, grid: VelocityGrid) -> float:
    """Smallest eigenvalue of the pencil (-L, diag(nu)) on range(Q)."""
    u = microscopic_basis(grid)
    a = u.T @ (-op.L) @ u
    b = u.T @ (op.nu[:, None] * u)
    a = 0.5 * (a + a.T)
    b = 0.5 * (b + b.T)
    try:
        vals = sla.eigh(a, b, subset_by_index=(0, 0), eigvals_only=True)
    except sla.LinAlgError as err:
        raise RuntimeError(f"coercivity pencil eigensolve failed: {err}") from err
    c1 = float(vals[0])
    op.c1_estimate = c1
    return c1


def plain_l2_gap(op: CollisionOperator, grid: VelocityGrid) -> float:
    """min (g, -Lg)/(g, g) over the invariant-orthogonal complement."""
    u = microscopic_basis(grid)
    a = u.T @ (-op.L) @ u
    a = 0.5 * (a + a.T)
    return float(sla.eigh(a, eigvals_only=True, subset_by_index=(0, 0))[0])


def nu2_constant(op: CollisionOperator, grid: VelocityGrid) -> float:
    """Global C in ||nu^(-1/2) K g|| <= C ||nu^(1/2) g||."""
    d = 1.0 / np.sqrt(op.nu)
    return float(np.linalg.norm(d[:, None] * op.K * d[None, :], 2))


def gamma_bilinear(
    grid: VelocityGrid,
    kernel: CollisionKernel,
    f: np.ndarray,
    g: np.ndarray,
) -> np.ndarray:
    """Gamma(f, g) by direct quadrature with the assemble_K rule.

    Uses the same quadrature, stencils, and Maxwellian-weighted interpolation
    as assemble_K, evaluated against two argument vectors instead of being
    assembled into a matrix. By construction
    L f = Gamma(mu^(1/2), f) + Gamma(f, mu^(1/2)) holds discretely and
    Gamma(mu^(1/2), mu^(1/2)) vanishes up to tail truncation.
    """
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    n = grid.n_nodes
    eps = kernel.resolve_eps(grid)
    cosr, glw, phi = angular_quadrature(kernel.n_angle)
    sinr = np.sqrt(np.clip(1.0 - cosr**2, 0.0, None))
    dphi = 2.0 * np.pi / kernel.n_angle
    amass = _angular_mass(kernel)
    nodes = grid.nodes
    mu_half = grid.mu_half
    wq = grid.quad_weights
    out = np.zeros(n)

    for lo, hi in _row_chunks(n, n):
        vi = nodes[lo:hi]
        d, dn, e3, e1, e2 = _pair_geometry(vi, nodes)
        dn2m = dn * dn + eps * eps
        base_h = (dn2m ** (kernel.gamma / 2.0)) * (wq * mu_half)[None, :]
        pre = ((base_h * mu_half[None, :]) * mu_half[lo:hi, None]).ravel()
        # loss: f(v_i) * sum_j B~ dv^3 mu^(1/2)(v_j) g(v_j)
        acc = -f[lo:hi] * ((amass * base_h) @ g)
        for k in range(kernel.n_angle):
            wang = kernel.b_coeff * abs(cosr[k]) * glw[k] * dphi
            if wang == 0.0:
                continue
            s = dn * cosr[k]
            for l in range(kernel.n_angle):
                omega = (
                    cosr[k] * e3
                    + sinr[k] * (np.cos(phi[l]) * e1 + np.sin(phi[l]) * e2)
                )
                vp = (vi[:, None, :] - s[..., None] * omega).reshape(-1, 3)
                vps = (nodes[None, :, :] + s[..., None] * omega).reshape(-1, 3)
                idx_p, w_p, _ = trilinear_weights(grid, vp)
                idx_s, w_s, _ = trilinear_weights(grid, vps)
                trimh_p = np.sum(w_p * mu_half[idx_p], axis=1)
                trimh_s = np.sum(w_s * mu_half[idx_s], axis=1)
                denom = trimh_p * trimh_s
                coef = np.divide(
                    wang * pre, denom, out=np.zeros_like(pre), where=denom > 0
                )
                fvals = np.sum(f[idx_p] * w_p, axis=1)
                gvals = np.sum(g[idx_s] * w_s, axis=1)
                acc += (coef * fvals * gvals).reshape(hi - lo, n).sum(axis=1)
        out[lo:hi] = acc
    return out


def build_gamma_tensor(grid: VelocityGrid, kernel: CollisionKernel) -> np.ndarray:
    """Dense tensor T with Gamma(f,g)[i] = sum_ab T[i,a,b] f[a] g[b].

    Matches gamma_bilinear's quadrature exactly; intended for small grids
    (N^3 doubles) inside the nonlinear iteration.
    """
    n = grid.n_nodes
    if n**3 * 8 > 2**31:
        raise MemoryError(f"gamma tensor for N={n} would exceed 2 GiB")
    eps = kernel.resolve_eps(grid)
    cosr, glw, phi = angular_quadrature(kernel.n_angle)
    sinr = np.sqrt(np.clip(1.0 - cosr**2, 0.0, None))
    dphi = 2.0 * np.pi / kernel.n_angle
    amass = _angular_mass(kernel)
    nodes = grid.nodes
    mu_half = grid.mu_half
    wq = grid.quad_weights
    T = np.zeros(n * n * n)

    # small chunks: the stencil-pair outer product is 64 doubles per point
    for lo, hi in _row_chunks(n, n, target=6e4):
        vi = nodes[lo:hi]
        nr = hi - lo
        d, dn, e3, e1, e2 = _pair_geometry(vi, nodes)
        dn2m = dn * dn + eps * eps
        base_h = (dn2m ** (kernel.gamma / 2.0)) * (wq[None, :] * mu_half[None, :])
        pre = ((base_h * mu_half[None, :]) * mu_half[lo:hi, None]).ravel()
        rows = np.repeat(np.arange(lo, hi), n)
        cols = np.tile(np.arange(n), nr)
        # loss: -amass * B~ dv^3 mu^(1/2)(v_j) f(v_i) g(v_j) lands at T[i,i,j]
        np.add.at(
            T,
            (rows * n + rows) * n + cols,
            -(amass * base_h).ravel(),
        )
        for k in range(kernel.n_angle):
            wang = kernel.b_coeff * abs(cosr[k]) * glw[k] * dphi
            if wang == 0.0:
                continue
            s = dn * cosr[k]
            for l in range(kernel.n_angle):
                omega = (
                    cosr[k] * e3
                    + sinr[k] * (np.cos(phi[l]) * e1 + np.sin(phi[l]) * e2)
                )
                vp = (vi[:, None, :] - s[..., None] * omega).reshape(-1, 3)
                vps = (nodes[None, :, :] + s[..., None] * omega).reshape(-1, 3)
                idx_p, w_p, _ = trilinear_weights(grid, vp)
                idx_s, w_s, _ = trilinear_weights(grid, vps)
                trimh_p = np.sum(w_p * mu_half[idx_p], axis=1)
                trimh_s = np.sum(w_s * mu_half[idx_s], axis=1)
                denom = trimh_p * trimh_s
                coef = np.divide(
                    wang * pre, denom, out=np.zeros_like(pre), where=denom > 0
                )
                # outer product of the two stencils per quadrature point
                wpair = (coef[:, None, None] * w_p[:, :, None]) * w_s[:, None, :]
                ipair = (
                    (rows[:, None, None] * n + idx_p[:, :, None]) * n
                    + idx_s[:, None, :]
                )
                T += np.bincount(
                    ipair.ravel(), weights=wpair.ravel(), minlength=T.size
                )
    return T.reshape(n, n, n)


def validate_operator(op: CollisionOperator, grid: VelocityGrid) -> dict:
    """Structure metrics for the assembled operator (used by selftest)."""
    L = op.L
    norm = np.linalg.norm(L)
    sym_rel = float(np.linalg.norm(L - L.T) / max(norm, 1e-300))
    inv_resid = float(
        np.max(np.abs(L @ grid.invariants_basis.T)) / max(norm, 1e-300)
    )
    evals = np.linalg.eigvalsh(0.5 * (L + L.T))
    zero_mult = int(np.sum(np.abs(evals) <= 1e-10 * max(norm, 1e-300)))
    return {
        "sym_rel": sym_rel,
        "invariant_resid_rel": inv_resid,
        "max_eig": float(evals[-1]),
        "min_eig": float(evals[0]),
        "zero_multiplicity": zero_mult,
        "nu_min": float(op.nu.min()),
        "nu_max": float(op.nu.max()),
        "asymmetry_raw": op.asymmetry,
        "nsd": bool(evals[-1] <= 1e-10 * max(norm, 1e-300)),
    }


# ---------------------------------------------------------------------------
# binary cache: header with parameters + row-major float64 payload


def _cache_params(grid: VelocityGrid, kernel: CollisionKernel) -> dict:
    return {
        "schema": 1,
        "n_per_axis": grid.n_per_axis,
        "v_max": grid.v_max,
        "gamma": kernel.gamma,
        "b_coeff": kernel.b_coeff,
        "n_angle": kernel.n_angle,
        "epsilon_reg": kernel.resolve_eps(grid),
        "n_nodes": grid.n_nodes,
    }


def operator_cache_key(grid: VelocityGrid, kernel: CollisionKernel) -> str:
    blob = json.dumps(_cache_params(grid, kernel), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_operator(
    path: str | Path, grid: VelocityGrid, kernel: CollisionKernel, op: CollisionOperator
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(_cache_params(grid, kernel), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<Qd", len(header), op.asymmetry))
        fh.write(header)
        fh.write(np.ascontiguousarray(op.nu, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(op.K, dtype="<f8").tobytes())


def load_operator(
    path: str | Path, grid: VelocityGrid, kernel: CollisionKernel
) -> CollisionOperator:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(_CACHE_MAGIC))
        if magic != _CACHE_MAGIC:
            raise ValueError(f"{path} is not an operator cache file")
        hlen, asym = struct.unpack("<Qd", fh.read(16))
        header = json.loads(fh.read(hlen).decode())
        if header != _cache_params(grid, kernel):
            raise ValueError(
                f"cache parameter mismatch in {path}: {header} vs "
                f"{_cache_params(grid, kernel)}"
            )
        n = header["n_nodes"]
        nu = np.frombuffer(fh.read(8 * n), dtype="<f8").copy()
        K = (
            np.frombuffer(fh.read(8 * n * n), dtype="<f8")
            .reshape(n, n)
            .copy()
        )
    op = assemble_L(nu, K, grid)
    # restore the measured pre-symmetrization asymmetry
    op.asymmetry = asym
    return op


_memo: dict[str, CollisionOperator] = {}


def get_operator(
    grid: VelocityGrid,
    kernel: CollisionKernel,
    cache_dir: str | Path | None = None,
    bypass_cache: bool = False,
) -> CollisionOperator:
    """Assemble or load the collision operator, consulting the binary cache."""
    key = operator_cache_key(grid, kernel)
    path = Path(cache_dir) / f"op_{key}.bin" if cache_dir is not None else None
    if not bypass_cache and key in _memo:
        op = _memo[key]
        if path is not None and not path.exists():
            save_operator(path, grid, kernel, op)
        return op
    if path is not None and path.exists() and not bypass_cache:
        op = load_operator(path, grid, kernel)
    else:
        nu = collision_frequency(grid, kernel)
        K = assemble_K(grid, kernel)
        op = assemble_L(nu, K, grid)
        if path is not None:
            save_operator(path, grid, kernel, op)
    if not bypass_cache:
        _memo[key] = op
    return op
