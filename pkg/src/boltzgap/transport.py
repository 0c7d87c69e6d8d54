"""Spatial domains, the phase weight, backward exit times, closed-form
mild solutions of transport-absorption, and semi-Lagrangian advection.

Two domains are supported, both genuinely three-dimensional: a periodic
torus and an axis-aligned inflow box [0, side]^3. The box keeps exit
times in closed form per axis and makes the outward normals exact. The
phase weight W(x, v) = exp(-q (x.v)/<v>) turns transport into transport
plus the absorption rate q|v|^2/<v>, which is what the advection step
applies along characteristics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .velocity import VelocityGrid

__all__ = [
    "TORUS",
    "INFLOW_BOX",
    "SpatialDomain",
    "WeightSpec",
    "PhaseField",
    "weight_W",
    "phase_weight_array",
    "full_weight_array",
    "to_weighted",
    "to_plain",
    "weight_transport_identity_residual",
    "exit_time",
    "mild_transport_solution",
    "advect_step",
    "zero_inflow",
    "make_gaussian_inflow",
]

TORUS = "torus"
INFLOW_BOX = "inflow_box"


@dataclass(frozen=True)
class SpatialDomain:
    """Periodic torus or inflow box, cell-centered uniform lattice."""

    mode: str
    n_cells_per_axis: int
    side: float = 1.0
    inflow_data: Callable[[float, np.ndarray, np.ndarray], float] | None = None

    def __post_init__(self):
        if self.mode not in (TORUS, INFLOW_BOX):
            raise ValueError(f"unknown domain mode {self.mode!r}")
        if self.n_cells_per_axis < 2:
            raise ValueError("n_cells_per_axis must be >= 2")
        if not self.side > 0.0:
            raise ValueError("side must be positive")

    @property
    def delta_x(self) -> float:
        return self.side / self.n_cells_per_axis

    @property
    def n_cells(self) -> int:
        return self.n_cells_per_axis**3

    @property
    def cell_centers(self) -> np.ndarray:
        """(n_cells, 3) lattice of cell centers, x-major ordering."""
        m = self.n_cells_per_axis
        ax = (np.arange(m) + 0.5) * self.delta_x
        return (
            np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)
            .reshape(-1, 3)
        )

    def inflow(self, t: float, x: np.ndarray, v: np.ndarray) -> float:
        if self.inflow_data is None:
            return 0.0
        return float(self.inflow_data(t, x, v))


@dataclass(frozen=True)
class WeightSpec:
    """Phase weight strength q and velocity weight w = (1+rho^2|v|^2)^beta."""

    q: float = 1.0
    rho: float = 1.0
    beta: float = 1.5

    def __post_init__(self):
        if self.q < 0.0:
            raise ValueError("q must be >= 0")
        if not self.rho > 0.0:
            raise ValueError("rho must be positive")

    def velocity_weight(self, speed_sq: np.ndarray) -> np.ndarray:
        return (1.0 + self.rho**2 * np.asarray(speed_sq)) ** self.beta


@dataclass
class PhaseField:
    """Distribution values on (spatial cell, velocity node).

    weighted=False stores plain f; weighted=True stores h = w W f.
    """

    domain: SpatialDomain
    grid: VelocityGrid
    data: np.ndarray
    weighted: bool = False

    def __post_init__(self):
        expect = (self.domain.n_cells, self.grid.n_nodes)
        if self.data.shape != expect:
            raise ValueError(f"data has shape {self.data.shape}, expected {expect}")

    def copy(self) -> "PhaseField":
        return PhaseField(self.domain, self.grid, self.data.copy(), self.weighted)


def weight_W(spec: WeightSpec, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """W(x, v) = exp(-q (x.v)/<v>), broadcasting over leading axes."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    dots = np.sum(x * v, axis=-1)
    bracket = np.sqrt(1.0 + np.sum(v * v, axis=-1))
    return np.exp(-spec.q * dots / bracket)


def phase_weight_array(
    spec: WeightSpec, domain: SpatialDomain, grid: VelocityGrid
) -> np.ndarray:
    """W sampled on (cell, node), shape (n_cells, n_nodes)."""
    centers = domain.cell_centers
    dots = centers @ grid.nodes.T
    return np.exp(-spec.q * dots / grid.bracket()[None, :])


def full_weight_array(
    spec: WeightSpec, domain: SpatialDomain, grid: VelocityGrid
) -> np.ndarray:
    """w(v) W(x, v) on (cell, node); never vanishes."""
    return phase_weight_array(spec, domain, grid) * spec.velocity_weight(
        grid.speed_sq
    )[None, :]


def to_weighted(field: PhaseField, spec: WeightSpec) -> PhaseField:
    if field.weighted:
        return field
    ww = full_weight_array(spec, field.domain, field.grid)
    return PhaseField(field.domain, field.grid, field.data * ww, weighted=True)


def to_plain(field: PhaseField, spec: WeightSpec) -> PhaseField:
    if not field.weighted:
        return field
    ww = full_weight_array(spec, field.domain, field.grid)
    return PhaseField(field.domain, field.grid, field.data / ww, weighted=False)


def weight_transport_identity_residual(
    spec: WeightSpec, grid: VelocityGrid, domain: SpatialDomain
) -> float:
    """Max interior relative residual of -v.grad_x W = q|v|^2 <v>^{-1} W.

    The gradient is centered on the cell lattice (numpy.gradient), the max
    runs over interior cells and all velocity nodes. Exactly 0 when q = 0.
    """
    if spec.q == 0.0:
        return 0.0
    m = domain.n_cells_per_axis
    centers = domain.cell_centers.reshape(m, m, m, 3)
    worst = 0.0
    inner = (slice(1, -1),) * 3
    for j in range(grid.n_nodes):
        v = grid.nodes[j]
        br = float(grid.bracket()[j])
        w_cube = np.exp(-spec.q * (centers @ v) / br)
        grads = np.gradient(w_cube, domain.delta_x, edge_order=1)
        adv = -(v[0] * grads[0] + v[1] * grads[1] + v[2] * grads[2])
        target = spec.q * float(v @ v) / br * w_cube
        resid = np.abs(adv - target) / w_cube
        worst = max(worst, float(resid[inner].max()))
    return worst


def exit_time(
    domain: SpatialDomain, x: np.ndarray, v: np.ndarray
) -> tuple[float, np.ndarray | None]:
    """Backward exit time t_b = sup{tau : x - s v in closed box, s <= tau}.

    Returns (inf, None) when the backward ray never leaves (v = 0 or
    grazing along faces). The exiting coordinate of x_b is snapped to the
    face exactly.
    """
    if domain.mode != INFLOW_BOX:
        raise ValueError("exit_time requires an inflow box domain")
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    s = domain.side
    if np.any(x < 0.0) or np.any(x > s):
        raise ValueError(f"point {x} lies outside the closed box [0, {s}]^3")
    t_b = math.inf
    axis = -1
    for i in range(3):
        if v[i] > 0.0:
            t_i = x[i] / v[i]
        elif v[i] < 0.0:
            t_i = (x[i] - s) / v[i]
        else:
            continue
        if t_i < t_b:
            t_b = t_i
            axis = i
    if axis < 0:
        return math.inf, None
    x_b = x - t_b * v
    x_b[axis] = 0.0 if v[axis] > 0.0 else s
    np.clip(x_b, 0.0, s, out=x_b)
    return t_b, x_b


def _absorption_rate(spec: WeightSpec, v: np.ndarray, nu: float) -> float:
    vv = float(np.dot(v, v))
    return spec.q * vv / math.sqrt(1.0 + vv) + nu


def mild_transport_solution(
    domain: SpatialDomain,
    spec: WeightSpec,
    nu,
    t: float,
    x: np.ndarray,
    v: np.ndarray,
    f0: Callable[[np.ndarray, np.ndarray], float],
    g: Callable[[float, np.ndarray, np.ndarray], float] | None = None,
) -> float:
    """Closed-form value at (t, x, v) of
    d_t h + v.grad_x h + (q|v|^2 <v>^{-1} + nu) h = 0 with datum f0 and,
    on the box, inflow datum g for the evolved unknown itself (callers
    evolving h = wWf pass the already-weighted datum).

    nu is the absorption at this v: a scalar or a callable of v.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    nu_val = float(nu(v)) if callable(nu) else float(nu)
    rate = _absorption_rate(spec, v, nu_val)
    if domain.mode == TORUS:
        pos = np.mod(x - t * v, domain.side)
        return math.exp(-rate * t) * float(f0(pos, v))
    t_b, x_b = exit_time(domain, x, v)
    if t <= t_b:
        return math.exp(-rate * t) * float(f0(x - t * v, v))
    if g is None:
        g = domain.inflow_data
    if g is None:
        return 0.0
    return math.exp(-rate * t_b) * float(g(t - t_b, x_b, v))


def _interp_torus(cube_flat: np.ndarray, feet: np.ndarray, m: int, dx: float,
                  side: float) -> np.ndarray:
    u = np.mod(feet, side) / dx - 0.5
    i0 = np.floor(u).astype(np.int64)
    frac = u - i0
    vals = np.zeros(feet.shape[0])
    for corner in range(8):
        bits = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
        idx = np.zeros(feet.shape[0], dtype=np.int64)
        wgt = np.ones(feet.shape[0])
        for a in range(3):
            ia = np.mod(i0[:, a] + bits[a], m)
            idx = idx * m + ia
            wgt = wgt * (frac[:, a] if bits[a] else 1.0 - frac[:, a])
        vals += wgt * cube_flat[idx]
    return vals


def _interp_box(cube_flat: np.ndarray, feet: np.ndarray, m: int, dx: float,
                side: float, ghost=None) -> np.ndarray:
    """Trilinear read of feet inside the closed box.

    A foot inside the half-cell wall layer interpolates, along that axis,
    between the first cell center and the wall trace at the face. Such a
    foot always belongs to a velocity entering through that wall, so the
    trace is the inflow datum: ghost(point) supplies it (None means 0).
    Clamping to the cell-center hull instead would freeze slow nodes at
    the wall and fake a near-zero decay mode.
    """
    u = feet / dx - 0.5
    i0 = np.floor(u).astype(np.int64)
    frac = u - i0
    left = i0 < 0           # layer [0, dx/2)
    right = i0 > m - 2      # layer (side - dx/2, side]
    # remap layer fractions onto the half-width wall interval
    t = frac.copy()
    t[left] = 2.0 * frac[left] - 1.0
    t[right] = 2.0 * frac[right]
    iL = np.clip(i0, 0, m - 1)          # cell member of each axis pair
    iR = np.clip(i0 + 1, 0, m - 1)
    vals = np.zeros(feet.shape[0])
    for corner in range(8):
        bits = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
        idx = np.zeros(feet.shape[0], dtype=np.int64)
        wgt = np.ones(feet.shape[0])
        on_wall = np.zeros(feet.shape[0], dtype=bool)
        for a in range(3):
            pick_r = bool(bits[a])
            idx = idx * m + (iR[:, a] if pick_r else iL[:, a])
            wgt = wgt * (t[:, a] if pick_r else 1.0 - t[:, a])
            on_wall |= (right[:, a] if pick_r else left[:, a])
        cell = ~on_wall
        vals[cell] += wgt[cell] * cube_flat[idx[cell]]
        if ghost is not None:
            for r in np.flatnonzero(on_wall & (wgt != 0.0)):
                pt = np.empty(3)
                for a in range(3):
                    pick_r = bool(bits[a])
                    if pick_r and right[r, a]:
                        pt[a] = side
                    elif (not pick_r) and left[r, a]:
                        pt[a] = 0.0
                    else:
                        pt[a] = ((iR[r, a] if pick_r else iL[r, a]) + 0.5) * dx
                vals[r] += wgt[r] * float(ghost(pt))
    return vals


def advect_step(
    domain: SpatialDomain,
    spec: WeightSpec,
    grid: VelocityGrid,
    field: PhaseField,
    dt: float,
    t_now: float = 0.0,
    nu: np.ndarray | None = None,
    g: Callable[[float, np.ndarray, np.ndarray], float] | None = None,
) -> PhaseField:
    """One semi-Lagrangian step of transport + absorption over [t_now, t_now+dt].

    Feet x - dt v that stay inside read the field by trilinear interpolation
    (with the wall trace g closing the half-cell boundary layer) and pick up
    the factor exp(-(q|v|^2/<v> + nu) dt); feet that leave the box read the
    inflow datum at the exact exit point per the mild formula. The torus
    wraps. Convex interpolation weights and absorption <= 1 give the
    discrete maximum principle. No CFL restriction.

    nu is an optional per-node absorption (used when the collision loss is
    folded into transport); g overrides domain.inflow_data when given.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    m = domain.n_cells_per_axis
    dx = domain.delta_x
    side = domain.side
    centers = domain.cell_centers
    out = np.empty_like(field.data)
    if g is None:
        g = domain.inflow_data
    speed_sq = grid.speed_sq
    bracket = grid.bracket()
    for j in range(grid.n_nodes):
        v = grid.nodes[j]
        rate = spec.q * speed_sq[j] / bracket[j] + (0.0 if nu is None else nu[j])
        damp = math.exp(-rate * dt)
        feet = centers - dt * v
        col = field.data[:, j]
        if domain.mode == TORUS:
            out[:, j] = damp * _interp_torus(col, feet, m, dx, side)
            continue
        inside = np.all((feet >= 0.0) & (feet <= side), axis=1)
        vals = np.zeros(domain.n_cells)
        if np.any(inside):
            ghost = None
            if g is not None:
                ghost = lambda pt, _v=v: float(g(t_now, pt, _v))  # noqa: E731
            vals[inside] = damp * _interp_box(
                col, feet[inside], m, dx, side, ghost=ghost
            )
        if g is not None and not np.all(inside):
            for c in np.flatnonzero(~inside):
                t_b, x_b = exit_time(domain, centers[c], v)
                # foot outside guarantees t_b < dt (finite)
                vals[c] = math.exp(-rate * t_b) * float(
                    g(t_now + dt - t_b, x_b, v)
                )
        out[:, j] = vals
    return PhaseField(domain, grid, out, weighted=field.weighted)


def zero_inflow(t: float, x: np.ndarray, v: np.ndarray) -> float:
    return 0.0


def make_gaussian_inflow(
    amplitude: float, decay_rate: float = 0.5
) -> Callable[[float, np.ndarray, np.ndarray], float]:
    """Inflow datum amplitude * e^{-decay_rate t} * exp(-|v|^2/4)."""

    def g(t: float, x: np.ndarray, v: np.ndarray) -> float:
        vv = float(np.dot(v, v))
        return amplitude * math.exp(-decay_rate * t) * math.exp(-vv / 4.0)

    return g
