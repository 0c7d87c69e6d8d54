"""Phase-space operator assembly, eigenvalue reports, coercivity bound."""

import json
import os

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from boltzgap.collision import (
    CollisionKernel,
    CollisionOperator,
    get_operator,
    plain_l2_gap,
)
from boltzgap.spectral import (
    PERIODIC,
    ZERO_INFLOW_UPWIND,
    FalsificationError,
    FullOperator,
    assemble_full_operator,
    rayleigh_lower_bound,
    rightmost_eigenvalues,
    scaling_experiment,
    surrogate_rightmost,
    transport_matrix,
)
from boltzgap.transport import INFLOW_BOX, TORUS, SpatialDomain, WeightSpec
from boltzgap.velocity import build_grid


@pytest.fixture(scope="module")
def grid():
    return build_grid(5, 2.0)


@pytest.fixture(scope="module")
def op(grid):
    return get_operator(grid, CollisionKernel(gamma=-1.0, n_angle=8))


class TestAssembly:
    def test_torus_transport_annihilates_constants(self, grid):
        t = transport_matrix(SpatialDomain(TORUS, 3), grid)
        assert np.abs(t @ np.ones(t.shape[0])).max() == 0.0

    def test_closure_tags_and_dim(self, grid, op):
        a_t = assemble_full_operator(SpatialDomain(TORUS, 2), grid, op)
        a_b = assemble_full_operator(SpatialDomain(INFLOW_BOX, 2), grid, op)
        assert a_t.closure == PERIODIC
        assert a_b.closure == ZERO_INFLOW_UPWIND
        assert a_t.dim == 8 * grid.n_nodes == a_b.dim

    def test_torus_constant_in_x_block_is_collision_operator(self, grid, op):
        dom = SpatialDomain(TORUS, 3)
        a = assemble_full_operator(dom, grid, op)
        rng = np.random.default_rng(0)
        y = rng.standard_normal(grid.n_nodes)
        x = np.tile(y, dom.n_cells)
        err = np.abs(a.matrix @ x - np.tile(op.L @ y, dom.n_cells)).max()
        assert err < 1e-12

    def test_fourier_mode_matches_upwind_symbol(self, grid):
        # K = 0, nu = nu0: plane waves are exact eigenvectors and the
        # eigenvalue is the one-cell upwind symbol.
        nu0 = 0.7
        n = grid.n_nodes
        op_toy = CollisionOperator(
            nu=np.full(n, nu0), K=np.zeros((n, n)), L=-nu0 * np.eye(n),
            asymmetry=0.0,
        )
        dom = SpatialDomain(TORUS, 3)
        a = assemble_full_operator(dom, grid, op_toy).matrix
        dx = dom.delta_x
        kvec = np.array([1, 2, 0])
        wave = np.exp(2j * np.pi * dom.cell_centers @ kvec)
        for j in (0, 31, 62, n - 1):
            sym = -nu0
            for ax in range(3):
                ph = 2j * np.pi * kvec[ax] * dx
                va = grid.nodes[j, ax]
                sym -= max(va, 0.0) * (1 - np.exp(-ph)) / dx
                sym -= min(va, 0.0) * (np.exp(ph) - 1) / dx
            x = np.zeros(a.shape[0], dtype=complex)
            x[j::n] = wave
            assert np.abs(a @ x - sym * x).max() < 1e-12

    def test_centered_average_symmetric_part_is_collision_block(self, grid, op):
        # the averaged stencil is antisymmetric on the torus, so the
        # symmetrized matrix collapses to I (x) L; upwinding does not do this
        dom = SpatialDomain(TORUS, 3)
        a = assemble_full_operator(dom, grid, op, stencil="centered").matrix
        symm = 0.5 * (a + a.T)
        target = sp.kron(sp.eye(dom.n_cells), sp.csr_matrix(op.L))
        assert np.abs((symm - target).toarray()).max() < 1e-13

    def test_centered_stencil_rejected_on_box(self, grid):
        with pytest.raises(ValueError, match="periodic"):
            transport_matrix(SpatialDomain(INFLOW_BOX, 3), grid, stencil="centered")

    def test_unknown_stencil_rejected(self, grid):
        with pytest.raises(ValueError, match="stencil"):
            transport_matrix(SpatialDomain(TORUS, 3), grid, stencil="qsd")

    def test_grid_mismatch_rejected(self, grid):
        bad = CollisionOperator(
            nu=np.ones(7), K=np.zeros((7, 7)), L=-np.eye(7), asymmetry=0.0
        )
        with pytest.raises(ValueError, match="disagree"):
            assemble_full_operator(SpatialDomain(TORUS, 2), grid, bad)

    @given(m=st.integers(min_value=2, max_value=4))
    @settings(max_examples=8, deadline=None)
    def test_torus_row_sums_vanish_any_resolution(self, m):
        g = build_grid(3, 1.0)
        t = transport_matrix(SpatialDomain(TORUS, m), g)
        assert np.abs(t @ np.ones(t.shape[0])).max() == 0.0


class TestRightmost:
    def test_diagonal_operator(self):
        d = FullOperator(sp.diags(-np.arange(1.0, 31.0)), closure=PERIODIC)
        rep = rightmost_eigenvalues(d, 3)
        assert rep.eigenvalues[0] == pytest.approx(-1.0)
        assert rep.eigenvalues[2] == pytest.approx(-3.0)
        assert rep.gap_abscissa == pytest.approx(-1.0)

    @given(
        st.lists(
            st.floats(min_value=-50.0, max_value=-0.1), min_size=3, max_size=12
        )
    )
    @settings(max_examples=30, deadline=None)
    def test_diagonal_rightmost_is_max_entry(self, diag):
        d = FullOperator(sp.diags(np.asarray(diag)), closure=PERIODIC)
        rep = rightmost_eigenvalues(d, 1)
        assert rep.eigenvalues[0].real == pytest.approx(max(diag))

    def test_scaling_homogeneity(self, grid, op):
        a = assemble_full_operator(SpatialDomain(INFLOW_BOX, 2), grid, op)
        r1 = rightmost_eigenvalues(a, 2)
        r2 = rightmost_eigenvalues(
            FullOperator(2.0 * a.matrix, closure=a.closure), 2
        )
        assert r2.eigenvalues[0] == pytest.approx(2.0 * r1.eigenvalues[0])

    def test_torus_zero_eigenvalue_is_fivefold(self, grid, op):
        a = assemble_full_operator(SpatialDomain(TORUS, 2), grid, op)
        rep = rightmost_eigenvalues(a, 12)
        n_zero = sum(1 for z in rep.eigenvalues if abs(z) < 1e-8)
        assert n_zero == 5
        # the rightmost nonzero mode cannot decay faster than the plain
        # collision gap: the constant-in-x modes carry L's spectrum verbatim
        assert rep.gap_abscissa >= -plain_l2_gap(op, grid) - 1e-8
        assert rep.gap_abscissa < -0.5

    def test_box_kernel_trivial(self, grid, op):
        a = assemble_full_operator(SpatialDomain(INFLOW_BOX, 2), grid, op)
        vals = np.linalg.eigvals(a.matrix.toarray())
        assert np.abs(vals).min() > 0.5
        assert vals.real.max() < -0.5

    def test_bad_k_rejected(self):
        d = FullOperator(sp.diags(-np.arange(1.0, 9.0)), closure=PERIODIC)
        with pytest.raises(ValueError, match="k"):
            rightmost_eigenvalues(d, 0)

    def test_report_json_round_trip(self):
        d = FullOperator(sp.diags(-np.arange(1.0, 9.0)), closure=PERIODIC)
        rep = rightmost_eigenvalues(d, 2)
        blob = json.loads(rep.to_json())
        assert blob["eigenvalues"][0] == [-1.0, 0.0]
        assert blob["gap_abscissa"] == -1.0
        assert blob["parameters"]["closure"] == PERIODIC

    def test_memory_guard_aborts_before_factorizing(self, monkeypatch):
        import boltzgap.spectral as spectral_mod

        d = FullOperator(sp.diags(-np.arange(1.0, 31.0)), closure=PERIODIC)
        monkeypatch.setattr(spectral_mod, "_mem_available_bytes", lambda: 16)
        with pytest.raises(RuntimeError, match="shrink"):
            rightmost_eigenvalues(d, 2, dense_cap=4)

    def test_arnoldi_path_matches_frozen_value_and_is_deterministic(self):
        # dim 8000 exceeds the dense cap and exercises shift-invert
        g = build_grid(5, 4.0)
        o = get_operator(g, CollisionKernel(gamma=-1.0, n_angle=8))
        a = assemble_full_operator(SpatialDomain(INFLOW_BOX, 4), g, o)
        assert a.dim == 8000
        r1 = rightmost_eigenvalues(a, 4)
        r2 = rightmost_eigenvalues(a, 4)
        assert r1.eigenvalues == r2.eigenvalues
        assert r1.eigenvalues[0].real == pytest.approx(-0.13743, abs=2e-3)
        assert abs(r1.eigenvalues[0].imag) < 1e-8


class TestRayleigh:
    def test_torus_q0_degenerates_to_nu_over_bracket(self, grid, op):
        c0 = rayleigh_lower_bound(
            SpatialDomain(TORUS, 3), grid, op, WeightSpec(q=0.0), n_check=50
        )
        assert c0 == pytest.approx(float(np.min(op.nu / grid.bracket())), rel=1e-8)

    def test_box_q1_positive_with_details(self, grid, op):
        c0, c0_big, worst = rayleigh_lower_bound(
            SpatialDomain(INFLOW_BOX, 3), grid, op, WeightSpec(q=1.0),
            n_check=200, return_details=True,
        )
        assert c0 > 0.1
        assert c0_big >= 1.0
        assert 0 <= worst < grid.n_nodes

    def test_surrogate_spectrum_respects_bound(self, grid, op):
        dom = SpatialDomain(INFLOW_BOX, 3)
        c0 = rayleigh_lower_bound(dom, grid, op, WeightSpec(q=1.0), n_check=100)
        assert surrogate_rightmost(dom, grid, op) <= -c0 + 1e-8

    def test_negative_nu_is_falsified(self, tmp_path, monkeypatch):
        monkeypatch.setenv("TMPDIR", str(tmp_path))
        import tempfile

        tempfile.tempdir = None  # force re-read of TMPDIR
        g = build_grid(3, 1.0)
        n = g.n_nodes
        bad = CollisionOperator(
            nu=-np.ones(n), K=np.zeros((n, n)), L=np.eye(n), asymmetry=0.0
        )
        with pytest.raises(FalsificationError, match="offending vector"):
            rayleigh_lower_bound(
                SpatialDomain(TORUS, 2), g, bad, WeightSpec(q=0.0), n_check=5
            )
        tempfile.tempdir = None
        saved = list(tmp_path.glob("rayleigh_offender_*.npy"))
        assert len(saved) == 1 and np.load(saved[0]).shape == (8,)


class TestScalingExperiment:
    def test_columns_trends_and_csv(self, tmp_path):
        out = tmp_path / "sweep.csv"
        rows = scaling_experiment(
            v_maxes=(1.0, 2.0),
            delta_v=1.0,
            n_cells=2,
            k=6,
            out_csv=str(out),
            gamma_control=0.5,
        )
        assert [r["v_max"] for r in rows] == [1.0, 2.0]
        for key in ("gap_L", "gap_torus", "gap_box", "c0_rayleigh"):
            assert all(np.isfinite(r[key]) for r in rows)
        assert rows[1]["gap_L"] < rows[0]["gap_L"]
        assert all(r["c0_rayleigh"] > 0 for r in rows)
        assert all(r["gap_box"] < 0 for r in rows)
        assert all("gap_L_hard_control" in r for r in rows)
        text = out.read_text().splitlines()
        assert text[0].startswith("v_max,gap_L,gap_torus,gap_box,c0_rayleigh")
        assert len(text) == 3

    def test_nonpositive_control_rejected(self):
        with pytest.raises(ValueError, match="hard-potential"):
            scaling_experiment(
                v_maxes=(1.0,), delta_v=1.0, n_cells=2, gamma_control=-0.5
            )
