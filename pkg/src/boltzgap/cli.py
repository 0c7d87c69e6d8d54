"""Command-line driver: config loading, experiment orchestration, and
output management.

Every subcommand reads one INI-style config (all keys optional, defaults
below), runs its pipeline under the output directory, and writes a
manifest.json with the full resolved config, content hashes of every
artifact, and wall-clock timings. Exit codes separate the failure classes:

    0  run completed, no claimed inequality violated
    2  config error (unreadable file, invalid value, smallness violation)
    3  numerical abort (divergence, non-finite state, eigensolver failure)
    4  falsification event: a claimed inequality failed its tolerance

Falsification events are first-class outcomes, not crashes: the manifest is
still written, with status "falsified" and the list of findings.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .collision import (
    CollisionKernel,
    coercivity_constant,
    gamma_bilinear,
    get_operator,
    plain_l2_gap,
    validate_operator,
)
from .evolution import (
    evolve_linear,
    fit_decay_rate,
    macro_fields,
    trace_to_csv,
)
from .landau import (
    assemble_sigma,
    dissipation_surrogate,
    eig_profile,
    landau_dissipation_norm,
)
from .nonlinear import (
    envelope_to_csv,
    linf_decay_check,
    picard_solve,
    positivity_check,
    weighted_rhs,
)
from .spectral import (
    FalsificationError,
    assemble_full_operator,
    rayleigh_lower_bound,
    rightmost_eigenvalues,
    scaling_experiment,
)
from .transport import (
    INFLOW_BOX,
    TORUS,
    PhaseField,
    SpatialDomain,
    WeightSpec,
    advect_step,
    make_gaussian_inflow,
    to_plain,
    weight_W,
)
from .velocity import build_grid, integrate, project_P, projector_Q

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_FALSIFIED = 4

SUBCOMMANDS = (
    "assemble", "spectrum", "sweep", "evolve", "nonlinear", "landau",
    "selftest",
)


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


@dataclass(frozen=True)
class RunConfig:
    # [grid]
    n_per_axis: int = 9
    v_max: float = 6.0
    # [kernel]
    gamma: float = -1.0
    b_coeff: float = 1.0
    n_angle: int = 8
    epsilon_reg: float | None = None
    hard_control: bool = False
    # [domain]
    mode: str = INFLOW_BOX
    n_cells: int = 4
    side: float = 1.0
    # [weights]
    q: float = 1.0
    rho: float = 1.0
    beta: float = 1.5
    kappa: float = 0.05
    c0_start: float = 1.0
    # [time]
    dt: float = 0.05
    t_end: float = 4.0
    snapshot_every: int = 0
    # [spectral]
    k: int = 8
    dense_cap: int = 6000
    sweep_v_max: tuple[float, ...] = (4.0, 6.0, 8.0)
    sweep_delta_v: float = 2.0
    sweep_n_cells: int = 4
    gamma_control: float | None = None
    # [evolve]
    initial: str = "smooth_bump"
    amplitude: float = 1e-2
    inflow: str = "none"
    inflow_amplitude: float = 0.0
    inflow_decay: float = 0.5
    fit_window: tuple[float, float] | None = None
    # [nonlinear]
    delta: float | None = None
    lambda0: float = 0.5
    tol_picard: float = 1e-10
    max_iters: int = 12
    # [landau]
    gamma_l: float = -2.5
    # [output]
    directory: str = "out"
    seed: int = 0

    def validate(self, subcommand: str) -> None:
        if self.n_per_axis < 3 or self.n_per_axis % 2 == 0:
            raise ConfigError("grid.n_per_axis must be odd and >= 3")
        if self.v_max <= 0.0:
            raise ConfigError("grid.v_max must be positive")
        if not self.hard_control and not -3.0 < self.gamma < 0.0:
            raise ConfigError(
                "kernel.gamma must lie in (-3, 0); set kernel.hard_control "
                "= true for the labeled hard-potential control"
            )
        if self.n_angle < 2 or self.n_angle % 2 == 1:
            raise ConfigError("kernel.n_angle must be even and >= 2")
        if self.mode not in (TORUS, INFLOW_BOX):
            raise ConfigError(f"domain.mode must be {TORUS} or {INFLOW_BOX}")
        if self.n_cells < 1 or self.side <= 0.0:
            raise ConfigError("domain.n_cells >= 1 and domain.side > 0 required")
        if self.dt <= 0.0 or self.t_end < self.dt:
            raise ConfigError("time: need 0 < dt <= t_end")
        if self.kappa <= 0.0 or self.c0_start <= 0.0:
            raise ConfigError("weights.kappa and weights.c0_start must be positive")
        if subcommand == "nonlinear" and self.beta <= 1.0:
            raise ConfigError("weights.beta > 1 required for the nonlinear pipeline")
        if subcommand == "nonlinear" and self.mode != INFLOW_BOX:
            raise ConfigError("nonlinear pipeline requires domain.mode = inflow_box")
        if self.initial not in ("smooth_bump", "random_micro", "equilibrium"):
            raise ConfigError("evolve.initial must be smooth_bump, random_micro, "
                              "or equilibrium")
        if self.inflow not in ("none", "gaussian"):
            raise ConfigError("evolve.inflow must be none or gaussian")
        if self.inflow == "gaussian" and self.mode != INFLOW_BOX:
            raise ConfigError("gaussian inflow requires domain.mode = inflow_box")
        if not -3.0 <= self.gamma_l < -2.0:
            raise ConfigError("landau.gamma_l must lie in [-3, -2)")
        if self.k < 1 or self.dense_cap < 1:
            raise ConfigError("spectral.k and spectral.dense_cap must be >= 1")
        if len(self.sweep_v_max) < 1 or self.sweep_delta_v <= 0.0:
            raise ConfigError("spectral sweep needs v_max values and delta_v > 0")
        if self.max_iters < 1 or self.tol_picard <= 0.0 or self.lambda0 <= 0.0:
            raise ConfigError("nonlinear: max_iters >= 1, tol_picard > 0, "
                              "lambda0 > 0 required")


_SECTIONS = {
    "grid": ("n_per_axis", "v_max"),
    "kernel": ("gamma", "b_coeff", "n_angle", "epsilon_reg", "hard_control"),
    "domain": ("mode", "n_cells", "side"),
    "weights": ("q", "rho", "beta", "kappa", "c0_start"),
    "time": ("dt", "t_end", "snapshot_every"),
    "spectral": ("k", "dense_cap", "sweep_v_max", "sweep_delta_v",
                 "sweep_n_cells", "gamma_control"),
    "evolve": ("initial", "amplitude", "inflow", "inflow_amplitude",
               "inflow_decay", "fit_window"),
    "nonlinear": ("delta", "lambda0", "tol_picard", "max_iters"),
    "landau": ("gamma_l",),
    "output": ("directory", "seed"),
}

_INT_KEYS = {"n_per_axis", "n_angle", "n_cells", "snapshot_every", "k",
             "dense_cap", "sweep_n_cells", "max_iters", "seed"}
_BOOL_KEYS = {"hard_control"}
_STR_KEYS = {"mode", "initial", "inflow", "directory"}
_OPTIONAL_KEYS = {"epsilon_reg", "gamma_control", "delta", "fit_window"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _OPTIONAL_KEYS and raw.lower() in ("", "none", "default"):
        return None
    if key in _BOOL_KEYS:
        if raw.lower() in ("true", "yes", "1", "on"):
            return True
        if raw.lower() in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if key in _STR_KEYS:
        return raw
    try:
        if key == "sweep_v_max":
            return tuple(float(tok) for tok in raw.replace(",", " ").split())
        if key == "fit_window":
            lo, hi = (float(tok) for tok in raw.replace(",", " ").split())
            return (lo, hi)
        if key in _INT_KEYS:
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc


def load_config(path: str | None) -> RunConfig:
    """RunConfig from an INI file; missing keys keep their defaults."""
    if path is None:
        return RunConfig()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[key] = _parse_value(key, parser[section][key])
    return RunConfig(**values)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Runner:
    """Holds one run's output directory, timings, and falsification list."""

    def __init__(self, cfg: RunConfig, subcommand: str, threads: int | None,
                 no_cache: bool):
        self.cfg = cfg
        self.subcommand = subcommand
        self.threads = threads
        self.no_cache = no_cache
        self.out_dir = Path(cfg.directory)
        self.cache_dir = self.out_dir / "cache"
        self.timings: dict[str, float] = {}
        self.falsifications: list[str] = []
        self.outputs: list[Path] = []
        self.report: dict = {}

    def operator(self, grid, kernel):
        return get_operator(grid, kernel, cache_dir=self.cache_dir,
                            bypass_cache=self.no_cache)

    def falsify(self, finding: str) -> None:
        self.falsifications.append(finding)

    def timed(self, stage: str, fn, *args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        self.timings[stage] = round(time.perf_counter() - t0, 6)
        return out

    def write_json(self, name: str, payload) -> None:
        path = self.out_dir / name
        with open(path, "w") as fh:
            if isinstance(payload, str):
                fh.write(payload)
            else:
                json.dump(payload, fh, indent=2, default=float)
            fh.write("\n")
        self.outputs.append(path)

    def register(self, path: Path) -> None:
        self.outputs.append(path)

    def manifest(self, status: str) -> None:
        cache_files = sorted(self.cache_dir.glob("*.bin")) \
            if self.cache_dir.is_dir() else []
        blob = {
            "tool": "boltzgap",
            "version": __version__,
            "subcommand": self.subcommand,
            "config": asdict(self.cfg),
            "seed": self.cfg.seed,
            "threads": self.threads,
            "status": status,
            "falsifications": self.falsifications,
            "outputs": {
                str(p.relative_to(self.out_dir)): _sha256(p)
                for p in (*self.outputs, *cache_files)
            },
            "timings_s": self.timings,
        }
        with open(self.out_dir / "manifest.json", "w") as fh:
            json.dump(blob, fh, indent=2, default=_json_default)
            fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    return str(obj)


def _build_common(cfg: RunConfig):
    grid = build_grid(cfg.n_per_axis, cfg.v_max)
    kernel = CollisionKernel(
        gamma=cfg.gamma, b_coeff=cfg.b_coeff, n_angle=cfg.n_angle,
        epsilon_reg=cfg.epsilon_reg, hard_control=cfg.hard_control,
    )
    domain = SpatialDomain(cfg.mode, cfg.n_cells, side=cfg.side)
    spec = WeightSpec(q=cfg.q, rho=cfg.rho, beta=cfg.beta)
    return grid, kernel, domain, spec


def _initial_field(cfg: RunConfig, domain, grid, rng) -> PhaseField:
    if cfg.initial == "equilibrium":
        data = np.tile(grid.mu_half, (domain.n_cells, 1))
    elif cfg.initial == "smooth_bump":
        bump = np.prod(
            np.sin(math.pi * domain.cell_centers / domain.side), axis=1
        )
        if domain.mode == TORUS:
            bump = np.cos(
                2.0 * math.pi * domain.cell_centers[:, 0] / domain.side
            )
        data = cfg.amplitude * bump[:, None] * grid.mu_half[None, :]
    else:  # random_micro
        raw = rng.standard_normal((domain.n_cells, grid.n_nodes))
        micro = raw @ projector_Q(grid).T
        data = cfg.amplitude * micro / max(np.abs(micro).max(), 1e-300)
    return PhaseField(domain, grid, data)


def _inflow_fn(cfg: RunConfig):
    if cfg.inflow == "none" or cfg.inflow_amplitude == 0.0:
        return None
    return make_gaussian_inflow(cfg.inflow_amplitude, cfg.inflow_decay)


def run_assemble(run: Runner) -> None:
    cfg = run.cfg
    grid, kernel, _, _ = _build_common(cfg)
    op = run.timed("assemble", run.operator, grid, kernel)
    checks = run.timed("validate", validate_operator, op, grid)
    checks["c1_coercivity"] = run.timed("coercivity", coercivity_constant,
                                        op, grid)
    checks["plain_l2_gap"] = plain_l2_gap(op, grid)
    if not checks["nsd"]:
        run.falsify("assembled L is not negative semidefinite")
    if checks["zero_multiplicity"] != 5:
        run.falsify(
            f"kernel of L has dimension {checks['zero_multiplicity']}, not 5"
        )
    if checks["c1_coercivity"] <= 0.0:
        run.falsify("coercivity constant c1 <= 0")
    run.report = checks
    run.write_json("operator_report.json", checks)


def run_spectrum(run: Runner) -> None:
    cfg = run.cfg
    grid, kernel, domain, spec = _build_common(cfg)
    op = run.timed("assemble", run.operator, grid, kernel)
    fullop = run.timed("full_operator", assemble_full_operator,
                       domain, grid, op)
    rep = run.timed("eigenvalues", rightmost_eigenvalues, fullop, cfg.k,
                    dense_cap=cfg.dense_cap)
    if domain.mode == INFLOW_BOX:
        c0 = run.timed(
            "rayleigh", rayleigh_lower_bound, domain, grid, op, spec,
            seed=cfg.seed, c0_start=cfg.c0_start,
        )
        rep.c0_rayleigh = c0
        if rep.gap_abscissa >= 0.0:
            run.falsify(
                f"inflow box rightmost abscissa {rep.gap_abscissa:.3e} >= 0: "
                "no spectral gap"
            )
    elif rep.gap_abscissa > 1e-8:
        run.falsify(
            f"torus rightmost nonzero abscissa {rep.gap_abscissa:.3e} > 0"
        )
    run.report = json.loads(rep.to_json())
    run.write_json("spectrum.json", rep.to_json())


def run_sweep(run: Runner) -> None:
    cfg = run.cfg
    out_csv = run.out_dir / "sweep.csv"
    rows = run.timed(
        "sweep", scaling_experiment,
        v_maxes=cfg.sweep_v_max, delta_v=cfg.sweep_delta_v, gamma=cfg.gamma,
        n_angle=cfg.n_angle, n_cells=cfg.sweep_n_cells, q=cfg.q, k=cfg.k,
        dense_cap=cfg.dense_cap, out_csv=str(out_csv),
        cache_dir=None if run.no_cache else str(run.cache_dir),
        gamma_control=cfg.gamma_control,
        progress=lambda msg: print(msg, flush=True),
    )
    run.register(out_csv)
    for row in rows:
        if row["gap_box"] >= 0.0:
            run.falsify(
                f"v_max={row['v_max']}: inflow box rightmost abscissa "
                f"{row['gap_box']:.3e} >= 0"
            )
        if row["c0_rayleigh"] <= 0.0:
            run.falsify(f"v_max={row['v_max']}: c0_rayleigh <= 0")
    run.report = {"rows": rows}
    run.write_json("sweep_report.json", {"rows": rows})


def run_evolve(run: Runner) -> None:
    cfg = run.cfg
    grid, kernel, domain, spec = _build_common(cfg)
    op = run.timed("assemble", run.operator, grid, kernel)
    rng = np.random.default_rng(cfg.seed)
    f0 = _initial_field(cfg, domain, grid, rng)
    g = _inflow_fn(cfg)
    keep = cfg.snapshot_every > 0
    _, trace = run.timed(
        "evolve", evolve_linear, domain, grid, op, spec, f0, g,
        cfg.dt, cfg.t_end, kappa=cfg.kappa, keep_snapshots=keep,
    )
    trace_path = run.out_dir / "trace.csv"
    trace_to_csv(trace, str(trace_path))
    run.register(trace_path)
    if keep:
        for idx in range(0, len(trace.snapshots), cfg.snapshot_every):
            snap = run.out_dir / f"snapshot_{idx:05d}.csv"
            np.savetxt(snap, trace.snapshots[idx], delimiter=",")
            run.register(snap)
    energy = np.asarray(trace.e_total)
    report: dict = {
        "n_steps": len(trace.times) - 1,
        "kappa": cfg.kappa,
        "initial": cfg.initial,
        "energy_first": float(energy[0]),
        "energy_last": float(energy[-1]),
    }
    if cfg.initial == "equilibrium" and g is None:
        drift = float(np.abs(energy - energy[0]).max() / energy[0])
        report["energy_drift_rel"] = drift
        if drift > 1e-10:
            run.falsify(f"equilibrium energy drift {drift:.3e} > 1e-10")
    else:
        window = cfg.fit_window or (cfg.t_end / 3.0, cfg.t_end)
        lam, r2 = fit_decay_rate(trace, window)
        report["lambda_fit"] = lam
        report["r2"] = r2
        report["fit_window"] = list(window)
    if g is None:
        rel_up = float(
            np.max(np.diff(energy)) / max(energy[0], 1e-300)
        )
        report["max_energy_step_increase_rel"] = rel_up
        if rel_up > 1e-12:
            run.falsify(
                f"energy increased by {rel_up:.3e} (relative) in a step "
                "with zero inflow"
            )
    run.report = report
    run.write_json("evolve_report.json", report)


def run_nonlinear(run: Runner) -> None:
    cfg = run.cfg
    grid, kernel, domain, spec = _build_common(cfg)
    op = run.timed("assemble", run.operator, grid, kernel)
    bump = np.prod(np.sin(math.pi * domain.cell_centers / domain.side), axis=1)
    data = cfg.amplitude * bump[:, None] \
        * (grid.mu_half / grid.mu_half.max())[None, :]
    h0 = PhaseField(domain, grid, data, weighted=True)
    g = _inflow_fn(cfg)
    traj, rep = run.timed(
        "picard", picard_solve, domain, grid, kernel, op, spec, h0, g,
        cfg.dt, cfg.t_end, max_iters=cfg.max_iters,
        tol_picard=cfg.tol_picard, delta=cfg.delta, lambda0=cfg.lambda0,
    )
    decay = linf_decay_check(traj, cfg.dt, lambda0=cfg.lambda0)
    envelope_path = run.out_dir / "envelope.csv"
    envelope_to_csv(decay, str(envelope_path))
    run.register(envelope_path)
    worst = math.inf
    for snapshot in traj[:: max(1, len(traj) // 16)]:
        mn, ok = positivity_check(to_plain(snapshot, spec), grid)
        worst = min(worst, mn)
        if not ok:
            run.falsify(f"positivity violated: min F = {mn:.3e}")
            break
    if not rep.converged:
        run.falsify(
            f"Picard not converged after {rep.n_iters} iterates "
            f"(last gap {rep.gaps[-1]:.3e})"
        )
    if not decay.bound_ok:
        run.falsify(
            f"decay envelope failed: lambda_fit = {decay.lambda_fit:.4f} "
            f"not in (0, {cfg.lambda0})"
        )
    report = json.loads(rep.to_json())
    report.update(
        lambda_fit=decay.lambda_fit,
        c_bound=decay.c_bound,
        bound_ok=decay.bound_ok,
        monotone_after=decay.monotone_after,
        min_F=worst,
    )
    run.report = report
    run.write_json("iteration_report.json", report)


def run_landau(run: Runner) -> None:
    cfg = run.cfg
    grid, _, _, _ = _build_common(cfg)
    coeffs = run.timed("sigma", assemble_sigma, grid, cfg.gamma_l,
                       epsilon_reg=cfg.epsilon_reg)
    profile = eig_profile(coeffs, grid)
    profile_path = run.out_dir / "landau_profile.csv"
    with open(profile_path, "w") as fh:
        fh.write("speed,lambda_1,lambda_2\n")
        np.savetxt(fh, profile, delimiter=",")
    run.register(profile_path)
    lam_min = float(profile[:, 1:].min())
    if lam_min < 0.0:
        run.falsify(f"Landau diffusion eigenvalue {lam_min:.3e} < 0")
    rng = np.random.default_rng(cfg.seed)
    ratios = []
    for _ in range(20):
        f = rng.standard_normal(grid.n_nodes) * grid.mu_half
        num = landau_dissipation_norm(grid, coeffs, f)
        den = dissipation_surrogate(grid, cfg.gamma_l, f)
        if den > 0.0:
            ratios.append(num / den)
    report = {
        "gamma_l": cfg.gamma_l,
        "lambda_min": lam_min,
        "surrogate_ratio_min": float(min(ratios)),
        "surrogate_ratio_max": float(max(ratios)),
    }
    run.report = report
    run.write_json("landau_report.json", report)


def _selftest_checks(cfg: RunConfig, rng) -> list[dict]:
    checks = []

    def check(name: str, fn) -> None:
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - report, never crash
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        checks.append({"name": name, "ok": bool(ok), "detail": detail})

    grid = build_grid(5, 3.0)
    kernel = CollisionKernel(gamma=-1.0, n_angle=4)
    op = get_operator(grid, kernel)
    spec = WeightSpec(q=cfg.q, rho=cfg.rho, beta=cfg.beta)
    box = SpatialDomain(INFLOW_BOX, 2)
    torus = SpatialDomain(TORUS, 2)

    def grid_symmetry():
        s = float(np.abs(grid.nodes.sum(axis=0)).max())
        return s == 0.0, f"node sum {s}"

    def mass_positive():
        m = integrate(grid, grid.mu)
        return 0.9 < m < 1.1, f"mass {m:.6f}"

    def collision_kernel_dim():
        lam = np.linalg.eigvalsh(0.5 * (op.L + op.L.T))
        n_zero = int(np.sum(np.abs(lam) < 1e-7))
        return n_zero == 5, f"zero multiplicity {n_zero}"

    def equilibrium_annihilated():
        r = float(np.abs(op.L @ grid.mu_half).max())
        return r < 1e-10, f"max |L mu_half| = {r:.2e}"

    def gain_equilibrium_identity():
        # exact inside the grid; pure tail truncation remains at v_max = 3
        r = float(np.abs(op.K @ grid.mu_half - op.nu * grid.mu_half).max())
        scale = float((op.nu * grid.mu_half).max())
        return r < 2e-2 * scale, f"rel |K mu2 - nu mu2| = {r / scale:.2e}"

    def gamma_equilibrium_small():
        r = float(np.abs(gamma_bilinear(grid, kernel, grid.mu_half,
                                        grid.mu_half)).max())
        scale = float((op.nu * grid.mu_half).max())
        return r < 2e-2 * scale, f"rel |Gamma(mu2, mu2)| = {r / scale:.2e}"

    def weight_bounds():
        cap = math.sqrt(3.0) * box.side
        vals = [
            weight_W(spec, x, grid.nodes[j])
            for x in box.cell_centers[:4] for j in range(grid.n_nodes)
        ]
        lo, hi = min(vals), max(vals)
        bound = math.exp(spec.q * cap * grid.v_max
                         / math.sqrt(1.0 + grid.v_max**2))
        ok = 1.0 / bound <= lo and hi <= bound
        return ok, f"W in [{lo:.3f}, {hi:.3f}], cap {bound:.3f}"

    def torus_constant_preserved():
        fld = PhaseField(torus, grid,
                         np.ones((torus.n_cells, grid.n_nodes)))
        out = advect_step(torus, WeightSpec(q=0.0), grid, fld, 0.1)
        r = float(np.abs(out.data - 1.0).max())
        return r < 1e-13, f"max drift {r:.2e}"

    def projection_idempotent():
        f = rng.standard_normal(grid.n_nodes)
        _, p1 = project_P(grid, f)
        _, p2 = project_P(grid, p1)
        r = float(np.abs(p1 - p2).max())
        return r < 1e-10, f"max |P^2 f - P f| = {r:.2e}"

    def macro_roundtrip():
        fld = PhaseField(box, grid, np.tile(grid.mu_half, (box.n_cells, 1)))
        mac = macro_fields(fld)
        ok = np.allclose(mac.a, 1.0, atol=1e-10) \
            and np.allclose(mac.b, 0.0, atol=1e-10) \
            and np.allclose(mac.c, 0.0, atol=1e-10)
        return ok, f"a {mac.a[0]:.6f}"

    def equilibrium_energy_constant():
        f0 = PhaseField(torus, grid, np.tile(grid.mu_half, (torus.n_cells, 1)))
        _, trace = evolve_linear(torus, grid, op, spec, f0, None, 0.1, 0.5)
        e = np.asarray(trace.e_total)
        drift = float(np.abs(e - e[0]).max() / e[0])
        return drift < 1e-10, f"relative drift {drift:.2e}"

    def landau_parallel():
        coeffs = assemble_sigma(grid, -2.5)
        j = int(np.argmax(grid.speed_sq))
        v = grid.nodes[j]
        sv = coeffs.sigma_ij[j] @ v
        cross = float(np.linalg.norm(np.cross(sv, v)))
        scale = float(np.linalg.norm(sv) * np.linalg.norm(v))
        return cross <= 1e-8 * scale, f"relative cross {cross / scale:.2e}"

    def rhs_zero():
        h = PhaseField(box, grid, np.zeros((box.n_cells, grid.n_nodes)),
                       weighted=True)
        out = weighted_rhs(grid, kernel, spec, h)
        return np.all(out.data == 0.0), "rhs(0) = 0"

    def positivity_pair():
        zero = PhaseField(box, grid, np.zeros((box.n_cells, grid.n_nodes)))
        bad = PhaseField(box, grid,
                         -2.0 * np.tile(grid.mu_half, (box.n_cells, 1)))
        _, ok0 = positivity_check(zero, grid)
        _, ok1 = positivity_check(bad, grid)
        return ok0 and not ok1, "zero ok, -2 mu_half flagged"

    def config_roundtrip():
        blob = asdict(RunConfig())
        return blob["n_per_axis"] == 9, "defaults resolve"

    check("grid_symmetry", grid_symmetry)
    check("gaussian_mass", mass_positive)
    check("collision_kernel_dim", collision_kernel_dim)
    check("equilibrium_annihilated", equilibrium_annihilated)
    check("gain_equilibrium_identity", gain_equilibrium_identity)
    check("gamma_equilibrium_small", gamma_equilibrium_small)
    check("weight_bounds", weight_bounds)
    check("torus_constant_preserved", torus_constant_preserved)
    check("projection_idempotent", projection_idempotent)
    check("macro_roundtrip", macro_roundtrip)
    check("equilibrium_energy_constant", equilibrium_energy_constant)
    check("landau_parallel", landau_parallel)
    check("weighted_rhs_zero", rhs_zero)
    check("positivity_pair", positivity_pair)
    check("config_roundtrip", config_roundtrip)
    return checks


def run_selftest(run: Runner) -> None:
    rng = np.random.default_rng(run.cfg.seed)
    checks = run.timed("selftest", _selftest_checks, run.cfg, rng)
    all_ok = all(c["ok"] for c in checks)
    report = {"checks": checks, "all_ok": all_ok}
    run.report = report
    run.write_json("selftest_report.json", report)
    for c in checks:
        print(f"[{'ok' if c['ok'] else 'FAIL'}] {c['name']}: {c['detail']}")
    if not all_ok:
        raise RuntimeError("selftest failed: " + ", ".join(
            c["name"] for c in checks if not c["ok"]
        ))


_PIPELINES = {
    "assemble": run_assemble,
    "spectrum": run_spectrum,
    "sweep": run_sweep,
    "evolve": run_evolve,
    "nonlinear": run_nonlinear,
    "landau": run_landau,
    "selftest": run_selftest,
}


def run_subcommand(name: str, config_path: str | None, out: str | None = None,
                   seed: int | None = None, threads: int | None = None,
                   no_cache: bool = False) -> int:
    """Execute one pipeline; returns the process exit status."""
    try:
        cfg = load_config(config_path)
        if out is not None:
            cfg = replace(cfg, directory=out)
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        cfg.validate(name)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    run = Runner(cfg, name, threads, no_cache)
    run.out_dir.mkdir(parents=True, exist_ok=True)
    run.cache_dir.mkdir(parents=True, exist_ok=True)

    limiter = None
    if threads is not None:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=threads)
    try:
        _PIPELINES[name](run)
    except FalsificationError as exc:
        run.falsify(str(exc))
        run.manifest("falsified")
        print(f"FALSIFIED: {exc}", file=sys.stderr)
        return EXIT_FALSIFIED
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # invalid parameter combinations surface mid-pipeline (smallness,
        # fit windows); they are config-level problems
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, MemoryError, np.linalg.LinAlgError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    finally:
        if limiter is not None:
            limiter.unregister()

    if run.falsifications:
        run.manifest("falsified")
        for finding in run.falsifications:
            print(f"FALSIFIED: {finding}", file=sys.stderr)
        return EXIT_FALSIFIED
    run.manifest("ok")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="boltzgap",
        description="Spectral-gap laboratory for the cutoff Boltzmann "
                    "equation with soft potentials",
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", default=None,
                        help="INI config file (defaults apply when omitted)")
    parser.add_argument("--out", default=None,
                        help="output directory (overrides [output] directory)")
    parser.add_argument("--seed", type=int, default=None,
                        help="rng seed (overrides [output] seed)")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads; 1 gives bit-identical reruns")
    parser.add_argument("--no-cache", action="store_true",
                        help="bypass the binary operator cache")
    args = parser.parse_args(argv)
    return run_subcommand(
        args.subcommand, args.config, out=args.out, seed=args.seed,
        threads=args.threads, no_cache=args.no_cache,
    )


if __name__ == "__main__":
    sys.exit(main())
