"""Bed cases, Halfar dome, time-dependent runs, and the sampled ratio and
error-term diagnostics built on top of them."""

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fem
from .errors import InvalidArgument, NonConvergence, SolverFailure
from .mesh import SurfaceField, build_interval, extrude
from .stokes import FSSA, SECPERA, PhysParams, SurfaceVelocity, solve_stokes, surface_trace
from .surface import StepConfig, monotone_restrict, phi_apply, pi_h, solve_vi_step, source_ell, w1r_norm

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# beds and the dome

@dataclass
class BedCase:
    kind: str = "flat"
    wavelengths: tuple = (100.0e3, 40.0e3, 20.0e3, 10.0e3)
    amplitudes: tuple = (120.0, 60.0, 40.0, 20.0)
    rough_wavelength: float = 4.0e3
    rough_amplitude: float = 30.0

    def __post_init__(self):
        if self.kind not in ("flat", "smooth", "rough"):
            raise InvalidArgument(f"unknown bed kind {self.kind!r}")
        if len(self.wavelengths) != len(self.amplitudes):
            raise InvalidArgument("bed wavelengths and amplitudes differ in length")

    def modes(self):
        if self.kind == "flat":
            return []
        m = list(zip(self.amplitudes, self.wavelengths))
        if self.kind == "rough":
            m.append((self.rough_amplitude, self.rough_wavelength))
        return m


def bed_function(case, L):
    """Callable b(x): quarter-phase cosine modes anchored at x = -L, with a
    linear correction so b(+-L) = 0 for any wavelength."""
    modes = case.modes()

    def raw(x):
        x = np.asarray(x, float)
        out = np.zeros_like(x)
        for A, lam in modes:
            out += A * np.cos(2 * np.pi * (x + L) / lam - np.pi / 2)
        return out

    end = raw(np.array([-L, L]))

    def b(x):
        x = np.asarray(x, float)
        return raw(x) - (end[0] + (end[1] - end[0]) * (x + L) / (2 * L))
    return b


def build_bed(case, mesh):
    if case.kind == "flat":
        return SurfaceField(mesh, np.zeros(mesh.nx + 1))
    return SurfaceField(mesh, bed_function(case, mesh.L)(mesh.nodes))


@dataclass
class HalfarDome:
    H0: float
    R0: float
    t0: float
    n: float = 3.0

    @property
    def alpha(self):
        # thickness and length exponents in one horizontal dimension
        return 1.0 / (3.0 * self.n + 2.0)

    @classmethod
    def from_flow_law(cls, R0, t0, params):
        """Dome whose characteristic time is t0 under the SIA equivalent of
        the given Glen law (flat bed, no SMB)."""
        n = params.n
        gamma = 2.0 * params.softness() * (params.rho_i * params.g) ** n / (n + 2.0)
        beta = 1.0 / (3.0 * n + 2.0)
        H0 = ((beta / gamma) * ((2 * n + 1) / (n + 1)) ** n * R0 ** (n + 1) / t0) ** (1.0 / (2 * n + 1))
        return cls(H0, R0, t0, n)


def halfar_thickness(t, x, dome):
    if t <= 0:
        raise InvalidArgument("Halfar time must be positive")
    n = dome.n
    r = (dome.t0 / t) ** dome.alpha
    inner = 1.0 - (r * np.abs(x) / dome.R0) ** ((n + 1.0) / n)
    return dome.H0 * r * np.maximum(inner, 0.0) ** (n / (2.0 * n + 1.0))


def halfar_surface(t, mesh, dome):
    return SurfaceField(mesh, halfar_thickness(t, mesh.nodes, dome))


def halfar_margin(t, dome):
    return dome.R0 * (t / dome.t0) ** dome.alpha


# ---------------------------------------------------------------------------
# time-dependent runs

def config_bed(cfg, kind=None):
    b = cfg.bed
    return BedCase(kind or b.kind, tuple(b.wavelengths), tuple(b.amplitudes), b.rough_wavelength, b.rough_amplitude)


def config_dome(cfg, params):
    d = cfg.dome
    if d.H0 is None:
        return HalfarDome.from_flow_law(d.R0, d.t0, params)
    return HalfarDome(d.H0, d.R0, d.t0, params.n)


class StokesCallback:
    """Surface -> surface velocity, warm-starting Newton from the last
    solve and counting work."""

    def __init__(self, base, bed, params, nz, H_min, tol=1e-8, max_newton=50, fssa=None):
        self.base, self.bed, self.params = base, bed, params
        self.nz, self.H_min, self.tol, self.max_newton = nz, H_min, tol, max_newton
        self.fssa = fssa
        self.states = {}
        self.newton_iterations = 0
        self.solves = 0

    def __call__(self, s, fssa="default"):
        fssa = self.fssa if fssa == "default" else fssa
        mesh = extrude(self.base, self.bed, s, self.nz, self.H_min)
        if not mesh.has_ice:
            return SurfaceVelocity.zero(self.base)
        # plain and stabilized solves keep separate warm starts
        key = fssa is None
        st = solve_stokes(mesh, self.params, init=self.states.get(key), fssa=fssa, tol=self.tol,
                          max_newton=self.max_newton)
        self.states[key] = st
        self.newton_iterations += st.iterations
        self.solves += 1
        return surface_trace(st)


@dataclass
class Trajectory:
    times: list = field(default_factory=list)        # s, relative to run start
    surfaces: list = field(default_factory=list)     # SurfaceField
    velocities: list = field(default_factory=list)   # SurfaceVelocity without FSSA, or None
    bed: SurfaceField = None
    failure: str = None
    steps: int = 0
    newton_iterations: int = 0
    wall_seconds: float = None

    def save(self, path):
        base = self.bed.mesh
        data = dict(
            x=base.nodes, bed=self.bed.values, times=np.array(self.times),
            s=np.array([s.values for s in self.surfaces]),
            failure=np.array(self.failure or ""), steps=self.steps, newton=self.newton_iterations,
            wall=np.nan if self.wall_seconds is None else self.wall_seconds,
        )
        if self.velocities and all(v is not None for v in self.velocities):
            for k in ("u", "w", "u_mid", "w_mid", "active"):
                data["v_" + k] = np.array([getattr(v, k) for v in self.velocities])
        tmp = path + ".tmp.npz"
        np.savez_compressed(tmp, **data)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        from .mesh import IntervalMesh
        d = np.load(path)
        base = IntervalMesh(d["x"])
        tr = cls(list(d["times"]), [SurfaceField(base, s) for s in d["s"]], bed=SurfaceField(base, d["bed"]))
        tr.failure = str(d["failure"]) or None
        tr.steps, tr.newton_iterations = int(d["steps"]), int(d["newton"])
        wall = float(d["wall"]) if "wall" in d else np.nan
        tr.wall_seconds = None if np.isnan(wall) else wall
        if "v_u" in d:
            tr.velocities = [SurfaceVelocity(base, d["v_u"][k], d["v_w"][k], d["v_u_mid"][k], d["v_w_mid"][k],
                                             d["v_active"][k].astype(bool)) for k in range(len(tr.times))]
        else:
            tr.velocities = [None] * len(tr.times)
        return tr

    def to_csv(self, path):
        x = self.bed.mesh.nodes
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["time_s", "x_m", "surface_m", "bed_m"])
            for t, s in zip(self.times, self.surfaces):
                for xi, si, bi in zip(x, s.values, self.bed.values):
                    w.writerow([f"{t:.6e}", f"{xi:.3f}", f"{si:.6f}", f"{bi:.6f}"])


def initial_state(cfg, base, bed, params):
    dome = config_dome(cfg, params)
    return pi_h(halfar_surface(dome.t0, base, dome), base, bed)


def run_simulation(cfg, bed_kind=None, smb=None, with_velocity=False, step_log=None, progress=None):
    """Integrate from the truncated Halfar dome for cfg.run.T seconds.

    Failing steps are retried as 2, 4, ... substeps (up to
    cfg.step.max_halvings halvings); if that still fails the run stops and
    the partial trajectory records the failure.
    """
    t_start = time.perf_counter()
    params = cfg.phys_params()
    base = build_interval(cfg.mesh.L, cfg.mesh.nx)
    bed = build_bed(config_bed(cfg, bed_kind), base)
    smb = cfg.run.smb if smb is None else smb
    s = initial_state(cfg, base, bed, params)
    sc = cfg.step
    solver = StokesCallback(base, bed, params, cfg.mesh.nz, cfg.mesh.H_min, tol=sc.stokes_tol, max_newton=sc.max_newton)
    tr = Trajectory(bed=bed)

    def snapshot(t, s):
        tr.times.append(t)
        tr.surfaces.append(s)
        tr.velocities.append(solver(s, fssa=None) if with_velocity else None)

    def one_step(s, dt):
        solver.fssa = FSSA(dt, sc.fssa_theta, smb) if sc.fssa else None
        stc = StepConfig(dt=dt, mode=sc.mode, r_exp=sc.r_exp, vi_tol=sc.vi_tol,
                         max_active_set_iters=sc.max_active_set_iters)
        return solve_vi_step(s, bed, smb, stc, solver, log_path=step_log).surface

    T, dt0 = cfg.run.T, sc.dt
    nsteps = int(np.ceil(T / dt0 - 1e-9))
    every = max(1, int(round(cfg.run.snapshot / dt0)))
    t = 0.0
    snapshot(t, s)
    for k in range(nsteps):
        dt = min(dt0, T - t)
        for halvings in range(sc.max_halvings + 1):
            nsub = 2 ** halvings
            saved = dict(solver.states)
            try:
                trial = s
                for _ in range(nsub):
                    trial = one_step(trial, dt / nsub)
                break
            except (SolverFailure, NonConvergence) as err:
                solver.states = saved
                log.warning("step %d failed with %d substeps: %s", k + 1, nsub, err)
                last_err = err
        else:
            tr.failure = f"step {k + 1} at t={t:.6e} s: {last_err}"
            break
        s = trial
        t += dt
        tr.steps += 1
        if (k + 1) % every == 0 or k + 1 == nsteps:
            snapshot(t, s)
        if progress:
            progress(k + 1, nsteps, t, s)
    tr.newton_iterations = solver.newton_iterations
    tr.wall_seconds = time.perf_counter() - t_start
    return tr


def run_key(cfg, bed_kind, smb, with_velocity):
    parts = dict(mesh=asdict(cfg.mesh), physics=asdict(cfg.physics), step=asdict(cfg.step),
                 bed=asdict(config_bed(cfg, bed_kind)), dome=asdict(config_dome(cfg, cfg.phys_params())),
                 T=cfg.run.T, snapshot=cfg.run.snapshot, smb=smb, v=bool(with_velocity))
    return hashlib.sha1(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


def cached_run(cfg, bed_kind, smb, cache_dir, with_velocity=True, progress=None):
    """run_simulation with an on-disk cache keyed by every relevant input."""
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"run_{bed_kind}_{smb:+.2e}_{run_key(cfg, bed_kind, smb, with_velocity)}.npz")
    if os.path.exists(path):
        return Trajectory.load(path)
    tr = run_simulation(cfg, bed_kind, smb, with_velocity=with_velocity, progress=progress)
    tr.save(path)
    return tr


# ---------------------------------------------------------------------------
# ratios

def coercivity_ratio(r, sv_r, s, sv_s, cfg=None, bed=None, mask=None, L_scale=100.0e3, r_exp=2.0):
    """(Phi(r) - Phi(s))[r - s] / ||r - s||^2 with the [L]-scaled norm."""
    if not r.mesh.same_as(s.mesh):
        raise InvalidArgument("states live on different meshes")
    if cfg is not None:
        r_exp = cfg.r_exp
        mask = cfg.thickness_mask if mask is None else mask
    q = SurfaceField(r.mesh, r.values - s.values)
    den = w1r_norm(q, r_exp, L_scale) ** 2
    scale = max(1.0, np.abs(r.values).max(), np.abs(s.values).max())
    if np.sqrt(den) < 1e-12 * scale * np.sqrt(2 * r.mesh.L):
        raise InvalidArgument("degenerate pair: r and s coincide")
    num = phi_apply(sv_r, r, q, mask, bed) - phi_apply(sv_s, s, q, mask, bed)
    return num / den


def trace_l2_difference(sv_r, sv_s, npts=4):
    rule = fem.quad_rule("interval", 2 * npts - 1)
    ur, wr = sv_r.at_points(rule.points)
    us, ws = sv_s.at_points(rule.points)
    d2 = (ur - us) ** 2 + (wr - ws) ** 2
    return float(np.sqrt(np.sum(d2 * rule.weights[None, :] * sv_r.mesh.dx[:, None])))


def lipschitz_ratio(r, sv_r, s, sv_s, L_scale=100.0e3, r_exp=2.0):
    q = SurfaceField(r.mesh, r.values - s.values)
    den = w1r_norm(q, r_exp, L_scale)
    if den == 0:
        raise InvalidArgument("degenerate pair: r and s coincide")
    return trace_l2_difference(sv_r, sv_s) / den


@dataclass
class RatioSample:
    case: str
    id_r: int
    id_s: int
    rho: float
    lipschitz: float
    masked: bool


@dataclass
class StatePool:
    """States sharing one bed; velocity(i) gives the (plain) surface
    velocity of state i."""

    name: str
    surfaces: list
    bed: SurfaceField
    velocity: object

    def __len__(self):
        return len(self.surfaces)


def pool_from_trajectories(name, trajectories):
    surfaces, vels = [], []
    seen = set()
    for tr in trajectories:
        for s, v in zip(tr.surfaces, tr.velocities):
            key = s.values.tobytes()
            if key in seen:      # shared initial state, repeated bare-bed states
                continue
            seen.add(key)
            surfaces.append(s)
            vels.append(v)
    bed = trajectories[0].bed
    return StatePool(name, surfaces, bed, lambda i: vels[i])


def sample_ratios(pools, n_pairs, seed, mask=None, L_scale=100.0e3, r_exp=2.0, max_redraws=1000):
    """Seeded uniform pairs (i != j) per pool; pairs of coincident states
    are redrawn.  Returns (samples, summary)."""
    samples, summary = [], {}
    for k, pool in enumerate(pools):
        if len(pool) < 2:
            raise InvalidArgument(f"pool {pool.name!r} needs at least 2 states, has {len(pool)}")
        rng = np.random.default_rng([int(seed), k])
        out, redraws = [], 0
        while len(out) < n_pairs:
            i, j = rng.choice(len(pool), size=2, replace=False)
            r, s = pool.surfaces[i], pool.surfaces[j]
            if np.array_equal(r.values, s.values):
                redraws += 1
                if redraws > max_redraws:
                    raise InvalidArgument(f"pool {pool.name!r}: only degenerate pairs available")
                continue
            vr, vs = pool.velocity(i), pool.velocity(j)
            rho = coercivity_ratio(r, vr, s, vs, bed=pool.bed, mask=mask, L_scale=L_scale, r_exp=r_exp)
            lip = lipschitz_ratio(r, vr, s, vs, L_scale, r_exp)
            out.append(RatioSample(pool.name, int(i), int(j), rho, lip, mask is not None))
        samples.extend(out)
        summary[pool.name] = summarize(out)
    return samples, summary


def summarize(samples):
    rho = np.array([x.rho for x in samples])
    lip = np.array([x.lipschitz for x in samples])
    pos, neg = rho[rho > 0], rho[rho < 0]
    return dict(
        n_pairs=len(rho),
        positive_fraction=float(len(pos) / len(rho)) if len(rho) else float("nan"),
        n_negative=int(len(neg)),
        median_positive=float(np.median(pos)) if len(pos) else None,
        median_negative=float(np.median(neg)) if len(neg) else None,
        max_lipschitz=float(lip.max()) if len(lip) else None,
    )


def write_ratio_csv(samples, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["case", "id_r", "id_s", "rho_per_s", "lipschitz_per_s", "masked"])
        for x in samples:
            w.writerow([x.case, x.id_r, x.id_s, repr(float(x.rho)), repr(float(x.lipschitz)), int(x.masked)])


# ---------------------------------------------------------------------------
# error terms

@dataclass
class ErrorTerms:
    term1: float
    term3: float
    alpha: float
    dt: float
    term2: object = None         # not computable; reported as unavailable
    observed_error: float = None # ||s_h - s_ref|| on the fine mesh, for context
    units: dict = field(default_factory=dict)

    def to_json(self):
        d = asdict(self)
        d["term2"] = "unavailable"
        return d


def _interp_to(f, mesh):
    return SurfaceField(mesh, f(mesh.nodes)) if not f.mesh.same_as(mesh) else f


def error_terms(s_ref, s_h, b, b_h, ell, alpha, dt, q_exp=2.0, r_exp=2.0, L_scale=100.0e3, active_tol=1.0):
    """Bed-mismatch term and interpolation term of the a priori estimate.

    s_ref, b, ell live on the fine mesh; s_h and b_h on a (nested) coarse
    mesh.  The active set is the union of fine cells whose two nodes both
    have s_ref - b < active_tol.
    """
    if not alpha > 0:
        raise InvalidArgument("alpha must be positive")
    if not dt > 0:
        raise InvalidArgument("dt must be positive")
    fine = s_ref.mesh
    bh_f = _interp_to(b_h, fine).values
    act = (s_ref.values - b.values) < active_tol
    cell = act[:-1] & act[1:]
    f1 = b.values - ell.values
    f2 = bh_f - b.values
    # exact integral of the product of two linears over each cell
    dx = fine.dx
    prod = dx / 6.0 * (2 * f1[:-1] * f2[:-1] + f1[:-1] * f2[1:] + f1[1:] * f2[:-1] + 2 * f1[1:] * f2[1:])
    term1 = 2.0 / (alpha * dt) * float(np.sum(prod[cell]))
    coarse = b_h.mesh
    P = pi_h(s_ref, coarse, b_h)
    diff = SurfaceField(fine, _interp_to(P, fine).values - s_ref.values)
    term3 = w1r_norm(diff, r_exp, L_scale) ** q_exp
    obs = w1r_norm(SurfaceField(fine, _interp_to(s_h, fine).values - s_ref.values), r_exp, L_scale)
    # the [L]-scaled W^{1,r} norm carries units m^(1 + 1/r)
    nu = 1.0 + 1.0 / r_exp
    units = {"term1": "m^3", "term3": f"m^{q_exp * nu:g}", "observed_error": f"m^{nu:g}",
             "alpha": "s^-1", "dt": "s"}
    return ErrorTerms(term1, term3, alpha, dt, observed_error=obs, units=units)


def refinement_pair(cfg, fine_nx, coarse_nx, bed_kind=None, smb=None):
    """One implicit step from the truncated dome at two nested resolutions;
    the fine solution stands in for the exact one."""
    if fine_nx % coarse_nx:
        raise InvalidArgument(f"fine nx={fine_nx} is not a multiple of coarse nx={coarse_nx}")
    params = cfg.phys_params()
    case = config_bed(cfg, bed_kind)
    smb = cfg.run.smb if smb is None else smb
    sc = cfg.step
    stc = StepConfig(dt=sc.dt, mode=sc.mode, r_exp=sc.r_exp, vi_tol=sc.vi_tol,
                     max_active_set_iters=sc.max_active_set_iters)
    bfun = bed_function(case, cfg.mesh.L) if case.kind != "flat" else (lambda x: np.zeros_like(np.asarray(x, float)))

    def step(base, bh):
        s0 = initial_state(cfg, base, bh, params)
        solver = StokesCallback(base, bh, params, cfg.mesh.nz, cfg.mesh.H_min, tol=sc.stokes_tol,
                                fssa=FSSA(sc.dt, sc.fssa_theta, smb) if sc.fssa else None)
        return s0, solve_vi_step(s0, bh, smb, stc, solver).surface

    fine_base = build_interval(cfg.mesh.L, fine_nx)
    b_fine = SurfaceField(fine_base, bfun(fine_base.nodes))
    s0, s_ref = step(fine_base, b_fine)
    coarse_base = build_interval(cfg.mesh.L, coarse_nx)
    b_h = build_bed(case, coarse_base) if case.kind == "flat" else monotone_restrict(bfun, coarse_base)
    _, s_h = step(coarse_base, b_h)
    ell = source_ell(s0, smb, sc.dt)
    return s_ref, s_h, b_fine, b_h, ell
