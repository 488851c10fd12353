"""Implicit surface-elevation step as a nodal complementarity problem.

The unknown is a P1 surface s >= b.  One backward-Euler step asks for

    s - b >= 0,   R(s) >= 0,   (s - b) R(s) = 0      at interior nodes,

with R(s)_i = int (s - dt u|s . n_s - l) phi_i dx, l = s_prev + dt a and
n_s = (-s', 1).  The mass part uses the lumped (trapezoid) mass, so that
with zero velocity the problem decouples into nodal truncation.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import minimize_scalar

from . import fem
from .errors import InvalidArgument, NonConvergence
from .mesh import SurfaceField, check_admissible

MODES = ("semi_implicit", "fixed_point_implicit", "explicit", "no_flow")


@dataclass
class StepConfig:
    dt: float
    mode: str = "semi_implicit"
    r_exp: float = 2.0
    vi_tol: float = 1e-6                # m
    max_active_set_iters: int = 100
    thickness_mask: float = None        # m
    max_outer: int = 30                 # fixed_point_implicit only

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidArgument(f"time step must be positive, got {self.dt}")
        if self.mode not in MODES:
            raise InvalidArgument(f"unknown step mode {self.mode!r}; expected one of {MODES}")
        if self.r_exp < 2:
            raise InvalidArgument(f"r_exp must be >= 2, got {self.r_exp}")
        if not self.vi_tol > 0:
            raise InvalidArgument("vi_tol must be positive")
        if self.thickness_mask is not None and self.thickness_mask < 0:
            raise InvalidArgument("thickness_mask must be nonnegative")


@dataclass
class VIResult:
    surface: SurfaceField
    active_set: np.ndarray
    residual: np.ndarray     # nodal, in m (assembled residual / lumped mass)
    iterations: int
    velocity: object = None  # SurfaceVelocity used for the step, if any
    history: list = field(default_factory=list)

    def violations(self, bed):
        """Largest violations of (admissibility, sign, complementarity)."""
        gap = self.surface.values - bed.values
        return (
            float(max(0.0, -gap.min())),
            float(max(0.0, -self.residual.min())),
            float(np.abs(gap * self.residual).max()),
        )


def _as_field(a, mesh):
    if isinstance(a, SurfaceField):
        if not a.mesh.same_as(mesh):
            raise InvalidArgument("fields live on different meshes")
        return a
    return SurfaceField(mesh, np.broadcast_to(np.asarray(a, float), mesh.nodes.shape))


def source_ell(s_prev, a, dt):
    a = _as_field(a, s_prev.mesh)
    return SurfaceField(s_prev.mesh, s_prev.values + dt * a.values)


def _cell_rule(npts=3):
    return fem.quad_rule("interval", 2 * npts - 1)


def phi_apply(sv, s, q, mask=None, bed=None):
    """-int u|s . n_s q dx, optionally dropping the integrand where the ice
    is thinner than `mask`."""
    mesh = s.mesh
    if not (sv.mesh.same_as(mesh) and q.mesh.same_as(mesh)):
        raise InvalidArgument("fields live on different meshes")
    rule = _cell_rule(4)
    u, w = sv.at_points(rule.points)
    lam = fem.p1_1d(rule.points)
    qv = q.values[:-1, None] * lam[None, :, 0] + q.values[1:, None] * lam[None, :, 1]
    un = -u * s.slope()[:, None] + w
    f = -un * qv
    if mask is not None:
        if bed is None:
            raise InvalidArgument("thickness mask needs the bed")
        H = s.values - bed.values
        Hq = H[:-1, None] * lam[None, :, 0] + H[1:, None] * lam[None, :, 1]
        f = np.where(Hq < mask, 0.0, f)
    return float(np.sum(f * rule.weights[None, :] * mesh.dx[:, None]))


def _flow_terms(sv, s, dt, jacobian=False):
    """Nodal dt*int (u s' - w) phi_i and optionally its derivative in s."""
    mesh = s.mesh
    rule = _cell_rule(3)
    u, w = sv.at_points(rule.points)
    lam = fem.p1_1d(rule.points)                     # (nq, 2)
    wq = rule.weights[None, :] * mesh.dx[:, None]    # (nx, nq)
    f = u * s.slope()[:, None] - w
    loc = dt * np.einsum("cq,qa->ca", f * wq, lam)
    R = np.zeros(mesh.nx + 1)
    np.add.at(R, mesh.cells, loc)
    if not jacobian:
        return R, None
    # d/ds_j of s' on a cell is (-1, +1)/dx
    ul = dt * np.einsum("cq,qa->ca", u * wq, lam) / mesh.dx[:, None]
    dloc = np.stack([-ul, ul], axis=-1)              # (nx, a, b)
    cells = mesh.cells
    rows = np.repeat(cells, 2, axis=1).ravel()
    cols = np.tile(cells, (1, 2)).ravel()
    J = sp.coo_matrix((dloc.ravel(), (rows, cols)), shape=(mesh.nx + 1,) * 2).tocsr()
    return R, J


def step_operator_residual(s, sv, ell, cfg):
    """Assembled residual int (s - dt u|s.n_s - l) phi_i dx per node."""
    if not (s.mesh.same_as(ell.mesh) and s.mesh.same_as(sv.mesh)):
        raise InvalidArgument("fields live on different meshes")
    m = s.mesh.nodal_mass()
    R, _ = _flow_terms(sv, s, cfg.dt)
    return m * (s.values - ell.values) + R


def _ncp_merit(gap, res):
    return float(np.abs(np.minimum(gap, res)).max()) if len(gap) else 0.0


def _reduced_space_newton(s0, bed, ell, sv, cfg):
    """Active-set Newton on the interior nodes; boundary nodes sit on the bed."""
    mesh = s0.mesh
    m = mesh.nodal_mass()
    interior = np.ones(mesh.nx + 1, bool)
    interior[[0, -1]] = False
    b = bed.values
    s = np.maximum(s0.values, b)
    s[~interior] = b[~interior]
    history = []
    prev_active = None

    def evaluate(sv_):
        S = SurfaceField(mesh, sv_)
        R, J = _flow_terms(sv, S, cfg.dt, jacobian=True)
        R += m * (sv_ - ell.values)
        return R, J

    R, J = evaluate(s)
    for it in range(cfg.max_active_set_iters + 1):
        gap = (s - b)[interior]
        Rn = (R / m)[interior]
        merit = _ncp_merit(gap, Rn)
        active = np.zeros(mesh.nx + 1, bool)
        active[interior] = (gap <= cfg.vi_tol) & (Rn > 0)
        history.append((it, merit, int(active.sum())))
        if merit < cfg.vi_tol and (prev_active is None or np.array_equal(active, prev_active) or merit < 1e-3 * cfg.vi_tol):
            return s, R, active, it, history
        if it == cfg.max_active_set_iters:
            break
        prev_active = active
        free = interior & ~active
        d = np.zeros_like(s)
        d[active] = b[active] - s[active]
        A = J + sp.diags(m)
        rhs = -(R + A @ d)
        if free.any():
            Aff = A[free][:, free].tocsc()
            d[free] = spla.spsolve(Aff, rhs[free])
        lam = 1.0
        for _ in range(21):
            st = np.maximum(s + lam * d, b)
            st[~interior] = b[~interior]
            Rt, Jt = evaluate(st)
            mt = _ncp_merit((st - b)[interior], (Rt / m)[interior])
            if mt < merit or lam < 1e-6:
                break
            lam *= 0.5
        s, R, J = st, Rt, Jt
    raise NonConvergence(
        f"reduced-space Newton did not converge in {cfg.max_active_set_iters} iterations (merit {merit:.3e} m)",
        last=SurfaceField(mesh, s), residual=merit,
    )


def _write_log(path, row):
    new = not os.path.exists(path)
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(["mode", "iterations", "active_nodes", "max_violation_m"])
        w.writerow(row)


def _nodal_residual(s, sv, ell, cfg):
    R = step_operator_residual(s, sv, ell, cfg) / s.mesh.nodal_mass()
    R[[0, -1]] = 0.0
    return R


def solve_vi_step(s_prev, bed_h, a, cfg, stokes_solver=None, log_path=None, s_init=None):
    """One implicit (or explicit / no-flow) step from s_prev.

    stokes_solver(s) must return the SurfaceVelocity of surface s.
    """
    from .stokes import SurfaceVelocity

    mesh = s_prev.mesh
    s_prev.check_same_mesh(bed_h)
    check_admissible(s_prev, bed_h, tol=cfg.vi_tol)
    ell = source_ell(s_prev, a, cfg.dt)
    b = bed_h.values
    sv = None

    if cfg.mode == "no_flow":
        s = np.maximum(b, ell.values)
        s[[0, -1]] = b[[0, -1]]
        S = SurfaceField(mesh, s)
        res = s - ell.values
        res[[0, -1]] = 0.0
        active = np.zeros(len(s), bool)
        active[1:-1] = (s <= b)[1:-1] & (res[1:-1] > 0)
        result = VIResult(S, active, res, 0)
    elif cfg.mode == "explicit":
        sv = stokes_solver(s_prev)
        un = -sv.u * s_prev.nodal_slope() + sv.w
        trial = s_prev.values + cfg.dt * un + (ell.values - s_prev.values)
        s = np.maximum(b, trial)
        s[[0, -1]] = b[[0, -1]]
        res = s - trial
        res[[0, -1]] = 0.0
        active = np.zeros(len(s), bool)
        active[1:-1] = (s <= b)[1:-1] & (res[1:-1] > 0)
        result = VIResult(SurfaceField(mesh, s), active, res, 1, velocity=sv)
    elif cfg.mode == "semi_implicit":
        sv = stokes_solver(s_prev) if stokes_solver is not None else SurfaceVelocity.zero(mesh)
        start = s_init if s_init is not None else s_prev
        s, R, active, its, hist = _reduced_space_newton(start, bed_h, ell, sv, cfg)
        S = SurfaceField(mesh, s)
        result = VIResult(S, active, _nodal_residual(S, sv, ell, cfg), its, velocity=sv, history=hist)
    else:   # fixed_point_implicit
        S = s_init if s_init is not None else s_prev
        its = 0
        for k in range(cfg.max_outer):
            sv = stokes_solver(S)
            s, R, active, n, hist = _reduced_space_newton(S, bed_h, ell, sv, cfg)
            its += n
            change = np.abs(s - S.values).max()
            S = SurfaceField(mesh, s)
            if change < cfg.vi_tol:
                break
        else:
            raise NonConvergence(
                f"fixed-point iteration did not settle in {cfg.max_outer} Stokes solves (change {change:.3e} m)",
                last=S, residual=change,
            )
        result = VIResult(S, active, _nodal_residual(S, sv, ell, cfg), its, velocity=sv)

    if log_path:
        _write_log(log_path, [cfg.mode, result.iterations, int(result.active_set.sum()),
                              f"{max(result.violations(bed_h)):.6e}"])
    return result


def monotone_restrict(b_fine, mesh, samples_per_cell=32):
    """Nodal max of the bed over the two cells adjacent to each node.

    b_fine is either a SurfaceField on a (finer) mesh, whose max over a
    cell is attained at its nodes or at the cell ends, or a callable,
    which is sampled and then maximized locally per cell.
    """
    x = mesh.nodes
    nx = mesh.nx
    cellmax = np.empty(nx)
    if isinstance(b_fine, SurfaceField):
        xf, bf = b_fine.mesh.nodes, b_fine.values
        for c in range(nx):
            inside = bf[(xf >= x[c]) & (xf <= x[c + 1])]
            ends = np.interp([x[c], x[c + 1]], xf, bf)
            cellmax[c] = max(ends.max(), inside.max() if len(inside) else -np.inf)
    else:
        t = np.linspace(0.0, 1.0, samples_per_cell + 1)
        for c in range(nx):
            xs = x[c] + t * (x[c + 1] - x[c])
            vals = np.asarray(b_fine(xs), float)
            k = int(np.argmax(vals))
            best = vals[k]
            lo, hi = xs[max(k - 1, 0)], xs[min(k + 1, len(xs) - 1)]
            if hi > lo:
                opt = minimize_scalar(lambda y: -float(b_fine(np.array([y]))[0]), bounds=(lo, hi),
                                      method="bounded", options={"xatol": 1e-10 * (x[c + 1] - x[c])})
                best = max(best, -opt.fun)
            cellmax[c] = best
    out = np.empty(nx + 1)
    out[0], out[-1] = cellmax[0], cellmax[-1]
    out[1:-1] = np.maximum(cellmax[:-1], cellmax[1:])
    return SurfaceField(mesh, out)


def pi_h(r, mesh, b_h):
    """Nodal interpolation truncated to the discrete bed; ends on the bed."""
    if isinstance(r, SurfaceField):
        rv = r(mesh.nodes) if not r.mesh.same_as(mesh) else r.values
    else:
        rv = np.asarray(r(mesh.nodes), float)
    out = np.maximum(b_h.values, rv)
    out[[0, -1]] = b_h.values[[0, -1]]
    return SurfaceField(mesh, out)


def w1r_norm(q, r_exp=2.0, L_scale=1.0):
    if r_exp < 1:
        raise InvalidArgument("r_exp must be >= 1")
    mesh = q.mesh
    if float(r_exp).is_integer() and int(r_exp) % 2 == 0:
        rule = fem.quad_rule("interval", int(r_exp))
    else:
        rule = fem.quad_rule("interval", 15)
    lam = fem.p1_1d(rule.points)
    qv = q.values[:-1, None] * lam[None, :, 0] + q.values[1:, None] * lam[None, :, 1]
    body = np.sum(np.abs(qv) ** r_exp * rule.weights[None, :] * mesh.dx[:, None])
    grad = np.sum(np.abs(q.slope()) ** r_exp * mesh.dx)
    return float((body + L_scale ** r_exp * grad) ** (1.0 / r_exp))
