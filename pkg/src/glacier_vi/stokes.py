"""Regularized Glen-law Stokes flow on an extruded flowline mesh.

Taylor-Hood Q2 x Q1 mixed elements on straight-sided quadrilaterals, zero
velocity on the base and on lateral faces, stress-free top, Newton's
method with the exact Jacobian and a backtracking line search.  The
optional free-surface stabilization (FSSA) adds the load of the surface
displacement expected over one time step.
"""

import csv
import logging
import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem
from .errors import InvalidArgument, NonConvergence, SolverFailure
from .mesh import SurfaceField

log = logging.getLogger(__name__)

SECPERA = 3.1556926e7   # seconds per year
SQRT2 = np.sqrt(2.0)


@dataclass
class PhysParams:
    p: float = 4.0 / 3.0
    nu_p: float = None          # default from A below
    eps: float = 1.0e-19        # s-2
    rho_i: float = 910.0        # kg m-3
    g: float = 9.81             # m s-2
    H_scale: float = 1000.0     # m
    L_scale: float = 100.0e3    # m
    A: float = 3.1689e-24       # Pa-3 s-1; only used when nu_p is None

    def __post_init__(self):
        if not 1.0 < self.p <= 2.0:
            raise InvalidArgument(f"Glen exponent p must lie in (1, 2], got {self.p}")
        if self.nu_p is None:
            self.nu_p = 0.5 * self.A ** (-1.0 / self.n)
        if not (self.eps > 0 and self.nu_p > 0 and self.rho_i > 0 and self.g >= 0):
            raise InvalidArgument("eps, nu_p, rho_i must be positive and g nonnegative")
        if self.H_scale < 1.0 or self.L_scale <= 0:
            raise InvalidArgument("H_scale must be >= 1 m and L_scale positive")

    @property
    def n(self):
        return 1.0 / (self.p - 1.0)

    def softness(self):
        """Glen softness A equivalent to nu_p when the flow law is written
        with the effective strain rate sqrt(D:D/2)."""
        n = self.n
        return (2.0 * self.nu_p) ** (-n) * 2.0 ** ((n - 1.0) / 2.0)


def glen_viscosity(Du_norm_sq, params):
    return params.nu_p * (np.asarray(Du_norm_sq) + params.eps) ** ((params.p - 2.0) / 2.0)


def _glen_dviscosity(Du_norm_sq, params):
    # derivative with respect to |Du|^2
    return params.nu_p * (params.p - 2.0) / 2.0 * (Du_norm_sq + params.eps) ** ((params.p - 4.0) / 2.0)


@dataclass
class FSSA:
    dt: float
    theta: float = 1.0
    smb: object = 0.0   # scalar or nodal array on the base mesh, m s-1


class StokesDiscretization:
    """Dof maps, geometry, and constant element blocks for one mesh."""

    @property
    def mesh(self):
        return self._mesh()

    def __init__(self, mesh, quad_degree=6):
        # weak: the mesh caches this object, and a strong back-reference
        # would make a cycle that holds ~200 MB per fine mesh until a gc pass
        self._mesh = weakref.ref(mesh)
        base = mesh.base
        nx, nz = base.nx, mesh.nz
        self.nx, self.nz = nx, nz
        self.nzq2 = 2 * nz + 1
        self.n_q2 = (2 * nx + 1) * self.nzq2
        self.n_q1 = (nx + 1) * (nz + 1)
        cells = mesh.active_cells
        self.cells = cells
        ce = np.repeat(cells, nz)
        je = np.tile(np.arange(nz), len(cells))
        self.ce, self.je = ce, je
        self.ne = len(ce)

        off2, off1 = fem.Q2_OFFSETS, fem.Q1_OFFSETS
        self.q2_nodes = (2 * ce[:, None] + off2[None, :, 0]) * self.nzq2 + 2 * je[:, None] + off2[None, :, 1]
        self.q1_nodes = (ce[:, None] + off1[None, :, 0]) * (nz + 1) + je[:, None] + off1[None, :, 1]

        self._geometry(quad_degree)
        self._dofs()
        self._constant_blocks()
        self._top_edge()

    # -- geometry -----------------------------------------------------
    def _geometry(self, quad_degree):
        mesh, ce, je = self.mesh, self.ce, self.je
        rule = fem.quad_rule("quad", quad_degree)
        self.rule = rule
        xi, eta = rule.points[:, 0], rule.points[:, 1]
        Z = mesh.z
        x0 = mesh.base.nodes[ce][:, None]
        dx = mesh.base.dx[ce][:, None]
        z00, z10 = Z[ce, je][:, None], Z[ce + 1, je][:, None]
        z01, z11 = Z[ce, je + 1][:, None], Z[ce + 1, je + 1][:, None]
        z_xi = (1 - eta) * (z10 - z00) + eta * (z11 - z01)
        z_eta = (1 - xi) * (z01 - z00) + xi * (z11 - z10)
        self.xq = x0 + xi * dx
        self.zq = (1 - xi) * (1 - eta) * z00 + xi * (1 - eta) * z10 + (1 - xi) * eta * z01 + xi * eta * z11
        det = dx * z_eta
        if np.any(det <= 0):
            raise InvalidArgument("nonpositive Jacobian determinant in extruded mesh")
        self.wdet = rule.weights[None, :] * det

        phi2, dphi2 = fem.q2_basis(rule.points)
        phi1, _ = fem.q1_basis(rule.points)
        self.phi2, self.phi1 = phi2, phi1
        dz = dphi2[None, :, :, 1] / z_eta[:, :, None]
        dxp = (dphi2[None, :, :, 0] - z_xi[:, :, None] * dz) / dx[:, :, None]
        self.grad2 = np.stack([dxp, dz], axis=-1)   # (ne, nq, 9, 2)

        ne, nq = self.ne, len(rule.weights)
        B = np.zeros((ne, nq, 3, 18))
        B[:, :, 0, 0::2] = dxp
        B[:, :, 2, 0::2] = dz / SQRT2
        B[:, :, 1, 1::2] = dz
        B[:, :, 2, 1::2] = dxp / SQRT2
        self.B = B
        div = np.zeros((ne, nq, 18))
        div[:, :, 0::2] = dxp
        div[:, :, 1::2] = dz
        self.div = div

    # -- dofs -----------------------------------------------------------
    def _dofs(self):
        mesh, nzq2, nz = self.mesh, self.nzq2, self.nz
        used2 = np.zeros(self.n_q2, bool)
        used2[self.q2_nodes.ravel()] = True
        used1 = np.zeros(self.n_q1, bool)
        used1[self.q1_nodes.ravel()] = True

        dir2 = np.zeros(self.n_q2, bool)
        dir2[np.arange(0, self.n_q2, nzq2)] = True                     # base
        # lateral faces: inactive vertex columns and the domain ends
        lateral = ~mesh.column_active.copy()
        lateral[0] = lateral[-1] = True
        for i in np.nonzero(lateral)[0]:
            dir2[2 * i * nzq2:(2 * i + 1) * nzq2] = True
        fix1 = np.zeros(self.n_q1, bool)
        for i in np.nonzero(~mesh.column_active)[0]:
            fix1[i * (nz + 1):(i + 1) * (nz + 1)] = True
        self.dirichlet_nodes = dir2

        free_node = used2 & ~dir2
        vfree = np.repeat(free_node, 2)
        pfree = used1 & ~fix1
        self.nv = int(vfree.sum())
        self.np_ = int(pfree.sum())
        self.vmap = -np.ones(2 * self.n_q2, np.int64)
        self.vmap[vfree] = np.arange(self.nv)
        self.pmap = -np.ones(self.n_q1, np.int64)
        self.pmap[pfree] = self.nv + np.arange(self.np_)
        self.vfree_idx = np.nonzero(vfree)[0]
        self.pfree_idx = np.nonzero(pfree)[0]

        self.edofs = (2 * self.q2_nodes[:, :, None] + np.arange(2)[None, None, :]).reshape(self.ne, 18)
        self.ev = self.vmap[self.edofs]          # reduced index or -1
        self.ep = self.pmap[self.q1_nodes]

    @property
    def ndof(self):
        return self.nv + self.np_

    def _constant_blocks(self):
        # pressure coupling  -int psi_k div(v_a)
        self.Gel = -np.einsum("eqa,qk,eq->eak", self.div, self.phi1, self.wdet)
        ev, ep = self.ev, self.ep
        r = np.broadcast_to(ev[:, :, None], self.Gel.shape)
        c = np.broadcast_to(ep[:, None, :], self.Gel.shape)
        m = (r >= 0) & (c >= 0)
        G = sp.coo_matrix((self.Gel[m], (r[m], c[m] - self.nv)), shape=(self.nv, self.np_)).tocsr()
        self.G = G
        rk = np.broadcast_to(ev[:, :, None], (self.ne, 18, 18))
        ck = np.broadcast_to(ev[:, None, :], (self.ne, 18, 18))
        self._kmask = ((rk >= 0) & (ck >= 0)).ravel()
        self._krows = rk.ravel()[self._kmask]
        self._kcols = ck.ravel()[self._kmask]

    def _top_edge(self):
        top = self.je == self.nz - 1
        self.top_el = np.nonzero(top)[0]
        rule = fem.quad_rule("interval", 6)
        self.top_rule = rule
        self.top_phi = fem.p2_1d(rule.points)            # (nq1, 3): along xi at eta=1
        self.top_local = np.array([ax * 3 + 2 for ax in range(3)])
        c = self.ce[self.top_el]
        self.top_cells = c
        base = self.mesh.base
        self.top_dx = base.dx[c]
        self.top_x = base.nodes[c][:, None] + rule.points[None, :] * self.top_dx[:, None]
        s = self.mesh.surface
        self.top_slope = (s[c + 1] - s[c]) / self.top_dx
        self.top_z = s[c][:, None] + rule.points[None, :] * (s[c + 1] - s[c])[:, None]

    # -- helpers ------------------------------------------------------------
    def element_values(self, U, P):
        """Element coefficient arrays from full nodal arrays."""
        Ue = U.reshape(-1)[self.edofs]
        Pe = P[self.q1_nodes]
        return Ue, Pe

    def reduce(self, U, P):
        x = np.empty(self.ndof)
        x[: self.nv] = U.reshape(-1)[self.vfree_idx]
        x[self.nv:] = P[self.pfree_idx]
        return x

    def expand(self, x):
        U = np.zeros(2 * self.n_q2)
        U[self.vfree_idx] = x[: self.nv]
        P = np.zeros(self.n_q1)
        P[self.pfree_idx] = x[self.nv:]
        return U.reshape(-1, 2), P

    def _scatter(self, vals, idx, n):
        m = idx >= 0
        return np.bincount(idx[m], weights=vals[m], minlength=n)

    def q2_coords(self):
        """Coordinates (x, z) of every Q2 node (full grid numbering)."""
        mesh = self.mesh
        xb = mesh.base.nodes
        xq = np.empty(2 * self.nx + 1)
        xq[0::2] = xb
        xq[1::2] = 0.5 * (xb[:-1] + xb[1:])
        frac = np.arange(self.nzq2) / (2.0 * self.nz)
        H = mesh.thickness
        Hq = np.empty(2 * self.nx + 1)
        Hq[0::2] = H
        Hq[1::2] = 0.5 * (H[:-1] + H[1:])
        bq = np.empty(2 * self.nx + 1)
        bq[0::2] = mesh.bed
        bq[1::2] = 0.5 * (mesh.bed[:-1] + mesh.bed[1:])
        X = np.repeat(xq, self.nzq2)
        Zc = (bq[:, None] + Hq[:, None] * frac[None, :]).ravel()
        return X, Zc

    def q1_coords(self):
        X = np.repeat(self.mesh.base.nodes, self.nz + 1)
        return X, self.mesh.z.ravel()


def discretization(mesh):
    d = getattr(mesh, "_stokes_disc", None)
    if d is None:
        d = StokesDiscretization(mesh)
        object.__setattr__(mesh, "_stokes_disc", d)
    return d


@dataclass
class StokesState:
    mesh: object
    U: np.ndarray          # (n_q2, 2) velocity, m s-1
    P: np.ndarray          # (n_q1,) pressure, Pa
    iterations: int = 0
    residual_norm: float = np.nan
    history: list = field(default_factory=list)

    @classmethod
    def zero(cls, mesh):
        d = discretization(mesh)
        return cls(mesh, np.zeros((d.n_q2, 2)), np.zeros(d.n_q1))

    @property
    def disc(self):
        return discretization(self.mesh)


@dataclass
class SurfaceVelocity:
    """Top-surface velocity trace, quadratic on each cell, zero off-ice.

    u, w hold values at base-mesh nodes; u_mid, w_mid at cell midpoints.
    """

    mesh: object            # IntervalMesh
    u: np.ndarray
    w: np.ndarray
    u_mid: np.ndarray = None
    w_mid: np.ndarray = None
    active: np.ndarray = None

    def __post_init__(self):
        n = self.mesh.nx + 1
        self.u = np.asarray(self.u, float)
        self.w = np.asarray(self.w, float)
        if self.u.shape != (n,) or self.w.shape != (n,):
            raise InvalidArgument("surface velocity arrays must have one value per node")
        if self.u_mid is None:
            self.u_mid = 0.5 * (self.u[:-1] + self.u[1:])
        if self.w_mid is None:
            self.w_mid = 0.5 * (self.w[:-1] + self.w[1:])
        if self.active is None:
            self.active = np.ones(n, bool)

    @classmethod
    def zero(cls, mesh):
        n = mesh.nx + 1
        return cls(mesh, np.zeros(n), np.zeros(n), active=np.zeros(n, bool))

    def at_points(self, xi):
        """Values (u, w) at reference points xi in every cell: (nx, len(xi))."""
        phi = fem.p2_1d(xi)
        def ev(v, vm):
            return v[:-1, None] * phi[None, :, 0] + vm[:, None] * phi[None, :, 1] + v[1:, None] * phi[None, :, 2]
        return ev(self.u, self.u_mid), ev(self.w, self.w_mid)


# ---------------------------------------------------------------------------
# assembly

def _assemble(disc, U, P, params, fssa=None, body_force=None, traction=None, jacobian=True):
    """Residual on free dofs, load-vector norm, and (optionally) the
    velocity-velocity Jacobian block as CSR."""
    Ue, Pe = disc.element_values(U, P)
    B = disc.B
    e = np.einsum("eqia,ea->eqi", B, Ue)
    D2 = np.einsum("eqi,eqi->eq", e, e)
    nu = glen_viscosity(D2, params)
    w2nu = 2.0 * nu * disc.wdet
    Rel = np.einsum("eqia,eqi->ea", B, w2nu[:, :, None] * e)
    Rel += np.einsum("eak,ek->ea", disc.Gel, Pe)

    # body force -int f.v
    if body_force is None:
        Fel = np.zeros((disc.ne, 18))
        Fel[:, 1::2] = params.rho_i * params.g * np.einsum("eq,qa->ea", disc.wdet, disc.phi2)
    else:
        fx, fz = body_force(disc.xq, disc.zq)
        fx = np.broadcast_to(fx, disc.xq.shape)
        fz = np.broadcast_to(fz, disc.xq.shape)
        Fel = np.zeros((disc.ne, 18))
        Fel[:, 0::2] = -np.einsum("eq,qa->ea", disc.wdet * fx, disc.phi2)
        Fel[:, 1::2] = -np.einsum("eq,qa->ea", disc.wdet * fz, disc.phi2)
    load = disc._scatter(Fel.ravel(), disc.ev.ravel(), disc.nv)

    Kel = None
    if jacobian:
        nup = _glen_dviscosity(D2, params)
        gvec = np.einsum("eqia,eqi->eqa", B, e)
        Bw = B * w2nu[:, :, None, None]
        ne, nq = B.shape[:2]
        Kel = np.matmul(Bw.reshape(ne, nq * 3, 18).transpose(0, 2, 1), B.reshape(ne, nq * 3, 18))
        gw = gvec * (4.0 * nup * disc.wdet)[:, :, None]
        Kel += np.matmul(gw.transpose(0, 2, 1), gvec)

    Ru = disc._scatter(Rel.ravel(), disc.ev.ravel(), disc.nv) + load
    Rp = disc.G.T @ disc.reduce(U, P)[: disc.nv]

    K = None
    if jacobian:
        K = sp.coo_matrix((Kel.ravel()[disc._kmask], (disc._krows, disc._kcols)), shape=(disc.nv, disc.nv)).tocsr()

    top_load = np.zeros(disc.nv)
    if (fssa is not None or traction is not None) and len(disc.top_el):
        tel = disc.top_el
        wq = disc.top_rule.weights[None, :] * disc.top_dx[:, None]
        phi = disc.top_phi
        loc = disc.top_local
        rows_z = disc.ev[tel][:, 2 * loc + 1]
        rows_x = disc.ev[tel][:, 2 * loc]
        if fssa is not None and fssa.theta != 0.0:
            Ut = Ue[tel]
            ut = np.einsum("qa,ea->eq", phi, Ut[:, 2 * loc])
            wt = np.einsum("qa,ea->eq", phi, Ut[:, 2 * loc + 1])
            sl = disc.top_slope[:, None]
            smb = np.broadcast_to(np.asarray(fssa.smb, float), (disc.nx + 1,)) if np.ndim(fssa.smb) else np.full(disc.nx + 1, float(fssa.smb))
            c = disc.top_cells
            a_q = smb[c][:, None] * (1 - disc.top_rule.points)[None, :] + smb[c + 1][:, None] * disc.top_rule.points[None, :]
            coef = fssa.theta * fssa.dt * params.rho_i * params.g
            un = -ut * sl + wt
            Ru += disc._scatter(np.einsum("eq,qa->ea", coef * wq * un, phi).ravel(), rows_z.ravel(), disc.nv)
            fl = np.einsum("eq,qa->ea", coef * wq * a_q, phi)
            Ru += disc._scatter(fl.ravel(), rows_z.ravel(), disc.nv)
            top_load += disc._scatter(fl.ravel(), rows_z.ravel(), disc.nv)
            if jacobian:
                M = np.einsum("eq,qa,qb->eab", coef * wq, phi, phi)
                blocks = [(rows_z, rows_x, -M * sl[:, :, None]), (rows_z, rows_z, M)]
                rr, cc, vv = [], [], []
                for r_, c_, v_ in blocks:
                    R_ = np.broadcast_to(r_[:, :, None], v_.shape)
                    C_ = np.broadcast_to(c_[:, None, :], v_.shape)
                    m = (R_ >= 0) & (C_ >= 0)
                    rr.append(R_[m]); cc.append(C_[m]); vv.append(v_[m])
                K = K + sp.coo_matrix((np.concatenate(vv), (np.concatenate(rr), np.concatenate(cc))), shape=K.shape).tocsr()
        if traction is not None:
            tx, tz = traction(disc.top_x, disc.top_z)
            dS = np.sqrt(1.0 + disc.top_slope ** 2)[:, None]
            fx = -np.einsum("eq,qa->ea", np.broadcast_to(tx, wq.shape) * wq * dS, phi)
            fz = -np.einsum("eq,qa->ea", np.broadcast_to(tz, wq.shape) * wq * dS, phi)
            tl = disc._scatter(fx.ravel(), rows_x.ravel(), disc.nv) + disc._scatter(fz.ravel(), rows_z.ravel(), disc.nv)
            Ru += tl
            top_load += tl

    loadnorm = np.linalg.norm(load + top_load)
    return Ru, Rp, loadnorm, K


def assemble_residual(state, params, fssa=None, body_force=None, traction=None):
    """Residual of the weak Stokes form at `state`, one entry per free
    test function: velocity rows first, then pressure rows."""
    disc = state.disc
    if disc.ndof == 0:
        return np.zeros(0)
    Ru, Rp, _, _ = _assemble(disc, state.U, state.P, params, fssa, body_force, traction, jacobian=False)
    return np.concatenate([Ru, Rp])


def assemble_jacobian(state, params, fssa=None):
    """Newton Jacobian (free dofs, same ordering as assemble_residual)."""
    disc = state.disc
    _, _, _, K = _assemble(disc, state.U, state.P, params, fssa, jacobian=True)
    return sp.bmat([[K, disc.G], [disc.G.T, None]], format="csr")


def solve_stokes(mesh, params, init=None, fssa=None, tol=1e-9, max_newton=50,
                 body_force=None, traction=None, log_path=None):
    """Newton solve; returns a StokesState carrying iteration count and
    the final relative residual."""
    disc = discretization(mesh)
    state = StokesState.zero(mesh)
    if disc.ndof == 0:
        state.residual_norm = 0.0
        return state
    if init is not None and init.U.shape == state.U.shape and init.P.shape == state.P.shape:
        x = disc.reduce(init.U, init.P)
    else:
        x = np.zeros(disc.ndof)
    nv = disc.nv

    def evaluate(x, jac=True):
        U, P = disc.expand(x)
        return _assemble(disc, U, P, params, fssa, body_force, traction, jacobian=jac)

    Ru, Rp, loadnorm, K = evaluate(x)
    ref = loadnorm if loadnorm > 0 else 1.0
    # pressure unknowns are scaled by c so both blocks carry force units
    kd = np.abs(K.diagonal())
    gd = np.abs(disc.G.data)
    c = np.median(kd[kd > 0]) / np.median(gd[gd > 0]) if len(gd) and np.any(kd > 0) else 1.0

    def merit(Ru, Rp):
        return np.sqrt(Ru @ Ru + c * c * (Rp @ Rp)) / ref

    rel = merit(Ru, Rp)
    history = [(0, rel)]
    it = 0
    while rel > tol:
        if it >= max_newton:
            raise NonConvergence(f"Newton did not converge in {max_newton} iterations (residual {rel:.3e})",
                                 residual=rel)
        it += 1
        J = sp.bmat([[K, c * disc.G], [c * disc.G.T, None]], format="csc")
        rhs = -np.concatenate([Ru, c * Rp])
        dy = fem.solve_sparse((J, rhs), rtol=1e-8)
        dx = dy.copy()
        dx[nv:] *= c
        lam, best = 1.0, None
        for _ in range(21):
            xt = x + lam * dx
            Rut, Rpt, _, Kt = evaluate(xt)
            mt = merit(Rut, Rpt)
            if best is None or mt < best[0]:
                best = (mt, xt, Rut, Rpt, Kt)
            if mt <= (1.0 - 1e-4 * lam) * rel:
                break
            lam *= 0.5
        rel, x, Ru, Rp, K = best
        history.append((it, rel))
        log.debug("stokes newton %d: lambda=%.3g residual=%.3e", it, lam, rel)

    U, P = disc.expand(x)
    state = StokesState(mesh, U, P, iterations=it, residual_norm=rel, history=history)
    if log_path:
        with open(log_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "relative_residual"])
            w.writerows(history)
    return state


# ---------------------------------------------------------------------------
# post-processing

def surface_trace(state):
    disc = state.disc
    mesh = state.mesh
    base = mesh.base
    top = np.arange(2 * disc.nx + 1) * disc.nzq2 + (disc.nzq2 - 1)
    ut = state.U[top, 0].copy()
    wt = state.U[top, 1].copy()
    active = mesh.column_active.copy()
    # extension by zero off the ice
    used = np.zeros(2 * disc.nx + 1, bool)
    for c in disc.cells:
        used[2 * c + 1] = True
    ut[0::2][~active] = 0.0
    wt[0::2][~active] = 0.0
    ut[1::2][~used[1::2]] = 0.0
    wt[1::2][~used[1::2]] = 0.0
    return SurfaceVelocity(base, ut[0::2], wt[0::2], ut[1::2], wt[1::2], active)


def trace_integral(sv, s, p_exp, npts=5):
    """Integral over the upper surface of |u|^p dS, dS = sqrt(1 + s'^2) dx."""
    if not sv.mesh.same_as(s.mesh):
        raise InvalidArgument("surface velocity and surface on different meshes")
    rule = fem.quad_rule("interval", 2 * npts - 1)
    u, w = sv.at_points(rule.points)
    dS = np.sqrt(1.0 + s.slope() ** 2) * s.mesh.dx
    speed = np.sqrt(u * u + w * w)
    return float(np.sum(dS[:, None] * rule.weights[None, :] * speed ** p_exp))


def v_norm(state, params):
    """([H]-scaled) W^{1,p} norm of the velocity over the ice."""
    disc = state.disc
    if disc.ne == 0:
        return 0.0
    p = params.p
    Ue = state.U.reshape(-1)[disc.edofs]
    ux = np.einsum("qa,ea->eq", disc.phi2, Ue[:, 0::2])
    uz = np.einsum("qa,ea->eq", disc.phi2, Ue[:, 1::2])
    gx = np.einsum("eqad,ea->eqd", disc.grad2, Ue[:, 0::2])
    gz = np.einsum("eqad,ea->eqd", disc.grad2, Ue[:, 1::2])
    vmag = np.sqrt(ux ** 2 + uz ** 2)
    gmag = np.sqrt(np.sum(gx ** 2, axis=-1) + np.sum(gz ** 2, axis=-1))
    total = np.sum(disc.wdet * vmag ** p) + params.H_scale ** p * np.sum(disc.wdet * gmag ** p)
    return float(total ** (1.0 / p))


def dissipation_balance(state, params):
    """(int 2 nu(Du) Du:Du, int rho_i g.u) over the ice."""
    disc = state.disc
    Ue = state.U.reshape(-1)[disc.edofs]
    e = np.einsum("eqia,ea->eqi", disc.B, Ue)
    D2 = np.einsum("eqi,eqi->eq", e, e)
    diss = float(np.sum(2.0 * glen_viscosity(D2, params) * D2 * disc.wdet))
    wz = np.einsum("qa,ea->eq", disc.phi2, Ue[:, 1::2])
    work = float(-params.rho_i * params.g * np.sum(wz * disc.wdet))
    return diss, work


def weak_divergence(state):
    """Vector of int q div(u) over all free pressure test functions."""
    disc = state.disc
    return disc.G.T @ disc.reduce(state.U, state.P)[: disc.nv] * -1.0
