import csv

import numpy as np
import pytest
import sympy as sym
from hypothesis import given, settings, strategies as st

from glacier_vi.errors import InvalidArgument, NonConvergence
from glacier_vi.mesh import IntervalMesh, SurfaceField, build_interval, extrude
from glacier_vi.stokes import (
    FSSA, SECPERA, PhysParams, StokesState, SurfaceVelocity, assemble_jacobian, assemble_residual,
    discretization, dissipation_balance, glen_viscosity, solve_stokes, surface_trace, trace_integral,
    v_norm, weak_divergence,
)

from conftest import dome_mesh, slab

RHO_G = 910.0 * 9.81


# -- viscosity -------------------------------------------------------------

def test_newtonian_viscosity_constant():
    P = PhysParams(p=2.0, nu_p=3.5e13)
    assert np.all(glen_viscosity(np.array([0.0, 1e-20, 1.0, 1e6]), P) == 3.5e13)


def test_viscosity_at_zero_strain():
    P = PhysParams()
    assert glen_viscosity(0.0, P) == pytest.approx(P.nu_p * P.eps ** ((P.p - 2) / 2), rel=1e-15)


def test_viscosity_reference_value():
    P = PhysParams(p=4 / 3, eps=1e-19)
    oracle = P.nu_p * pow(1.001e-16, -1.0 / 3.0)
    assert glen_viscosity(1e-16, P) == pytest.approx(oracle, rel=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1e-6), st.floats(0, 1e-6), st.floats(1.05, 2.0))
def test_viscosity_bounded_and_nonincreasing(a, b, p):
    P = PhysParams(p=p)
    top = P.nu_p * P.eps ** ((p - 2) / 2)
    lo, hi = min(a, b), max(a, b)
    assert 0 < glen_viscosity(hi, P) <= glen_viscosity(lo, P) * (1 + 1e-15) <= top * (1 + 1e-15)


def test_param_validation():
    for kw in (dict(p=1.0), dict(p=2.5), dict(eps=0.0), dict(nu_p=-1.0), dict(H_scale=0.5)):
        with pytest.raises(InvalidArgument):
            PhysParams(**kw)


def test_default_softness_equivalence():
    P = PhysParams()
    assert P.n == pytest.approx(3.0)
    assert P.softness() == pytest.approx(2 * 3.1689e-24, rel=1e-12)


# -- residual ----------------------------------------------------------------

def test_zero_data_zero_residual():
    mesh = slab()
    R = assemble_residual(StokesState.zero(mesh), PhysParams(g=0.0))
    assert R.size > 0 and np.all(R == 0)


def test_inactive_mesh_empty_residual():
    m = build_interval(100.0, 4)
    b = SurfaceField(m, np.zeros(5))
    mesh = extrude(m, b, b, 3)
    assert assemble_residual(StokesState.zero(mesh), PhysParams()).size == 0


def test_hydrostatic_state_balances_momentum():
    mesh = slab(L=2000.0, nx=6, H=300.0, nz=4)
    d = discretization(mesh)
    _, Z = d.q1_coords()
    st = StokesState.zero(mesh)
    st.P = RHO_G * (300.0 - Z)
    R = assemble_residual(st, PhysParams())
    Ru = R[: d.nv]
    scale = RHO_G * np.abs(d.wdet).sum() / d.nv
    assert np.abs(Ru).max() < 1e-10 * scale


# -- manufactured solution ---------------------------------------------------

def _manufactured():
    x, z = sym.symbols("x z")
    psi = sym.sin(sym.pi * x) ** 2 * z ** 2
    u, w = sym.diff(psi, z), -sym.diff(psi, x)
    p = sym.cos(sym.pi * x) * (1 - z)
    Dxx, Dzz, Dxz = sym.diff(u, x), sym.diff(w, z), (sym.diff(u, z) + sym.diff(w, x)) / 2
    sxx, szz, sxz = 2 * Dxx - p, 2 * Dzz - p, 2 * Dxz
    fx = -(sym.diff(sxx, x) + sym.diff(sxz, z))
    fz = -(sym.diff(sxz, x) + sym.diff(szz, z))
    lam = lambda e: sym.lambdify((x, z), e, "numpy")
    return dict(u=lam(u), w=lam(w), fx=lam(fx), fz=lam(fz), tx=lam(sxz), tz=lam(szz),
                grad=[lam(sym.diff(u, x)), lam(sym.diff(u, z)), lam(sym.diff(w, x)), lam(sym.diff(w, z))])


def _unit_square(n):
    m = IntervalMesh(np.linspace(0.0, 1.0, n + 1))
    b = SurfaceField(m, np.zeros(n + 1))
    return extrude(m, b, SurfaceField(m, np.ones(n + 1)), n, H_min=0.5)


def _h1_error(st, ms):
    d = st.disc
    Ue = st.U.reshape(-1)[d.edofs]
    gu = np.einsum("eqad,ea->eqd", d.grad2, Ue[:, 0::2])
    gw = np.einsum("eqad,ea->eqd", d.grad2, Ue[:, 1::2])
    X, Z = d.xq, d.zq
    ex = [f(X, Z) * np.ones_like(X) for f in ms["grad"]]
    err = (gu[..., 0] - ex[0]) ** 2 + (gu[..., 1] - ex[1]) ** 2 + (gw[..., 0] - ex[2]) ** 2 + (gw[..., 1] - ex[3]) ** 2
    return np.sqrt(np.sum(err * d.wdet))


def manufactured_errors(ns=(4, 8, 16)):
    ms = _manufactured()
    P = PhysParams(p=2.0, nu_p=1.0, g=0.0)
    errs = []
    for n in ns:
        mesh = _unit_square(n)
        st = solve_stokes(mesh, P, tol=1e-12,
                          body_force=lambda x, z: (ms["fx"](x, z), ms["fz"](x, z)),
                          traction=lambda x, z: (ms["tx"](x, z), ms["tz"](x, z)))
        errs.append(_h1_error(st, ms))
    return np.array(errs)


def test_manufactured_newtonian_convergence():
    e = manufactured_errors()
    rates = np.log2(e[:-1] / e[1:])
    assert np.all(rates >= 1.8), (e, rates)


def test_manufactured_residual_at_interpolant_shrinks():
    ms = _manufactured()
    P = PhysParams(p=2.0, nu_p=1.0, g=0.0)
    norms = []
    for n in (4, 8, 16):
        mesh = _unit_square(n)
        d = discretization(mesh)
        X, Z = d.q2_coords()
        st = StokesState.zero(mesh)
        st.U[:, 0], st.U[:, 1] = ms["u"](X, Z), ms["w"](X, Z)
        st.U[d.dirichlet_nodes] = 0.0
        from glacier_vi.stokes import _assemble
        Ru, _, _, _ = _assemble(d, st.U, st.P, P, body_force=lambda x, z: (ms["fx"](x, z), ms["fz"](x, z)),
                                traction=lambda x, z: (ms["tx"](x, z), ms["tz"](x, z)), jacobian=False)
        Xq1, Zq1 = d.q1_coords()
        st.P = np.cos(np.pi * Xq1) * (1 - Zq1)
        Ru, _, _, _ = _assemble(d, st.U, st.P, P, body_force=lambda x, z: (ms["fx"](x, z), ms["fz"](x, z)),
                                traction=lambda x, z: (ms["tx"](x, z), ms["tz"](x, z)), jacobian=False)
        norms.append(np.abs(Ru).max())
    rates = np.log2(np.array(norms[:-1]) / np.array(norms[1:]))
    assert np.all(rates >= 1.8), (norms, rates)


# -- solver ----------------------------------------------------------------

def test_zero_gravity_zero_solution():
    st = solve_stokes(slab(), PhysParams(g=0.0))
    assert st.iterations <= 1
    assert np.all(st.U == 0) and np.all(st.P == 0)


@pytest.mark.parametrize("p", [2.0, 4 / 3])
def test_hydrostatic_slab(p):
    mesh = slab(L=5000.0, nx=5, H=400.0, nz=4)
    st = solve_stokes(mesh, PhysParams(p=p), tol=1e-10)
    _, Z = st.disc.q1_coords()
    ex = RHO_G * (400.0 - Z)
    assert np.abs(st.P - ex).max() <= 1e-8 * np.abs(ex).max()
    sv = surface_trace(st)
    assert np.abs(sv.u).max() < 1e-10 and np.abs(sv.w).max() < 1e-10


def test_nonconvergence_carries_residual():
    mesh = dome_mesh(nx=20, nz=4)
    with pytest.raises(NonConvergence) as exc:
        solve_stokes(mesh, PhysParams(), max_newton=1, tol=1e-14)
    assert exc.value.residual > 0


def test_no_ice_returns_zero_state():
    m = build_interval(100.0, 4)
    b = SurfaceField(m, np.zeros(5))
    st = solve_stokes(extrude(m, b, b, 3), PhysParams())
    assert not st.U.any()
    sv = surface_trace(st)
    assert not sv.u.any() and not sv.w.any() and not sv.active.any()


def test_convergence_log(tmp_path):
    path = tmp_path / "newton.csv"
    st = solve_stokes(dome_mesh(nx=16, nz=3), PhysParams(), log_path=str(path))
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["iteration", "relative_residual"]
    assert len(rows) == st.iterations + 2
    assert float(rows[-1][1]) <= 1e-9


@pytest.fixture(scope="module")
def dome_solution():
    mesh = dome_mesh(nx=40, nz=6)
    P = PhysParams()
    return mesh, P, solve_stokes(mesh, P, tol=1e-11)


def test_dome_symmetry(dome_solution):
    mesh, P, st = dome_solution
    sv = surface_trace(st)
    umax = np.abs(sv.u).max()
    assert abs(sv.u[20]) < 1e-3 * umax
    assert np.abs(sv.u + sv.u[::-1]).max() < 1e-6 * umax
    assert np.abs(sv.w - sv.w[::-1]).max() < 1e-6 * umax
    # fastest near the margins, not in the middle
    i = np.argmax(np.abs(sv.u))
    assert abs(mesh.base.nodes[i]) > 0.5 * 70e3


def test_dome_against_shallow_ice_magnitude(dome_solution):
    mesh, P, st = dome_solution
    sv = surface_trace(st)
    x = mesh.base.nodes
    s = SurfaceField(mesh.base, mesh.surface)
    n = P.n
    slope = s.nodal_slope()
    H = mesh.thickness
    sia = -2 * P.softness() / (n + 1) * RHO_G ** n * H ** (n + 1) * np.abs(slope) ** (n - 1) * slope
    pick = (np.abs(x) > 15e3) & (np.abs(x) < 50e3)
    ratio = sv.u[pick] / sia[pick]
    assert np.all((ratio > 0.3) & (ratio < 3.0)), ratio


def test_dissipation_identity(dome_solution):
    _, P, st = dome_solution
    diss, work = dissipation_balance(st, P)
    assert diss > 0
    assert abs(diss - work) <= 1e-6 * work


def test_weak_incompressibility(dome_solution):
    _, P, st = dome_solution
    d = st.disc
    scale = abs(d.G).T @ np.abs(d.reduce(st.U, st.P)[: d.nv])
    assert np.all(np.abs(weak_divergence(st)) <= 1e-8 * scale.max())


def test_reflection_equivariance():
    m = build_interval(30e3, 12)
    x = m.nodes
    bed = 50 * np.sin(x / 7e3) + 20
    H = 600 * np.maximum(0, 1 - ((x - 3e3) / 25e3) ** 2) ** 0.5
    b1 = SurfaceField(m, bed)
    s1 = SurfaceField(m, bed + H)
    b2 = SurfaceField(m, bed[::-1])
    s2 = SurfaceField(m, (bed + H)[::-1])
    P = PhysParams()
    st1 = solve_stokes(extrude(m, b1, s1, 4), P, tol=1e-11)
    st2 = solve_stokes(extrude(m, b2, s2, 4), P, tol=1e-11)
    d = st1.disc
    nI = 2 * d.nx + 1
    U1 = st1.U.reshape(nI, d.nzq2, 2)
    U2 = st2.U.reshape(nI, d.nzq2, 2)[::-1]
    scale = np.abs(U1).max()
    assert np.abs(U1[..., 0] + U2[..., 0]).max() < 1e-7 * scale
    assert np.abs(U1[..., 1] - U2[..., 1]).max() < 1e-7 * scale
    P1 = st1.P.reshape(d.nx + 1, d.nz + 1)
    P2 = st2.P.reshape(d.nx + 1, d.nz + 1)[::-1]
    assert np.abs(P1 - P2).max() < 1e-7 * np.abs(P1).max()


# -- Jacobian ------------------------------------------------------------------

def jacobian_fd_error(mesh, P, fssa=None, seed=0):
    d = discretization(mesh)
    rng = np.random.default_rng(seed)
    st = StokesState.zero(mesh)
    x = np.concatenate([rng.normal(scale=100 / SECPERA, size=d.nv), rng.normal(scale=1e6, size=d.np_)])
    st.U, st.P = d.expand(x)
    J = assemble_jacobian(st, P, fssa)
    worst = 0.0
    for _ in range(3):
        dx = np.concatenate([rng.normal(scale=100 / SECPERA, size=d.nv), rng.normal(scale=1e6, size=d.np_)])
        h = 1e-4
        sp_, sm_ = StokesState.zero(mesh), StokesState.zero(mesh)
        sp_.U, sp_.P = d.expand(x + h * dx)
        sm_.U, sm_.P = d.expand(x - h * dx)
        fd = (assemble_residual(sp_, P, fssa) - assemble_residual(sm_, P, fssa)) / (2 * h)
        jd = J @ dx
        worst = max(worst, np.linalg.norm(fd - jd) / np.linalg.norm(jd))
    return worst


@pytest.mark.parametrize("p", [4 / 3, 2.0, 1.6])
def test_jacobian_matches_finite_differences(p):
    assert jacobian_fd_error(dome_mesh(nx=10, nz=3), PhysParams(p=p)) < 1e-5


def test_jacobian_with_fssa():
    mesh = dome_mesh(nx=10, nz=3)
    smb = np.linspace(-1e-7, 1e-7, 11)
    assert jacobian_fd_error(mesh, PhysParams(), FSSA(dt=SECPERA, theta=1.0, smb=smb), seed=3) < 1e-5


def test_saddle_coupling_symmetric():
    mesh = dome_mesh(nx=8, nz=3)
    d = discretization(mesh)
    st = StokesState.zero(mesh)
    J = assemble_jacobian(st, PhysParams())
    B = J[: d.nv, d.nv:]
    C = J[d.nv:, : d.nv]
    assert abs(B - C.T).max() <= 1e-12 * abs(B).max()


def test_newtonian_assembly_linear(rng):
    mesh = dome_mesh(nx=8, nz=3)
    d = discretization(mesh)
    P = PhysParams(p=2.0, g=0.0)
    states = []
    for _ in range(2):
        s_ = StokesState.zero(mesh)
        s_.U, s_.P = d.expand(rng.normal(size=d.ndof))
        states.append(s_)
    both = StokesState.zero(mesh)
    both.U, both.P = states[0].U + states[1].U, states[0].P + states[1].P
    r = assemble_residual(states[0], P) + assemble_residual(states[1], P)
    assert np.abs(assemble_residual(both, P) - r).max() <= 1e-12 * np.abs(r).max()


def test_residual_linear_in_pressure(rng):
    mesh = dome_mesh(nx=8, nz=3)
    d = discretization(mesh)
    P = PhysParams(g=0.0)
    a, b = StokesState.zero(mesh), StokesState.zero(mesh)
    a.P = rng.normal(size=d.n_q1)
    b.P = rng.normal(size=d.n_q1)
    c = StokesState.zero(mesh)
    c.P = a.P + b.P
    r = assemble_residual(a, P) + assemble_residual(b, P)
    assert np.abs(assemble_residual(c, P) - r).max() <= 1e-12 * np.abs(r).max()


# -- trace, integrals, norms -----------------------------------------------------

def test_trace_integral_zero_and_constant():
    m = build_interval(50.0, 5)
    s = SurfaceField(m, np.full(6, 3.0))
    assert trace_integral(SurfaceVelocity.zero(m), s, 4 / 3) == 0.0
    c = 2.5
    sv = SurfaceVelocity(m, np.full(6, c * 0.6), np.full(6, c * 0.8))
    assert trace_integral(sv, s, 4 / 3) == pytest.approx(c ** (4 / 3) * 100.0, rel=1e-13)


def test_trace_integral_piecewise_linear_oracle():
    x_ = sym.symbols("x")
    m = IntervalMesh(np.array([0.0, 1.0, 2.5, 4.0]))
    u = np.array([1.0, -2.0, 0.5, 3.0])
    w = np.array([0.2, 0.1, -1.0, 0.0])
    s = SurfaceField(m, [0.0, 1.0, 0.4, 2.0])
    sv = SurfaceVelocity(m, u, w)
    oracle = 0.0
    for c in range(3):
        x0, x1 = m.nodes[c], m.nodes[c + 1]
        t = (x_ - x0) / (x1 - x0)
        uu = u[c] * (1 - t) + u[c + 1] * t
        ww = w[c] * (1 - t) + w[c + 1] * t
        slope = (s.values[c + 1] - s.values[c]) / (x1 - x0)
        oracle += float(sym.integrate((uu ** 2 + ww ** 2) * sym.sqrt(1 + slope ** 2), (x_, x0, x1)))
    assert trace_integral(sv, s, 2.0) == pytest.approx(oracle, rel=1e-12)


def test_trace_integral_mesh_mismatch():
    a, b = build_interval(1.0, 3), build_interval(1.0, 4)
    with pytest.raises(InvalidArgument):
        trace_integral(SurfaceVelocity.zero(a), SurfaceField(b, np.zeros(5)), 2.0)


def test_v_norm_examples():
    mesh = _unit_square(3)
    d = discretization(mesh)
    X, Z = d.q2_coords()
    P = PhysParams(p=2.0, H_scale=1.0)
    st = StokesState.zero(mesh)
    assert v_norm(st, P) == 0.0
    st.U[:, 0] = 0.7
    assert v_norm(st, P) == pytest.approx(0.7, rel=1e-13)
    st.U[:, 0] = Z
    assert v_norm(st, P) == pytest.approx(np.sqrt(1 / 3 + 1), rel=1e-13)


def test_surface_velocity_shape_checked():
    m = build_interval(1.0, 3)
    with pytest.raises(InvalidArgument):
        SurfaceVelocity(m, np.zeros(3), np.zeros(4))
