"""Implicit time stepping of a Stokes flowline glacier as a variational
inequality for the surface elevation."""

from .errors import InadmissibleGeometry, InvalidArgument, NonConvergence, SolverFailure
from .mesh import IntervalMesh, SurfaceField, build_interval, extrude
from .stokes import PhysParams, StokesState, SurfaceVelocity, solve_stokes, surface_trace

__version__ = "0.1.0"
