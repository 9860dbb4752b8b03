"""Data-driven variable-Eddington-factor (VEF) model.

The closure is built from angular moments of a transport intensity. Per
cell and group it is the symmetric Eddington tensor f = <Omega Omega I> /
<I> (components xx, xy, yy, zz; xz = yz = 0 in 2D); per boundary face it
is the outgoing flux factor C = <n.Omega I>+ / <I>+ over the exiting half
range. The offline phase re-solves the linear transport equation on a
given temperature history - opacity and emission frozen at the data - and
tabulates the closure at the end of every step together with the
quadrature moments of the boundary drive. The online phase closes the
radiation moment system with those tables: per group

    dE/dt + div F + c kappa E = 4 pi kappa B(T),
    (1/c) dF/dt + c div(f E) + kappa F = 0,

with the face condition n.F = c C eta E - F_in + c rb: the incoming
partial current F_in is known drive data and enters exactly, while the
outgoing current is the flux factor times the outgoing face-to-cell
density ratio eta times the local density, and rb is a per-face
consistency source (identically zero for transport-derived closures).

Backward Euler eliminates each face flux exactly as in the diffusion
module: the divergence of the closed pressure tensor is discretized with
face-interpolated tensor components times central density differences
(f_xx dE/dx plus the f_xy cross term on x-faces, and symmetrically on
y-faces). Because the moment stencil and the transport sweep discretize
space differently, that stencil alone leaves an O(1) flux mismatch
wherever the radiation front spans only a few cells or a thin group
streams through a flat density field. The closure therefore replaces the
interpolated normal components with face-normal closure factors gx, gy
solved from the sweep's own face equation wherever the solved value
lands in the physical Eddington range [0, 1] - ratio data, insensitive
to the magnitude of the generating fields and no harder on the operator
than the interpolated tensor - plus additive face-flux consistency
remainders rx, ry carrying whatever the windowed factor cannot absorb,
which ride on the right-hand side without touching the operator. On the
boundary the outgoing ratio eta recovers the sweep's outward current
exactly while the incoming drive current bypasses the closure
altogether. Everything fed to the operator is therefore either a
bounded ratio or a fixed interpolation weight, while magnitude-
sensitive information either is exact drive data or rides on the right-
hand side, where approximate data perturbs the solution only linearly.
With this discretely consistent closure the online solve driven by data
from a converged reference transport run reproduces that run's moments
to solver tolerance, and closures from approximate temperature data
inherit the accuracy of the auxiliary transport solve rather than that
of a bare diffusion stencil.

Fusing both phases advances the auxiliary intensity and the moment state
together step by step with no stored dataset, reproducing the two-phase
composition bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .diffusion import MomentState
from .errors import ConfigError, SolverError
from .grid import SIDES, AngularQuadrature, FrequencyGrid, SpatialMesh
from .history import stack_history
from .iteration import exchange_preconditioner, exchange_sensitivity, fixed_point_solve
from .physics import DEFAULT_CONSTANTS, MaterialEOS, PhysicalConstants, group_planck, update_temperature
from .transport import (
    BoundaryInflow,
    SolverOptions,
    StepDiagnostics,
    SweepResult,
    TransportProblem,
    energy_balance_residual,
    sweep,
)

#: Outward unit normals of the canonical boundary sides.
_NORMALS = {
    "left": np.array([-1.0, 0.0, 0.0]),
    "right": np.array([1.0, 0.0, 0.0]),
    "bottom": np.array([0.0, -1.0, 0.0]),
    "top": np.array([0.0, 1.0, 0.0]),
}

#: Acceptance window for the data-derived face closure factors. Factors
#: outside [0, 1] would give a face an anti-diffusive or superluminal
#: response and destabilise the nonlinear iteration, so such faces fall
#: back to the face-interpolated tensor component and their defect rides
#: on the consistency remainder instead.
_FACTOR_LO = 0.0
_FACTOR_HI = 1.0


# ---------------------------------------------------------------------------
# closure extraction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EddingtonTensor:
    """Cell-wise second angular moment ratio, components (G, ny, nx)."""

    xx: np.ndarray
    xy: np.ndarray
    yy: np.ndarray
    zz: np.ndarray

    @property
    def trace(self) -> np.ndarray:
        return self.xx + self.yy + self.zz


def eddington_tensor(psi: np.ndarray, quad: AngularQuadrature, rel_floor: float = 1.0e-30) -> EddingtonTensor:
    """Ratio of quadrature moments sum(w Omega Omega I) / sum(w I) per cell.

    psi is laid out (ny, nx, G, M). Cells whose scalar moment falls below
    rel_floor times the group's largest (or to zero) get the isotropic
    fallback diag(1/3, 1/3, 1/3); such cells only occur where the field is
    numerically dark and any closure produces the same near-zero moments.
    """
    w = quad.weight
    ox, oy = quad.omega[:, 0], quad.omega[:, 1]
    oz2 = 1.0 - ox**2 - oy**2
    phi = np.einsum("yxgm,m->gyx", psi, w)
    sxx = np.einsum("yxgm,m->gyx", psi, w * ox * ox)
    sxy = np.einsum("yxgm,m->gyx", psi, w * ox * oy)
    syy = np.einsum("yxgm,m->gyx", psi, w * oy * oy)
    szz = np.einsum("yxgm,m->gyx", psi, w * oz2)

    scale = phi.max(axis=(1, 2), keepdims=True)
    dark = phi <= rel_floor * scale
    safe = np.where(dark, 1.0, phi)
    third = np.full_like(phi, 1.0 / 3.0)
    return EddingtonTensor(
        xx=np.where(dark, third, sxx / safe),
        xy=np.where(dark, 0.0, sxy / safe),
        yy=np.where(dark, third, syy / safe),
        zz=np.where(dark, third, szz / safe),
    )


def boundary_factors(psi: np.ndarray, quad: AngularQuadrature, mesh: SpatialMesh) -> np.ndarray:
    """Outgoing flux factor C per canonical boundary face, (G, n_faces).

    C = sum over exiting directions of w (n.Omega) I divided by the same
    sum without the (n.Omega) weight; isotropic exiting intensity gives the
    half-range ratio ~1/2. Faces with no exiting energy fall back to 1/2.
    """
    G = psi.shape[2]
    C = np.full((G, mesh.n_boundary_faces), 0.5)
    cells = {
        "left": psi[:, 0, :, :],
        "right": psi[:, -1, :, :],
        "bottom": psi[0, :, :, :],
        "top": psi[-1, :, :, :],
    }
    for side in SIDES:
        normal = _NORMALS[side]
        out = quad.half_range(normal, outgoing=True)
        w_out = quad.weight[out]
        wn_out = w_out * (quad.omega[out] @ normal)
        face_psi = cells[side][:, :, out]  # (n_faces_side, G, M_out)
        wI = face_psi @ w_out
        wnI = face_psi @ wn_out
        sl = mesh.boundary_slice(side)
        with np.errstate(invalid="ignore", divide="ignore"):
            C[:, sl] = np.where(wI > 0.0, wnI / np.where(wI > 0.0, wI, 1.0), 0.5).T
    return C


def _xface_mean(a: np.ndarray) -> np.ndarray:
    """Arithmetic mean of a cell field on interior x-faces, (G, ny, nx-1)."""
    return 0.5 * (a[:, :, :-1] + a[:, :, 1:])


def _yface_mean(a: np.ndarray) -> np.ndarray:
    """Arithmetic mean of a cell field on interior y-faces, (G, ny-1, nx)."""
    return 0.5 * (a[:, :-1, :] + a[:, 1:, :])


def _xface_cross(E: np.ndarray, fxy_face: np.ndarray, dy: float) -> np.ndarray:
    """Cross term f_xy dE/dy on interior x-faces, edge rows clipped.

    The face density is the adjacent-cell mean and the y-derivative is the
    central difference of that mean; at the first and last rows the
    neighbours clip to the row itself, halving the one-sided reach.
    """
    Ebar = _xface_mean(E)
    ny = E.shape[1]
    jn = np.minimum(np.arange(ny) + 1, ny - 1)
    js = np.maximum(np.arange(ny) - 1, 0)
    return fxy_face * (Ebar[:, jn, :] - Ebar[:, js, :]) / (2.0 * dy)


def _yface_cross(E: np.ndarray, fxy_face: np.ndarray, dx: float) -> np.ndarray:
    """Cross term f_xy dE/dx on interior y-faces, edge columns clipped."""
    Ebar = _yface_mean(E)
    nx = E.shape[2]
    ie = np.minimum(np.arange(nx) + 1, nx - 1)
    iw = np.maximum(np.arange(nx) - 1, 0)
    return fxy_face * (Ebar[:, :, ie] - Ebar[:, :, iw]) / (2.0 * dx)


@dataclass(frozen=True)
class ClosureRecord:
    """Closure data for one time level.

    f is the cell Eddington tensor and C the boundary flux factor. gx and
    gy are the windowed face-normal closure factors on interior x- and
    y-faces ((G, ny, nx-1) and (G, ny-1, nx)), rx and ry the additive
    face-flux consistency remainders on the same faces. eta is the
    outgoing boundary face-to-cell density ratio and rb the boundary
    consistency source (both (G, n_boundary_faces); rb vanishes for
    closures extracted from a sweep). The face-level fields make the
    moment stencil discretely consistent with the generating sweep; the
    synthetic values gx = gy = 1/3, rx = ry = 0, eta = 1 and
    rb = -E_in / 2 reduce the system to P1 with Marshak boundaries.
    """

    f: EddingtonTensor
    C: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    rx: np.ndarray
    ry: np.ndarray
    eta: np.ndarray
    rb: np.ndarray


def closure_from_sweep(
    result: SweepResult,
    quad: AngularQuadrature,
    mesh: SpatialMesh,
    kappa: np.ndarray,
    dt: float,
    prev_Fx: np.ndarray,
    prev_Fy: np.ndarray,
    drive: "BoundaryDrive",
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> ClosureRecord:
    """Extract the full closure record from a finished transport sweep.

    The cell tensor and boundary factors are moment ratios of the swept
    intensity. The face factors are solved from the backward-Euler face
    equation so that the sweep's own energies and face fluxes satisfy it,
    and accepted only where it lands inside a stable window (faces where
    the fit is wild or the density contrast vanishes fall back to the
    face-interpolated tensor component); the consistency remainder is
    whatever flux the windowed factor leaves unexplained,

        rx = Fx - [alpha Fx_prev - c (gx dE/dx + cross)] / (kappa_f + alpha),

    with prev_Fx/prev_Fy the face fluxes the online state carries into
    this step (zeros before the first). Together (gx, rx) reproduce the
    sweep's face flux identically when the online system is fed the
    sweep's energies. eta is the outgoing half-range face density over
    the boundary-cell density, which makes c C eta E_cell equal the
    sweep's outgoing partial current; rb absorbs what little the clamped
    ratio leaves (exact zero away from degenerate dark cells).
    """
    c = constants.c
    alpha = 1.0 / (c * dt)
    dx, dy = mesh.dx, mesh.dy
    E = result.E

    f = eddington_tensor(result.psi, quad)
    with np.errstate(invalid="ignore", divide="ignore"):
        C = np.where(result.bface_wI > 0.0, result.bface_wnI / np.where(result.bface_wI > 0.0, result.bface_wI, 1.0), 0.5)

    # x-faces
    den = _xface_mean(kappa) + alpha
    dE = E[:, :, 1:] - E[:, :, :-1]
    cross = _xface_cross(E, _xface_mean(f.xy), dy)
    need = (alpha * prev_Fx[:, :, 1:-1] - den * result.Fx[:, :, 1:-1]) / c
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = (need - cross) * dx / dE
    fallback = _xface_mean(f.xx)
    ok = np.isfinite(raw) & (raw >= _FACTOR_LO) & (raw <= _FACTOR_HI)
    gx = np.where(ok, raw, fallback)
    rx = result.Fx[:, :, 1:-1] - (alpha * prev_Fx[:, :, 1:-1] - c * (gx * dE / dx + cross)) / den

    # y-faces
    den = _yface_mean(kappa) + alpha
    dE = E[:, 1:, :] - E[:, :-1, :]
    cross = _yface_cross(E, _yface_mean(f.xy), dx)
    need = (alpha * prev_Fy[:, 1:-1, :] - den * result.Fy[:, 1:-1, :]) / c
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = (need - cross) * dy / dE
    fallback = _yface_mean(f.yy)
    ok = np.isfinite(raw) & (raw >= _FACTOR_LO) & (raw <= _FACTOR_HI)
    gy = np.where(ok, raw, fallback)
    ry = result.Fy[:, 1:-1, :] - (alpha * prev_Fy[:, 1:-1, :] - c * (gy * dE / dy + cross)) / den

    # boundary closure: n.F = c C eta E_cell - F_in + c rb
    eta = np.ones_like(C)
    rb = np.zeros_like(C)
    edge = {"left": E[:, :, 0], "right": E[:, :, -1], "bottom": E[:, 0, :], "top": E[:, -1, :]}
    outward = {
        "left": -result.Fx[:, :, 0],
        "right": result.Fx[:, :, -1],
        "bottom": -result.Fy[:, 0, :],
        "top": result.Fy[:, -1, :],
    }
    for s, side in enumerate(SIDES):
        sl = mesh.boundary_slice(side)
        eta[:, sl] = (result.bface_wI[:, sl] / c) / np.maximum(edge[side], 1.0e-300)
        rb[:, sl] = (outward[side] + drive.F_in[s][:, None]) / c - C[:, sl] * eta[:, sl] * edge[side]
    return ClosureRecord(f, C, gx, gy, rx, ry, eta, rb)


# ---------------------------------------------------------------------------
# boundary drive moments and the closure dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundaryDrive:
    """Half-range moments of the incoming boundary source, per side.

    E_in[s, g] is the incoming half-range energy density and F_in[s, g]
    the incoming partial current on side s (canonical order left, right,
    bottom, top); vacuum sides hold zeros. The online boundary condition
    n.F = c C (E - E_in) - F_in + c rb consumes these directly.
    """

    E_in: np.ndarray  # (4, G)
    F_in: np.ndarray  # (4, G)

    @classmethod
    def from_quadrature(
        cls,
        inflow: BoundaryInflow,
        quad: AngularQuadrature,
        n_groups: int,
        constants: PhysicalConstants = DEFAULT_CONSTANTS,
    ) -> "BoundaryDrive":
        """Discrete half-range moments of an isotropic inflow.

        Using the quadrature sums (not the analytic pi) makes the online
        solve consistent with transport-derived boundary factors: the two
        share the same discrete half-range integrals, so an equilibrium
        drive stays exactly stationary.
        """
        E_in = np.zeros((4, n_groups))
        F_in = np.zeros((4, n_groups))
        for s, side in enumerate(SIDES):
            bc = inflow.value(side, n_groups)
            incoming = quad.half_range(_NORMALS[side], outgoing=False)
            w_in = quad.weight[incoming]
            wn_in = w_in * np.abs(quad.omega[incoming] @ _NORMALS[side])
            E_in[s] = bc * w_in.sum() / constants.c
            F_in[s] = bc * wn_in.sum()
        return cls(E_in, F_in)

    @classmethod
    def planckian(
        cls,
        fgrid: FrequencyGrid,
        T_drive: float,
        sides=("left",),
        constants: PhysicalConstants = DEFAULT_CONSTANTS,
    ) -> "BoundaryDrive":
        """Analytic half-range moments of a blackbody drive: E_in = 2 pi B / c,
        F_in = pi B on the driven sides. Matches the diffusion-model Marshak
        data, so the isotropic closure reduces exactly to P1."""
        B = group_planck(T_drive, fgrid, constants)
        E_in = np.zeros((4, B.size))
        F_in = np.zeros((4, B.size))
        for s, side in enumerate(SIDES):
            if side in sides:
                E_in[s] = 2.0 * np.pi * B / constants.c
                F_in[s] = np.pi * B
        return cls(E_in, F_in)


@dataclass
class ClosureDataset:
    """Closure records over a whole run plus the boundary drive moments.

    times holds the end-of-step levels t^1..t^N; t0 is the initial level,
    so the online solver's time grid is fully determined. Cell tensor
    components are stacked (N, G, ny, nx); C, eta and rb are
    (N, G, n_boundary_faces); gx and rx are (N, G, ny, nx-1), gy and ry
    (N, G, ny-1, nx).
    """

    t0: float
    times: np.ndarray
    fxx: np.ndarray
    fxy: np.ndarray
    fyy: np.ndarray
    fzz: np.ndarray
    C: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    rx: np.ndarray
    ry: np.ndarray
    eta: np.ndarray
    rb: np.ndarray
    drive: BoundaryDrive

    @property
    def n_records(self) -> int:
        return self.times.size

    @property
    def n_groups(self) -> int:
        return self.fxx.shape[1]

    def record(self, n: int) -> ClosureRecord:
        return ClosureRecord(
            EddingtonTensor(self.fxx[n], self.fxy[n], self.fyy[n], self.fzz[n]),
            self.C[n],
            self.gx[n],
            self.gy[n],
            self.rx[n],
            self.ry[n],
            self.rb[n],
        )

    def validate(self, mesh: SpatialMesh, n_groups: int) -> None:
        N = self.times.size
        cell = (N, n_groups, mesh.ny, mesh.nx)
        for name in ("fxx", "fxy", "fyy", "fzz"):
            if getattr(self, name).shape != cell:
                raise ConfigError(f"closure {name} has shape {getattr(self, name).shape}, expected {cell}")
        xface = (N, n_groups, mesh.ny, mesh.nx - 1)
        yface = (N, n_groups, mesh.ny - 1, mesh.nx)
        for name, shape in (("gx", xface), ("rx", xface), ("gy", yface), ("ry", yface)):
            if getattr(self, name).shape != shape:
                raise ConfigError(f"closure {name} has shape {getattr(self, name).shape}, expected {shape}")
        bface = (N, n_groups, mesh.n_boundary_faces)
        if self.C.shape != bface:
            raise ConfigError(f"closure C has shape {self.C.shape}, expected {bface}")
        if self.rb.shape != bface:
            raise ConfigError(f"closure rb has shape {self.rb.shape}, expected {bface}")
        if self.drive.E_in.shape != (4, n_groups) or self.drive.F_in.shape != (4, n_groups):
            raise ConfigError("closure drive moments do not match the group count")
        if N and not np.all(np.diff(np.concatenate([[self.t0], self.times])) > 0.0):
            raise ConfigError("closure time grid must be strictly increasing from t0")


def isotropic_closure(
    mesh: SpatialMesh,
    n_groups: int,
    t0: float,
    times: np.ndarray,
    drive: BoundaryDrive,
) -> ClosureDataset:
    """Synthetic dataset f = diag(1/3, 1/3, 1/3), C = 1/2 at every level.

    The face-level fields take their neutral values (gx = gy = 1/3, zero
    remainders), so with analytic Planckian drive moments this
    closure makes the online solver coincide with the P1 model.
    """
    times = np.asarray(times, dtype=float)
    N = times.size
    third = np.full((N, n_groups, mesh.ny, mesh.nx), 1.0 / 3.0)
    return ClosureDataset(
        t0=float(t0),
        times=times,
        fxx=third.copy(),
        fxy=np.zeros_like(third),
        fyy=third.copy(),
        fzz=third.copy(),
        C=np.full((N, n_groups, mesh.n_boundary_faces), 0.5),
        gx=np.full((N, n_groups, mesh.ny, mesh.nx - 1), 1.0 / 3.0),
        gy=np.full((N, n_groups, mesh.ny - 1, mesh.nx), 1.0 / 3.0),
        rx=np.zeros((N, n_groups, mesh.ny, mesh.nx - 1)),
        ry=np.zeros((N, n_groups, mesh.ny - 1, mesh.nx)),
        rb=np.zeros((N, n_groups, mesh.n_boundary_faces)),
        drive=drive,
    )


# ---------------------------------------------------------------------------
# offline phase
# ---------------------------------------------------------------------------


def _check_temperature_data(problem, temperatures):
    times = np.asarray(temperatures.times, dtype=float)
    T = np.asarray(temperatures.T, dtype=float)
    mesh = problem.mesh
    if times.ndim != 1 or times.size < 2:
        raise ConfigError("temperature data must cover at least one step")
    if T.shape != (times.size, mesh.ny, mesh.nx):
        raise ConfigError(f"temperature data has shape {T.shape}, expected {(times.size, mesh.ny, mesh.nx)}")
    if not np.all(np.diff(times) > 0.0):
        raise ConfigError("temperature time grid must be strictly increasing")
    return times, T


def _auxiliary_initial_intensity(problem: TransportProblem, T0_field: np.ndarray) -> np.ndarray:
    """Isotropic Planckian at the initial data temperature, (ny, nx, G, M)."""
    B = group_planck(T0_field, problem.fgrid, problem.constants)  # (G, ny, nx)
    M = problem.quad.n_directions
    return np.ascontiguousarray(np.broadcast_to(B.transpose(1, 2, 0)[:, :, :, None], B.shape[1:] + (B.shape[0], M)))


def offline_phase(problem: TransportProblem, temperatures) -> ClosureDataset:
    """Tabulate the closure from linear transport re-solves on temperature data.

    temperatures provides .times (N+1,) and .T (N+1, ny, nx) - any solution
    history qualifies. Each step sweeps the backward-Euler transport
    equation with opacity and emission evaluated at the end-of-step data
    temperature, then reduces the intensity and face fluxes to a closure
    record; the previous step's face fluxes feed the face-factor
    extraction (zeros before the first step, matching the zero-flux
    initial moment state).
    """
    times, T_data = _check_temperature_data(problem, temperatures)
    mesh = problem.mesh
    quad = problem.quad
    G = problem.fgrid.n_groups
    drive = BoundaryDrive.from_quadrature(problem.inflow, quad, G, problem.constants)

    psi = _auxiliary_initial_intensity(problem, T_data[0])
    Fx_prev = np.zeros((G, mesh.ny, mesh.nx + 1))
    Fy_prev = np.zeros((G, mesh.ny + 1, mesh.nx))
    records = []
    for n in range(1, times.size):
        dt = times[n] - times[n - 1]
        kappa, _, B, _ = problem.material.emission_terms(T_data[n], problem.constants)
        result = sweep(mesh, quad, kappa, kappa * B, psi_prev=psi, dt=dt, inflow=problem.inflow, constants=problem.constants)
        records.append(closure_from_sweep(result, quad, mesh, kappa, dt, Fx_prev, Fy_prev, drive, problem.constants))
        psi, Fx_prev, Fy_prev = result.psi, result.Fx, result.Fy

    return ClosureDataset(
        t0=float(times[0]),
        times=times[1:].copy(),
        fxx=np.stack([r.f.xx for r in records]),
        fxy=np.stack([r.f.xy for r in records]),
        fyy=np.stack([r.f.yy for r in records]),
        fzz=np.stack([r.f.zz for r in records]),
        C=np.stack([r.C for r in records]),
        gx=np.stack([r.gx for r in records]),
        gy=np.stack([r.gy for r in records]),
        rx=np.stack([r.rx for r in records]),
        ry=np.stack([r.ry for r in records]),
        rb=np.stack([r.rb for r in records]),
        drive=drive,
    )


# ---------------------------------------------------------------------------
# online phase
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VefProblem:
    """Static description of an online VEF run (no quadrature needed)."""

    mesh: SpatialMesh
    fgrid: FrequencyGrid
    material: object
    eos: MaterialEOS
    constants: PhysicalConstants = DEFAULT_CONSTANTS
    options: SolverOptions = SolverOptions()

    @classmethod
    def from_transport(cls, problem: TransportProblem) -> "VefProblem":
        return cls(problem.mesh, problem.fgrid, problem.material, problem.eos, problem.constants, problem.options)


def vef_initial_state(problem: VefProblem, T0, t0: float = 0.0) -> MomentState:
    """Equilibrium radiation at the initial temperature (scalar or field)."""
    mesh = problem.mesh
    T = np.broadcast_to(np.asarray(T0, dtype=float), (mesh.ny, mesh.nx)).copy()
    B = group_planck(T, problem.fgrid, problem.constants)  # (G, ny, nx)
    G = B.shape[0]
    return MomentState(
        float(t0),
        T,
        (4.0 * np.pi / problem.constants.c) * B,
        np.zeros((G, mesh.ny, mesh.nx + 1)),
        np.zeros((G, mesh.ny + 1, mesh.nx)),
    )


class _VefSystem:
    """Face-eliminated moment system for one Picard pass.

    Backward Euler on the first moment gives, with alpha = 1/(c dt) and
    kappa_f the arithmetic face mean,

        F_face = [alpha F_prev - c D(E)] / (kappa_f + alpha) + r,

    where the divergence term D(E) is the record's face-normal closure
    factor times the central density difference (gx dE/dx on x-faces,
    gy dE/dy on y-faces) plus the cross term: face-interpolated f_xy
    times the central difference of the face density along the face,
    realized through the four diagonal neighbour cells with quarter
    weights (clipped at domain edges so duplicate weights coalesce), and r
    is the record's consistency remainder, a pure source that never enters
    the matrix. Boundary faces use the closure
    n.F = c C (E_cell - E_in) - F_in + c rb instead. Every face flux is a
    linear form in cell energies; the same coefficient tables build the
    balance matrix and reconstruct the stored fluxes, so the discrete
    energy budget telescopes exactly.
    """

    def __init__(self, problem: VefProblem, record: ClosureRecord, drive: BoundaryDrive, kappa: np.ndarray, state: MomentState, dt: float):
        mesh = problem.mesh
        c = problem.constants.c
        nx, ny = mesh.nx, mesh.ny
        dx, dy = mesh.dx, mesh.dy
        G = kappa.shape[0]
        NC = nx * ny
        alpha = 1.0 / (c * dt)
        self.problem = problem
        self.dt = dt
        self.G, self.NC = G, NC

        kap = kappa.reshape(G, NC)
        fxy = record.f.xy.reshape(G, NC)

        # --- interior x-faces: (j, i-1) | (j, i) for i = 1..nx-1 ---
        jj, ii = np.meshgrid(np.arange(ny), np.arange(1, nx), indexing="ij")
        jj, ii = jj.ravel(), ii.ravel()
        L, R = jj * nx + ii - 1, jj * nx + ii
        jn, js = np.minimum(jj + 1, ny - 1), np.maximum(jj - 1, 0)
        NL, NR = jn * nx + ii - 1, jn * nx + ii
        SL, SR = js * nx + ii - 1, js * nx + ii
        den = 0.5 * (kap[:, L] + kap[:, R]) + alpha
        cc = c / den
        qy = 1.0 / (4.0 * dy)
        gx = record.gx.reshape(G, -1)
        fxym = 0.5 * (fxy[:, L] + fxy[:, R])
        self.x_cells = np.stack([L, R, NL, NR, SL, SR])
        self.x_coef = np.stack([
            cc * gx / dx,
            -cc * gx / dx,
            -cc * fxym * qy,
            -cc * fxym * qy,
            cc * fxym * qy,
            cc * fxym * qy,
        ])  # (6, G, n_xfaces)
        self.x_base = (alpha / den) * state.Fx[:, :, 1:-1].reshape(G, -1) + record.rx.reshape(G, -1)
        self.xL, self.xR = L, R

        # --- interior y-faces: (j-1, i) | (j, i) for j = 1..ny-1 ---
        jj, ii = np.meshgrid(np.arange(1, ny), np.arange(nx), indexing="ij")
        jj, ii = jj.ravel(), ii.ravel()
        S, N = (jj - 1) * nx + ii, jj * nx + ii
        ie, iw = np.minimum(ii + 1, nx - 1), np.maximum(ii - 1, 0)
        ES, EN = (jj - 1) * nx + ie, jj * nx + ie
        WS, WN = (jj - 1) * nx + iw, jj * nx + iw
        den = 0.5 * (kap[:, S] + kap[:, N]) + alpha
        cc = c / den
        qx = 1.0 / (4.0 * dx)
        gy = record.gy.reshape(G, -1)
        fxym = 0.5 * (fxy[:, S] + fxy[:, N])
        self.y_cells = np.stack([S, N, ES, EN, WS, WN])
        self.y_coef = np.stack([
            cc * gy / dy,
            -cc * gy / dy,
            -cc * fxym * qx,
            -cc * fxym * qx,
            cc * fxym * qx,
            cc * fxym * qx,
        ])
        self.y_base = (alpha / den) * state.Fy[:, 1:-1, :].reshape(G, -1) + record.ry.reshape(G, -1)
        self.yS, self.yN = S, N

        # --- boundary faces: n.F = c C (E_cell - E_in) - F_in + c rb, signed ---
        idx = np.arange(NC).reshape(ny, nx)
        self.b_cells = {}
        self.b_coef = {}
        self.b_base = {}
        for s, side in enumerate(SIDES):
            sl = mesh.boundary_slice(side)
            C = record.C[:, sl]  # (G, n_side)
            rb = record.rb[:, sl]
            known = c * C * drive.E_in[s][:, None] + drive.F_in[s][:, None] - c * rb
            if side == "left":
                cells, sign = idx[:, 0], -1.0
            elif side == "right":
                cells, sign = idx[:, -1], 1.0
            elif side == "bottom":
                cells, sign = idx[0, :], -1.0
            else:
                cells, sign = idx[-1, :], 1.0
            self.b_cells[side] = cells
            self.b_coef[side] = sign * c * C
            self.b_base[side] = -sign * known

        # --- sparse pattern, shared across groups ---
        rows = [np.arange(NC)]
        cols = [np.arange(NC)]
        for k in range(6):
            rows += [self.xL, self.xR]
            cols += [self.x_cells[k], self.x_cells[k]]
        for k in range(6):
            rows += [self.yS, self.yN]
            cols += [self.y_cells[k], self.y_cells[k]]
        for side in SIDES:
            rows.append(self.b_cells[side])
            cols.append(self.b_cells[side])
        self._rows = np.concatenate(rows)
        self._cols = np.concatenate(cols)

        self._ckap = c * kap  # (G, NC)
        vals = [1.0 / dt + self._ckap]
        for k in range(6):
            vals += [self.x_coef[k] / dx, -self.x_coef[k] / dx]
        for k in range(6):
            vals += [self.y_coef[k] / dy, -self.y_coef[k] / dy]
        for side in SIDES:
            area = 1.0 / dx if side in ("left", "right") else 1.0 / dy
            sign = -1.0 if side in ("left", "bottom") else 1.0
            vals.append(sign * self.b_coef[side] * area)
        self._vals = np.concatenate(vals, axis=1)

    def solve(self, B: np.ndarray, E_prev: np.ndarray) -> np.ndarray:
        """Solve the balance system for every group's energy density."""
        mesh = self.problem.mesh
        c = self.problem.constants.c
        G, NC = self.G, self.NC
        dx, dy = mesh.dx, mesh.dy

        rhs = E_prev.reshape(G, NC) / self.dt + (4.0 * np.pi / c) * self._ckap * B.reshape(G, NC)
        grange = np.arange(G)[:, None]
        np.subtract.at(rhs, (grange, self.xL[None, :]), self.x_base / dx)
        np.add.at(rhs, (grange, self.xR[None, :]), self.x_base / dx)
        np.subtract.at(rhs, (grange, self.yS[None, :]), self.y_base / dy)
        np.add.at(rhs, (grange, self.yN[None, :]), self.y_base / dy)
        for side in SIDES:
            area = 1.0 / dx if side in ("left", "right") else 1.0 / dy
            sign = -1.0 if side in ("left", "bottom") else 1.0
            np.subtract.at(rhs, (grange, self.b_cells[side][None, :]), sign * self.b_base[side] * area)

        E_new = np.empty((G, mesh.ny, mesh.nx))
        for g in range(G):
            A = sp.coo_matrix((self._vals[g], (self._rows, self._cols)), shape=(NC, NC)).tocsr()
            try:
                x = spla.spsolve(A, rhs[g])
            except Exception as exc:  # pragma: no cover - singular systems
                raise SolverError(f"closed moment system solve failed: {exc}", group=g) from exc
            if not np.all(np.isfinite(x)):
                raise SolverError("closed moment system produced non-finite energies", group=g)
            E_new[g] = x.reshape(mesh.ny, mesh.nx)
        return E_new

    def reconstruct(self, E: np.ndarray):
        """Face-normal fluxes from the same linear forms as the matrix."""
        mesh = self.problem.mesh
        G = self.G
        nx, ny = mesh.nx, mesh.ny
        Ef = E.reshape(G, -1)
        Fx = np.zeros((G, ny, nx + 1))
        Fy = np.zeros((G, ny + 1, nx))
        Fx[:, :, 1:-1] = (self.x_base + (self.x_coef * Ef[:, self.x_cells].transpose(1, 0, 2)).sum(axis=0)).reshape(G, ny, nx - 1)
        Fy[:, 1:-1, :] = (self.y_base + (self.y_coef * Ef[:, self.y_cells].transpose(1, 0, 2)).sum(axis=0)).reshape(G, ny - 1, nx)
        Fx[:, :, 0] = self.b_coef["left"] * Ef[:, self.b_cells["left"]] + self.b_base["left"]
        Fx[:, :, -1] = self.b_coef["right"] * Ef[:, self.b_cells["right"]] + self.b_base["right"]
        Fy[:, 0, :] = self.b_coef["bottom"] * Ef[:, self.b_cells["bottom"]] + self.b_base["bottom"]
        Fy[:, -1, :] = self.b_coef["top"] * Ef[:, self.b_cells["top"]] + self.b_base["top"]
        return Fx, Fy


def vef_step(
    problem: VefProblem,
    state: MomentState,
    dt: float,
    record: ClosureRecord,
    drive: BoundaryDrive,
) -> tuple[MomentState, StepDiagnostics]:
    """Advance the closed moment system one backward-Euler step.

    The closure record is frozen data for the step, so the outer coupling
    iterates on the temperature field exactly like the P1 stepper: freeze
    T, solve the per-group closed systems, update T by the material-energy
    Newton, accelerated by the shared exchange preconditioner.
    """
    opt = problem.options
    store = {}

    def solve_pass(T_freeze):
        kappa, _, B, dB = problem.material.emission_terms(T_freeze, problem.constants)
        system = _VefSystem(problem, record, drive, kappa, state, dt)
        E_new = system.solve(B, state.E)
        store["E"], store["system"] = E_new, system
        store["exchange"] = exchange_sensitivity(kappa, dB, problem.eos.cv, dt, problem.constants.c)
        return update_temperature(
            state.T, E_new, dt, problem.material, problem.eos, problem.constants,
            T_start=T_freeze, tol=opt.newton_tol, max_iter=opt.newton_max_iter,
        )

    T_new, history = fixed_point_solve(
        solve_pass, state.T, tol=opt.picard_tol, max_iter=opt.picard_max_iter,
        memory=opt.anderson_memory,
        precondition=exchange_preconditioner(lambda: store["exchange"]),
        label="closed-moment/material coupling",
    )

    E_new = store["E"]
    Fx, Fy = store["system"].reconstruct(E_new)
    new_state = MomentState(state.t + dt, T_new, E_new, Fx, Fy)
    diag = StepDiagnostics(picard_iterations=len(history), change_history=history)
    diag.balance_residual = energy_balance_residual(state, new_state, dt, problem.mesh, problem.eos)
    return new_state, diag


def online_phase(
    problem: VefProblem,
    dataset: ClosureDataset,
    T0,
    label: str = "vef",
    initial: MomentState | None = None,
    callback=None,
):
    """March vef_step over the dataset's whole time grid.

    Starts from equilibrium at T0 (scalar or field) at the dataset's t0; a
    caller-supplied initial state must sit at t0 exactly. Returns the
    SolutionHistory of all N+1 levels.
    """
    dataset.validate(problem.mesh, problem.fgrid.n_groups)
    if initial is None:
        state = vef_initial_state(problem, T0, dataset.t0)
    else:
        if initial.t != dataset.t0:
            raise ConfigError(f"initial state at t={initial.t} does not match the closure grid t0={dataset.t0}")
        state = initial
    states = [state]
    diags = []
    t_prev = dataset.t0
    for n in range(dataset.n_records):
        dt = dataset.times[n] - t_prev
        state, diag = vef_step(problem, state, dt, dataset.record(n), dataset.drive)
        states.append(state)
        diags.append(diag)
        t_prev = dataset.times[n]
        if callback is not None:
            callback(n, state, diag)
    return stack_history(label, states, diags)


# ---------------------------------------------------------------------------
# fused pipeline
# ---------------------------------------------------------------------------


def fused_pipeline(
    problem: TransportProblem,
    temperatures,
    label: str = "vef",
    callback=None,
):
    """Offline and online phases interleaved step by step, no stored dataset.

    Each step sweeps the auxiliary transport problem at the data
    temperature, reduces the intensity and face fluxes to a closure
    record, and advances the moment system with it immediately. The
    operations and their order match the offline -> online composition
    exactly, so the results are bitwise identical; only the storage
    differs (one record at a time). The moment solve starts from the
    data's initial temperature field.
    """
    times, T_data = _check_temperature_data(problem, temperatures)
    mesh = problem.mesh
    quad = problem.quad
    G = problem.fgrid.n_groups
    vp = VefProblem.from_transport(problem)
    drive = BoundaryDrive.from_quadrature(problem.inflow, quad, G, problem.constants)

    psi = _auxiliary_initial_intensity(problem, T_data[0])
    Fx_prev = np.zeros((G, mesh.ny, mesh.nx + 1))
    Fy_prev = np.zeros((G, mesh.ny + 1, mesh.nx))
    state = vef_initial_state(vp, T_data[0], float(times[0]))
    states = [state]
    diags = []
    for n in range(1, times.size):
        dt = times[n] - times[n - 1]
        kappa, _, B, _ = problem.material.emission_terms(T_data[n], problem.constants)
        result = sweep(mesh, quad, kappa, kappa * B, psi_prev=psi, dt=dt, inflow=problem.inflow, constants=problem.constants)
        record = closure_from_sweep(result, quad, mesh, kappa, dt, Fx_prev, Fy_prev, drive, problem.constants)
        psi, Fx_prev, Fy_prev = result.psi, result.Fx, result.Fy
        state, diag = vef_step(vp, state, dt, record, drive)
        states.append(state)
        diags.append(diag)
        if callback is not None:
            callback(n - 1, state, diag)
    return stack_history(label, states, diags)
