"""Radiation-diffusion reduced models: P1, P1/3, and flux-limited diffusion.

All three close the zeroth-moment balance
    dE_g/dt + div F_g + c kappa_g E_g = 4 pi kappa_g B_g
with a face-flux relation and share the material coupling of the transport
model. P1 carries the backward-Euler first moment with the full 1/c flux
time derivative, P1/3 replaces it by 1/(3c) to restore the vacuum signal
speed c, and FLD drops the memory entirely in favor of F = -c D grad E with
Larsen's limited coefficient. Eliminating the face fluxes leaves one
5-point cell-centered system per group, assembled sparse and solved
directly; the nonlinear temperature coupling reuses the accelerated
fixed-point driver of the transport model.

Boundaries are Marshak-type per side: n.F = (c/2) E - 2 F_in with E taken
from the adjacent cell and F_in the incoming partial current (pi B at the
drive temperature, zero for vacuum), or reflective (n.F = 0).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, SolverError
from .grid import SIDES, FrequencyGrid, SpatialMesh
from .history import stack_history
from .iteration import exchange_preconditioner, exchange_sensitivity, fixed_point_solve
from .physics import (
    DEFAULT_CONSTANTS,
    MaterialEOS,
    PhysicalConstants,
    group_planck,
    update_temperature,
)
from .transport import SolverOptions, StepDiagnostics, energy_balance_residual

MODEL_KINDS = ("p1", "p13", "fld")
BOUNDARY_KINDS = ("drive", "vacuum", "reflective")


@dataclass(frozen=True)
class BoundaryCondition:
    """One side of the domain: Planckian drive, vacuum, or reflective."""

    kind: str
    T_drive: float | None = None

    def __post_init__(self):
        if self.kind not in BOUNDARY_KINDS:
            raise ConfigError(f"unknown boundary kind {self.kind!r}, expected one of {BOUNDARY_KINDS}")
        if self.kind == "drive" and (self.T_drive is None or self.T_drive <= 0.0):
            raise ConfigError("drive boundary requires a positive T_drive")


def standard_boundaries(T_drive: float, drive_sides=("left",)) -> dict:
    """Drive on the given sides, vacuum elsewhere."""
    return {
        side: BoundaryCondition("drive", T_drive) if side in drive_sides else BoundaryCondition("vacuum")
        for side in SIDES
    }


@dataclass(frozen=True)
class DiffusionProblem:
    """Static description of a moment-model run."""

    mesh: SpatialMesh
    fgrid: FrequencyGrid
    material: object
    eos: MaterialEOS
    boundaries: Mapping[str, BoundaryCondition]
    constants: PhysicalConstants = DEFAULT_CONSTANTS
    options: SolverOptions = SolverOptions()

    def __post_init__(self):
        missing = [s for s in SIDES if s not in self.boundaries]
        if missing:
            raise ConfigError(f"boundaries missing for sides {missing}")

    def inflow_current(self, side: str) -> np.ndarray:
        """Incoming partial current F_in per group on one side [Jerk/cm^2/ns]."""
        bc = self.boundaries[side]
        if bc.kind == "drive":
            return np.pi * group_planck(bc.T_drive, self.fgrid, self.constants)
        return np.zeros(self.fgrid.n_groups)


@dataclass
class MomentState:
    """Moment-model state at one time level (same layout as transport)."""

    t: float
    T: np.ndarray   # (ny, nx)
    E: np.ndarray   # (G, ny, nx)
    Fx: np.ndarray  # (G, ny, nx+1)
    Fy: np.ndarray  # (G, ny+1, nx)


def initial_moment_state(problem: DiffusionProblem, T0: float) -> MomentState:
    """Equilibrium radiation at the uniform initial temperature, zero flux."""
    mesh = problem.mesh
    B = group_planck(T0, problem.fgrid, problem.constants)
    E = np.broadcast_to((4.0 * np.pi / problem.constants.c) * B[:, None, None], (B.size, mesh.ny, mesh.nx)).copy()
    return MomentState(
        0.0,
        np.full((mesh.ny, mesh.nx), float(T0)),
        E,
        np.zeros((B.size, mesh.ny, mesh.nx + 1)),
        np.zeros((B.size, mesh.ny + 1, mesh.nx)),
    )


def larsen_coefficient(kappa, E, gradE):
    """Flux-limited diffusion coefficient D = [(3 kappa)^2 + (|grad E|/E)^2]^(-1/2).

    Reduces to 1/(3 kappa) for flat fields and to E/|grad E| for kappa -> 0,
    which caps the flux magnitude at c E. E is floored at 1e-30 of its
    largest value (and an absolute tiny) so vanishing fields stay finite.
    """
    kappa = np.asarray(kappa, dtype=float)
    E = np.asarray(E, dtype=float)
    grad = np.abs(np.asarray(gradE, dtype=float))
    floor = max(1.0e-30 * float(E.max(initial=0.0)), 1.0e-290)
    ratio = grad / np.maximum(E, floor)
    return 1.0 / np.maximum(np.hypot(3.0 * kappa, ratio), 1.0e-290)


def _face_means(field):
    """Arithmetic means on interior x-faces and y-faces of (G, ny, nx)."""
    fx = 0.5 * (field[:, :, 1:] + field[:, :, :-1])
    fy = 0.5 * (field[:, 1:, :] + field[:, :-1, :])
    return fx, fy


class _FluxClosure:
    """Interior-face flux coefficients F = -W grad E + M for one pass."""

    def __init__(self, model: str, problem: DiffusionProblem, kappa, state: MomentState, E_lag, dt: float):
        c = problem.constants.c
        mesh = problem.mesh
        kfx, kfy = _face_means(kappa)
        if model in ("p1", "p13"):
            alpha = 1.0 / (c * dt) if model == "p1" else 1.0 / (3.0 * c * dt)
            denx, deny = kfx + alpha, kfy + alpha
            self.Wx = (c / 3.0) / denx
            self.Wy = (c / 3.0) / deny
            self.Mx = (alpha / denx) * state.Fx[:, :, 1:-1]
            self.My = (alpha / deny) * state.Fy[:, 1:-1, :]
        elif model == "fld":
            Efx, Efy = _face_means(E_lag)
            gx = (E_lag[:, :, 1:] - E_lag[:, :, :-1]) / mesh.dx
            gy = (E_lag[:, 1:, :] - E_lag[:, :-1, :]) / mesh.dy
            self.Wx = c * larsen_coefficient(kfx, Efx, gx)
            self.Wy = c * larsen_coefficient(kfy, Efy, gy)
            self.Mx = np.zeros_like(self.Wx)
            self.My = np.zeros_like(self.Wy)
        else:
            raise ConfigError(f"unknown diffusion model {model!r}, expected one of {MODEL_KINDS}")

    def reconstruct(self, problem: DiffusionProblem, E, inflow):
        """Face-normal fluxes consistent with the assembled system."""
        c = problem.constants.c
        mesh = problem.mesh
        G = E.shape[0]
        Fx = np.zeros((G, mesh.ny, mesh.nx + 1))
        Fy = np.zeros((G, mesh.ny + 1, mesh.nx))
        Fx[:, :, 1:-1] = -self.Wx * (E[:, :, 1:] - E[:, :, :-1]) / mesh.dx + self.Mx
        Fy[:, 1:-1, :] = -self.Wy * (E[:, 1:, :] - E[:, :-1, :]) / mesh.dy + self.My
        # Marshak faces: n.F = (c/2) E_cell - 2 F_in, signed by the outward
        # normal; reflective faces stay zero.
        if problem.boundaries["left"].kind != "reflective":
            Fx[:, :, 0] = -(0.5 * c * E[:, :, 0] - 2.0 * inflow["left"][:, None])
        if problem.boundaries["right"].kind != "reflective":
            Fx[:, :, -1] = 0.5 * c * E[:, :, -1] - 2.0 * inflow["right"][:, None]
        if problem.boundaries["bottom"].kind != "reflective":
            Fy[:, 0, :] = -(0.5 * c * E[:, 0, :] - 2.0 * inflow["bottom"][:, None])
        if problem.boundaries["top"].kind != "reflective":
            Fy[:, -1, :] = 0.5 * c * E[:, -1, :] - 2.0 * inflow["top"][:, None]
        return Fx, Fy


def _solve_groups(problem: DiffusionProblem, closure: _FluxClosure, kappa, B, E_prev, inflow, dt: float):
    """Assemble and solve the eliminated 5-point E system for every group."""
    c = problem.constants.c
    mesh = problem.mesh
    nx, ny, V = mesh.nx, mesh.ny, mesh.cell_volume
    G = kappa.shape[0]
    N = nx * ny
    idx = np.arange(N).reshape(ny, nx)
    ax = mesh.dy / mesh.dx  # face area / center distance, x-direction
    ay = mesh.dx / mesh.dy

    E_new = np.empty_like(E_prev)
    for g in range(G):
        diag = (V / dt + c * kappa[g] * V).ravel().copy()
        rhs = ((4.0 * np.pi * kappa[g] * B[g] + E_prev[g] / dt) * V).ravel().copy()

        wx = closure.Wx[g] * ax
        wy = closure.Wy[g] * ay
        pl, pr = idx[:, :-1].ravel(), idx[:, 1:].ravel()
        pb, pt = idx[:-1, :].ravel(), idx[1:, :].ravel()
        np.add.at(diag, pl, wx.ravel())
        np.add.at(diag, pr, wx.ravel())
        np.add.at(diag, pb, wy.ravel())
        np.add.at(diag, pt, wy.ravel())
        # memory fluxes enter the divergence as known face values
        mxa = closure.Mx[g] * mesh.dy
        mya = closure.My[g] * mesh.dx
        np.subtract.at(rhs, pl, mxa.ravel())
        np.add.at(rhs, pr, mxa.ravel())
        np.subtract.at(rhs, pb, mya.ravel())
        np.add.at(rhs, pt, mya.ravel())

        for side, cells, area in (
            ("left", idx[:, 0], mesh.dy),
            ("right", idx[:, -1], mesh.dy),
            ("bottom", idx[0, :], mesh.dx),
            ("top", idx[-1, :], mesh.dx),
        ):
            if problem.boundaries[side].kind != "reflective":
                diag[cells] += 0.5 * c * area
                rhs[cells] += 2.0 * inflow[side][g] * area

        rows = np.concatenate([pl, pr])
        cols = np.concatenate([pr, pl])
        vals = np.concatenate([-wx.ravel(), -wx.ravel()])
        rows = np.concatenate([rows, pb, pt])
        cols = np.concatenate([cols, pt, pb])
        vals = np.concatenate([vals, -wy.ravel(), -wy.ravel()])
        rows = np.concatenate([rows, np.arange(N)])
        cols = np.concatenate([cols, np.arange(N)])
        vals = np.concatenate([vals, diag])

        A = sp.coo_matrix((vals, (rows, cols)), shape=(N, N)).tocsr()
        try:
            x = spla.spsolve(A, rhs)
        except Exception as exc:  # pragma: no cover - singular systems
            raise SolverError(f"moment system solve failed: {exc}", group=g) from exc
        if not np.all(np.isfinite(x)):
            raise SolverError("moment system produced non-finite energies", group=g)
        E_new[g] = x.reshape(ny, nx)
    return E_new


def diffusion_step(problem: DiffusionProblem, state: MomentState, dt: float, model: str) -> tuple[MomentState, StepDiagnostics]:
    """Advance one moment model a single backward-Euler step.

    Outer iteration mirrors the transport coupling: freeze T, solve the
    per-group moment systems, update T by the material-energy Newton. For
    P1 and P1/3 the flux closure depends on T alone, so the iteration runs
    on the temperature field. FLD's diffusion coefficient depends on E as
    well; its iteration runs on the joint (T, E) unknown so the lagged
    coefficient converges together with the temperature.
    """
    if model not in MODEL_KINDS:
        raise ConfigError(f"unknown diffusion model {model!r}, expected one of {MODEL_KINDS}")
    opt = problem.options
    inflow = {side: problem.inflow_current(side) for side in SIDES}
    store = {}

    def solve_pass(T_freeze, E_lag):
        kappa, _, B, dB = problem.material.emission_terms(T_freeze, problem.constants)
        closure = _FluxClosure(model, problem, kappa, state, E_lag, dt)
        E_new = _solve_groups(problem, closure, kappa, B, state.E, inflow, dt)
        if model == "fld":
            # rebuild the coefficients from the fresh field so the stored
            # fluxes satisfy the limiter bound against their own E exactly
            closure = _FluxClosure(model, problem, kappa, state, E_new, dt)
        store["E"], store["closure"] = E_new, closure
        store["exchange"] = exchange_sensitivity(kappa, dB, problem.eos.cv, dt, problem.constants.c)
        T_new = update_temperature(
            state.T, E_new, dt, problem.material, problem.eos, problem.constants,
            T_start=T_freeze, tol=opt.newton_tol, max_iter=opt.newton_max_iter,
        )
        return T_new, E_new

    label = f"{model} moment/material coupling"
    if model == "fld":
        # joint (T, E) fixed point; E is scaled to the problem's energy
        # magnitude so convergence means "below tol of the global scale"
        # even where the field underflows to zero.
        n_T = state.T.size
        e_scale = max(float(state.E.max()), *(4.0 * float(inflow[s].max()) / problem.constants.c for s in SIDES))
        e_scale = max(e_scale, 1.0e-290)

        def pack(T, E):
            return np.concatenate([T.ravel(), E.ravel() / e_scale])

        def G(x):
            T_new, E_new = solve_pass(x[:n_T].reshape(state.T.shape), x[n_T:].reshape(state.E.shape) * e_scale)
            return pack(T_new, E_new)

        def change_measure(x, gx):
            t_change = np.max(np.abs(gx[:n_T] - x[:n_T]) / np.abs(gx[:n_T]))
            return max(t_change, np.max(np.abs(gx[n_T:] - x[n_T:])))

        def precondition(x, gx):
            scale = 1.0 / (1.0 - np.clip(store["exchange"].ravel(), 0.0, 1.0 - 1.0e-4))
            out = gx.copy()
            out[:n_T] = x[:n_T] + scale * (gx[:n_T] - x[:n_T])
            return out

        x_new, history = fixed_point_solve(
            G, pack(state.T, state.E), tol=opt.picard_tol, max_iter=opt.picard_max_iter,
            memory=opt.anderson_memory,
            precondition=precondition, change_measure=change_measure, label=label,
        )
        T_new = x_new[:n_T].reshape(state.T.shape)
    else:
        T_new, history = fixed_point_solve(
            lambda T: solve_pass(T, state.E)[0], state.T,
            tol=opt.picard_tol, max_iter=opt.picard_max_iter,
            memory=opt.anderson_memory,
            precondition=exchange_preconditioner(lambda: store["exchange"]), label=label,
        )

    E_new = store["E"]
    Fx, Fy = store["closure"].reconstruct(problem, E_new, inflow)
    new_state = MomentState(state.t + dt, T_new, E_new, Fx, Fy)
    diag = StepDiagnostics(picard_iterations=len(history), change_history=history)
    diag.balance_residual = energy_balance_residual(state, new_state, dt, problem.mesh, problem.eos)
    return new_state, diag


def p1_step(problem, state, dt):
    return diffusion_step(problem, state, dt, "p1")


def p13_step(problem, state, dt):
    return diffusion_step(problem, state, dt, "p13")


def fld_step(problem, state, dt):
    return diffusion_step(problem, state, dt, "fld")


def flux_limit_ratio(state: MomentState, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """Max |F| / (c E_face) over interior faces: FLD keeps this <= 1."""
    c = constants.c
    Efx, Efy = _face_means(state.E)
    with np.errstate(divide="ignore", invalid="ignore"):
        rx = np.abs(state.Fx[:, :, 1:-1]) / (c * Efx)
        ry = np.abs(state.Fy[:, 1:-1, :]) / (c * Efy)
    vals = np.concatenate([rx[np.isfinite(rx)].ravel(), ry[np.isfinite(ry)].ravel()])
    return float(vals.max()) if vals.size else 0.0


def run_diffusion_model(
    problem: DiffusionProblem,
    model: str,
    T0: float,
    dt: float,
    n_steps: int,
    label: str | None = None,
    initial: MomentState | None = None,
    callback=None,
):
    """March one moment model n_steps and return its SolutionHistory.

    A zero-step run returns a history holding only the initial state.
    """
    state = initial if initial is not None else initial_moment_state(problem, T0)
    states = [state]
    diags = []
    for n in range(n_steps):
        state, diag = diffusion_step(problem, state, dt, model)
        states.append(state)
        diags.append(diag)
        if callback is not None:
            callback(n, state, diag)
    return stack_history(label if label is not None else model, states, diags)
