"""
Seven-level open-system model of the V_B- optical cycle.

Density matrices are vectorized row-major, vec(rho)[i * n + j] = rho[i, j], so
that vec(A rho B) = (A kron B^T) vec(rho). Every generator and solver accepts a
leading batch dimension, which the sweeps use to solve a whole frequency grid
in one call.
"""

import logging
import math
from enum import Enum, auto
from typing import List, NamedTuple, Optional

import torch

from odmrsim.core.exceptions import (
    DegenerateSteadyState,
    DimensionMismatch,
    NotHermitian,
    StepTooLarge,
)
from odmrsim.core.hamiltonian import (
    BranchConvention,
    DefectParams,
    DriveConfig,
    StaticField,
    lab_frame_drive,
)
from odmrsim.core.levels import Level, N_LEVELS
from odmrsim.core.spin_algebra import (
    DTYPE,
    HERMITIAN_RTOL,
    ComplexMatrix,
    dagger,
    device,
    hermitian_part,
    identity,
    transfer,
)

logger = logging.getLogger(__name__)

SevenLevelBasis = Level

TWO_PI = 2.0 * math.pi
NULL_SPACE_RTOL = 1e-10
# dt * ||L||_2 must stay below this
RK4_STABILITY = 0.1


class Transition(Enum):
    PUMP = 0
    RADIATIVE = auto()
    ISC = auto()
    RELAXATION = auto()
    DEPHASING = auto()


class JumpOperator(NamedTuple):
    op: ComplexMatrix
    rate: float
    kind: Transition
    label: str = ""

    def is_dephasing(self) -> bool:
        return self.kind == Transition.DEPHASING

    def is_population(self) -> bool:
        return self.kind != Transition.DEPHASING


def _population_jump(target: Level, source: Level, rate: float, kind: Transition) -> JumpOperator:
    return JumpOperator(
        op=transfer(target, source, N_LEVELS),
        rate=rate,
        kind=kind,
        label=f"{source.label}->{target.label}",
    )


def jump_operators(params: DefectParams) -> List[JumpOperator]:
    """
    Jump operators of the optical cycle and of the ground-state dephasing.

    Pumping and radiative decay are spin conserving. The merged-level rates
    k_45 and k_52 are distributed over the +/-1 branches according to
    ``params.branching``. Jumps with zero rate are omitted.

    :param params: Defect parameters.
    :return: List of JumpOperator.
    """
    r = params.rates
    if params.branching == BranchConvention.CONSERVING:
        k_s_to_branch = 0.5 * r.k_52
    else:
        k_s_to_branch = r.k_52

    entries = []
    for g, e in zip(Level.ground(), Level.excited()):
        entries.append((e, g, r.k_p, Transition.PUMP))
    for g, e in zip(Level.ground(), Level.excited()):
        entries.append((g, e, r.k_d, Transition.RADIATIVE))
    entries += [
        (Level.S, Level.E_PLUS, r.k_45, Transition.ISC),
        (Level.S, Level.E_MINUS, r.k_45, Transition.ISC),
        (Level.S, Level.E0, r.k_35, Transition.ISC),
        (Level.G_PLUS, Level.S, k_s_to_branch, Transition.RELAXATION),
        (Level.G_MINUS, Level.S, k_s_to_branch, Transition.RELAXATION),
        (Level.G0, Level.S, r.k_51, Transition.RELAXATION),
    ]
    jumps = [_population_jump(*entry) for entry in entries if entry[2] > 0]

    if params.gamma_phi > 0:
        for level in (Level.G_PLUS, Level.G_MINUS):
            jumps.append(
                JumpOperator(
                    op=transfer(level, level, N_LEVELS),
                    rate=params.gamma_phi,
                    kind=Transition.DEPHASING,
                    label=f"dephasing {level.label}",
                )
            )
    return jumps


def _left(a: ComplexMatrix) -> ComplexMatrix:
    """Superoperator of rho -> a @ rho (batched)."""
    n = a.shape[-1]
    eye = identity(n)
    return torch.einsum("...ij,kl->...ikjl", a, eye).reshape(*a.shape[:-2], n * n, n * n)


def _right(b: ComplexMatrix) -> ComplexMatrix:
    """Superoperator of rho -> rho @ b (batched)."""
    n = b.shape[-1]
    eye = identity(n)
    return torch.einsum("ij,...lk->...ikjl", eye, b).reshape(*b.shape[:-2], n * n, n * n)


def hamiltonian_superoperator(h: ComplexMatrix) -> ComplexMatrix:
    """-i 2 pi [H, .] for H in MHz, giving a rate in 1/us."""
    return -1j * TWO_PI * (_left(h) - _right(h))


def dissipator(jumps: List[JumpOperator], dim: int = N_LEVELS) -> ComplexMatrix:
    d = torch.zeros((dim * dim, dim * dim), dtype=DTYPE, device=device)
    for jump in jumps:
        if jump.op.shape != (dim, dim):
            raise DimensionMismatch(
                f"Jump '{jump.label}' has shape {tuple(jump.op.shape)}, expected {(dim, dim)}."
            )
        a = jump.op
        ada = dagger(a) @ a
        d = d + jump.rate * (torch.kron(a, a.conj()) - 0.5 * _left(ada) - 0.5 * _right(ada))
    return d


class DensityMatrix:
    """
    Density matrix of the 7-level model, optionally batched over a leading
    dimension.
    """

    def __init__(self, rho: ComplexMatrix):
        if rho.dim() < 2 or rho.shape[-1] != rho.shape[-2]:
            raise DimensionMismatch(f"Density matrix must be square, got {tuple(rho.shape)}.")
        self.rho = rho

    @classmethod
    def maximally_mixed(cls, dim: int = N_LEVELS) -> "DensityMatrix":
        return cls(identity(dim) / dim)

    @classmethod
    def pure(cls, level: int, dim: int = N_LEVELS) -> "DensityMatrix":
        return cls(transfer(level, level, dim))

    @classmethod
    def from_vector(cls, vec: torch.Tensor, dim: int = N_LEVELS) -> "DensityMatrix":
        return cls(vec.reshape(*vec.shape[:-1], dim, dim))

    @property
    def dim(self) -> int:
        return self.rho.shape[-1]

    @property
    def batched(self) -> bool:
        return self.rho.dim() > 2

    def vector(self) -> torch.Tensor:
        return self.rho.reshape(*self.rho.shape[:-2], self.dim * self.dim)

    def trace(self) -> torch.Tensor:
        return self.rho.diagonal(dim1=-2, dim2=-1).sum(-1)

    def populations(self) -> torch.Tensor:
        return self.rho.diagonal(dim1=-2, dim2=-1).real

    def population(self, level: Level) -> float:
        return self.populations()[..., level].item()

    def min_eigenvalue(self) -> torch.Tensor:
        return torch.linalg.eigvalsh(hermitian_part(self.rho)).min(dim=-1).values

    def __getitem__(self, index) -> "DensityMatrix":
        return DensityMatrix(self.rho[index])

    def __len__(self) -> int:
        return self.rho.shape[0] if self.batched else 1


class Liouvillian:
    """
    Vectorized Lindblad generator, shape (..., n^2, n^2), in 1/us.
    """

    def __init__(self, mat: ComplexMatrix, dim: int = N_LEVELS):
        if mat.shape[-1] != dim * dim or mat.shape[-2] != dim * dim:
            raise DimensionMismatch(
                f"Liouvillian for dimension {dim} must be {dim * dim}x{dim * dim}, got {tuple(mat.shape)}."
            )
        self.mat = mat
        self.dim = dim
        self.basis = SevenLevelBasis

    def apply(self, rho: DensityMatrix) -> DensityMatrix:
        """d rho / dt for the given state."""
        out = (self.mat @ rho.vector().unsqueeze(-1)).squeeze(-1)
        return DensityMatrix.from_vector(out, self.dim)

    def trace_leak(self) -> float:
        """max over columns of |sum of diagonal-index rows|; zero for a trace-preserving generator."""
        diag_rows = torch.arange(self.dim, device=self.mat.device) * (self.dim + 1)
        return self.mat[..., diag_rows, :].sum(dim=-2).abs().max().item()

    def spectral_norm(self) -> torch.Tensor:
        return torch.linalg.matrix_norm(self.mat, ord=2)


def _check_hermitian_batch(h: ComplexMatrix) -> None:
    scale = h.abs().amax(dim=(-2, -1))
    err = (h - dagger(h)).abs().amax(dim=(-2, -1))
    if bool((err > HERMITIAN_RTOL * scale).any()):
        raise NotHermitian(f"Hamiltonian is not Hermitian: max|H - H^dagger| = {err.max().item():.3e}")


def build_liouvillian(h: ComplexMatrix, jumps: List[JumpOperator]) -> Liouvillian:
    """
    L vec(rho) = vec(-i 2 pi [H, rho] + sum_k rate_k (A_k rho A_k^dagger - 1/2 {A_k^dagger A_k, rho})).

    :param h: Hamiltonian in MHz, shape (..., n, n).
    :param jumps: Jump operators, each n x n.
    :return: Liouvillian batched like ``h``.
    """
    if h.dim() < 2 or h.shape[-1] != h.shape[-2]:
        raise DimensionMismatch(f"Hamiltonian must be square, got {tuple(h.shape)}.")
    _check_hermitian_batch(h)
    dim = h.shape[-1]
    return Liouvillian(hamiltonian_superoperator(h) + dissipator(jumps, dim), dim)


def steady_state(l: Liouvillian) -> DensityMatrix:
    """
    Null vector of the generator, normalized to unit trace.

    :raises DegenerateSteadyState: If the null space is more than one dimensional.
    """
    _, s, vh = torch.linalg.svd(l.mat)
    degenerate = s[..., -2] <= NULL_SPACE_RTOL * s[..., 0]
    if bool(degenerate.any()):
        raise DegenerateSteadyState(
            f"Liouvillian null space is degenerate (singular values "
            f"{s[..., -2].min().item():.3e}, largest {s[..., 0].max().item():.3e}); "
            f"the rate graph is disconnected."
        )
    null = vh[..., -1, :].conj()
    rho = DensityMatrix.from_vector(null, l.dim).rho
    tr = rho.diagonal(dim1=-2, dim2=-1).sum(-1)
    rho = rho / tr[..., None, None]
    return DensityMatrix(hermitian_part(rho))


def rk4_propagator(mat: ComplexMatrix, step: float) -> ComplexMatrix:
    """One RK4 step of a constant linear generator: sum_{k<=4} (step L)^k / k!."""
    hl = step * mat
    eye = torch.eye(mat.shape[-1], dtype=mat.dtype, device=mat.device)
    term = eye
    prop = eye
    for k in range(1, 5):
        term = term @ hl / k
        prop = prop + term
    return prop


def evolve(
    h: ComplexMatrix,
    jumps: List[JumpOperator],
    rho0: DensityMatrix,
    t_final: float,
    dt: float,
) -> DensityMatrix:
    """
    Integrate the master equation with fixed-step RK4.

    The step is shrunk so an integer number of steps reaches ``t_final``. The
    steps of the time-independent generator are applied as a power of the
    one-step propagator.

    :param t_final: Final time in us.
    :param dt: Maximum step in us.
    :raises StepTooLarge: If dt * ||L||_2 >= 0.1.
    """
    if t_final < 0 or dt <= 0:
        raise ValueError(f"Need t_final >= 0 and dt > 0, got t_final={t_final}, dt={dt}.")
    if t_final == 0:
        return rho0
    l = build_liouvillian(h, jumps)
    norm = l.spectral_norm().max().item()
    if dt * norm >= RK4_STABILITY:
        raise StepTooLarge(
            f"dt = {dt:g} us violates the RK4 bound dt * ||L|| < {RK4_STABILITY} (||L|| = {norm:.4g} 1/us)."
        )
    n_steps = math.ceil(t_final / dt)
    prop = torch.linalg.matrix_power(rk4_propagator(l.mat, t_final / n_steps), n_steps)
    logger.debug("evolve: %d RK4 steps of %.3e us", n_steps, t_final / n_steps)
    out = (prop @ rho0.vector().unsqueeze(-1)).squeeze(-1)
    return DensityMatrix.from_vector(out, rho0.dim)


def periodic_steady_state(
    params: DefectParams,
    static: StaticField,
    drive: DriveConfig,
    steps_per_period: int = 256,
    jumps: Optional[List[JumpOperator]] = None,
) -> DensityMatrix:
    """
    Cycle-averaged steady state of the lab-frame master equation with the full
    time-dependent drive, without the rotating-wave approximation.

    The one-period RK4 propagator M is built step by step; the periodic state is
    the fixed point of M and the returned state its average over one period.
    """
    if drive.freq <= 0:
        raise ValueError("A periodic solution needs a drive frequency > 0.")
    if jumps is None:
        jumps = jump_operators(params)
    lab = lab_frame_drive(params, static, drive)
    l0 = hamiltonian_superoperator(lab.h0) + dissipator(jumps)
    lx = hamiltonian_superoperator(lab.x_op)
    ly = hamiltonian_superoperator(lab.y_op)
    omega = TWO_PI * lab.freq

    def generator(t: float) -> ComplexMatrix:
        return l0 + math.sin(omega * t) * lx + math.sin(omega * t + lab.phase) * ly

    period = 1.0 / lab.freq
    step = period / steps_per_period
    norm = max(
        torch.linalg.matrix_norm(generator(k * period / 8), ord=2).item() for k in range(8)
    )
    if step * norm >= RK4_STABILITY:
        raise StepTooLarge(
            f"{steps_per_period} steps per period give step * ||L|| = {step * norm:.3g} >= {RK4_STABILITY}."
        )

    n2 = l0.shape[-1]
    prop = torch.eye(n2, dtype=DTYPE, device=device)
    accumulated = torch.zeros_like(prop)
    for k in range(steps_per_period):
        t = k * step
        l_start, l_mid, l_end = generator(t), generator(t + 0.5 * step), generator(t + step)
        # accumulate the trapezoid sum of the state along the period
        accumulated = accumulated + 0.5 * prop
        k1 = l_start @ prop
        k2 = l_mid @ (prop + 0.5 * step * k1)
        k3 = l_mid @ (prop + 0.5 * step * k2)
        k4 = l_end @ (prop + step * k3)
        prop = prop + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        accumulated = accumulated + 0.5 * prop

    fixed = steady_state(Liouvillian(prop - torch.eye(n2, dtype=DTYPE, device=device)))
    average = (accumulated / steps_per_period) @ fixed.vector()
    rho = DensityMatrix.from_vector(average).rho
    rho = rho / rho.diagonal().sum()
    return DensityMatrix(hermitian_part(rho))


def photoluminescence(rho: DensityMatrix, params: DefectParams) -> float:
    """
    PL = k_d (p(e0) + p(e+) + p(e-)), arbitrary units.
    """
    if rho.batched:
        raise DimensionMismatch("photoluminescence expects a single density matrix; use photoluminescence_batch.")
    return photoluminescence_batch(rho, params).item()


def photoluminescence_batch(rho: DensityMatrix, params: DefectParams) -> torch.Tensor:
    excited = list(Level.excited())
    return params.rates.k_d * rho.populations()[..., excited].sum(dim=-1)
