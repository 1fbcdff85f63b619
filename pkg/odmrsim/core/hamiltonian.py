"""
Static and driven Hamiltonians of the V_B- ground state.

All energies are in MHz. The static field is along the defect symmetry axis z
(perpendicular to the hBN plane); the microwave field of the two orthogonal
arms lies in the x-y plane:

    B_MW(t) = B1 x sin(w t) + B2 y sin(w t + delta_eff)

Amplitudes are stored as Rabi amplitudes omega_i = gamma_e * B_i in MHz.
"""

import cmath
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, NamedTuple, Tuple

import torch

from odmrsim.core.exceptions import ConfigError, NumericalError
from odmrsim.core.levels import Level, N_LEVELS
from odmrsim.core.spin_algebra import (
    ComplexMatrix,
    dagger,
    eig_hermitian,
    embed,
    identity,
    spin1_operators,
    zeros,
)

logger = logging.getLogger(__name__)

# mu_B / h in MHz per mT; gamma_e = g * BOHR_MHZ_PER_MT
BOHR_MHZ_PER_MT = 13.9962

MAX_ABS_FIELD_MT = 100.0


class Branch(Enum):
    MINUS = "minus"
    PLUS = "plus"


class BranchConvention(Enum):
    """
    How the merged-level rates k_45 and k_52 act on the two +/-1 branches.

    CONSERVING: k_45 on each of e+ -> s and e- -> s, k_52 / 2 on each of
    s -> g+ and s -> g-. Total flows match the five-level model.
    PER_BRANCH: k_45 and k_52 at full value on every branch.
    """

    CONSERVING = "conserving"
    PER_BRANCH = "per_branch"


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _finite(value: float) -> bool:
    return isinstance(value, (int, float)) and math.isfinite(value)


@dataclass(frozen=True)
class OpticalRates:
    """Optical pumping and relaxation rates of the 7-level model, in 1/us."""

    k_p: float = 7.0
    k_d: float = 880.0
    k_45: float = 1150.0
    k_35: float = 220.0
    k_52: float = 20.0
    k_51: float = 13.0

    def __post_init__(self):
        for name in ("k_p", "k_d", "k_45", "k_35", "k_52", "k_51"):
            value = getattr(self, name)
            _require(_finite(value) and value >= 0, f"rates.{name} must be >= 0, got {value!r}")

    def scaled(self, factor: float) -> "OpticalRates":
        return OpticalRates(
            **{name: getattr(self, name) * factor for name in self.__dataclass_fields__}
        )


@dataclass(frozen=True)
class DefectParams:
    d_gs: float = 3490.0
    e_gs: float = 65.0
    g_factor: float = 2.002
    gamma_phi: float = 100.0
    rates: OpticalRates = field(default_factory=OpticalRates)
    branching: BranchConvention = BranchConvention.CONSERVING

    def __post_init__(self):
        _require(_finite(self.d_gs) and self.d_gs > 0, f"defect.d_gs must be > 0, got {self.d_gs!r}")
        _require(_finite(self.e_gs) and self.e_gs >= 0, f"defect.e_gs must be >= 0, got {self.e_gs!r}")
        _require(
            _finite(self.g_factor) and 1.5 < self.g_factor < 2.5,
            f"defect.g_factor must lie in (1.5, 2.5), got {self.g_factor!r}",
        )
        _require(
            _finite(self.gamma_phi) and self.gamma_phi >= 0,
            f"defect.gamma_phi must be >= 0, got {self.gamma_phi!r}",
        )
        if not isinstance(self.branching, BranchConvention):
            try:
                object.__setattr__(self, "branching", BranchConvention(self.branching))
            except ValueError:
                raise ConfigError(f"defect.branching must be one of "
                                  f"{[c.value for c in BranchConvention]}, got {self.branching!r}")

    @property
    def gamma_e(self) -> float:
        """Electron gyromagnetic ratio in MHz/mT."""
        return self.g_factor * BOHR_MHZ_PER_MT


@dataclass(frozen=True)
class StaticField:
    b0: float = 0.0

    def __post_init__(self):
        _require(
            _finite(self.b0) and abs(self.b0) <= MAX_ABS_FIELD_MT,
            f"field.b0 must satisfy |b0| <= {MAX_ABS_FIELD_MT:g} mT, got {self.b0!r}",
        )


@dataclass(frozen=True)
class DriveConfig:
    omega1: float = 5.0
    omega2: float = 5.0
    delta_deg: float = 0.0
    offset_deg: float = -30.0
    freq: float = 3490.0

    def __post_init__(self):
        for name in ("omega1", "omega2"):
            value = getattr(self, name)
            _require(_finite(value) and value >= 0, f"drive.{name} must be >= 0, got {value!r}")
        _require(_finite(self.delta_deg), f"drive.delta_deg must be finite, got {self.delta_deg!r}")
        _require(_finite(self.offset_deg), f"drive.offset_deg must be finite, got {self.offset_deg!r}")
        _require(_finite(self.freq) and self.freq >= 0, f"drive.freq must be >= 0, got {self.freq!r}")

    @property
    def effective_phase_deg(self) -> float:
        return (self.delta_deg + self.offset_deg) % 360.0

    @property
    def is_off(self) -> bool:
        return self.omega1 == 0.0 and self.omega2 == 0.0

    def with_freq(self, freq: float) -> "DriveConfig":
        return replace(self, freq=freq)

    def with_delta(self, delta_deg: float) -> "DriveConfig":
        return replace(self, delta_deg=delta_deg)


@dataclass(frozen=True)
class HyperfineParams:
    a_zz: float = -47.0
    n_nuclei: int = 3

    def __post_init__(self):
        _require(
            _finite(self.a_zz) and abs(self.a_zz) <= 200,
            f"hyperfine.a_zz must satisfy |a_zz| <= 200, got {self.a_zz!r}",
        )
        _require(self.n_nuclei == 3, f"hyperfine.n_nuclei must be 3 for V_B-, got {self.n_nuclei!r}")


class MicrowaveField:
    """
    Field of the cross-shaped waveguide for one drive setting.

    Decomposes the two linear arms into the circular components seen by the
    electron spin. With H = +gamma_e B.S the component
    (omega1 + i omega2 e^{i delta}) / 2 drives |0> -> |+1> and
    (omega1 - i omega2 e^{i delta}) / 2 drives |0> -> |-1>, so an effective
    phase of 90 deg selects |0> -> |-1> and 270 deg selects |0> -> |+1>.
    """

    def __init__(self, drive: DriveConfig):
        self.drive = drive
        self.phase = math.radians(drive.effective_phase_deg)

    def complex_amplitudes(self) -> Tuple[complex, complex]:
        """
        :return: (sigma_plus, sigma_minus) complex circular amplitudes in MHz.
        """
        rotated = 1j * self.drive.omega2 * cmath.exp(1j * self.phase)
        return 0.5 * (self.drive.omega1 + rotated), 0.5 * (self.drive.omega1 - rotated)

    def circular_components(self) -> Tuple[float, float]:
        sigma_plus, sigma_minus = self.complex_amplitudes()
        return abs(sigma_plus), abs(sigma_minus)

    def field_at(self, t: float) -> Tuple[float, float]:
        """
        In-plane field components at time ``t`` (us), in MHz Rabi units.
        """
        wt = 2.0 * math.pi * self.drive.freq * t
        return self.drive.omega1 * math.sin(wt), self.drive.omega2 * math.sin(wt + self.phase)


def circular_components(drive: DriveConfig) -> Tuple[float, float]:
    """
    Circular decomposition of the drive.

    :return: (amp_plus, amp_minus) in MHz; amp_plus drives |0> -> |+1>,
        amp_minus drives |0> -> |-1>.
    """
    return MicrowaveField(drive).circular_components()


def build_ground_hamiltonian(params: DefectParams, static: StaticField) -> ComplexMatrix:
    """
    H = D [S_z^2 - 2/3] + E (S_x^2 - S_y^2) + gamma_e b0 S_z, in MHz.
    """
    spin = spin1_operators()
    eye = identity(3)
    return (
        params.d_gs * (spin.sz @ spin.sz - (2.0 / 3.0) * eye)
        + params.e_gs * (spin.sx @ spin.sx - spin.sy @ spin.sy)
        + params.gamma_e * static.b0 * spin.sz
    )


def resonance_frequencies(params: DefectParams, static: StaticField) -> Tuple[float, float]:
    """
    :return: (f_minus, f_plus) = D -/+ sqrt(E^2 + (gamma_e b0)^2), in MHz.
    """
    split = math.hypot(params.e_gs, params.gamma_e * static.b0)
    return params.d_gs - split, params.d_gs + split


def field_from_separation(separation: float, params: DefectParams) -> float:
    """
    Invert the resonance formula: static field (mT, >= 0) giving a peak
    separation ``separation`` (MHz).
    """
    half = 0.5 * separation
    if half < params.e_gs - 1e-9:
        raise ConfigError(
            f"Peak separation {separation:g} MHz is below the zero-field value {2 * params.e_gs:g} MHz."
        )
    return math.sqrt(max(half * half - params.e_gs ** 2, 0.0)) / params.gamma_e


class GroundEigenbasis(NamedTuple):
    f_plus: float
    f_minus: float
    # columns: |g0>, |g+>, |g->, in the spin basis
    states: ComplexMatrix


def ground_eigenbasis(params: DefectParams, static: StaticField) -> GroundEigenbasis:
    """
    Diagonalize the ground Hamiltonian and label its eigenstates.

    |g0> is the eigenstate with the largest |0> weight; of the remaining two the
    upper one is |g+>. Each vector is phased so its largest component is real
    and positive.
    """
    evals, vecs = eig_hermitian(build_ground_hamiltonian(params, static))
    zero_weight = vecs[1].abs()
    i0 = int(torch.argmax(zero_weight).item())
    others = [k for k in range(3) if k != i0]
    i_minus, i_plus = sorted(others, key=lambda k: evals[k].item())

    columns = []
    for k in (i0, i_plus, i_minus):
        vec = vecs[:, k]
        pivot = vec[int(torch.argmax(vec.abs()).item())]
        columns.append(vec * (pivot.abs() / pivot))
    states = torch.stack(columns, dim=1)
    e0 = evals[i0].item()
    return GroundEigenbasis(
        f_plus=evals[i_plus].item() - e0,
        f_minus=evals[i_minus].item() - e0,
        states=states,
    )


def rwa_coupling(basis: GroundEigenbasis, drive: DriveConfig) -> Tuple[complex, complex]:
    """
    Rotating-frame couplings <g+|H|g0> and <g-|H|g0> in MHz.
    """
    sigma_plus, sigma_minus = MicrowaveField(drive).complex_amplitudes()
    couplings = []
    for k in (1, 2):
        a = complex(basis.states[0, k].item())
        b = complex(basis.states[2, k].item())
        couplings.append(
            (1j / math.sqrt(2.0))
            * (sigma_plus.conjugate() * a.conjugate() + sigma_minus.conjugate() * b.conjugate())
        )
    return couplings[0], couplings[1]


def ground_projector() -> ComplexMatrix:
    """Projector onto |g+> and |g->, the levels carrying the drive detuning."""
    proj = zeros(N_LEVELS)
    proj[Level.G_PLUS, Level.G_PLUS] = 1.0
    proj[Level.G_MINUS, Level.G_MINUS] = 1.0
    return proj


def build_rwa_hamiltonian(
    params: DefectParams, static: StaticField, drive: DriveConfig
) -> ComplexMatrix:
    """
    7-level Hamiltonian in the frame rotating at the drive frequency.

    Ground levels |g+>, |g-> carry the detunings f_plus - f and f_minus - f and
    couple to |g0> through the co-rotating drive terms; the excited triplet and
    the singlet are undriven and sit at zero.
    """
    basis = ground_eigenbasis(params, static)
    v_plus, v_minus = rwa_coupling(basis, drive)
    h = zeros(N_LEVELS)
    h[Level.G_PLUS, Level.G_PLUS] = basis.f_plus - drive.freq
    h[Level.G_MINUS, Level.G_MINUS] = basis.f_minus - drive.freq
    h[Level.G_PLUS, Level.G0] = v_plus
    h[Level.G0, Level.G_PLUS] = v_plus.conjugate()
    h[Level.G_MINUS, Level.G0] = v_minus
    h[Level.G0, Level.G_MINUS] = v_minus.conjugate()
    return h


class LabFrameDrive(NamedTuple):
    """H(t) = h0 + sin(w t) x_op + sin(w t + delta_eff) y_op, in MHz."""

    h0: ComplexMatrix
    x_op: ComplexMatrix
    y_op: ComplexMatrix
    freq: float
    phase: float


def lab_frame_drive(params: DefectParams, static: StaticField, drive: DriveConfig) -> LabFrameDrive:
    basis = ground_eigenbasis(params, static)
    spin = spin1_operators()
    u = basis.states

    def _embed_ground(op3: ComplexMatrix) -> ComplexMatrix:
        op = zeros(N_LEVELS)
        op[:3, :3] = dagger(u) @ op3 @ u
        return op

    h0 = zeros(N_LEVELS)
    h0[Level.G_PLUS, Level.G_PLUS] = basis.f_plus
    h0[Level.G_MINUS, Level.G_MINUS] = basis.f_minus
    return LabFrameDrive(
        h0=h0,
        x_op=_embed_ground(drive.omega1 * spin.sx),
        y_op=_embed_ground(drive.omega2 * spin.sy),
        freq=drive.freq,
        phase=math.radians(drive.effective_phase_deg),
    )


def build_lab_hamiltonian(
    params: DefectParams, static: StaticField, drive: DriveConfig, t: float
) -> ComplexMatrix:
    """
    7-level lab-frame Hamiltonian at time ``t`` (us) with the full field, no RWA.
    """
    lab = lab_frame_drive(params, static, drive)
    wt = 2.0 * math.pi * lab.freq * t
    return lab.h0 + math.sin(wt) * lab.x_op + math.sin(wt + lab.phase) * lab.y_op


class StickLine(NamedTuple):
    frequency: float
    weight: float
    branch: Branch


def hyperfine_hamiltonian(
    params: DefectParams, static: StaticField, hf: HyperfineParams
) -> ComplexMatrix:
    """
    Ground Hamiltonian of the electron spin and three I = 1 nitrogen nuclei
    with secular coupling a_zz S_z I_z,k. Dimension 3^4 = 81, electron first.
    """
    spin = spin1_operators()
    dims = [3] * (hf.n_nuclei + 1)
    h = embed(build_ground_hamiltonian(params, static), 0, dims)
    sz_e = embed(spin.sz, 0, dims)
    for k in range(1, hf.n_nuclei + 1):
        h = h + hf.a_zz * (sz_e @ embed(spin.sz, k, dims))
    return h


def hyperfine_stick_spectrum(
    params: DefectParams, static: StaticField, hf: HyperfineParams
) -> List[StickLine]:
    """
    Allowed ESR lines (Delta m_s = +/-1, nuclear projections conserved) of the
    hyperfine-coupled ground state.

    :return: Lines sorted by branch (minus first) and frequency; weights are
        degeneracy counts and sum to 27 per branch.
    """
    n_nuclear = 3 ** hf.n_nuclei
    evals, vecs = eig_hermitian(hyperfine_hamiltonian(params, static, hf))

    # probability per (electron level, nuclear configuration) of each eigenvector
    probs = vecs.abs().pow(2).reshape(3, n_nuclear, -1)
    electron = probs.sum(dim=1)
    config = probs.sum(dim=0).argmax(dim=0)

    by_config = defaultdict(list)
    for k in range(vecs.shape[1]):
        by_config[int(config[k].item())].append(k)

    counts = Counter()
    for cfg, members in by_config.items():
        if len(members) != 3:
            raise NumericalError(f"Nuclear configuration {cfg} has {len(members)} states, expected 3.")
        zero_like = max(members, key=lambda k: electron[1, k].item())
        lower, upper = sorted((k for k in members if k != zero_like), key=lambda k: evals[k].item())
        e0 = evals[zero_like].item()
        counts[(Branch.MINUS, round(evals[lower].item() - e0, 6))] += 1
        counts[(Branch.PLUS, round(evals[upper].item() - e0, 6))] += 1

    order = {Branch.MINUS: 0, Branch.PLUS: 1}
    lines = [StickLine(freq, float(weight), branch) for (branch, freq), weight in counts.items()]
    lines.sort(key=lambda line: (order[line.branch], line.frequency))
    logger.debug("Stick spectrum: %d lines", len(lines))
    return lines
