"""
CW-ODMR sweeps over microwave frequency, phase difference and static field.

Contrast is the relative PL change when the drive is switched on,
(PL_on - PL_off) / PL_off, from steady states of the rotating-frame model.
A frequency grid is solved as one batch: in the rotating frame the
Hamiltonian depends on the drive frequency only through -f P_g, with P_g the
projector on |g+> and |g->.
"""

import logging
import math
import threading
from concurrent.futures import Executor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import torch
from tqdm import tqdm

from odmrsim.core.exceptions import ConfigError, DimensionMismatch, FitError, InputError
from odmrsim.core.fitting import DoubleLorentzianFit, Selectivity, selectivity
from odmrsim.core.hamiltonian import (
    Branch,
    DefectParams,
    DriveConfig,
    StaticField,
    build_rwa_hamiltonian,
    ground_projector,
    resonance_frequencies,
)
from odmrsim.core.lindblad import (
    build_liouvillian,
    jump_operators,
    periodic_steady_state,
    photoluminescence,
    photoluminescence_batch,
    steady_state,
)
from odmrsim.core.spectrum import Spectrum
from odmrsim.core.spin_algebra import RDTYPE, device

logger = logging.getLogger(__name__)

Fitter = Callable[[Spectrum], DoubleLorentzianFit]

ZERO_FIELD_MT = 1e-9
# clearance between a resonance and the edge of a fitted sweep, in dephasing FWHM
FIT_MARGIN_FWHM = 2.5


@dataclass(frozen=True)
class SweepConfig:
    f_start: float = 3250.0
    f_stop: float = 3750.0
    n_freq: int = 201
    delta_list: Tuple[float, ...] = tuple(float(d) for d in range(0, 360, 10))
    b_list: Tuple[float, ...] = (0.5, 1.0, 2.3, 5.0, 8.0)
    drive: DriveConfig = field(default_factory=DriveConfig)
    params: DefectParams = field(default_factory=DefectParams)
    static: StaticField = field(default_factory=StaticField)

    def __post_init__(self):
        if not self.f_start < self.f_stop:
            raise ConfigError(f"sweep.f_start ({self.f_start}) must be below sweep.f_stop ({self.f_stop}).")
        if int(self.n_freq) != self.n_freq or self.n_freq < 2:
            raise ConfigError(f"sweep.n_freq must be an integer >= 2, got {self.n_freq!r}")
        if not self.delta_list:
            raise ConfigError("sweep.delta_list must not be empty.")
        for delta in self.delta_list:
            if not 0.0 <= delta < 360.0:
                raise ConfigError(f"sweep.delta_list values must lie in [0, 360), got {delta!r}")
        object.__setattr__(self, "delta_list", tuple(float(d) for d in self.delta_list))
        object.__setattr__(self, "b_list", tuple(float(b) for b in self.b_list))
        for b in self.b_list:
            StaticField(b)

    def freqs(self) -> torch.Tensor:
        return torch.linspace(self.f_start, self.f_stop, int(self.n_freq), dtype=RDTYPE, device=device)

    @property
    def spacing(self) -> float:
        return (self.f_stop - self.f_start) / (self.n_freq - 1)

    def covering(self, low: float, high: float) -> "SweepConfig":
        """
        The frequency grid extended at its own spacing until it contains
        [low, high]; ``self`` when it already does.
        """
        step = self.spacing
        below = max(0, math.ceil((self.f_start - low) / step - 1e-9))
        above = max(0, math.ceil((high - self.f_stop) / step - 1e-9))
        if below == 0 and above == 0:
            return self
        return replace(
            self,
            f_start=self.f_start - below * step,
            f_stop=self.f_stop + above * step,
            n_freq=int(self.n_freq) + below + above,
        )


@dataclass(frozen=True)
class PhaseMap:
    deltas: torch.Tensor
    freqs: torch.Tensor
    contrast_grid: torch.Tensor
    b0: float = 0.0

    def __post_init__(self):
        if tuple(self.contrast_grid.shape) != (self.deltas.numel(), self.freqs.numel()):
            raise DimensionMismatch(
                f"Contrast grid {tuple(self.contrast_grid.shape)} does not match axes "
                f"({self.deltas.numel()}, {self.freqs.numel()})."
            )

    def spectrum(self, row: int) -> Spectrum:
        return Spectrum(self.freqs, self.contrast_grid[row], delta_deg=self.deltas[row].item(), b0=self.b0)


class IntegratedContrast(NamedTuple):
    below: torch.Tensor
    above: torch.Tensor
    below_raw: torch.Tensor
    above_raw: torch.Tensor


class SelectivityScan(NamedTuple):
    deltas: torch.Tensor
    sel_minus: torch.Tensor
    sigma_minus: torch.Tensor
    sel_plus: torch.Tensor
    sigma_plus: torch.Tensor
    peak_sep: torch.Tensor


class MaxSelectivity(NamedTuple):
    delta_star_minus: float
    sel_minus: Selectivity
    delta_star_plus: float
    sel_plus: Selectivity
    peak_sep: float
    degenerate: bool = False


@dataclass
class SelectivityCurve:
    b_values: torch.Tensor
    sel_minus: torch.Tensor
    sigma_minus: torch.Tensor
    sel_plus: torch.Tensor
    sigma_plus: torch.Tensor
    delta_star_minus: torch.Tensor
    delta_star_plus: torch.Tensor
    peak_sep: torch.Tensor
    phase_separation: torch.Tensor
    degenerate: List[bool]
    status: List[str]


class ContrastSolver:
    """
    Steady-state contrast for one defect model.

    The drive-off PL does not depend on the drive and is cached per field.
    Safe to share between threads.
    """

    def __init__(self, params: DefectParams):
        self.params = params
        self.jumps = jump_operators(params)
        self._pl_off: Dict[float, float] = {}
        self._lock = threading.Lock()

    def pl_off(self, static: StaticField) -> float:
        with self._lock:
            cached = self._pl_off.get(static.b0)
        if cached is not None:
            return cached
        h = build_rwa_hamiltonian(self.params, static, DriveConfig(omega1=0.0, omega2=0.0, freq=0.0))
        value = photoluminescence(steady_state(build_liouvillian(h, self.jumps)), self.params)
        with self._lock:
            self._pl_off[static.b0] = value
        return value

    def contrasts(self, freqs: torch.Tensor, drive: DriveConfig, static: StaticField) -> torch.Tensor:
        """
        Contrast at each frequency of ``freqs`` for the drive amplitudes and
        phase of ``drive`` (its own frequency is ignored).
        """
        freqs = torch.as_tensor(freqs, dtype=RDTYPE, device=device).flatten()
        if drive.is_off:
            return torch.zeros_like(freqs)
        h0 = build_rwa_hamiltonian(self.params, static, drive.with_freq(0.0))
        h = h0.unsqueeze(0) - freqs.to(h0.dtype)[:, None, None] * ground_projector()
        rho = steady_state(build_liouvillian(h, self.jumps))
        pl_off = self.pl_off(static)
        return (photoluminescence_batch(rho, self.params) - pl_off) / pl_off


def contrast_at(f: float, drive: DriveConfig, field: StaticField, params: DefectParams) -> float:
    """
    :param f: Drive frequency in MHz.
    :return: (PL_on - PL_off) / PL_off; exactly 0 when both drive amplitudes are 0.
    """
    if drive.is_off:
        return 0.0
    freqs = torch.tensor([f], dtype=RDTYPE, device=device)
    return ContrastSolver(params).contrasts(freqs, drive, field)[0].item()


def frequency_sweep(
    cfg: SweepConfig,
    delta_deg: Optional[float] = None,
    b0: Optional[float] = None,
    solver: Optional[ContrastSolver] = None,
) -> Spectrum:
    """
    Spectrum over the configured frequency grid for one applied phase and field.

    :param delta_deg: Applied phase difference; defaults to ``cfg.drive.delta_deg``.
    :param b0: Static field in mT; defaults to ``cfg.static.b0``.
    """
    delta = cfg.drive.delta_deg if delta_deg is None else delta_deg
    static = cfg.static if b0 is None else StaticField(b0)
    solver = solver or ContrastSolver(cfg.params)
    freqs = cfg.freqs()
    contrasts = solver.contrasts(freqs, cfg.drive.with_delta(delta), static)
    return Spectrum(freqs, contrasts, delta_deg=delta, b0=static.b0)


def _map_rows(fn, items: Sequence, executor: Optional[Executor], progress: bool, desc: str) -> List:
    if executor is None:
        results = map(fn, items)
    else:
        results = executor.map(fn, items)
    return list(tqdm(results, total=len(items), desc=desc, disable=not progress, leave=False))


def phase_sweep(
    cfg: SweepConfig,
    b0: Optional[float] = None,
    executor: Optional[Executor] = None,
    progress: bool = False,
    solver: Optional[ContrastSolver] = None,
) -> PhaseMap:
    """
    Frequency sweeps for every phase of ``cfg.delta_list``.

    Rows are independent and may run on ``executor``; the map is assembled in
    phase order.
    """
    static = cfg.static if b0 is None else StaticField(b0)
    solver = solver or ContrastSolver(cfg.params)
    solver.pl_off(static)

    def row(delta: float) -> torch.Tensor:
        return frequency_sweep(cfg, delta, static.b0, solver).contrasts

    rows = _map_rows(row, cfg.delta_list, executor, progress, f"phase sweep b0={static.b0:g} mT")
    return PhaseMap(
        deltas=torch.tensor(cfg.delta_list, dtype=RDTYPE, device=device),
        freqs=cfg.freqs(),
        contrast_grid=torch.stack(rows),
        b0=static.b0,
    )


def _normalize(curve: torch.Tensor, name: str) -> torch.Tensor:
    lo, hi = curve.min(), curve.max()
    if (hi - lo).item() <= 0.0:
        logger.warning("Integrated contrast %s d_gs is constant over the phase grid.", name)
        return torch.zeros_like(curve)
    return (curve - lo) / (hi - lo)


def integrated_contrast(phase_map: PhaseMap, d_gs: float) -> IntegratedContrast:
    """
    Trapezoidal integral of |contrast| below and above d_gs for every phase,
    each curve min-max normalized to [0, 1].
    """
    f = phase_map.freqs
    below = f < d_gs
    above = f > d_gs
    if int(below.sum()) < 2 or int(above.sum()) < 2:
        raise InputError(
            f"Frequency grid {f[0].item():g}-{f[-1].item():g} MHz must have samples on both sides of d_gs = {d_gs:g} MHz."
        )
    magnitude = phase_map.contrast_grid.abs()
    below_raw = torch.trapezoid(magnitude[:, below], f[below], dim=-1)
    above_raw = torch.trapezoid(magnitude[:, above], f[above], dim=-1)
    return IntegratedContrast(
        below=_normalize(below_raw, "below"),
        above=_normalize(above_raw, "above"),
        below_raw=below_raw,
        above_raw=above_raw,
    )


def fit_window(cfg: SweepConfig, static: StaticField) -> SweepConfig:
    """
    Sweep whose grid keeps both resonances at least FIT_MARGIN_FWHM dephasing
    linewidths away from its edges.
    """
    f_minus, f_plus = resonance_frequencies(cfg.params, static)
    margin = max(FIT_MARGIN_FWHM * cfg.params.gamma_phi / math.pi, 2.0 * cfg.spacing)
    window = cfg.covering(f_minus - margin, f_plus + margin)
    if window is not cfg:
        logger.info(
            "Widened sweep to %.1f-%.1f MHz for the resonances at %.1f and %.1f MHz (b0 = %g mT).",
            window.f_start,
            window.f_stop,
            f_minus,
            f_plus,
            static.b0,
        )
    return window


def selectivity_scan(
    cfg: SweepConfig,
    fitter: Fitter,
    b0: Optional[float] = None,
    executor: Optional[Executor] = None,
    progress: bool = False,
    solver: Optional[ContrastSolver] = None,
) -> SelectivityScan:
    """
    Fitted selectivities of both transitions for every phase of ``cfg.delta_list``.

    The sweep is widened first when a resonance lies too close to its edge
    (see :func:`fit_window`).

    :raises FitFailed: With the offending phase when a fit does not converge.
    """
    static = cfg.static if b0 is None else StaticField(b0)
    solver = solver or ContrastSolver(cfg.params)
    solver.pl_off(static)
    window = fit_window(cfg, static)

    def row(delta: float) -> Tuple[Selectivity, Selectivity, float]:
        fit = fitter(frequency_sweep(window, delta, static.b0, solver))
        return selectivity(fit, Branch.MINUS), selectivity(fit, Branch.PLUS), fit.separation

    rows = _map_rows(row, cfg.delta_list, executor, progress, f"selectivity b0={static.b0:g} mT")

    def column(values) -> torch.Tensor:
        return torch.tensor(list(values), dtype=RDTYPE, device=device)

    return SelectivityScan(
        deltas=column(cfg.delta_list),
        sel_minus=column(r[0].value for r in rows),
        sigma_minus=column(r[0].sigma for r in rows),
        sel_plus=column(r[1].value for r in rows),
        sigma_plus=column(r[1].sigma for r in rows),
        peak_sep=column(r[2] for r in rows),
    )


def find_max_selectivity(
    cfg: SweepConfig,
    fitter: Fitter,
    b0: Optional[float] = None,
    executor: Optional[Executor] = None,
    progress: bool = False,
    solver: Optional[ContrastSolver] = None,
) -> MaxSelectivity:
    """
    Phase of maximum selectivity for each transition at one field.

    At zero field the two transitions cannot be addressed separately; the
    result is then 0.5 / 0.5 with undefined phases and ``degenerate`` set.
    """
    static = cfg.static if b0 is None else StaticField(b0)
    if abs(static.b0) < ZERO_FIELD_MT:
        f_minus, f_plus = resonance_frequencies(cfg.params, static)
        half = Selectivity(0.5, 0.0)
        return MaxSelectivity(math.nan, half, math.nan, half, f_plus - f_minus, degenerate=True)

    scan = selectivity_scan(cfg, fitter, static.b0, executor, progress, solver)
    i_minus = int(torch.argmax(scan.sel_minus).item())
    i_plus = int(torch.argmax(scan.sel_plus).item())
    return MaxSelectivity(
        delta_star_minus=scan.deltas[i_minus].item(),
        sel_minus=Selectivity(scan.sel_minus[i_minus].item(), scan.sigma_minus[i_minus].item()),
        delta_star_plus=scan.deltas[i_plus].item(),
        sel_plus=Selectivity(scan.sel_plus[i_plus].item(), scan.sigma_plus[i_plus].item()),
        peak_sep=scan.peak_sep.mean().item(),
    )


def field_sweep(
    cfg: SweepConfig,
    fitter: Fitter,
    executor: Optional[Executor] = None,
    progress: bool = False,
    keep_going: bool = False,
) -> SelectivityCurve:
    """
    Maximum selectivities for every field of ``cfg.b_list``.

    :param keep_going: Record fit failures in ``status`` and continue instead
        of raising.
    """
    solver = ContrastSolver(cfg.params)
    results: List[Optional[MaxSelectivity]] = []
    status: List[str] = []
    for b0 in tqdm(cfg.b_list, desc="field sweep", disable=not progress):
        try:
            results.append(find_max_selectivity(cfg, fitter, b0, executor, False, solver))
            status.append("ok")
        except FitError as err:
            if not keep_going:
                raise
            logger.warning("Fit failed at b0 = %g mT: %s", b0, err)
            results.append(None)
            status.append(f"{type(err).__name__}: {err}")

    def column(getter) -> torch.Tensor:
        return torch.tensor(
            [getter(r) if r is not None else math.nan for r in results], dtype=RDTYPE, device=device
        )

    delta_minus = column(lambda r: r.delta_star_minus)
    delta_plus = column(lambda r: r.delta_star_plus)
    return SelectivityCurve(
        b_values=torch.tensor(cfg.b_list, dtype=RDTYPE, device=device),
        sel_minus=column(lambda r: r.sel_minus.value),
        sigma_minus=column(lambda r: r.sel_minus.sigma),
        sel_plus=column(lambda r: r.sel_plus.value),
        sigma_plus=column(lambda r: r.sel_plus.sigma),
        delta_star_minus=delta_minus,
        delta_star_plus=delta_plus,
        peak_sep=column(lambda r: r.peak_sep),
        phase_separation=torch.remainder(delta_plus - delta_minus, 360.0),
        degenerate=[bool(r.degenerate) if r is not None else False for r in results],
        status=status,
    )


def peak_separation(spectrum: Spectrum, fitter: Fitter) -> float:
    """center_plus - center_minus of the double-Lorentzian fit, in MHz."""
    return fitter(spectrum).separation


def time_domain_contrast(
    f: float,
    drive: DriveConfig,
    field: StaticField,
    params: DefectParams,
    steps_per_period: int = 256,
) -> float:
    """
    Contrast from the cycle-averaged periodic state of the lab-frame master
    equation, without the rotating-wave approximation.
    """
    if drive.is_off:
        return 0.0
    jumps = jump_operators(params)
    rho = periodic_steady_state(params, field, drive.with_freq(f), steps_per_period, jumps)
    pl_off = ContrastSolver(params).pl_off(field)
    return (photoluminescence(rho, params) - pl_off) / pl_off
