"""
Double-Lorentzian analysis of ODMR spectra.

Each dip is parameterized by area, so selectivities read directly off the fit:

    L(f) = area * (w / 2 pi) / ((f - c)^2 + (w / 2)^2),  peak value 2 area / (pi w)

and the full model is

    y(f) = bg_slope (f - ref_freq) + bg_offset - L_minus(f) - L_plus(f)

Parameter vectors are ordered
[c_minus, w_minus, area_minus, c_plus, w_plus, area_plus, bg_slope, bg_offset].
"""

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, List, NamedTuple, Optional, Tuple, Union

import torch

from odmrsim.core.exceptions import (
    FitFailed,
    FlatSpectrum,
    InputError,
    WingsContainPeak,
    ZeroTotalArea,
)
from odmrsim.core.hamiltonian import Branch, DefectParams, StaticField, resonance_frequencies
from odmrsim.core.spectrum import Spectrum
from odmrsim.core.spin_algebra import RDTYPE, device

logger = logging.getLogger(__name__)

N_PARAMS = 8
MIN_SAMPLES = 20
MAX_ITERATIONS = 500
DEFAULT_WING_FRACTION = 0.1
DEFAULT_SEED = 1337

# parameter indices
C_MINUS, W_MINUS, A_MINUS, C_PLUS, W_PLUS, A_PLUS, SLOPE, OFFSET = range(N_PARAMS)


class LorentzianPeak(NamedTuple):
    center: float
    fwhm: float
    area: float

    @property
    def peak_value(self) -> float:
        return 2.0 * self.area / (math.pi * self.fwhm)


class Selectivity(NamedTuple):
    value: float
    sigma: float


@dataclass
class DoubleLorentzianFit:
    peak_minus: LorentzianPeak
    peak_plus: LorentzianPeak
    bg_slope: float
    bg_offset: float
    rms_residual: float
    covariance: torch.Tensor
    ref_freq: float = 0.0
    iterations: int = 0
    poorly_separated: bool = False
    cost_history: List[float] = field(default_factory=list)

    @property
    def separation(self) -> float:
        return self.peak_plus.center - self.peak_minus.center

    def params(self) -> torch.Tensor:
        return torch.tensor(
            [*self.peak_minus, *self.peak_plus, self.bg_slope, self.bg_offset],
            dtype=RDTYPE,
            device=device,
        )

    def evaluate(self, freqs: torch.Tensor) -> torch.Tensor:
        return double_lorentzian(freqs, self.params(), self.ref_freq)

    def component(self, freqs: torch.Tensor, which: Branch) -> torch.Tensor:
        """Single dip (negative) without background."""
        peak = self.peak_minus if which == Branch.MINUS else self.peak_plus
        return -_lorentzian(torch.as_tensor(freqs, dtype=RDTYPE, device=device), *peak)


def default_generator(seed: Optional[int] = None) -> torch.Generator:
    """
    Seeded generator for synthetic noise; the seed defaults to ODMR_SIM_SEED.
    """
    if seed is None:
        seed = int(os.environ.get("ODMR_SIM_SEED", DEFAULT_SEED))
    generator = torch.Generator(device=device)
    generator.manual_seed(seed)
    return generator


def _lorentzian(freqs: torch.Tensor, center, fwhm, area) -> torch.Tensor:
    u = freqs - center
    return area * (fwhm / (2.0 * math.pi)) / (u * u + 0.25 * fwhm * fwhm)


def double_lorentzian(freqs: torch.Tensor, theta: torch.Tensor, ref_freq: float = 0.0) -> torch.Tensor:
    """
    :param freqs: Frequencies in MHz.
    :param theta: Parameter vector of length 8.
    :param ref_freq: Reference frequency of the background line.
    """
    freqs = torch.as_tensor(freqs, dtype=RDTYPE, device=device)
    return (
        theta[SLOPE] * (freqs - ref_freq)
        + theta[OFFSET]
        - _lorentzian(freqs, theta[C_MINUS], theta[W_MINUS], theta[A_MINUS])
        - _lorentzian(freqs, theta[C_PLUS], theta[W_PLUS], theta[A_PLUS])
    )


def _jacobian(freqs: torch.Tensor, theta: torch.Tensor, ref_freq: float) -> torch.Tensor:
    jac = torch.empty((freqs.numel(), N_PARAMS), dtype=RDTYPE, device=freqs.device)
    for c_i, w_i, a_i in ((C_MINUS, W_MINUS, A_MINUS), (C_PLUS, W_PLUS, A_PLUS)):
        c, w, a = theta[c_i], theta[w_i], theta[a_i]
        u = freqs - c
        q = u * u + 0.25 * w * w
        # model subtracts the dip, hence the signs
        jac[:, a_i] = -(w / (2.0 * math.pi)) / q
        jac[:, c_i] = -a * (w / (2.0 * math.pi)) * 2.0 * u / (q * q)
        jac[:, w_i] = -a / (2.0 * math.pi) * (u * u - 0.25 * w * w) / (q * q)
    jac[:, SLOPE] = freqs - ref_freq
    jac[:, OFFSET] = 1.0
    return jac


def synthetic_spectrum(
    freqs: torch.Tensor,
    peak_minus: LorentzianPeak,
    peak_plus: LorentzianPeak,
    bg_slope: float = 0.0,
    bg_offset: float = 0.0,
    noise_sigma: float = 0.0,
    generator: Optional[torch.Generator] = None,
    ref_freq: Optional[float] = None,
) -> Spectrum:
    """
    Double-Lorentzian spectrum with optional Gaussian noise of standard
    deviation ``noise_sigma``.
    """
    freqs = torch.as_tensor(freqs, dtype=RDTYPE, device=device)
    if ref_freq is None:
        ref_freq = freqs.mean().item()
    theta = torch.tensor([*peak_minus, *peak_plus, bg_slope, bg_offset], dtype=RDTYPE, device=device)
    y = double_lorentzian(freqs, theta, ref_freq)
    if noise_sigma > 0:
        if generator is None:
            generator = default_generator()
        y = y + noise_sigma * torch.randn(
            freqs.shape, generator=generator, dtype=RDTYPE, device=device
        )
    return Spectrum(freqs, y)


def subtract_linear_background(spectrum: Spectrum, wing_fraction: float = DEFAULT_WING_FRACTION) -> Spectrum:
    """
    Fit a least-squares line to the outer ``wing_fraction`` of samples at each
    end and subtract it from the whole spectrum.

    :raises WingsContainPeak: If a wing sample deviates from the line by more
        than 5 robust standard deviations.
    """
    if not 0 < wing_fraction <= 0.4:
        raise InputError(f"wing_fraction must lie in (0, 0.4], got {wing_fraction!r}")
    n = len(spectrum)
    n_wing = max(2, math.ceil(wing_fraction * n))
    if 2 * n_wing > n:
        raise InputError(f"Spectrum of {n} samples is too short for wing_fraction {wing_fraction}.")

    f, y = spectrum.freqs, spectrum.contrasts
    idx = torch.cat([torch.arange(n_wing), torch.arange(n - n_wing, n)])
    ref = f.mean()
    design = torch.stack([f[idx] - ref, torch.ones_like(f[idx])], dim=1)
    coeffs = torch.linalg.lstsq(design, y[idx].unsqueeze(1)).solution.squeeze(1)

    residual = y[idx] - design @ coeffs
    mad = (residual - residual.median()).abs().median()
    sigma = 1.4826 * mad.item()
    worst = residual.abs().max().item()
    floor = 1e-9 * max(y.abs().max().item(), 1e-300)
    if worst > 5.0 * sigma and worst > floor:
        raise WingsContainPeak(
            f"Wing samples deviate from the background line by {worst:.3e} "
            f"(robust sigma {sigma:.3e}); reduce wing_fraction or widen the sweep."
        )
    line = coeffs[0] * (f - ref) + coeffs[1]
    return spectrum.with_contrasts(y - line)


def _local_minimum(spectrum: Spectrum, center: float, half_window: float) -> int:
    f = spectrum.freqs
    window = torch.nonzero((f >= center - half_window) & (f <= center + half_window)).flatten()
    if window.numel() == 0:
        return int(torch.argmin((f - center).abs()).item())
    return int(window[torch.argmin(spectrum.contrasts[window])].item())


def _two_deepest_minima(spectrum: Spectrum, separation: float) -> Tuple[int, int]:
    y = spectrum.contrasts
    first = int(torch.argmin(y).item())
    distance = (spectrum.freqs - spectrum.freqs[first]).abs()
    slope = torch.diff(y)
    # interior samples where the curve turns from falling to rising
    turning = torch.zeros_like(distance, dtype=torch.bool)
    turning[1:-1] = (slope[:-1] < 0) & (slope[1:] >= 0)
    candidates = torch.nonzero(turning & (distance > 2.0 * separation)).flatten()
    if candidates.numel() == 0:
        return first, first
    second = int(candidates[torch.argmin(y[candidates])].item())
    return tuple(sorted((first, second)))


def initial_guess(
    spectrum: Spectrum,
    params: Optional[DefectParams] = None,
    field: Optional[StaticField] = None,
) -> torch.Tensor:
    """
    Starting parameters for the double-Lorentzian fit.

    Centers come from the resonance formula when the defect and field are
    known, refined to the deepest sample within one linewidth; otherwise from
    the deepest sample and the deepest local minimum more than two linewidths
    away from it. A dip that is absent or weaker
    than 10% of the other is seeded at 10% of the other area.
    """
    f, y = spectrum.freqs, spectrum.contrasts
    n = len(spectrum)
    span = (f[-1] - f[0]).item() if n > 1 else 1.0
    spacing = span / max(n - 1, 1)

    fwhm = span / 20.0
    if params is not None:
        fwhm = 2.0 * params.gamma_phi / (2.0 * math.pi)
    fwhm = max(fwhm, 3.0 * spacing)

    n_wing = max(1, n // 10)
    offset = torch.cat([y[:n_wing], y[-n_wing:]]).mean().item()

    if params is not None and field is not None:
        f_minus, f_plus = resonance_frequencies(params, field)
        i_minus = _local_minimum(spectrum, f_minus, fwhm)
        i_plus = _local_minimum(spectrum, f_plus, fwhm)
        c_minus, c_plus = f_minus, f_plus
        if abs(f[i_minus].item() - f_minus) <= fwhm:
            c_minus = f[i_minus].item()
        if abs(f[i_plus].item() - f_plus) <= fwhm:
            c_plus = f[i_plus].item()
    else:
        i_minus, i_plus = _two_deepest_minima(spectrum, fwhm)
        c_minus, c_plus = f[i_minus].item(), f[i_plus].item()
        if i_minus == i_plus:
            c_minus, c_plus = c_minus - 0.5 * fwhm, c_plus + 0.5 * fwhm

    to_area = math.pi * fwhm / 2.0
    area_minus = max(offset - y[i_minus].item(), 0.0) * to_area
    area_plus = max(offset - y[i_plus].item(), 0.0) * to_area
    if area_minus <= 0 and area_plus <= 0:
        area_minus = area_plus = 0.1 * max((y - offset).abs().max().item(), 1e-12) * to_area
    elif area_minus < 0.1 * area_plus:
        area_minus = 0.1 * area_plus
    elif area_plus < 0.1 * area_minus:
        area_plus = 0.1 * area_minus

    return torch.tensor(
        [c_minus, fwhm, area_minus, c_plus, fwhm, area_plus, 0.0, offset],
        dtype=RDTYPE,
        device=device,
    )


def _cost(residual: torch.Tensor) -> float:
    return 0.5 * torch.dot(residual, residual).item()


def _admissible(theta: torch.Tensor, span: float) -> bool:
    widths = theta[[W_MINUS, W_PLUS]]
    areas = theta[[A_MINUS, A_PLUS]]
    return bool((widths > 0).all() and (widths <= span).all() and (areas >= 0).all())


def fit_double_lorentzian(
    spectrum: Spectrum,
    guess: torch.Tensor,
    max_iterations: int = MAX_ITERATIONS,
    delta_deg: Optional[float] = None,
) -> DoubleLorentzianFit:
    """
    Levenberg-Marquardt least squares fit of two Lorentzian dips on a line.

    Damping starts at 1e-3 and is multiplied by 10 on a rejected step and
    divided by 10 on an accepted one, scaling the diagonal of J^T J. Steps that
    make an area negative, or a width non-positive or wider than the sweep,
    are rejected.

    :param spectrum: Spectrum with at least 20 samples.
    :param guess: Initial parameter vector (see :func:`initial_guess`).
    :param max_iterations: Iteration budget.
    :param delta_deg: Phase recorded on a FitFailed error, if any.
    :raises FlatSpectrum: If the total variation of the contrast is below 1e-12.
    :raises FitFailed: If the budget is exhausted before convergence.
    """
    n = len(spectrum)
    if n < MIN_SAMPLES:
        raise InputError(f"Need at least {MIN_SAMPLES} samples to fit, got {n}.")
    f, y = spectrum.freqs, spectrum.contrasts
    if torch.diff(y).abs().sum().item() < 1e-12:
        raise FlatSpectrum("Spectrum is flat; there is nothing to fit.")

    ref_freq = f.mean().item()
    span = (f[-1] - f[0]).item()
    theta = torch.as_tensor(guess, dtype=RDTYPE, device=device).clone()
    residual = double_lorentzian(f, theta, ref_freq) - y
    cost = _cost(residual)
    cost_history = [cost]
    lam = 1e-3
    converged = False

    iteration = 0
    while iteration < max_iterations:
        iteration += 1
        jac = _jacobian(f, theta, ref_freq)
        normal = jac.T @ jac
        grad = jac.T @ residual
        if torch.linalg.vector_norm(grad).item() < 1e-8 or cost == 0.0:
            converged = True
            break
        diag = normal.diagonal().clamp_min(1e-30 * normal.diagonal().max().item())

        accepted = False
        while not accepted:
            damped = normal + lam * torch.diag(diag)
            step = torch.linalg.solve(damped, -grad)
            trial = theta + step
            if _admissible(trial, span):
                trial_residual = double_lorentzian(f, trial, ref_freq) - y
                trial_cost = _cost(trial_residual)
                if trial_cost < cost:
                    accepted = True
                    break
            lam *= 10.0
            if lam > 1e16:
                break

        if not accepted:
            logger.debug("LM stalled at cost %.3e after %d iterations", cost, iteration)
            converged = True
            break

        relative_change = (cost - trial_cost) / cost
        theta, residual, cost = trial, trial_residual, trial_cost
        cost_history.append(cost)
        lam = max(lam / 10.0, 1e-12)
        if relative_change < 1e-10:
            converged = True
            break

    if not converged:
        raise FitFailed(
            f"Levenberg-Marquardt did not converge in {max_iterations} iterations.",
            iterations=iteration,
            delta_deg=delta_deg,
        )
    logger.debug("LM converged in %d iterations, cost %.3e", iteration, cost)
    return _finalize(f, y, theta, residual, ref_freq, iteration, cost_history)


def _finalize(f, y, theta, residual, ref_freq, iterations, cost_history) -> DoubleLorentzianFit:
    n = f.numel()
    jac = _jacobian(f, theta, ref_freq)
    normal = jac.T @ jac
    variance = torch.dot(residual, residual).item() / max(n - N_PARAMS, 1)
    covariance = variance * torch.linalg.pinv(normal, hermitian=True)
    covariance = 0.5 * (covariance + covariance.T)

    if theta[C_MINUS] > theta[C_PLUS]:
        perm = torch.tensor([C_PLUS, W_PLUS, A_PLUS, C_MINUS, W_MINUS, A_MINUS, SLOPE, OFFSET])
        theta = theta[perm]
        covariance = covariance[perm][:, perm]

    values = theta.tolist()
    peak_minus = LorentzianPeak(*values[C_MINUS:A_MINUS + 1])
    peak_plus = LorentzianPeak(*values[C_PLUS:A_PLUS + 1])
    poorly_separated = (peak_plus.center - peak_minus.center) < 0.25 * (peak_minus.fwhm + peak_plus.fwhm)
    if poorly_separated:
        logger.warning(
            "Fitted dips at %.2f and %.2f MHz overlap (mean FWHM %.2f MHz); areas are poorly determined.",
            peak_minus.center,
            peak_plus.center,
            0.5 * (peak_minus.fwhm + peak_plus.fwhm),
        )
    return DoubleLorentzianFit(
        peak_minus=peak_minus,
        peak_plus=peak_plus,
        bg_slope=values[SLOPE],
        bg_offset=values[OFFSET],
        rms_residual=math.sqrt(torch.mean(residual * residual).item()),
        covariance=covariance,
        ref_freq=ref_freq,
        iterations=iterations,
        poorly_separated=poorly_separated,
        cost_history=cost_history,
    )


def selectivity(fit: DoubleLorentzianFit, which: Union[Branch, str]) -> Selectivity:
    """
    Area share of one dip in the total fitted area.

    The uncertainty is propagated to first order from the area block of the
    fit covariance.

    :raises FitFailed: If a fitted area is negative.
    :raises ZeroTotalArea: If the total area is below 1e-12.
    """
    which = Branch(which)
    a_minus, a_plus = fit.peak_minus.area, fit.peak_plus.area
    if a_minus < 0 or a_plus < 0:
        raise FitFailed(
            f"Fitted areas must be non-negative, got minus {a_minus:.3e} and plus {a_plus:.3e}.",
            iterations=fit.iterations,
        )
    total = a_minus + a_plus
    if total < 1e-12:
        raise ZeroTotalArea(f"Total fitted area {total:.3e} is zero.")

    # shares sum to exactly 1
    if a_minus >= a_plus:
        share_minus = a_minus / total
        share_plus = 1.0 - share_minus
    else:
        share_plus = a_plus / total
        share_minus = 1.0 - share_plus

    cov = fit.covariance[[A_MINUS, A_PLUS]][:, [A_MINUS, A_PLUS]]
    grad = torch.tensor([a_plus, -a_minus], dtype=RDTYPE, device=cov.device) / (total * total)
    sigma = math.sqrt(max((grad @ cov @ grad).item(), 0.0))
    value = share_minus if which == Branch.MINUS else share_plus
    return Selectivity(value=value, sigma=sigma)


class SpectrumFitter:
    """
    Default analysis pipeline: optional band masking, optional linear
    background subtraction, initial guess and LM fit.

    Instances are callables taking a Spectrum; the field used for the guess is
    read from ``spectrum.b0``.
    """

    def __init__(self, params: Optional[DefectParams] = None) -> None:
        self.params = params
        self.mask: List[Tuple[float, float]] = []
        self.subtract_background = False
        self.wing_fraction = DEFAULT_WING_FRACTION
        self.max_iterations = MAX_ITERATIONS

    def with_mask(self, bands: Iterable[Tuple[float, float]]) -> "SpectrumFitter":
        self.mask = list(bands)
        return self

    def with_background_subtraction(self, wing_fraction: float = DEFAULT_WING_FRACTION) -> "SpectrumFitter":
        self.subtract_background = True
        self.wing_fraction = wing_fraction
        return self

    def prepare(self, spectrum: Spectrum) -> Spectrum:
        if self.mask:
            spectrum = spectrum.masked(self.mask)
        if self.subtract_background:
            spectrum = subtract_linear_background(spectrum, self.wing_fraction)
        return spectrum

    def __call__(self, spectrum: Spectrum) -> DoubleLorentzianFit:
        spectrum = self.prepare(spectrum)
        static = StaticField(spectrum.b0) if spectrum.b0 is not None else None
        guess = initial_guess(spectrum, self.params, static)
        return fit_double_lorentzian(
            spectrum, guess, max_iterations=self.max_iterations, delta_deg=spectrum.delta_deg
        )


def fit_spectrum(spectrum: Spectrum, params: Optional[DefectParams] = None) -> DoubleLorentzianFit:
    return SpectrumFitter(params)(spectrum)
