import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import pytest
import torch

from odmrsim.core.exceptions import ConfigError, DimensionMismatch, FitFailed, InputError
from odmrsim.core.fitting import SpectrumFitter, selectivity
from odmrsim.core.hamiltonian import (
    Branch,
    DefectParams,
    DriveConfig,
    OpticalRates,
    StaticField,
    resonance_frequencies,
)
from odmrsim.core.odmr import (
    ContrastSolver,
    PhaseMap,
    SweepConfig,
    contrast_at,
    field_sweep,
    find_max_selectivity,
    fit_window,
    frequency_sweep,
    integrated_contrast,
    peak_separation,
    phase_sweep,
    selectivity_scan,
    time_domain_contrast,
)

PARAMS = DefectParams()


def dip_depth_near(spectrum, center, window=10.0):
    mask = (spectrum.freqs - center).abs() <= window
    return -spectrum.contrasts[mask].min().item()


def circular_distance(a, b):
    d = (a - b) % 360.0
    return min(d, 360.0 - d)


@pytest.fixture(scope="module")
def fitter():
    return SpectrumFitter(PARAMS)


@pytest.fixture(scope="module")
def symmetric_sweep():
    # grid symmetric about d_gs, zero phase offset
    return SweepConfig(
        f_start=3290.0,
        f_stop=3690.0,
        n_freq=81,
        drive=DriveConfig(offset_deg=0.0),
        static=StaticField(2.3),
    )


@pytest.fixture(scope="module")
def cfg():
    return SweepConfig(static=StaticField(2.3))


@pytest.fixture(scope="module")
def summary(symmetric_sweep):
    return integrated_contrast(phase_sweep(symmetric_sweep), PARAMS.d_gs)


class TestSweepConfig:
    def test_defaults(self):
        cfg = SweepConfig()
        assert cfg.freqs().numel() == 201
        assert cfg.freqs()[0].item() == 3250.0
        assert cfg.freqs()[-1].item() == 3750.0
        assert len(cfg.delta_list) == 36

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"f_start": 3800.0},
            {"n_freq": 1},
            {"delta_list": (360.0,)},
            {"delta_list": (-10.0,)},
            {"b_list": (500.0,)},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            SweepConfig(**kwargs)

    def test_phase_map_shape_check(self):
        with pytest.raises(DimensionMismatch):
            PhaseMap(torch.zeros(3), torch.zeros(4), torch.zeros(4, 3))

    def test_covering_keeps_spacing(self):
        cfg = SweepConfig()
        wider = cfg.covering(3177.0, 3760.0)
        assert wider.f_start == pytest.approx(3175.0)
        assert wider.f_stop == pytest.approx(3760.0)
        assert wider.spacing == pytest.approx(cfg.spacing)
        assert wider.delta_list == cfg.delta_list
        assert cfg.covering(3300.0, 3700.0) is cfg


class TestFitWindow:
    def test_default_grid_kept_up_to_five_millitesla(self):
        cfg = SweepConfig()
        for b0 in (0.0, 2.3, 5.0):
            assert fit_window(cfg, StaticField(b0)) is cfg

    def test_widened_at_eight_millitesla(self):
        cfg = SweepConfig()
        window = fit_window(cfg, StaticField(8.0))
        f_minus, f_plus = resonance_frequencies(PARAMS, StaticField(8.0))
        margin = 2.5 * PARAMS.gamma_phi / math.pi
        assert window.f_start <= f_minus - margin < cfg.f_start
        assert window.f_stop >= f_plus + margin
        assert window.spacing == pytest.approx(cfg.spacing)


class TestContrast:
    def test_drive_off_is_exactly_zero(self):
        drive = DriveConfig(omega1=0.0, omega2=0.0)
        assert contrast_at(3400.0, drive, StaticField(2.3), PARAMS) == 0.0

    def test_far_off_resonance(self):
        assert abs(contrast_at(5200.0, DriveConfig(), StaticField(2.3), PARAMS)) < 1e-4

    def test_pure_minus_at_f_minus_is_negative(self):
        static = StaticField(2.3)
        f_minus, _ = resonance_frequencies(PARAMS, static)
        assert contrast_at(f_minus, DriveConfig(delta_deg=120.0), static, PARAMS) < 0.0

    def test_solver_caches_drive_off_pl(self):
        solver = ContrastSolver(PARAMS)
        first = solver.pl_off(StaticField(2.3))
        assert solver.pl_off(StaticField(2.3)) == first
        assert first > 0


class TestFrequencySweep:
    def test_pure_minus_selects_lower_dip(self, cfg, fitter):
        spectrum = frequency_sweep(cfg, delta_deg=120.0)
        assert len(spectrum) == 201
        assert spectrum.freqs[spectrum.contrasts.argmin()].item() == pytest.approx(3398.5, abs=5.0)
        assert dip_depth_near(spectrum, 3398.5) > dip_depth_near(spectrum, 3581.5)
        assert selectivity(fitter(spectrum), Branch.MINUS).value > 0.7

    def test_pure_plus_selects_upper_dip(self, cfg, fitter):
        spectrum = frequency_sweep(cfg, delta_deg=300.0)
        assert spectrum.freqs[spectrum.contrasts.argmin()].item() == pytest.approx(3581.5, abs=5.0)
        assert dip_depth_near(spectrum, 3581.5) > dip_depth_near(spectrum, 3398.5)
        assert selectivity(fitter(spectrum), Branch.PLUS).value > 0.7

    def test_linear_drive_gives_equal_dips(self, cfg):
        spectrum = frequency_sweep(cfg, delta_deg=30.0)
        lower = dip_depth_near(spectrum, 3398.5)
        upper = dip_depth_near(spectrum, 3581.5)
        assert lower == pytest.approx(upper, rel=0.01)

    def test_meta(self, cfg):
        spectrum = frequency_sweep(cfg, delta_deg=40.0)
        assert spectrum.delta_deg == 40.0
        assert spectrum.b0 == 2.3

    def test_mirror_symmetry(self, symmetric_sweep):
        for delta in (50.0, 90.0, 160.0):
            spectrum = frequency_sweep(symmetric_sweep, delta_deg=delta)
            mirrored = frequency_sweep(symmetric_sweep, delta_deg=(360.0 - delta) % 360.0)
            assert torch.allclose(spectrum.contrasts, mirrored.contrasts.flip(0), atol=1e-6)


class TestPhaseSweep:
    def test_contrast_bounds(self, symmetric_sweep):
        cfg = replace(symmetric_sweep, delta_list=tuple(float(d) for d in range(0, 360, 45)))
        phase_map = phase_sweep(cfg)
        assert phase_map.contrast_grid.shape == (8, 81)
        assert phase_map.contrast_grid.max().item() <= 1e-12
        assert phase_map.contrast_grid.min().item() >= -1.0

    def test_threads_give_identical_results(self, symmetric_sweep):
        cfg = replace(symmetric_sweep, delta_list=tuple(float(d) for d in range(0, 360, 30)))
        serial = phase_sweep(cfg)
        with ThreadPoolExecutor(max_workers=4) as executor:
            threaded = phase_sweep(cfg, executor=executor)
        assert torch.equal(serial.contrast_grid, threaded.contrast_grid)

    def test_rows_as_spectra(self, symmetric_sweep):
        cfg = replace(symmetric_sweep, delta_list=(0.0, 120.0))
        phase_map = phase_sweep(cfg)
        row = phase_map.spectrum(1)
        assert row.delta_deg == 120.0
        assert row.b0 == 2.3
        assert torch.allclose(row.contrasts, frequency_sweep(cfg, delta_deg=120.0).contrasts)


class TestIntegratedContrast:
    def test_normalized_range(self, summary):
        for curve in (summary.below, summary.above):
            assert curve.min().item() == 0.0
            assert curve.max().item() == 1.0

    def test_maxima_separated_by_half_turn(self, summary, symmetric_sweep):
        deltas = symmetric_sweep.delta_list
        below_max = deltas[int(summary.below.argmax())]
        above_max = deltas[int(summary.above.argmax())]
        assert circular_distance(below_max, above_max) == pytest.approx(180.0, abs=10.0)

    def test_handedness_mirror(self, summary, symmetric_sweep):
        deltas = list(symmetric_sweep.delta_list)
        for i, delta in enumerate(deltas):
            j = deltas.index((360.0 - delta) % 360.0)
            assert summary.below[i].item() == pytest.approx(summary.above[j].item(), abs=1e-6)

    def test_requires_both_sides(self):
        phase_map = PhaseMap(torch.zeros(2), torch.linspace(3000.0, 3100.0, 5), torch.zeros(2, 5))
        with pytest.raises(InputError):
            integrated_contrast(phase_map, 3490.0)

    def test_constant_curve_normalizes_to_zero(self):
        freqs = torch.linspace(3400.0, 3600.0, 11, dtype=torch.float64)
        phase_map = PhaseMap(torch.tensor([0.0, 10.0]), freqs, -0.01 * torch.ones(2, 11, dtype=torch.float64))
        summary = integrated_contrast(phase_map, 3490.0)
        assert torch.all(summary.below == 0)
        assert torch.all(summary.above == 0)


class TestSelectivity:
    @pytest.mark.parametrize("b0", [2.3, 6.58])
    def test_maximum_phases_half_turn_apart(self, b0, fitter):
        best = find_max_selectivity(SweepConfig(), fitter, b0)
        assert not best.degenerate
        assert circular_distance(best.delta_star_plus, best.delta_star_minus) == pytest.approx(180.0, abs=10.0)
        assert best.sel_minus.value == pytest.approx(best.sel_plus.value, abs=0.01)

    def test_negative_field_keeps_half_turn(self, fitter):
        best = find_max_selectivity(SweepConfig(), fitter, -2.3)
        assert circular_distance(best.delta_star_plus, best.delta_star_minus) == pytest.approx(180.0, abs=10.0)

    def test_zero_field_is_phase_independent(self, fitter):
        scan = selectivity_scan(SweepConfig(), fitter, 0.0)
        assert (scan.sel_minus.max() - scan.sel_minus.min()).item() < 0.02
        assert (scan.sel_plus.max() - scan.sel_plus.min()).item() < 0.02
        assert torch.allclose(scan.sel_minus + scan.sel_plus, torch.ones_like(scan.sel_minus))

    def test_zero_field_reports_degenerate(self, fitter):
        best = find_max_selectivity(SweepConfig(), fitter, 0.0)
        assert best.degenerate
        assert best.sel_minus.value == 0.5
        assert best.sel_plus.value == 0.5
        assert best.delta_star_minus != best.delta_star_minus

    def test_field_trend(self, fitter):
        cfg = SweepConfig(b_list=(0.5, 1.0, 2.3, 5.0, 8.0))
        curve = field_sweep(cfg, fitter)
        assert curve.status == ["ok"] * 5
        sel = torch.maximum(curve.sel_minus, curve.sel_plus)
        assert torch.all(sel[1:] >= sel[:-1] - 1e-6)
        assert torch.allclose(curve.sel_minus, curve.sel_plus, atol=0.01)
        assert torch.all(curve.peak_sep[1:] > curve.peak_sep[:-1])
        for separation in curve.phase_separation.tolist():
            assert circular_distance(separation, 180.0) <= 10.0

    def test_plateau_under_weak_drive(self, fitter):
        cfg = SweepConfig(b_list=(5.0, 8.0), drive=DriveConfig(omega1=1.0, omega2=1.0))
        curve = field_sweep(cfg, fitter)
        sel = torch.maximum(curve.sel_minus, curve.sel_plus)
        assert 0.0 <= (sel[1] - sel[0]).item() < 0.05
        assert torch.allclose(curve.sel_minus, curve.sel_plus, atol=0.01)

    def test_areas_stay_non_negative_near_band_edge(self, fitter):
        scan = selectivity_scan(SweepConfig(delta_list=(280.0, 290.0, 300.0, 310.0, 320.0)), fitter, 8.0)
        assert torch.all(scan.sel_plus < 1.0)
        assert torch.all(scan.sel_minus > 0.0)

    def test_field_sweep_records_failures(self):
        def failing_fitter(spectrum):
            raise FitFailed("no convergence", iterations=500, delta_deg=spectrum.delta_deg)

        cfg = SweepConfig(b_list=(2.3,), delta_list=(0.0, 90.0), n_freq=21)
        curve = field_sweep(cfg, failing_fitter, keep_going=True)
        assert curve.status[0].startswith("FitFailed")
        assert curve.sel_minus[0].isnan()
        with pytest.raises(FitFailed, match="delta = 0 deg"):
            field_sweep(cfg, failing_fitter)


class TestPeakSeparation:
    @pytest.mark.parametrize("b0, expected", [(0.0, 130.0), (2.3, 183.1)])
    def test_matches_resonance_formula(self, b0, expected, fitter):
        spectrum = frequency_sweep(SweepConfig(), delta_deg=30.0, b0=b0)
        assert peak_separation(spectrum, fitter) == pytest.approx(expected, abs=1.0)

    def test_monotone_in_field(self, fitter):
        separations = [
            peak_separation(frequency_sweep(SweepConfig(), delta_deg=30.0, b0=b0), fitter)
            for b0 in (0.5, 1.0, 2.3, 5.0)
        ]
        assert separations == sorted(separations)


class TestRotatingWaveValidity:
    def test_time_domain_agrees_with_rwa(self):
        """
        Scale every frequency and rate down 100x so one carrier period spans
        only a few hundred integration steps.
        """
        scale = 0.01
        params = DefectParams(
            d_gs=3490.0 * scale,
            e_gs=65.0 * scale,
            gamma_phi=100.0 * scale,
            rates=OpticalRates().scaled(scale),
        )
        static = StaticField(2.3 * scale)
        drive = DriveConfig(omega1=5.0 * scale, omega2=5.0 * scale, delta_deg=120.0)
        f_minus, _ = resonance_frequencies(params, static)
        rwa = contrast_at(f_minus, drive, static, params)
        full = time_domain_contrast(f_minus, drive, static, params)
        assert rwa < 0
        assert full == pytest.approx(rwa, rel=0.05)
