"""
Command-line front end.

    odmrsim spectrum        --b0 2.3 --delta 120 --plot
    odmrsim phase-sweep     --config run.ini --threads 8
    odmrsim field-sweep     --config run.ini
    odmrsim fit data.csv    --mask 3880:3920
    odmrsim stick-spectrum  --b0 6

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

import argparse
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import List, Optional

import torch
from rich.console import Console
from rich.logging import RichHandler

from odmrsim.config import RunConfig, apply_overrides, load_config, to_ini
from odmrsim.core.exceptions import ConfigError, InputError, NumericalError, OdmrSimError
from odmrsim.core.fitting import SpectrumFitter, selectivity
from odmrsim.core.hamiltonian import Branch, field_from_separation, hyperfine_stick_spectrum
from odmrsim.core.odmr import field_sweep, frequency_sweep, integrated_contrast, phase_sweep
from odmrsim.core.spectrum import Spectrum
from odmrsim.data_handling import plotting
from odmrsim.data_handling.data_handler import ResultWriter, read_spectrum_csv

logger = logging.getLogger("odmrsim")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[
            RichHandler(console=Console(stderr=True), rich_tracebacks=False, markup=True, show_path=False)
        ],
        force=True,
    )


def _progress() -> bool:
    return sys.stderr.isatty()


@contextmanager
def worker_pool(threads: int):
    """Thread pool for independent grid rows, or None for serial runs."""
    if threads <= 1:
        yield None
        return
    with ThreadPoolExecutor(max_workers=threads) as executor:
        yield executor


def build_fitter(cfg: RunConfig) -> SpectrumFitter:
    fitter = SpectrumFitter(cfg.defect).with_mask(cfg.fit.mask)
    if cfg.fit.subtract_background:
        fitter.with_background_subtraction(cfg.fit.wing_fraction)
    return fitter


def cmd_spectrum(cfg: RunConfig, writer: ResultWriter) -> None:
    spectrum = frequency_sweep(cfg.sweep_config())
    writer.write_csv(
        "spectrum.csv",
        ["frequency_mhz", "contrast"],
        zip(spectrum.freqs.tolist(), spectrum.contrasts.tolist()),
    )
    writer.collect_arrays(
        "spectrum",
        {"frequency_mhz": spectrum.freqs, "contrast": spectrum.contrasts},
        {"delta_deg": cfg.drive.delta_deg, "b0_mt": cfg.static.b0},
    )
    if cfg.output.plot:
        plotting.plot_spectrum(
            writer.path("spectrum.svg"),
            spectrum.freqs,
            spectrum.contrasts,
            title=f"B0 = {cfg.static.b0:g} mT, phase = {cfg.drive.delta_deg:g} deg",
        )
    logger.info(
        "Deepest dip: %.9g at %.9g MHz",
        spectrum.contrasts.min().item(),
        spectrum.freqs[spectrum.contrasts.argmin()].item(),
    )


def cmd_phase_sweep(cfg: RunConfig, writer: ResultWriter) -> None:
    with worker_pool(cfg.output.threads) as executor:
        phase_map = phase_sweep(cfg.sweep_config(), executor=executor, progress=_progress())
    summary = integrated_contrast(phase_map, cfg.defect.d_gs)

    deltas = phase_map.deltas.tolist()
    freqs = phase_map.freqs.tolist()
    grid = phase_map.contrast_grid.tolist()
    writer.write_csv(
        "phase_map.csv",
        ["delta_deg", "frequency_mhz", "contrast"],
        ((delta, f, c) for delta, row in zip(deltas, grid) for f, c in zip(freqs, row)),
    )
    writer.write_csv(
        "integrated_contrast.csv",
        ["delta_deg", "below_raw", "above_raw", "below_norm", "above_norm"],
        zip(
            deltas,
            summary.below_raw.tolist(),
            summary.above_raw.tolist(),
            summary.below.tolist(),
            summary.above.tolist(),
        ),
    )
    writer.collect_arrays(
        "phase_map",
        {
            "delta_deg": phase_map.deltas,
            "frequency_mhz": phase_map.freqs,
            "contrast": phase_map.contrast_grid,
            "below_norm": summary.below,
            "above_norm": summary.above,
        },
        {"b0_mt": phase_map.b0},
    )
    if cfg.output.plot:
        plotting.plot_phase_map(
            writer.path("phase_map.svg"),
            phase_map.deltas,
            phase_map.freqs,
            phase_map.contrast_grid,
            summary.below,
            summary.above,
        )
    logger.info(
        "Integrated contrast maxima: below D at %g deg, above D at %g deg",
        deltas[int(summary.below.argmax())],
        deltas[int(summary.above.argmax())],
    )


def cmd_field_sweep(cfg: RunConfig, writer: ResultWriter) -> None:
    with worker_pool(cfg.output.threads) as executor:
        curve = field_sweep(
            cfg.sweep_config(), build_fitter(cfg), executor=executor, progress=_progress(), keep_going=True
        )
    columns = [
        curve.b_values,
        curve.sel_minus,
        curve.sigma_minus,
        curve.sel_plus,
        curve.sigma_plus,
        curve.delta_star_minus,
        curve.delta_star_plus,
        curve.peak_sep,
        curve.phase_separation,
    ]
    rows = [
        [*values, int(degenerate), status]
        for *values, degenerate, status in zip(*(c.tolist() for c in columns), curve.degenerate, curve.status)
    ]
    writer.write_csv(
        "field_sweep.csv",
        [
            "b0_mt",
            "sel_minus",
            "sel_minus_sigma",
            "sel_plus",
            "sel_plus_sigma",
            "delta_star_minus",
            "delta_star_plus",
            "peak_sep_mhz",
            "phase_sep_deg",
            "degenerate",
            "status",
        ],
        rows,
    )
    writer.collect_arrays(
        "field_sweep",
        {
            "b0_mt": curve.b_values,
            "sel_minus": curve.sel_minus,
            "sel_minus_sigma": curve.sigma_minus,
            "sel_plus": curve.sel_plus,
            "sel_plus_sigma": curve.sigma_plus,
            "delta_star_minus": curve.delta_star_minus,
            "delta_star_plus": curve.delta_star_plus,
            "peak_sep_mhz": curve.peak_sep,
            "status": curve.status,
        },
    )
    if cfg.output.plot:
        plotting.plot_selectivity_curve(
            writer.path("field_sweep.svg"),
            curve.b_values,
            curve.sel_minus,
            curve.sigma_minus,
            curve.sel_plus,
            curve.sigma_plus,
        )
    failed = sum(status != "ok" for status in curve.status)
    if failed:
        logger.warning("%d of %d fields failed to fit; see the status column.", failed, len(curve.status))


def cmd_fit(cfg: RunConfig, writer: ResultWriter, input_csv: str) -> None:
    freqs, contrasts = read_spectrum_csv(input_csv)
    b0 = cfg.static.b0 if cfg.static.b0 != 0.0 else None
    spectrum = Spectrum(freqs, contrasts, delta_deg=cfg.drive.delta_deg, b0=b0)
    fitter = build_fitter(cfg)
    prepared = fitter.prepare(spectrum)
    fit = fitter(spectrum)
    sel_minus = selectivity(fit, Branch.MINUS)
    sel_plus = selectivity(fit, Branch.PLUS)
    sigmas = fit.covariance.diagonal().clamp_min(0.0).sqrt().tolist()
    try:
        b0_estimate = field_from_separation(fit.separation, cfg.defect)
    except ConfigError:
        logger.warning("Fitted separation %.3f MHz is below 2 E_gs; no field estimate.", fit.separation)
        b0_estimate = math.nan

    names = ["center_minus", "fwhm_minus", "area_minus", "center_plus", "fwhm_plus", "area_plus", "bg_slope", "bg_offset"]
    rows = [[name, value, sigma] for name, value, sigma in zip(names, fit.params().tolist(), sigmas)]
    rows += [
        ["rms_residual", fit.rms_residual, ""],
        ["sel_minus", sel_minus.value, sel_minus.sigma],
        ["sel_plus", sel_plus.value, sel_plus.sigma],
        ["peak_sep_mhz", fit.separation, ""],
        ["b0_estimate_mt", b0_estimate, ""],
        ["poorly_separated", fit.poorly_separated, ""],
    ]
    writer.write_csv("fit.csv", ["quantity", "value", "sigma"], rows)
    writer.collect_arrays(
        "fit",
        {"params": fit.params(), "covariance": fit.covariance, "cost_history": fit.cost_history},
        {"input": input_csv, "ref_freq": fit.ref_freq},
    )
    if cfg.output.plot:
        plotting.plot_fit(writer.path("fit.svg"), prepared.freqs, prepared.contrasts, fit)
    logger.info(
        "Selectivity |0>->|-1>: %.4f +/- %.4f, |0>->|+1>: %.4f +/- %.4f",
        sel_minus.value,
        sel_minus.sigma,
        sel_plus.value,
        sel_plus.sigma,
    )


def cmd_stick_spectrum(cfg: RunConfig, writer: ResultWriter) -> None:
    lines = hyperfine_stick_spectrum(cfg.defect, cfg.static, cfg.hyperfine)
    writer.write_csv(
        "stick_spectrum.csv",
        ["frequency_mhz", "weight", "branch"],
        ([line.frequency, line.weight, line.branch.value] for line in lines),
    )
    writer.collect_arrays(
        "stick_spectrum",
        {
            "frequency_mhz": [line.frequency for line in lines],
            "weight": [line.weight for line in lines],
            "branch": [line.branch.value for line in lines],
        },
        {"a_zz": cfg.hyperfine.a_zz, "b0_mt": cfg.static.b0},
    )
    if cfg.output.plot:
        plotting.plot_sticks(writer.path("stick_spectrum.svg"), lines)


COMMANDS = {
    "spectrum": cmd_spectrum,
    "phase-sweep": cmd_phase_sweep,
    "field-sweep": cmd_field_sweep,
    "fit": cmd_fit,
    "stick-spectrum": cmd_stick_spectrum,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="INI configuration file")
    common.add_argument("--out", type=str, default=None, help="Output directory")
    common.add_argument("--plot", action="store_true", default=None, help="Write SVG plots")
    common.add_argument("--threads", type=int, default=None, help="Worker threads for grid sweeps")
    common.add_argument("--delta", type=float, default=None, help="Applied phase difference (deg)")
    common.add_argument("--b0", type=float, default=None, help="Static field (mT)")
    common.add_argument(
        "--mask", action="append", default=None, metavar="LO:HI", help="Exclude a frequency band from fits"
    )
    common.add_argument("--hdf5", action="store_true", default=None, help="Also write results.h5")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(prog="odmrsim", description="Phase-controlled ODMR simulation of V_B- defects")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("spectrum", parents=[common], help="Single ODMR spectrum")
    sub.add_parser("phase-sweep", parents=[common], help="Spectra versus phase difference")
    sub.add_parser("field-sweep", parents=[common], help="Maximum selectivity versus static field")
    fit = sub.add_parser("fit", parents=[common], help="Double-Lorentzian fit of a spectrum CSV")
    fit.add_argument("input_csv", help="CSV with frequency_mhz and contrast columns")
    sub.add_parser("stick-spectrum", parents=[common], help="Hyperfine stick spectrum")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    # parallelism is over grid rows only
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = apply_overrides(
            cfg,
            delta=args.delta,
            b0=args.b0,
            mask=args.mask,
            out=args.out,
            plot=args.plot,
            threads=args.threads,
            hdf5=args.hdf5,
        )
        writer = ResultWriter(cfg.output.out, hdf5=cfg.output.hdf5)
        writer.write_text("run_config.ini", to_ini(cfg))
        command = COMMANDS[args.command]
        if args.command == "fit":
            command(cfg, writer, args.input_csv)
        else:
            command(cfg, writer)
        writer.close()
    except NumericalError as err:
        logger.error("[red]Numerical failure:[/red] %s", err)
        return EXIT_NUMERICAL
    except (ConfigError, InputError, OdmrSimError) as err:
        logger.error("[red]Invalid input:[/red] %s", err)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
