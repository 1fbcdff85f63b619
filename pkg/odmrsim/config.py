"""
Run configuration: typed INI file with one section per parameter group.

Every value is validated by the parameter dataclasses at load time, so a bad
value is reported as ``section.key`` before any solve starts.
"""

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Tuple

from odmrsim.core.exceptions import ConfigError
from odmrsim.core.fitting import DEFAULT_WING_FRACTION
from odmrsim.core.hamiltonian import (
    BranchConvention,
    DefectParams,
    DriveConfig,
    HyperfineParams,
    OpticalRates,
    StaticField,
)
from odmrsim.core.odmr import SweepConfig


@dataclass(frozen=True)
class FitOptions:
    wing_fraction: float = DEFAULT_WING_FRACTION
    subtract_background: bool = False
    mask: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        if not 0 < self.wing_fraction <= 0.4:
            raise ConfigError(f"fit.wing_fraction must lie in (0, 0.4], got {self.wing_fraction!r}")
        for lo, hi in self.mask:
            if not lo < hi:
                raise ConfigError(f"fit.mask band {lo}:{hi} must have LO < HI")


@dataclass(frozen=True)
class OutputOptions:
    out: str = "odmr_out"
    plot: bool = False
    threads: int = 1
    hdf5: bool = False

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError(f"output.threads must be >= 1, got {self.threads!r}")


@dataclass(frozen=True)
class RunConfig:
    defect: DefectParams = field(default_factory=DefectParams)
    drive: DriveConfig = field(default_factory=DriveConfig)
    static: StaticField = field(default_factory=StaticField)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    hyperfine: HyperfineParams = field(default_factory=HyperfineParams)
    fit: FitOptions = field(default_factory=FitOptions)
    output: OutputOptions = field(default_factory=OutputOptions)

    def sweep_config(self) -> SweepConfig:
        """Sweep settings carrying this run's defect, drive and field."""
        return replace(self.sweep, params=self.defect, drive=self.drive, static=self.static)


SECTIONS = ("defect", "rates", "drive", "field", "sweep", "hyperfine", "fit", "output")


def parse_range_list(text: str, key: str) -> Tuple[float, ...]:
    """
    Parse ``a, b, c`` or ``start:stop:step`` (stop exclusive).
    """
    text = text.strip()
    try:
        if ":" not in text:
            return tuple(float(part) for part in text.split(",") if part.strip())
        start, stop, step = (float(part) for part in text.split(":"))
    except ValueError:
        raise ConfigError(f"{key}: cannot parse '{text}' as a list of numbers")
    if step <= 0:
        raise ConfigError(f"{key}: range step must be > 0, got {step}")
    count = int(round((stop - start) / step))
    values = [start + k * step for k in range(count + 1)]
    return tuple(v for v in values if v < stop - 1e-9 * step)


def parse_band(text: str, key: str = "fit.mask") -> Tuple[float, float]:
    try:
        lo, hi = (float(part) for part in text.split(":"))
    except ValueError:
        raise ConfigError(f"{key}: band '{text}' must have the form LO:HI")
    if not lo < hi:
        raise ConfigError(f"{key}: band '{text}' must have LO < HI")
    return lo, hi


def _typed(section: configparser.SectionProxy, name: str, key: str, kind):
    where = f"{name}.{key}"
    try:
        if kind is bool:
            return section.getboolean(key)
        if kind is int:
            return section.getint(key)
        if kind is float:
            return section.getfloat(key)
        return section.get(key)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse '{section.get(key)}' as {kind.__name__}")


def _section_values(parser, name: str, kinds: Dict[str, type]) -> Dict:
    if not parser.has_section(name):
        return {}
    section = parser[name]
    unknown = set(section.keys()) - set(kinds)
    if unknown:
        raise ConfigError(f"{name}: unknown key(s) {sorted(unknown)}")
    return {key: _typed(section, name, key, kinds[key]) for key in section.keys()}


def _float_kinds(cls) -> Dict[str, type]:
    return {f.name: float for f in fields(cls)}


def load_config(path: Optional[str] = None, text: Optional[str] = None) -> RunConfig:
    """
    Load a RunConfig from an INI file (or INI text); missing keys keep their
    defaults.

    :raises ConfigError: On unknown sections or keys and on invalid values.
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        if path is not None:
            with open(path) as handle:
                parser.read_file(handle)
        elif text is not None:
            parser.read_string(text)
    except OSError as err:
        raise ConfigError(f"Cannot read config '{path}': {err}")
    except configparser.Error as err:
        raise ConfigError(f"Malformed config: {err}")

    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"Unknown config section(s) {sorted(unknown)}")

    rates = OpticalRates(**_section_values(parser, "rates", _float_kinds(OpticalRates)))
    defect_kinds = {"d_gs": float, "e_gs": float, "g_factor": float, "gamma_phi": float, "branching": str}
    defect_values = _section_values(parser, "defect", defect_kinds)
    if "branching" in defect_values:
        try:
            defect_values["branching"] = BranchConvention(defect_values["branching"].strip().lower())
        except ValueError:
            raise ConfigError(
                f"defect.branching must be one of {[c.value for c in BranchConvention]}, "
                f"got '{defect_values['branching']}'"
            )
    defect = DefectParams(rates=rates, **defect_values)
    drive = DriveConfig(**_section_values(parser, "drive", _float_kinds(DriveConfig)))
    static = StaticField(**_section_values(parser, "field", {"b0": float}))
    hyperfine = HyperfineParams(
        **_section_values(parser, "hyperfine", {"a_zz": float, "n_nuclei": int})
    )

    sweep_values = _section_values(
        parser, "sweep", {"f_start": float, "f_stop": float, "n_freq": int, "delta_list": str, "b_list": str}
    )
    for key in ("delta_list", "b_list"):
        if key in sweep_values:
            sweep_values[key] = parse_range_list(sweep_values[key], f"sweep.{key}")
    sweep = SweepConfig(params=defect, drive=drive, static=static, **sweep_values)

    fit_values = _section_values(
        parser, "fit", {"wing_fraction": float, "subtract_background": bool, "mask": str}
    )
    if "mask" in fit_values:
        fit_values["mask"] = tuple(
            parse_band(band.strip()) for band in fit_values["mask"].split(",") if band.strip()
        )
    fit = FitOptions(**fit_values)

    output = OutputOptions(
        **_section_values(parser, "output", {"out": str, "plot": bool, "threads": int, "hdf5": bool})
    )
    return RunConfig(defect, drive, static, sweep, hyperfine, fit, output)


def apply_overrides(
    cfg: RunConfig,
    delta: Optional[float] = None,
    b0: Optional[float] = None,
    mask: Optional[List[str]] = None,
    out: Optional[str] = None,
    plot: Optional[bool] = None,
    threads: Optional[int] = None,
    hdf5: Optional[bool] = None,
) -> RunConfig:
    """Command-line values win over the file."""
    drive = cfg.drive if delta is None else cfg.drive.with_delta(delta)
    static = cfg.static if b0 is None else StaticField(b0)
    fit = cfg.fit
    if mask:
        fit = replace(fit, mask=fit.mask + tuple(parse_band(band, "--mask") for band in mask))
    output_changes = {
        key: value
        for key, value in (("out", out), ("plot", plot), ("threads", threads), ("hdf5", hdf5))
        if value is not None
    }
    output = replace(cfg.output, **output_changes)
    return replace(cfg, drive=drive, static=static, fit=fit, output=output)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_ini(cfg: RunConfig) -> str:
    """Effective configuration as INI text; loading it gives back ``cfg``."""
    parser = configparser.ConfigParser(interpolation=None)
    d = cfg.defect
    parser["defect"] = {
        "d_gs": _fmt(d.d_gs),
        "e_gs": _fmt(d.e_gs),
        "g_factor": _fmt(d.g_factor),
        "gamma_phi": _fmt(d.gamma_phi),
        "branching": d.branching.value,
    }
    parser["rates"] = {f.name: _fmt(getattr(d.rates, f.name)) for f in fields(OpticalRates)}
    parser["drive"] = {f.name: _fmt(getattr(cfg.drive, f.name)) for f in fields(DriveConfig)}
    parser["field"] = {"b0": _fmt(cfg.static.b0)}
    s = cfg.sweep
    parser["sweep"] = {
        "f_start": _fmt(s.f_start),
        "f_stop": _fmt(s.f_stop),
        "n_freq": _fmt(s.n_freq),
        "delta_list": ", ".join(_fmt(v) for v in s.delta_list),
        "b_list": ", ".join(_fmt(v) for v in s.b_list),
    }
    parser["hyperfine"] = {"a_zz": _fmt(cfg.hyperfine.a_zz), "n_nuclei": _fmt(cfg.hyperfine.n_nuclei)}
    parser["fit"] = {
        "wing_fraction": _fmt(cfg.fit.wing_fraction),
        "subtract_background": _fmt(cfg.fit.subtract_background),
        "mask": ", ".join(f"{_fmt(lo)}:{_fmt(hi)}" for lo, hi in cfg.fit.mask),
    }
    parser["output"] = {f.name: _fmt(getattr(cfg.output, f.name)) for f in fields(OutputOptions)}
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()
