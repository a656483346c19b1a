"""Run configuration: INI sections with unit-suffixed keys.

Every key carries its unit in the name (``s0_cps``, ``delta_urad``,
``tau_ps``); dimensionless values use ``_frac`` or ``_factor``. Unknown
sections or keys are rejected. Missing keys take documented defaults and
are marked as such in :attr:`ResolvedConfig.provenance`.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .model import FibreModel, LinkConditions, OperatingPoint, SystemConstants


class ConfigError(ValueError):
    """Unreadable file, unknown key, or a value of the wrong type."""


# section -> key -> (default, provenance of the default)
DEFAULTS: dict[str, dict[str, tuple[object, str]]] = {
    "link": {
        "s0_cps": (237000.0, "8 pm calibration"),
        "delta_urad": (18.5, "8 pm calibration"),
        "b0_cps": (1.59e6, "8 pm calibration"),
        "gamma_urad": (36.8, "mean of daytime noise scans"),
    },
    "system": {
        "eta_a_frac": (0.122, "measured heralding efficiency"),
        "s_a_cps": (1.4e6, "measured Alice singles"),
        "dark_bob_cps": (761.0, "measured Bob dark counts"),
        "jitter_fwhm_ps": (710.0, "measured system jitter"),
        "e_pol_frac": (0.026, "measured polarization error"),
        "f_ec_factor": (1.22, "error-correction inefficiency"),
    },
    "operating": {
        "theta_sf_urad": (30.0, "tool default"),
        "tau_ps": (800.0, "experimental coincidence window"),
        "fibre_model": ("fibre", "tool default"),
    },
    "optimize": {
        "theta_min_urad": (0.5, "tool default"),
        "theta_max_urad": (140.0, "largest field stop used"),
        "tau_min_ps": (50.0, "tool default"),
        "tau_max_ps": (5000.0, "tool default"),
        "optimize_tau": (False, "tool default"),
        "fibre_model": ("no-fibre", "design-study noise model"),
    },
    "sweep": {
        "b0_min_cps": (0.0, "observed range"),
        "b0_max_cps": (1.59e6, "observed range"),
        "delta_min_urad": (11.4, "observed range"),
        "delta_max_urad": (39.4, "observed range"),
        "s0_min_cps": (0.0, "observed range"),
        "s0_max_cps": (237000.0, "observed range"),
        "points_count": (8, "tool default"),
        "theta_points_count": (140, "tool default"),
    },
    "scenario": {
        "delta_start_urad": (11.4, "smallest observed spot"),
        "delta_changed_urad": (39.4, "largest observed spot"),
        "optimize_tau": (True, "per-point optimized window"),
    },
    "simulation": {
        "duration_s": (8.0, "experimental acquisition time"),
        "clock_offset_ps": (0.0, "tool default"),
        "clock_drift_frac": (0.0, "tool default"),
    },
}


def _coerce(section: str, key: str, raw: str):
    default = DEFAULTS[section][key][0]
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None
    if key == "fibre_model":
        try:
            return FibreModel(raw.strip()).value
        except ValueError:
            raise ConfigError(f"[{section}] {key}: expected 'fibre' or 'no-fibre'") from None
    return raw.strip()


@dataclass(frozen=True)
class ResolvedConfig:
    values: dict  # section -> key -> value
    provenance: dict  # "section.key" -> "file" | "default: ..." | "command line"

    def get(self, section: str, key: str):
        return self.values[section][key]

    def link(self) -> LinkConditions:
        v = self.values["link"]
        return LinkConditions(v["s0_cps"], v["delta_urad"], v["b0_cps"], v["gamma_urad"])

    def system(self) -> SystemConstants:
        v = self.values["system"]
        return SystemConstants(
            eta_a=v["eta_a_frac"],
            s_a_measured=v["s_a_cps"],
            dark_bob=v["dark_bob_cps"],
            jitter_fwhm=v["jitter_fwhm_ps"],
            e_pol=v["e_pol_frac"],
            f_ec=v["f_ec_factor"],
        )

    def operating_point(self) -> OperatingPoint:
        v = self.values["operating"]
        return OperatingPoint(v["theta_sf_urad"], v["tau_ps"], FibreModel(v["fibre_model"]))

    def with_override(self, section: str, key: str, value) -> "ResolvedConfig":
        values = {s: dict(kv) for s, kv in self.values.items()}
        values[section][key] = value
        provenance = dict(self.provenance)
        provenance[f"{section}.{key}"] = "command line"
        return ResolvedConfig(values, provenance)

    def to_ini(self) -> str:
        """Resolved configuration as INI text; loading it reproduces the same values."""
        lines = []
        for section, kv in self.values.items():
            lines.append(f"[{section}]")
            for key, value in kv.items():
                if isinstance(value, bool):
                    value = "true" if value else "false"
                elif isinstance(value, float):
                    value = repr(value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def parse_config(text: str) -> ResolvedConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None

    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key '{key}' in [{section}]")

    values, provenance = {}, {}
    for section, keys in DEFAULTS.items():
        values[section] = {}
        for key, (default, note) in keys.items():
            if parser.has_option(section, key):
                values[section][key] = _coerce(section, key, parser[section][key])
                provenance[f"{section}.{key}"] = "file"
            else:
                values[section][key] = default
                provenance[f"{section}.{key}"] = f"default: {note}"
    return ResolvedConfig(values, provenance)


def load_config(path=None) -> ResolvedConfig:
    """Read ``path`` (or use all defaults when ``None``)."""
    if path is None:
        return parse_config("")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
