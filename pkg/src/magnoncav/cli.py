"""Command-line front end: simulate, fit, experiment and parse.

Runs are described by an INI file whose physical values carry unit
suffixes (``f_c = 6.181 GHz``, ``beta0 = 17 MHz``). ``--set section.key=value``
and the dedicated flags override the file. The whole configuration is
validated before any computation, and every output embeds a digest of the
effective configuration.

Exit codes: 0 success, 2 invalid configuration or input, 3 fit did not
converge (a partial report is still written), 4 I/O failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import math
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from magnoncav import __version__
from magnoncav import dataio, fitting, sweeps
from magnoncav.model import (
    ENGINEERING,
    MHZ_PER_GHZ,
    PHYSICS,
    AnomalyParams,
    CavityMode,
    CoupledSystem,
    MagnonMode,
    PhaseLink,
    Spectrum,
    bare_cavity_s21,
    coupled_s21,
    group_delay,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NOT_CONVERGED = 3
EXIT_IO = 4

OUT_DIR_ENV = "MAGNONCAV_OUT_DIR"
DEFAULT_OUT_DIR = "magnoncav-out"

# conversion factors into the internal unit of each kind
UNITS = {
    "frequency": ("GHz", {"Hz": 1e-9, "kHz": 1e-6, "MHz": 1e-3, "GHz": 1.0}),
    "rate": ("MHz", {"Hz": 1e-6, "kHz": 1e-3, "MHz": 1.0, "GHz": 1e3}),
    "length_m": ("m", {"mm": 1e-3, "cm": 1e-2, "m": 1.0}),
    "length_mm": ("mm", {"mm": 1.0, "cm": 10.0, "m": 1e3}),
    "field": ("mT", {"mT": 1.0, "T": 1e3}),
    "angle": ("rad", {"rad": 1.0, "deg": math.pi / 180}),
    "gyro": ("GHz/T", {"GHz/T": 1.0, "MHz/mT": 1.0}),
}

REQUIRED = object()


@dataclass(frozen=True)
class Key:
    kind: str  # a UNITS kind, or scalar/count/choice/path
    default: object = None
    choices: tuple = ()
    minimum: Optional[float] = None
    strict_min: bool = False


SCHEMA = {
    "run": {
        "model": Key("choice", "bare", ("bare", "coupled")),
        "experiment": Key("choice", None, ("spacing", "phase", "field")),
        "pipeline": Key("choice", "bare", ("lorentzian", "bare", "two", "coupling", "anomaly")),
        "source": Key("choice", "zeros", ("zeros", "poles")),
        "axis": Key("choice", "delta_phi", ("delta_phi", "field_detuning")),
        "seed": Key("count", 0, minimum=0),
        "noise_sigma": Key("scalar", 0.0, minimum=0),
        "jobs": Key("count", 1, minimum=1),
    },
    "cavity": {
        "f_c": Key("frequency", REQUIRED, minimum=0, strict_min=True),
        "beta0": Key("rate", REQUIRED, minimum=0),
        "kappa_cL": Key("rate", REQUIRED, minimum=0),
        "kappa_cR": Key("rate", REQUIRED, minimum=0),
    },
    "magnon": {
        "f_m": Key("frequency", None, minimum=0, strict_min=True),
        "mu0_H": Key("field"),
        "gamma_e": Key("gyro", 22.4),
        "mu0_HA": Key("field", -7.1),
        "alpha0": Key("rate", REQUIRED, minimum=0),
        "kappa_mL": Key("rate", REQUIRED, minimum=0),
        "kappa_mR": Key("rate", REQUIRED, minimum=0),
    },
    "link": {
        "length": Key("length_m", 0.0, minimum=0),
        "wavelength": Key("length_mm", 32.7, minimum=0, strict_min=True),
        "delta_phi": Key("angle", 0.0),
    },
    "anomaly": {
        "eta": Key("scalar", 1.0, minimum=0, strict_min=True),
        "delta": Key("scalar", 1.0, minimum=0),
    },
    "grid": {
        "f_start": Key("frequency"),
        "f_stop": Key("frequency"),
        "f_points": Key("count", sweeps.DEFAULT_POINTS, minimum=2),
        "phi_start": Key("angle", 0.0),
        "phi_stop": Key("angle", 2 * math.pi),
        "phi_points": Key("count", sweeps.DEFAULT_PHASE_POINTS, minimum=2),
        "detuning_span": Key("rate", sweeps.DEFAULT_DETUNING_SPAN, minimum=0, strict_min=True),
        "detuning_points": Key("count", sweeps.DEFAULT_DETUNING_POINTS, minimum=2),
        "d_start": Key("length_mm"),
        "d_stop": Key("length_mm"),
        "d_points": Key("count", 61, minimum=2),
    },
    "input": {
        "spectrum": Key("path"),
        "manifest": Key("path"),
        "calibration": Key("path"),
        "convention": Key("choice", ENGINEERING, (ENGINEERING, PHYSICS)),
        "frequency_unit": Key("choice", "GHz", ("Hz", "kHz", "MHz", "GHz")),
        "columns": Key("columns"),
    },
}

_VALUE = re.compile(r"^\s*(\S+?)\s*([A-Za-z/]+)?\s*$")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is ``section.key``."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


def _parse_value(path, key: Key, raw: str):
    raw = raw.strip()
    if key.kind == "path":
        if not raw:
            raise ConfigError(path, "empty path")
        return raw
    if key.kind == "choice":
        if raw not in key.choices:
            raise ConfigError(path, f"{raw!r} is not one of {', '.join(key.choices)}")
        return raw
    if key.kind == "columns":
        pairs = {}
        for item in raw.split(","):
            role, sep, name = item.partition("=")
            if not sep or not name.strip():
                raise ConfigError(path, f"expected role=name pairs, got {item.strip()!r}")
            pairs[role.strip()] = name.strip()
        return pairs
    m = _VALUE.match(raw)
    if not m:
        raise ConfigError(path, f"cannot read {raw!r}")
    token, unit = m.groups()
    try:
        number = dataio.parse_number(token)
    except dataio.ParseError:
        raise ConfigError(path, f"not a number: {token!r}") from None
    if key.kind in ("scalar", "count"):
        if unit:
            raise ConfigError(path, f"takes no unit, got {unit!r}")
        if key.kind == "count":
            if number != int(number):
                raise ConfigError(path, f"must be an integer, got {token}")
            number = int(number)
    else:
        _, table = UNITS[key.kind]
        if unit is None:
            raise ConfigError(path, f"needs a unit suffix ({', '.join(table)})")
        if unit not in table:
            raise ConfigError(path, f"unit {unit!r} is not one of {', '.join(table)}")
        number = number * table[unit]
    if key.minimum is not None:
        if number < key.minimum or (key.strict_min and number == key.minimum):
            op = ">" if key.strict_min else ">="
            raise ConfigError(path, f"must be {op} {key.minimum}, got {raw!r}")
    return number


@dataclass
class RunConfig:
    """Validated settings in internal units, addressed as ``section.key``."""

    values: dict = field(default_factory=dict)

    @classmethod
    def from_sources(cls, ini_text: str = "", overrides=()) -> "RunConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
        parser.optionxform = str  # keys are case-sensitive (kappa_cL)
        try:
            parser.read_string(ini_text)
        except configparser.Error as exc:
            raise ConfigError("", f"malformed config: {exc}") from None
        raw = {(s, k): v for s in parser.sections() for k, v in parser.items(s)}
        for item in overrides:
            target, sep, value = item.partition("=")
            section, dot, key = target.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(target.strip(), f"override must look like section.key=value, got {item!r}")
            raw[(section, key)] = value
        cfg = cls()
        for (section, key), value in raw.items():
            path = f"{section}.{key}"
            if section not in SCHEMA:
                raise ConfigError(path, f"unknown section {section!r}")
            if key not in SCHEMA[section]:
                raise ConfigError(path, f"unknown key (known: {', '.join(SCHEMA[section])})")
            cfg.values[path] = _parse_value(path, SCHEMA[section][key], value)
        return cfg

    def set(self, path, value):
        self.values[path] = value

    def get(self, path, required=False):
        section, key = path.split(".")
        spec = SCHEMA[section][key]
        if path in self.values:
            return self.values[path]
        if spec.default is REQUIRED:
            if required:
                raise ConfigError(path, "required but missing")
            return None
        return spec.default

    def has(self, path) -> bool:
        return path in self.values

    def effective(self, sections) -> dict:
        """Resolved settings of ``sections`` keyed ``name [unit]``."""
        out = {}
        for section in sections:
            block = {}
            for key, spec in SCHEMA[section].items():
                value = self.get(f"{section}.{key}")
                if value is None:
                    continue
                unit = UNITS[spec.kind][0] if spec.kind in UNITS else None
                block[f"{key} [{unit}]" if unit else key] = value
            out[section] = block
        return out

    # -- domain objects ---------------------------------------------------

    def cavity(self) -> CavityMode:
        return CavityMode(*(self.get(f"cavity.{k}", required=True) for k in ("f_c", "beta0", "kappa_cL", "kappa_cR")))

    def magnon(self, f_c: float) -> MagnonMode:
        g = self.get
        if self.has("magnon.f_m") and self.has("magnon.mu0_H"):
            raise ConfigError("magnon.mu0_H", "give either magnon.f_m or magnon.mu0_H, not both")
        rates = [g(f"magnon.{k}", required=True) for k in ("alpha0", "kappa_mL", "kappa_mR")]
        probe = MagnonMode(g("magnon.gamma_e"), g("magnon.mu0_HA"), 0.0, *rates)
        if self.has("magnon.mu0_H"):
            mode = MagnonMode(probe.gamma_e, probe.mu0_HA, g("magnon.mu0_H"), *rates)
            try:
                mode.frequency
            except ValueError as exc:
                raise ConfigError("magnon.mu0_H", str(exc)) from None
            return mode
        try:
            return probe.tuned_to(g("magnon.f_m") or f_c)
        except ValueError as exc:
            raise ConfigError("magnon.gamma_e", str(exc)) from None

    def system(self) -> CoupledSystem:
        cavity = self.cavity()
        delta = self.get("anomaly.delta")
        if delta > 1:
            raise ConfigError("anomaly.delta", f"must lie in [0, 1], got {delta}")
        link = PhaseLink(self.get("link.length"), self.get("link.wavelength"), self.get("link.delta_phi"))
        anomaly = AnomalyParams(self.get("anomaly.eta"), delta)
        return CoupledSystem(cavity, self.magnon(cavity.f_c), link, anomaly)

    def frequency_axis(self, cavity: Optional[CavityMode]) -> sweeps.SweepAxis:
        start, stop, n = self.get("grid.f_start"), self.get("grid.f_stop"), self.get("grid.f_points")
        if (start is None) != (stop is None):
            raise ConfigError("grid.f_stop" if stop is None else "grid.f_start",
                              "set both grid.f_start and grid.f_stop, or neither")
        if start is None:
            if cavity is None:
                raise ConfigError("grid.f_start", "required when no cavity is configured")
            return sweeps.default_frequency_axis(cavity, n)
        if not stop > start:
            raise ConfigError("grid.f_stop", f"must exceed grid.f_start ({stop} <= {start} GHz)")
        return sweeps.SweepAxis.linspace("frequency", start, stop, n)

    def phase_axis(self) -> sweeps.SweepAxis:
        start, stop = self.get("grid.phi_start"), self.get("grid.phi_stop")
        if not stop > start:
            raise ConfigError("grid.phi_stop", "must exceed grid.phi_start")
        return sweeps.SweepAxis.linspace("delta_phi", start, stop, self.get("grid.phi_points"))

    def detuning_axis(self) -> sweeps.SweepAxis:
        return sweeps.default_detuning_axis(self.get("grid.detuning_points"), self.get("grid.detuning_span"))


# ---------------------------------------------------------------------------
# plans: everything validated up front, computation deferred


@dataclass
class Plan:
    stem: str
    sections: tuple
    run: object  # callable returning (summary dict, tables dict, converged)
    inputs: list = field(default_factory=list)


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from None


def _load_spectrum(cfg: RunConfig, path) -> Spectrum:
    data = _read_bytes(path)
    convention = cfg.get("input.convention")
    if str(path).lower().endswith((".s2p", ".ts")):
        return dataio.parse_touchstone(data).to_spectrum(convention)
    return dataio.parse_spectrum_csv(data, cfg.get("input.columns"), cfg.get("input.frequency_unit"), convention)


def read_manifest(path, axis: str) -> list:
    """``(label, path)`` rows; the label column is ``delta_phi [rad|deg]`` or ``field_detuning [MHz]``."""
    text = _read_bytes(path).decode("utf-8-sig")
    base = Path(path).parent
    rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].lstrip().startswith("#")]
    if len(rows) < 2:
        raise dataio.ParseError(f"manifest {path} has no entries")
    header = [h.strip() for h in rows[0]]
    m = re.fullmatch(rf"{axis}\s*\[(\w+)\]", header[0]) if header else None
    unit_kind = "angle" if axis == "delta_phi" else "rate"
    if len(header) != 2 or header[1] != "path" or not m or m.group(1) not in UNITS[unit_kind][1]:
        units = "|".join(UNITS[unit_kind][1])
        raise dataio.ParseError(f"manifest header must be '{axis} [{units}],path', got {','.join(header)!r}", 1)
    scale = UNITS[unit_kind][1][m.group(1)]
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise dataio.ParseError(f"expected 2 cells, found {len(row)}", lineno)
        label = dataio.parse_number(row[0], lineno, header[0]) * scale
        out.append((label, base / row[1].strip()))
    return out


def _spectrum_table(grid, values):
    return dataio.Table.from_columns(
        frequency=("GHz", grid), re=("1", values.real), im=("1", values.imag), magnitude=("1", np.abs(values)))


def _map_table(m: sweeps.SweepMap):
    a1, a2 = np.meshgrid(m.axis1.samples, m.axis2.samples, indexing="ij")
    unit = {"amplitude": "1", "inverse_amplitude": "1", "group_delay": "ns"}[m.kind]
    values = np.where(m.singular, np.nan, m.values)
    return dataio.Table(
        (m.axis1.name, m.axis2.name, m.kind), (m.axis1.unit, m.axis2.unit, unit),
        {m.axis1.name: a1.ravel(), m.axis2.name: a2.ravel(), m.kind: values.ravel()})


def _finite_or_none(x):
    return float(x) if x is not None and math.isfinite(x) else None


def plan_simulate(cfg: RunConfig) -> Plan:
    model = cfg.get("run.model")
    if model == "bare":
        source = cfg.cavity()
        sections = ("run", "cavity", "grid")
    else:
        source = cfg.system()
        sections = ("run", "cavity", "magnon", "link", "anomaly", "grid")
    cavity = source if model == "bare" else source.cavity
    freqs = cfg.frequency_axis(cavity)
    sigma, seed = cfg.get("run.noise_sigma"), cfg.get("run.seed")

    def run():
        spectrum = sweeps.synthesize_spectrum(source, freqs, sigma, seed)
        gd = group_delay(spectrum, warn=False)
        clean = bare_cavity_s21(cavity.f_c, cavity) if model == "bare" else coupled_s21(cavity.f_c, source)
        values = spectrum.in_convention(cfg.get("input.convention"))
        summary = {
            "convention": cfg.get("input.convention"),
            "s21_at_f_c": float(abs(clean)),
            "beta [MHz]": cavity.beta,
            "singular_group_delay_points": gd.n_singular,
            "group_delay_undersampled": bool(gd.undersampled),
        }
        tables = {
            "spectrum": _spectrum_table(spectrum.grid, values),
            "group_delay": dataio.Table.from_columns(
                frequency=("GHz", gd.grid), tau=("ns", np.where(gd.singular, np.nan, gd.tau))),
        }
        return summary, tables, True

    return Plan(f"simulate_{model}", sections, run)


def _report(report: fitting.FitReport) -> dict:
    d = report.to_dict()
    return {k: v for k, v in d.items() if not (isinstance(v, float) and not math.isfinite(v))}


def _clean(obj):
    """Replace non-finite floats by None so summaries always serialise."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return _finite_or_none(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _complex(z):
    return {"re": z.real, "im": z.imag}


def plan_fit(cfg: RunConfig) -> Plan:
    pipeline = cfg.get("run.pipeline")
    jobs = cfg.get("run.jobs")
    if pipeline in ("lorentzian", "bare", "two"):
        path = cfg.get("input.spectrum")
        if path is None:
            raise ConfigError("input.spectrum", f"required by the {pipeline} pipeline")
    else:
        path = cfg.get("input.manifest")
        if path is None:
            raise ConfigError("input.manifest", f"required by the {pipeline} pipeline")
    inputs = [path]  # batch runs append each listed spectrum
    sections = ("run", "input")
    if pipeline == "bare":
        beta0 = cfg.get("cavity.beta0", required=True)
        sections += ("cavity",)
    if pipeline == "coupling":
        source = cfg.get("run.source")
        cavity = cfg.cavity()
        magnon = cfg.magnon(cavity.f_c)
        if source == "zeros":
            refs = cavity.complex_frequency, magnon.complex_frequency
        else:
            refs = (complex(cavity.f_c * MHZ_PER_GHZ, -cavity.loaded_damping),
                    complex(magnon.frequency * MHZ_PER_GHZ, -(magnon.alpha0 + magnon.kappa_m)))
        sections += ("cavity", "magnon")
    if pipeline == "anomaly":
        template = cfg.system()
        sections += ("cavity", "magnon", "link", "anomaly")

    def run():
        if pipeline in ("lorentzian", "bare", "two"):
            spectrum = _load_spectrum(cfg, path)
        else:
            manifest = read_manifest(path, "delta_phi" if pipeline == "coupling" else cfg.get("run.axis"))
            dataset = [(label, _load_spectrum(cfg, p)) for label, p in manifest]
            inputs.extend(p for _, p in manifest)
        if pipeline == "lorentzian":
            fit = fitting.fit_inverse_lorentzian(spectrum)
            summary = {"center [GHz]": fit.center, "hwhm [MHz]": fit.hwhm, "amplitude": fit.amplitude,
                       "baseline": fit.baseline, "degenerate": fit.degenerate, "report": _report(fit.report)}
            return summary, {}, fit.report.converged
        if pipeline == "bare":
            fit = fitting.fit_bare_cavity(spectrum, beta0)
            summary = {"identifiable": fit.identifiable, "beta [MHz]": fit.beta,
                       "beta_stderr [MHz]": fit.beta_stderr, "report": _report(fit.report)}
            if fit.cavity is not None:
                summary.update({"f_c [GHz]": fit.cavity.f_c, "kappa_cL [MHz]": fit.cavity.kappa_cL,
                                "kappa_cR [MHz]": fit.cavity.kappa_cR})
            return summary, {}, fit.report.converged
        if pipeline == "two":
            fit = fitting.fit_two_resonances(spectrum)
            summary = {"plus [MHz]": _complex(fit.pair.plus), "minus [MHz]": _complex(fit.pair.minus),
                       "poles [MHz]": [_complex(p) for p in fit.poles], "degenerate": fit.degenerate,
                       "report": _report(fit.report)}
            return summary, {}, fit.report.converged
        if pipeline == "coupling":
            results = fitting.extract_coupling_vs_phase(dataset, *refs, jobs=jobs, source=source)
            phi = np.array([p for p, _ in results])
            G = np.array([r.G if r is not None else complex(np.nan, np.nan) for _, r in results])
            resolved = int(np.count_nonzero(np.isfinite(G.real)))
            table = dataio.Table.from_columns(
                delta_phi=("rad", phi), J=("MHz", G.real), Gamma=("MHz", G.imag), magnitude=("MHz", np.abs(G)))
            summary = {"spectra": len(results), "resolved": resolved,
                       "unresolved_phases [rad]": phi[~np.isfinite(G.real)].tolist()}
            return summary, {"coupling": table}, resolved > 0
        fit = fitting.fit_anomaly_params(dataset, template, cfg.get("run.axis"))
        summary = {"eta": fit.eta, "delta": fit.delta, "report": _report(fit.report)}
        return summary, {}, fit.report.converged

    return Plan(f"fit_{pipeline}", sections, run, inputs)


def plan_experiment(cfg: RunConfig) -> Plan:
    kind = cfg.get("run.experiment")
    if kind is None:
        raise ConfigError("run.experiment", "required (spacing, phase or field)")
    jobs = cfg.get("run.jobs")
    if kind == "spacing":
        path = cfg.get("input.calibration")
        if path is None:
            raise ConfigError("input.calibration", "required by the spacing experiment")
        freq_given = cfg.has("grid.f_start") or cfg.has("grid.f_stop")
        freqs = cfg.frequency_axis(None) if freq_given else None

        def run():
            table = dataio.load_calibration(_read_bytes(path))
            lo = cfg.get("grid.d_start") if cfg.has("grid.d_start") else float(table.d[0])
            hi = cfg.get("grid.d_stop") if cfg.has("grid.d_stop") else float(table.d[-1])
            if not hi > lo:
                raise ConfigError("grid.d_stop", f"must exceed grid.d_start ({hi} <= {lo} mm)")
            axis = sweeps.SweepAxis.linspace("spacing_d", lo, hi, cfg.get("grid.d_points"))
            result = sweeps.spacing_sweep(table, axis, freqs, jobs)
            roots = [p.d for p in result.critical]
            summary = {
                "critical_spacings [mm]": roots,
                "min_abs_beta [MHz]": result.critical.min_abs_beta,
                "message": (f"{len(roots)} critical coupling point(s) found" if roots
                            else "no critical coupling found"),
            }
            traces = dataio.Table.from_columns(
                spacing_d=("mm", axis.samples), beta=("MHz", result.beta),
                tau_at_f_c=("ns", result.tau_at_resonance), s21_at_f_c=("1", result.s21_at_resonance))
            return summary, {"amplitude": _map_table(result.amplitude), "traces": traces}, True

        return Plan("experiment_spacing", ("run", "grid", "input"), run, [path])

    system = cfg.system()
    freqs = cfg.frequency_axis(system.cavity)
    sections = ("run", "cavity", "magnon", "link", "anomaly", "grid")
    if kind == "phase":
        if abs(system.magnon.frequency - system.cavity.f_c) > 1e-9:
            raise ConfigError("magnon.f_m", "the phase experiment needs the magnon at the cavity frequency")
        phis = cfg.phase_axis()

        def run():
            result = sweeps.phase_sweep(system, phis, freqs, jobs)
            summary = {"max_splitting_phase [rad]": result.max_splitting_phase,
                       "max_splitting [MHz]": float(np.max(result.splitting)),
                       "undersampled_rows": result.undersampled_rows}
            traces = dataio.Table.from_columns(
                delta_phi=("rad", phis.samples), splitting=("MHz", result.splitting),
                inverse_s21_at_f_c=("1", result.on_resonance))
            return summary, {"amplitude": _map_table(result.amplitude),
                             "group_delay": _map_table(result.group_delay), "traces": traces}, True

        return Plan("experiment_phase", sections, run)

    detunings = cfg.detuning_axis()

    def run():
        result = sweeps.field_sweep(system, detunings, freqs, jobs)
        summary = {"coupling [MHz]": result.coupling, "cooperativity": result.cooperativity,
                   "separation [MHz]": result.separation, "min_separation [MHz]": result.min_separation,
                   "alpha [MHz]": system.magnon.alpha, "beta [MHz]": system.cavity.beta}
        traces = dataio.Table.from_columns(
            delta_m=("MHz", detunings.samples), bias_field=("mT", result.bias_fields),
            lower=("GHz", result.branches[:, 0]), upper=("GHz", result.branches[:, 1]))
        return summary, {"amplitude": _map_table(result.amplitude), "branches": traces}, True

    return Plan("experiment_field", sections, run)


PLANNERS = {"simulate": plan_simulate, "fit": plan_fit, "experiment": plan_experiment}


# ---------------------------------------------------------------------------
# output


def _input_digest(config_digest, inputs) -> str:
    parts = [config_digest.encode()]
    for path in inputs:
        parts.append(dataio.digest(_read_bytes(path)).encode())
    return dataio.digest(b"\n".join(parts))


def write_outputs(out_dir: Path, plan: Plan, effective: dict, config_digest: str, summary, tables,
                  converged: bool, inputs_digest: str) -> list:
    out_dir.mkdir(parents=True, exist_ok=True)
    envelope = dataio.ResultEnvelope(
        kind=plan.stem,
        parameters={"config": effective, "config_digest": config_digest, "summary": _clean(summary),
                    "converged": bool(converged)},
        tables=tables,
        input_digest=inputs_digest,
        metadata={"tool": "magnoncav", "version": __version__},
    )
    written = []
    path = out_dir / f"{plan.stem}.json"
    path.write_bytes(dataio.save_results(envelope))
    written.append(path)
    for name, table in tables.items():
        path = out_dir / f"{plan.stem}_{name}.csv"
        path.write_bytes(f"# config_digest: {config_digest}\n".encode() + table.to_csv())
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# parse (format inspection)


def inspect_file(path) -> dict:
    data = _read_bytes(path)
    name = str(path).lower()
    if name.endswith((".s2p", ".ts")):
        rec = dataio.parse_touchstone(data)
        return {"format": "touchstone", "encoding": rec.format, "impedance [ohm]": rec.impedance,
                "frequency_unit": rec.frequency_unit, "points": int(rec.frequency.size),
                "f_min [GHz]": float(rec.frequency[0]), "f_max [GHz]": float(rec.frequency[-1]),
                "comments": list(rec.comments)}
    if name.endswith(".json"):
        env = dataio.load_results(data)
        return {"format": "results", "kind": env.kind, "schema_version": env.schema_version,
                "tables": {k: len(t) for k, t in env.tables.items()}, "input_digest": env.input_digest}
    header = next((ln for ln in data.decode("utf-8-sig").splitlines() if ln.strip() and not ln.startswith("#")), "")
    if re.match(r"\s*d\b", header) and "kappa_cL" in header:
        table = dataio.load_calibration(data)
        return {"format": "calibration", "rows": len(table), "d_min [mm]": float(table.d[0]),
                "d_max [mm]": float(table.d[-1]), "beta [MHz]": table.beta.tolist()}
    spec = dataio.parse_spectrum_csv(data)
    return {"format": "spectrum", "points": len(spec), "f_min [GHz]": float(spec.grid[0]),
            "f_max [GHz]": float(spec.grid[-1])}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="magnoncav", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file with unit-suffixed values")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--out-dir", type=Path, help=f"output directory (default ${OUT_DIR_ENV} or ./{DEFAULT_OUT_DIR})")
    common.add_argument("--jobs", type=int, help="worker threads for sweeps and batch fits")
    common.add_argument("--seed", type=int, help="noise seed")
    common.add_argument("--noise-sigma", type=float, help="complex noise sigma per quadrature")
    common.add_argument("--dry-run", action="store_true", help="validate the configuration and stop")

    p = sub.add_parser("simulate", parents=[common], help="forward transmission and group delay")
    p.add_argument("--model", choices=("bare", "coupled"))
    p = sub.add_parser("fit", parents=[common], help="fit measured or synthetic spectra")
    p.add_argument("--pipeline", choices=SCHEMA["run"]["pipeline"].choices)
    p.add_argument("--input", help="spectrum file (.csv or .s2p) or manifest CSV for batch pipelines")
    p = sub.add_parser("experiment", parents=[common], help="spacing, phase or field sweep")
    p.add_argument("kind", nargs="?", choices=("spacing", "phase", "field"))
    p = sub.add_parser("parse", help="inspect a data file and print a summary")
    p.add_argument("file", type=Path)
    return parser


def _apply_flags(cfg: RunConfig, args):
    if args.jobs is not None:
        cfg.set("run.jobs", _parse_value("--jobs", SCHEMA["run"]["jobs"], str(args.jobs)))
    if args.seed is not None:
        cfg.set("run.seed", _parse_value("--seed", SCHEMA["run"]["seed"], str(args.seed)))
    if args.noise_sigma is not None:
        cfg.set("run.noise_sigma", _parse_value("--noise-sigma", SCHEMA["run"]["noise_sigma"], repr(args.noise_sigma)))
    if args.command == "simulate" and args.model:
        cfg.set("run.model", args.model)
    if args.command == "fit":
        if args.pipeline:
            cfg.set("run.pipeline", args.pipeline)
        if args.input:
            batch = cfg.get("run.pipeline") in ("coupling", "anomaly")
            cfg.set("input.manifest" if batch else "input.spectrum", args.input)
    if args.command == "experiment" and args.kind:
        cfg.set("run.experiment", args.kind)


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "parse":
            print(dataio.canonical_json(_clean(inspect_file(args.file))))
            return EXIT_OK
        text = _read_bytes(args.config).decode("utf-8") if args.config else ""
        cfg = RunConfig.from_sources(text, args.overrides)
        _apply_flags(cfg, args)
        plan = PLANNERS[args.command](cfg)
        effective = cfg.effective(plan.sections)
        config_digest = dataio.digest(dataio.canonical_json(effective))
        if args.dry_run:
            print(dataio.canonical_json({"config": effective, "config_digest": config_digest, "kind": plan.stem}))
            return EXIT_OK
        summary, tables, converged = plan.run()
        inputs_digest = _input_digest(config_digest, plan.inputs)
        out_dir = args.out_dir or Path(os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR)
        written = write_outputs(out_dir, plan, effective, config_digest, summary, tables, converged, inputs_digest)
    except OSError as exc:
        return _fail(EXIT_IO, str(exc))
    except (ValueError, ArithmeticError) as exc:
        return _fail(EXIT_VALIDATION, f"{type(exc).__name__}: {exc}")
    print(dataio.canonical_json(_clean({"kind": plan.stem, "summary": summary,
                                        "outputs": [str(p) for p in written]})))
    if not converged:
        return _fail(EXIT_NOT_CONVERGED, f"{plan.stem} did not converge; partial report written to {written[0]}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
