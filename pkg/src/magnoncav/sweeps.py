"""Sweep engines for the spacing, phase and field experiments.

Each engine evaluates the forward model over a grid and returns plot-ready
maps plus the derived traces used in the analysis. Rows are independent, so
``jobs > 1`` evaluates them on a thread pool; results are identical to the
sequential run.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.signal import find_peaks

from magnoncav.fitting import CalibrationTable, CriticalSpacingResult, RangeError, find_critical_spacing
from magnoncav.model import (
    MHZ_PER_GHZ,
    CavityMode,
    CoupledSystem,
    DomainError,
    MagnonMode,
    SingularCooperativityError,
    Spectrum,
    UndersampledWarning,
    bare_cavity_group_delay,
    bare_cavity_s21,
    cooperativity,
    coupled_s21,
    group_delay,
)

AXIS_UNITS = {"spacing_d": "mm", "delta_phi": "rad", "bias_field": "MHz", "frequency": "GHz"}
MAP_KINDS = ("amplitude", "group_delay", "inverse_amplitude")

DEFAULT_POINTS = 2001
DEFAULT_LINEWIDTHS = 10
DEFAULT_PHASE_POINTS = 41
DEFAULT_DETUNING_POINTS = 81
DEFAULT_DETUNING_SPAN = 60.0  # MHz


@dataclass(frozen=True, eq=False)
class SweepAxis:
    """A named, strictly monotone sample axis.

    ``bias_field`` samples are field detunings ``Delta_m`` in MHz, converted
    to bias fields only when a magnon is retuned.
    """

    name: str
    samples: np.ndarray

    def __post_init__(self):
        if self.name not in AXIS_UNITS:
            raise ValueError(f"axis name must be one of {sorted(AXIS_UNITS)}, got {self.name!r}")
        samples = np.array(self.samples, dtype=float).ravel()
        if samples.size < 2:
            raise ValueError(f"axis {self.name} needs at least 2 samples")
        if not np.all(np.isfinite(samples)):
            raise ValueError(f"axis {self.name} has non-finite samples")
        steps = np.diff(samples)
        if not (np.all(steps > 0) or np.all(steps < 0)):
            raise ValueError(f"axis {self.name} must be strictly monotone")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)

    @property
    def unit(self) -> str:
        return AXIS_UNITS[self.name]

    def __len__(self):
        return self.samples.size

    @classmethod
    def linspace(cls, name, start, stop, num):
        return cls(name, np.linspace(start, stop, num))


@dataclass(frozen=True, eq=False)
class SweepMap:
    """Values over ``axis1 x axis2``; non-finite cells must be flagged in ``singular``."""

    axis1: SweepAxis
    axis2: SweepAxis
    values: np.ndarray
    kind: str
    singular: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in MAP_KINDS:
            raise ValueError(f"kind must be one of {MAP_KINDS}, got {self.kind!r}")
        values = np.asarray(self.values)
        shape = (len(self.axis1), len(self.axis2))
        if values.shape != shape:
            raise ValueError(f"map has shape {values.shape}, axes imply {shape}")
        singular = (np.zeros(shape, dtype=bool) if self.singular is None
                    else np.asarray(self.singular, dtype=bool))
        if singular.shape != shape:
            raise ValueError("singular mask does not match the map shape")
        if np.any(~np.isfinite(values) & ~singular):
            raise ValueError("map holds non-finite values in cells not flagged singular")
        values.flags.writeable = False
        singular.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "singular", singular)

    @property
    def n_singular(self) -> int:
        return int(np.count_nonzero(self.singular))


@dataclass(frozen=True)
class DetuningSpec:
    """Field detuning ``delta_m`` and probe detuning ``delta`` from the cavity, both MHz."""

    delta_m: float
    delta: float = 0.0

    def magnon_frequency(self, f_c: float) -> float:
        return f_c + self.delta_m / MHZ_PER_GHZ

    def bias_field(self, magnon: MagnonMode, f_c: float) -> float:
        """Bias field (mT) placing the magnon at ``f_c + delta_m``."""
        f_m = self.magnon_frequency(f_c)
        if not f_m > 0:
            raise DomainError(f"field detuning {self.delta_m} MHz gives a non-positive magnon frequency")
        return magnon.bias_for(f_m)


# ---------------------------------------------------------------------------
# default grids


def default_frequency_axis(cavity: CavityMode, points: int = DEFAULT_POINTS,
                           linewidths: float = DEFAULT_LINEWIDTHS) -> SweepAxis:
    """``f_c`` plus or minus ten dip linewidths ``2|beta|`` (the loaded width at critical coupling)."""
    width = 2 * abs(cavity.beta) or cavity.linewidth
    half = linewidths * width / MHZ_PER_GHZ
    return SweepAxis.linspace("frequency", cavity.f_c - half, cavity.f_c + half, points)


def default_phase_axis(points: int = DEFAULT_PHASE_POINTS) -> SweepAxis:
    return SweepAxis.linspace("delta_phi", 0.0, 2 * math.pi, points)


def default_detuning_axis(points: int = DEFAULT_DETUNING_POINTS,
                          span: float = DEFAULT_DETUNING_SPAN) -> SweepAxis:
    return SweepAxis.linspace("bias_field", -span, span, points)


# ---------------------------------------------------------------------------
# helpers


def _expect(axis, name):
    if axis.name != name:
        raise ValueError(f"expected a {name} axis, got {axis.name}")


def _map_rows(func, items, jobs):
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(func, items))
    return [func(item) for item in items]


def transmission_minima(sys: CoupledSystem, grid: np.ndarray, values: np.ndarray,
                        max_count: int = 2, min_prominence_db: float = 0.5) -> np.ndarray:
    """Frequencies (GHz) of the deepest local minima of ``|S21|`` on ``grid``.

    Grid minima with at least ``min_prominence_db`` of prominence are refined
    on the model between their neighbours, so the result does not depend on
    the grid step beyond bracketing. Returned in increasing frequency.
    """
    mag = np.abs(values)
    db = 20 * np.log10(np.maximum(mag, 1e-300))
    peaks, props = find_peaks(-db, prominence=min_prominence_db)
    if peaks.size == 0:
        return np.array([])
    keep = peaks[np.argsort(-props["prominences"])[:max_count]]
    refined = []
    for i in keep:
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        res = minimize_scalar(lambda f: abs(coupled_s21(f, sys)), bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-12})
        refined.append(res.x)
    return np.sort(np.array(refined))


def _splitting(minima):
    return float((minima[-1] - minima[0]) * MHZ_PER_GHZ) if minima.size >= 2 else 0.0


# ---------------------------------------------------------------------------
# phase sweep


@dataclass(frozen=True)
class PhaseSweepResult:
    """Amplitude and group-delay maps over (delta_phi, frequency).

    ``on_resonance`` is ``1/|S21|`` at the bare cavity frequency per phase;
    ``splitting`` the separation (MHz) of the two deepest dips, 0 for one dip.
    """

    amplitude: SweepMap
    group_delay: SweepMap
    on_resonance: np.ndarray
    splitting: np.ndarray
    undersampled_rows: int = 0

    @property
    def max_splitting_phase(self) -> float:
        return float(self.amplitude.axis1.samples[int(np.argmax(self.splitting))])


def phase_sweep(sys: CoupledSystem, phis: Optional[SweepAxis] = None, freqs: Optional[SweepAxis] = None,
                jobs: int = 1, resonance_tol: float = 1e-9) -> PhaseSweepResult:
    """Transmission versus phase-shifter setting with the magnon at the cavity frequency."""
    if abs(sys.magnon.frequency - sys.cavity.f_c) > resonance_tol:
        raise ValueError(
            f"phase sweep needs f_m = f_c (got f_m={sys.magnon.frequency!r}, f_c={sys.cavity.f_c!r} GHz); "
            "use sys.at_resonance()"
        )
    phis = phis or default_phase_axis()
    freqs = freqs or default_frequency_axis(sys.cavity)
    _expect(phis, "delta_phi")
    _expect(freqs, "frequency")
    grid = freqs.samples

    def row(phi):
        s = sys.with_delta_phi(phi)
        values = coupled_s21(grid, s)
        gd = group_delay(Spectrum(grid, values, "synthetic"), warn=False)
        return (np.abs(values), gd.tau, gd.singular, 1.0 / abs(coupled_s21(sys.cavity.f_c, s)),
                _splitting(transmission_minima(s, grid, values)), gd.undersampled)

    rows = _map_rows(row, phis.samples, jobs)
    amp = np.array([r[0] for r in rows])
    undersampled = sum(r[5] for r in rows)
    if undersampled:
        warnings.warn(f"group delay undersampled in {undersampled} of {len(rows)} phase rows; "
                      "refine the frequency grid for accurate delays", UndersampledWarning, stacklevel=2)
    return PhaseSweepResult(
        amplitude=SweepMap(phis, freqs, amp, "amplitude", amp == 0),
        group_delay=SweepMap(phis, freqs, np.array([r[1] for r in rows]), "group_delay",
                             np.array([r[2] for r in rows])),
        on_resonance=np.array([r[3] for r in rows]),
        splitting=np.array([r[4] for r in rows]),
        undersampled_rows=undersampled,
    )


# ---------------------------------------------------------------------------
# field sweep


@dataclass(frozen=True)
class FieldSweepResult:
    """Amplitude map over (Delta_m, frequency) and the anti-crossing summary.

    ``branches`` holds the lower and upper dip frequency (GHz) per detuning,
    NaN where a branch has no dip. ``coupling`` is half the dip separation
    at ``Delta_m = 0``; ``cooperativity`` is None when ``alpha`` or ``beta``
    vanishes.
    """

    amplitude: SweepMap
    bias_fields: np.ndarray
    branches: np.ndarray
    separation: float
    min_separation: float
    coupling: float
    cooperativity: Optional[float]


def _track_branches(columns, center):
    """Continuity assignment of up to two minima per column to lower/upper branches."""
    n = len(columns)
    out = np.full((n, 2), np.nan)

    def assign(i, previous):
        found = columns[i]
        if found.size == 2:
            out[i] = found
        elif found.size == 1:
            ref = np.where(np.isnan(previous), np.inf, np.abs(previous - found[0]))
            out[i, int(np.argmin(ref))] = found[0]
        return np.where(np.isnan(out[i]), previous, out[i])

    last = assign(center, np.array([np.nan, np.nan]))
    start = last
    for i in range(center + 1, n):
        last = assign(i, last)
    last = start
    for i in range(center - 1, -1, -1):
        last = assign(i, last)
    return out


def field_sweep(sys: CoupledSystem, detunings: Optional[SweepAxis] = None, freqs: Optional[SweepAxis] = None,
                jobs: int = 1) -> FieldSweepResult:
    """Transmission versus magnon field detuning at the system's fixed phase."""
    detunings = detunings or default_detuning_axis()
    freqs = freqs or default_frequency_axis(sys.cavity)
    _expect(detunings, "bias_field")
    _expect(freqs, "frequency")
    fields = np.array([DetuningSpec(d).bias_field(sys.magnon, sys.cavity.f_c) for d in detunings.samples])
    grid = freqs.samples

    def row(delta_m):
        s = sys.with_field_detuning(delta_m)
        values = coupled_s21(grid, s)
        return np.abs(values), transmission_minima(s, grid, values)

    rows = _map_rows(row, detunings.samples, jobs)
    amp = np.array([r[0] for r in rows])
    center = int(np.argmin(np.abs(detunings.samples)))
    branches = _track_branches([r[1] for r in rows], center)
    gaps = (branches[:, 1] - branches[:, 0]) * MHZ_PER_GHZ
    min_sep = float(np.nanmin(gaps)) if np.any(np.isfinite(gaps)) else math.nan

    resonant = sys.at_resonance()
    separation = _splitting(transmission_minima(resonant, grid, coupled_s21(grid, resonant)))
    g = separation / 2
    try:
        coop = cooperativity(g, sys.magnon.alpha, sys.cavity.beta)
    except SingularCooperativityError:
        coop = None
    return FieldSweepResult(SweepMap(detunings, freqs, amp, "amplitude", amp == 0), fields, branches,
                            separation, min_sep, g, coop)


# ---------------------------------------------------------------------------
# spacing sweep


@dataclass(frozen=True)
class SpacingSweepResult:
    """Bare-cavity maps over (d, frequency) with the critical-coupling traces.

    ``tau_at_resonance`` is the analytic group delay at ``f_c(d)`` (ns), NaN
    (and counted in ``n_singular``) exactly at ``beta = 0``.
    """

    amplitude: SweepMap
    beta: np.ndarray
    tau_at_resonance: np.ndarray
    s21_at_resonance: np.ndarray
    critical: CriticalSpacingResult

    @property
    def n_singular(self) -> int:
        return int(np.count_nonzero(np.isnan(self.tau_at_resonance))) + self.amplitude.n_singular


def spacing_sweep(table: CalibrationTable, spacings: SweepAxis, freqs: Optional[SweepAxis] = None,
                  jobs: int = 1) -> SpacingSweepResult:
    """Bare-cavity transmission across the calibrated spacing range (no extrapolation)."""
    _expect(spacings, "spacing_d")
    d = spacings.samples
    if d.min() < table.d[0] or d.max() > table.d[-1]:
        raise RangeError(f"spacings span [{d.min()}, {d.max()}] mm, table covers "
                         f"[{table.d[0]}, {table.d[-1]}] mm")
    cavities = [table.cavity_at(di) for di in d]
    if freqs is None:
        widest = max(cavities, key=lambda c: c.linewidth)
        half = DEFAULT_LINEWIDTHS * widest.linewidth / MHZ_PER_GHZ
        mid = 0.5 * (min(c.f_c for c in cavities) + max(c.f_c for c in cavities))
        freqs = SweepAxis.linspace("frequency", mid - half, mid + half, DEFAULT_POINTS)
    _expect(freqs, "frequency")
    grid = freqs.samples
    amp = np.array(_map_rows(lambda c: np.abs(bare_cavity_s21(grid, c)), cavities, jobs))
    critical = find_critical_spacing(table) if len(table) >= 4 else CriticalSpacingResult(
        min_abs_beta=float(np.min(np.abs(table.beta))))
    return SpacingSweepResult(
        amplitude=SweepMap(spacings, freqs, amp, "amplitude", amp == 0),
        beta=np.array([c.beta for c in cavities]),
        tau_at_resonance=np.array([bare_cavity_group_delay(c.f_c, c) for c in cavities], dtype=float),
        s21_at_resonance=np.array([abs(bare_cavity_s21(c.f_c, c)) for c in cavities]),
        critical=critical,
    )


# ---------------------------------------------------------------------------
# synthetic data


def synthesize_spectrum(source: Union[CoupledSystem, CavityMode], freqs: SweepAxis, noise_sigma: float = 0.0,
                        seed: int = 0) -> Spectrum:
    """Model spectrum plus complex Gaussian noise.

    ``noise_sigma`` is the standard deviation of the real and of the
    imaginary part, each drawn independently per sample from
    ``numpy.random.default_rng(seed)``.
    """
    if not noise_sigma >= 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma!r}")
    _expect(freqs, "frequency")
    grid = freqs.samples
    if isinstance(source, CavityMode):
        values = bare_cavity_s21(grid, source)
    elif isinstance(source, CoupledSystem):
        values = coupled_s21(grid, source)
    else:
        raise TypeError(f"cannot synthesize from {type(source).__name__}")
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        values = values + noise_sigma * (rng.standard_normal(grid.size) + 1j * rng.standard_normal(grid.size))
    return Spectrum(grid, values, "synthetic", noise_sigma=float(noise_sigma))
