"""Inverse pipeline: lineshape fits, damping and coupling extraction, critical coupling.

All optimisers are damped least squares (``scipy.optimize.least_squares``)
with fixed tolerances, so identical inputs give bit-identical reports.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.ndimage import uniform_filter1d
from scipy.optimize import bisect, least_squares
from scipy.signal import find_peaks

from magnoncav.model import (
    MHZ_PER_GHZ,
    PHYSICS,
    CavityMode,
    ComplexModePair,
    CoupledSystem,
    Spectrum,
    coupled_s21,
    coupling_from_modes,
    effective_damping,
)

XTOL = 1e-9
GTOL = 1e-10
FTOL = 1e-15
MAX_ITERATIONS = 500
FD_STEP = 1e-6


class AmbiguousLineshapeError(ValueError):
    """A single-resonance fit was asked of a spectrum with several dips."""


class IdentifiabilityError(ValueError):
    """The data cannot constrain the requested parameters."""


class IdentifiabilityWarning(UserWarning):
    pass


class CalibrationError(ValueError):
    """Invalid calibration table; ``violations`` lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class RangeError(ValueError):
    """A spacing lies outside the calibrated range (no extrapolation)."""


@dataclass
class FitReport:
    parameters: dict
    stderr: dict
    iterations: int
    converged: bool
    residual: float
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "parameters": {k: float(v) for k, v in self.parameters.items()},
            "stderr": {k: float(v) for k, v in self.stderr.items()},
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "residual": float(self.residual),
            "message": self.message,
        }


def _solve(fun, x0, names, jac="2-point", bounds=(-np.inf, np.inf), x_scale=1.0):
    """Run the damped least-squares solver; returns (x, covariance, report)."""
    # degenerate inputs (featureless spectra) may overflow inside the solver;
    # that shows up as a non-finite residual and converged=False
    with np.errstate(all="ignore"):
        result = least_squares(
            fun, np.asarray(x0, dtype=float), jac=jac, bounds=bounds, method="trf",
            xtol=XTOL, gtol=GTOL, ftol=FTOL, max_nfev=MAX_ITERATIONS, diff_step=FD_STEP,
            x_scale=x_scale,
        )
        m, n = result.fun.size, result.x.size
        s2 = 2 * result.cost / max(m - n, 1)
        J = result.jac
        finite = bool(np.all(np.isfinite(J)) and np.all(np.isfinite(result.x)))
        cov = np.linalg.pinv(J.T @ J) * s2 if finite else np.full((n, n), np.nan)
        stderr = np.sqrt(np.clip(np.diag(cov), 0, None))
        residual = math.sqrt(2 * result.cost / m)
    converged = bool(result.status > 0 and finite and math.isfinite(residual))
    report = FitReport(
        parameters=dict(zip(names, map(float, result.x))),
        stderr=dict(zip(names, map(float, stderr))),
        iterations=int(result.nfev),
        converged=converged,
        residual=residual,
        message=str(result.message),
    )
    return result.x, cov, report


def _stack(z):
    return np.concatenate([z.real, z.imag])


def _stack_jac(cols):
    J = np.column_stack(cols)
    return np.vstack([J.real, J.imag])


def _axis(spectrum: Spectrum):
    """Detuning (MHz) from the grid midpoint, and the midpoint (GHz)."""
    ref = 0.5 * (spectrum.grid[0] + spectrum.grid[-1])
    return (spectrum.grid - ref) * MHZ_PER_GHZ, ref


def _local_step(x, i):
    lo, hi = max(i - 1, 0), min(i + 1, x.size - 1)
    return (x[hi] - x[lo]) / (hi - lo)


def _dip_indices(magnitude, min_prominence=0.1):
    """Indices of prominent local minima of a lightly smoothed ``|S21|`` in dB.

    Deep dips separated by a shallow hump are only distinguishable on a
    log scale, so prominence is measured relative to the dB range.
    """
    n = magnitude.size
    size = max(1, (n // 200) | 1)
    db = 20 * np.log10(np.maximum(magnitude, 1e-15))
    smooth = uniform_filter1d(db, size=size, mode="nearest")
    depth = smooth.max() - smooth.min()
    if depth <= 0:
        return np.array([], dtype=int)
    peaks, props = find_peaks(-smooth, prominence=min_prominence * depth)
    order = np.argsort(-props["prominences"])
    return peaks[order]


# ---------------------------------------------------------------------------
# single resonance


@dataclass
class LorentzianFit:
    """Lorentzian fit of ``1/|S21|^2``: center (GHz), hwhm (MHz), amplitude, baseline."""

    center: float
    hwhm: float
    amplitude: float
    baseline: float
    residual: float
    degenerate: bool
    report: FitReport


def fit_inverse_lorentzian(spectrum: Spectrum) -> LorentzianFit:
    """Fit ``A beta^2 / ((f - f_c)^2 + beta^2) + baseline`` to ``1/|S21|^2``.

    The inverse squared transmission of a single cavity is exactly this
    Lorentzian with HWHM ``|beta|``. Residuals are taken in power, between
    ``|S21|^2`` and the reciprocal of the Lorentzian, because additive noise
    biases the power only by the constant ``2 sigma^2`` (subtracted when the
    spectrum carries ``noise_sigma``) while its reciprocal is biased
    nonlinearly. Weights come from the current model, never from the noisy
    samples.

    Raises
    ------
    AmbiguousLineshapeError
        If more than one dip is present; use :func:`fit_two_resonances`.
    """
    mag = spectrum.magnitude
    dips = _dip_indices(mag)
    if dips.size > 1:
        raise AmbiguousLineshapeError(
            f"{dips.size} dips found in |S21|; a single Lorentzian is ambiguous, "
            "use fit_two_resonances instead"
        )
    x, ref = _axis(spectrum)
    power = mag**2 - 2 * (spectrum.noise_sigma or 0.0) ** 2
    with np.errstate(divide="ignore", over="ignore"):
        y = 1.0 / mag**2

    i_min = int(np.argmin(mag))
    c0 = x[i_min]
    b0 = float(y.min())
    a0 = float(min(y.max(), 1e12) - b0)
    y = np.minimum(y, 1e12)
    above = np.flatnonzero(y - b0 >= a0 / 2)
    w0 = 0.5 * (x[above[-1]] - x[above[0]]) if above.size > 1 else _local_step(x, i_min)
    w0 = max(w0, 1e-3 * _local_step(x, i_min))
    weight = np.ones_like(x)

    def lorentz(p):
        c, w, a, b = p
        u = (x - c) ** 2 + w**2
        return a * w**2 / u + b, u

    def residual(p):
        lor, _ = lorentz(p)
        return (1.0 / lor - power) * weight

    def jac(p):
        c, w, a, b = p
        lor, u = lorentz(p)
        d_lor = np.column_stack([
            a * w**2 * 2 * (x - c) / u**2,
            a * 2 * w * (x - c) ** 2 / u**2,
            w**2 / u,
            np.ones_like(x),
        ])
        return -d_lor * (weight / lor**2)[:, None]

    names = ["center", "hwhm", "amplitude", "baseline"]
    x_scale = [w0, w0, max(a0, 1.0), max(abs(b0), 1.0)]
    p = np.array([c0, w0, a0, b0])
    for _ in range(3):
        # noise on |S|^2 has std ~ 2 |S| sigma
        model_mag = np.sqrt(1.0 / np.maximum(lorentz(p)[0], 1e-300))
        weight[:] = 1.0 / np.maximum(model_mag / model_mag.max(), 1e-3)
        p, _, report = _solve(residual, p, names, jac=jac, x_scale=x_scale)
    center = float(ref + p[0] / MHZ_PER_GHZ)
    hwhm = abs(float(p[1]))
    report.parameters["center"] = center
    report.stderr["center"] = report.stderr["center"] / MHZ_PER_GHZ
    report.parameters["hwhm"] = hwhm
    i_center = int(np.argmin(np.abs(x - p[0])))
    degenerate = bool(hwhm < _local_step(x, i_center))
    return LorentzianFit(center, hwhm, float(p[2]), float(p[3]), report.residual, degenerate, report)


# ---------------------------------------------------------------------------
# bare cavity


@dataclass
class BareCavityFit:
    """Result of :func:`fit_bare_cavity`.

    ``cavity`` is None for amplitude-only data, where only ``kappa_sum`` and
    ``|beta|`` are identifiable (both in ``report.parameters``).
    """

    cavity: Optional[CavityMode]
    report: FitReport
    beta: float
    beta_stderr: float

    @property
    def identifiable(self) -> bool:
        return self.cavity is not None


def _bare_linear_guess(x, s):
    # s (x - c + i G) = x - c + i b  ->  s x - x = u s + v,  u = c - iG, v = ib - c
    A = np.column_stack([s, np.ones_like(s)])
    (u, v), *_ = np.linalg.lstsq(A, s * x - x, rcond=None)
    c = 0.5 * (u.real - v.real)
    return c, -u.imag, v.imag


def fit_bare_cavity(spectrum: Spectrum, beta0: float) -> BareCavityFit:
    """Fit the single-cavity transmission with fixed intrinsic damping ``beta0``.

    Complex residuals are minimised when phase is available. Amplitude-only
    spectra determine ``kappa_cL + kappa_cR`` and ``|beta|`` but not the sign
    of ``kappa_cL - kappa_cR - 2 beta0``; those combinations are returned with
    an :class:`IdentifiabilityWarning` and ``cavity=None``.
    """
    if beta0 < 0:
        raise ValueError(f"beta0 must be >= 0, got {beta0!r}")
    if not spectrum.has_phase:
        return _fit_bare_amplitude(spectrum, beta0)
    x, ref = _axis(spectrum)
    s = spectrum.in_convention(PHYSICS)
    c0, loaded0, beta_guess = _bare_linear_guess(x, s)
    loaded0 = max(loaded0, beta0, abs(beta_guess), 1e-6)
    kl0 = max(loaded0 + beta_guess - 2 * beta0, 1e-6)
    kr0 = max(loaded0 - beta_guess, 1e-6)

    def parts(p):
        c, kl, kr = p
        beta = beta0 + kl / 2 - kr / 2
        loaded = beta0 + kl / 2 + kr / 2
        u = x - c + 1j * loaded
        return c, beta, loaded, u

    def residual(p):
        c, beta, loaded, u = parts(p)
        return _stack((x - c + 1j * beta) / u - s)

    def jac(p):
        c, beta, loaded, u = parts(p)
        model = (x - c + 1j * beta) / u
        d_c = -1j * (loaded - beta) / u**2
        d_beta = 1j / u
        d_loaded = -1j * model / u
        return _stack_jac([d_c, 0.5 * (d_beta + d_loaded), 0.5 * (d_loaded - d_beta)])

    scale = max(loaded0, 1.0)
    p, cov, report = _solve(residual, [c0, kl0, kr0], ["f_c", "kappa_cL", "kappa_cR"], jac=jac,
                            bounds=([-np.inf, 0, 0], [np.inf, np.inf, np.inf]), x_scale=[scale] * 3)
    f_c = float(ref + p[0] / MHZ_PER_GHZ)
    report.parameters["f_c"] = f_c
    report.stderr["f_c"] /= MHZ_PER_GHZ
    beta = effective_damping(beta0, p[1], p[2])
    grad = np.array([0.0, 0.5, -0.5])
    beta_err = float(math.sqrt(max(grad @ cov @ grad, 0.0)))
    report.parameters["beta"] = beta
    report.stderr["beta"] = beta_err
    cavity = CavityMode(float(f_c), beta0, float(p[1]), float(p[2]))
    return BareCavityFit(cavity, report, beta, beta_err)


def _fit_bare_amplitude(spectrum, beta0):
    warnings.warn(
        "amplitude-only data: kappa_cL and kappa_cR are not separately identifiable; "
        "reporting kappa_sum and |beta|",
        IdentifiabilityWarning,
        stacklevel=3,
    )
    lor = fit_inverse_lorentzian(spectrum)
    x, ref = _axis(spectrum)
    m = spectrum.magnitude
    c0 = (lor.center - ref) * MHZ_PER_GHZ
    b0 = max(lor.hwhm, 1e-6)
    loaded0 = b0 * math.sqrt(max(1.0 + lor.amplitude / max(lor.baseline, 1e-12), 1.0))

    def residual(p):
        c, b, g = p
        return np.sqrt((x - c) ** 2 + b**2) / np.sqrt((x - c) ** 2 + g**2) - m

    p, cov, report = _solve(residual, [c0, b0, loaded0], ["f_c", "beta_abs", "loaded"],
                            bounds=([-np.inf, 0, 0], [np.inf, np.inf, np.inf]))
    kappa_sum = float(2 * (p[2] - beta0))
    report.parameters["f_c"] = float(ref + p[0] / MHZ_PER_GHZ)
    report.stderr["f_c"] /= MHZ_PER_GHZ
    report.parameters["kappa_sum"] = kappa_sum
    report.stderr["kappa_sum"] = 2 * report.stderr["loaded"]
    # kappa_cL - kappa_cR = 2 (beta - beta0) with beta = +|beta| or -|beta|
    report.parameters["kappa_diff_if_beta_positive"] = float(2 * (p[1] - beta0))
    report.parameters["kappa_diff_if_beta_negative"] = float(2 * (-p[1] - beta0))
    return BareCavityFit(None, report, float(p[1]), report.stderr["beta_abs"])


# ---------------------------------------------------------------------------
# two resonances


@dataclass
class TwoResonanceFit:
    """Resonances of ``1/S21`` (transmission zeros) and the fitted poles, MHz.

    ``degenerate`` marks a fallback to a single resonance, in which case both
    entries of ``pair`` are that resonance.
    """

    pair: ComplexModePair
    poles: tuple
    report: FitReport
    degenerate: bool


def _rational_guess(x, s, order, iterations=4):
    """Sanathanan-Koerner linearised fit of ``s = n(x) / d(x)``, ``d`` monic."""
    weight = np.ones_like(x)
    for _ in range(iterations):
        # s d(x) - n(x) = 0 with d = x^k + d_{k-1} x^{k-1} + ...
        cols = [-s * x**j for j in range(order)] + [x**j + 0j for j in range(order + 1)]
        A = np.column_stack(cols) / weight[:, None]
        rhs = s * x**order / weight
        coef, *_ = np.linalg.lstsq(A, rhs, rcond=None)
        d = np.concatenate([[1.0], coef[:order][::-1]])
        n = coef[order:][::-1]
        weight = np.abs(np.polyval(d, x))
        weight = np.where(weight > 0, weight, 1.0)
    return n, d


def _two_roots(coef):
    """Both roots of a quadratic; a vanishing leading term puts a root far outside the window."""
    coef = np.asarray(coef, dtype=complex)
    roots = np.roots(coef) if np.all(np.isfinite(coef)) else np.array([])
    return np.concatenate([roots, np.full(2 - roots.size, 1e3 + 0j)])


def _unpack_roots(p, k):
    return p[0:2 * k:2] + 1j * p[1:2 * k:2]


def fit_two_resonances(spectrum: Spectrum, force: bool = False) -> TwoResonanceFit:
    """Two-resonance fit of ``1/S21``.

    The model is ``1/S21 = A (x - p1)(x - p2) / ((x - z1)(x - z2))``; the
    resonances ``z1, z2`` (the transmission zeros) are returned as a
    :class:`ComplexModePair` in MHz. Complex data are fitted directly; for
    amplitude-only data the damping signs are not identifiable and are taken
    positive.

    Unless ``force`` is set, a spectrum with fewer than two dips, or a fit
    whose resonances coincide, leave the frequency window or cancel against
    a pole, falls back to a single resonance with ``degenerate=True``.
    """
    x, ref = _axis(spectrum)
    scale = 0.5 * (x[-1] - x[0])
    xs = x / scale
    dips = _dip_indices(spectrum.magnitude)
    if dips.size < 2 and not force:
        return _single_fallback(spectrum, x, ref, scale, "fewer than two dips")
    if spectrum.has_phase:
        fit = _two_complex(spectrum, xs, ref, scale)
    else:
        fit = _two_amplitude(spectrum, xs, ref, scale, dips)
    z = [fit.pair.plus, fit.pair.minus]
    lo, hi = ref * MHZ_PER_GHZ + x[0], ref * MHZ_PER_GHZ + x[-1]
    inside = all(lo <= zi.real <= hi for zi in z)
    distinct = abs(z[0] - z[1]) > 1e-9 * scale
    # a zero sitting on a pole is a resonance invisible in transmission
    visible = min(abs(zi - pi) for zi in z for pi in fit.poles) > 1e-6 * scale
    if not (fit.report.converged and inside and distinct and visible):
        return _single_fallback(spectrum, x, ref, scale, "two resonances not resolvable")
    return fit


def _two_complex(spectrum, xs, ref, scale):
    s = spectrum.in_convention(PHYSICS)
    n, d = _rational_guess(xs, s, 2)
    zeros, poles = _two_roots(n), _two_roots(d)
    gain = n[0] if n[0] != 0 else 1.0
    p0 = []
    for r in list(zeros[:2]) + list(poles[:2]) + [gain]:
        p0 += [r.real, r.imag]

    def model(p):
        z = _unpack_roots(p, 2)
        pol = _unpack_roots(p[4:], 2)
        g = p[8] + 1j * p[9]
        return g * (xs - z[0]) * (xs - z[1]) / ((xs - pol[0]) * (xs - pol[1])), z, pol, g

    def residual(p):
        return _stack(model(p)[0] - s)

    def jac(p):
        m, z, pol, g = model(p)
        cols = []
        for zi in z:
            dz = -m / (xs - zi)
            cols += [dz, 1j * dz]
        for pi in pol:
            dp = m / (xs - pi)
            cols += [dp, 1j * dp]
        cols += [m / g, 1j * m / g]
        return _stack_jac(cols)

    names = ["z1_re", "z1_im", "z2_re", "z2_im", "p1_re", "p1_im", "p2_re", "p2_im", "gain_re", "gain_im"]
    p, _, report = _solve(residual, p0, names, jac=jac)
    return _package_two(p, report, ref, scale)


def _two_amplitude(spectrum, xs, ref, scale, dips):
    m = spectrum.magnitude
    if dips.size >= 2:
        seeds = np.sort(xs[dips[:2]])
    else:
        seeds = np.array([xs[np.argmin(m)] - 0.05, xs[np.argmin(m)] + 0.05])
    step = xs[1] - xs[0]
    width = max(5 * step, 0.02)
    p0 = [seeds[0], -width, seeds[1], -width, seeds.mean(), -1.0, seeds.mean(), -1.0, float(m.max()), 0.0]

    def residual(p):
        z = _unpack_roots(p, 2)
        pol = _unpack_roots(p[4:], 2)
        g = abs(p[8] + 1j * p[9])
        return g * np.abs((xs - z[0]) * (xs - z[1]) / ((xs - pol[0]) * (xs - pol[1]))) - m

    names = ["z1_re", "z1_im", "z2_re", "z2_im", "p1_re", "p1_im", "p2_re", "p2_im", "gain_re", "gain_im"]
    lower = [-np.inf, -np.inf, -np.inf, -np.inf, -np.inf, -np.inf, -np.inf, -np.inf, 0.0, -1e-12]
    upper = [np.inf, 0.0, np.inf, 0.0, np.inf, 0.0, np.inf, 0.0, np.inf, 1e-12]
    p0 = np.clip(p0, np.array(lower) + 1e-12, np.array(upper) - 1e-12)
    p, _, report = _solve(residual, p0, names, bounds=(lower, upper))
    report.message += " (amplitude only: damping signs assumed positive)"
    return _package_two(p, report, ref, scale)


def _package_two(p, report, ref, scale):
    base = ref * MHZ_PER_GHZ
    z = _unpack_roots(p, 2) * scale + base
    pol = _unpack_roots(p[4:], 2) * scale + base
    for k, name in enumerate(["z1_re", "z1_im", "z2_re", "z2_im", "p1_re", "p1_im", "p2_re", "p2_im"]):
        offset = base if name.endswith("_re") else 0.0
        report.parameters[name] = report.parameters[name] * scale + offset
        report.stderr[name] *= scale
    pair = ComplexModePair.ordered(z[0], z[1])
    return TwoResonanceFit(pair, (complex(pol[0]), complex(pol[1])), report, False)


def _single_fallback(spectrum, x, ref, scale, why):
    xs = x / scale
    if spectrum.has_phase:
        s = spectrum.in_convention(PHYSICS)
        n, d = _rational_guess(xs, s, 1)
        z = -n[1] / n[0] if n[0] != 0 else xs[np.argmin(np.abs(s))]
        pole = np.roots(d)[0]
        gain = n[0] if n[0] != 0 else 1.0
        p0 = [z.real, z.imag, pole.real, pole.imag, gain.real, gain.imag]

        def residual(p):
            zz, pp, g = p[0] + 1j * p[1], p[2] + 1j * p[3], p[4] + 1j * p[5]
            return _stack(g * (xs - zz) / (xs - pp) - s)

        names = ["z_re", "z_im", "p_re", "p_im", "gain_re", "gain_im"]
        p, _, report = _solve(residual, p0, names)
        zero = complex(p[0], p[1]) * scale + ref * MHZ_PER_GHZ
        pole = complex(p[2], p[3]) * scale + ref * MHZ_PER_GHZ
    else:
        lor = fit_inverse_lorentzian(spectrum)
        report = lor.report
        zero = complex(lor.center * MHZ_PER_GHZ, -lor.hwhm)
        pole = complex(np.nan, np.nan)
    report.message = f"{why}; single-resonance fallback. {report.message}"
    return TwoResonanceFit(ComplexModePair(zero, zero, True), (pole, pole), report, True)


def extract_coupling_vs_phase(dataset: Sequence, cavity_tilde: complex, magnon_tilde: complex,
                              jobs: int = 1, source: str = "zeros") -> list:
    """Coupling ``G`` per phase from two-resonance fits.

    ``dataset`` holds ``(phi, Spectrum)`` pairs; the result holds
    ``(phi, CouplingResult or None)`` ordered by phi, None marking a spectrum
    whose two resonances could not be resolved.

    ``source="zeros"`` feeds the transmission zeros (the ``1/S21``
    resonances) to the coupling formula, to be paired with the half-loaded
    references ``f - i*beta`` and ``f - i*alpha``. ``source="poles"`` uses
    the fitted hybridized modes instead, whose uncoupled references are the
    fully loaded ``f_c - i(beta0 + kappa_c)`` and ``f_m - i(alpha0 + kappa_m)``.
    At ``delta = 1`` the zeros sit at the bare modes whatever the phase, so
    only the pole route sees the conventional coupling.
    """
    if source not in ("zeros", "poles"):
        raise ValueError(f"source must be 'zeros' or 'poles', got {source!r}")
    items = sorted(dataset, key=lambda item: item[0])

    def one(item):
        phi, spectrum = item
        try:
            fit = fit_two_resonances(spectrum, force=True)
        except (ValueError, np.linalg.LinAlgError):
            return phi, None
        if fit.degenerate or not fit.report.converged:
            return phi, None
        pair = fit.pair if source == "zeros" else ComplexModePair.ordered(*fit.poles)
        return phi, coupling_from_modes(pair, cavity_tilde, magnon_tilde)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, items))
    return [one(item) for item in items]


# ---------------------------------------------------------------------------
# calibration table and critical coupling


_COLUMNS = ("d", "f_c", "kappa_cL", "kappa_cR", "beta0")


@dataclass(frozen=True, eq=False)
class CalibrationTable:
    """Cavity parameters versus lateral spacing ``d`` (mm), stored with ``d`` ascending.

    A strictly decreasing table is reversed; any other ordering is rejected.
    """

    d: np.ndarray
    f_c: np.ndarray
    kappa_cL: np.ndarray
    kappa_cR: np.ndarray
    beta0: np.ndarray

    def __post_init__(self):
        arrays = {name: np.array(getattr(self, name), dtype=float).ravel() for name in _COLUMNS}
        violations = []
        n = arrays["d"].size
        for name, arr in arrays.items():
            if arr.size != n:
                violations.append(f"column {name} has {arr.size} rows, expected {n}")
            elif not np.all(np.isfinite(arr)):
                violations.append(f"column {name} has non-finite entries at rows {np.flatnonzero(~np.isfinite(arr)).tolist()}")
        for name in ("kappa_cL", "kappa_cR", "beta0"):
            arr = arrays[name]
            if arr.size == n:
                bad = np.flatnonzero(arr < 0)
                if bad.size:
                    violations.append(f"negative {name} at rows {bad.tolist()}")
        if n < 2:
            violations.append("a calibration table needs at least 2 rows")
        d = arrays["d"]
        if np.all(np.isfinite(d)):
            values, counts = np.unique(d, return_counts=True)
            if np.any(counts > 1):
                violations.append(f"duplicate d values {values[counts > 1].tolist()}")
            else:
                steps = np.diff(d)
                if not (np.all(steps > 0) or np.all(steps < 0)):
                    violations.append("d is not monotone across rows")
        if violations:
            raise CalibrationError(violations)
        if arrays["d"][0] > arrays["d"][-1]:
            arrays = {k: v[::-1].copy() for k, v in arrays.items()}
        for name, arr in arrays.items():
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def from_rows(cls, rows, sort: bool = False) -> "CalibrationTable":
        """Build from ``(d, f_c, kappa_cL, kappa_cR, beta0)`` rows; ``sort`` orders by d."""
        rows = [tuple(map(float, r)) for r in rows]
        if any(len(r) != 5 for r in rows):
            raise CalibrationError(["every row needs 5 values: d, f_c, kappa_cL, kappa_cR, beta0"])
        if sort:
            rows = sorted(rows, key=lambda r: r[0])
        cols = list(zip(*rows)) if rows else [()] * 5
        return cls(*[np.array(c) for c in cols])

    def __len__(self):
        return self.d.size

    def rows(self) -> list:
        return [tuple(float(getattr(self, c)[i]) for c in _COLUMNS) for i in range(len(self))]

    @property
    def beta(self) -> np.ndarray:
        return self.beta0 + self.kappa_cL / 2 - self.kappa_cR / 2

    @cached_property
    def _interpolants(self):
        return {name: PchipInterpolator(self.d, getattr(self, name)) for name in _COLUMNS[1:]}

    def _check_range(self, d):
        d = np.asarray(d, dtype=float)
        if np.any(d < self.d[0]) or np.any(d > self.d[-1]):
            raise RangeError(f"spacing outside calibrated range [{self.d[0]}, {self.d[-1]}] mm")
        return d

    def beta_at(self, d):
        d = self._check_range(d)
        f = self._interpolants
        return f["beta0"](d) + f["kappa_cL"](d) / 2 - f["kappa_cR"](d) / 2

    def cavity_at(self, d: float) -> CavityMode:
        """Interpolated cavity at spacing ``d``; rates clipped at zero."""
        d = float(self._check_range(d))
        f = self._interpolants
        rates = [max(float(f[name](d)), 0.0) for name in ("beta0", "kappa_cL", "kappa_cR")]
        return CavityMode(float(f["f_c"](d)), *rates)


@dataclass(frozen=True)
class CriticalPoint:
    d: float
    bracket: tuple
    beta: float


@dataclass
class CriticalSpacingResult:
    """Roots of ``beta(d)``; ``min_abs_beta`` is the smallest ``|beta|`` on the table rows."""

    roots: list = field(default_factory=list)
    min_abs_beta: float = math.inf

    def __iter__(self):
        return iter(self.roots)

    def __len__(self):
        return len(self.roots)

    def __getitem__(self, i):
        return self.roots[i]


def find_critical_spacing(table: CalibrationTable, samples_per_interval: int = 32) -> CriticalSpacingResult:
    """Every root of the interpolated effective damping ``beta(d)``.

    Each rate column is interpolated with a monotone piecewise cubic, which
    cannot overshoot and fabricate roots between rows. Sign changes are
    bracketed on a sub-grid and bisected until ``|beta| < 1e-6`` MHz.
    """
    if len(table) < 4:
        raise ValueError(f"critical-coupling search needs >= 4 rows, got {len(table)}")
    t = np.linspace(0.0, 1.0, samples_per_interval + 1)[:-1]
    grid = np.concatenate([lo + t * (hi - lo) for lo, hi in zip(table.d[:-1], table.d[1:])] + [table.d[-1:]])
    grid[::samples_per_interval] = table.d  # rows exactly, not rounded sums
    beta = table.beta_at(grid)
    result = CriticalSpacingResult(min_abs_beta=float(np.min(np.abs(table.beta))))

    def f(d):
        return float(table.beta_at(d))

    for i in range(grid.size):
        if beta[i] == 0.0:
            result.roots.append(CriticalPoint(float(grid[i]), (float(grid[i]), float(grid[i])), 0.0))
        if i + 1 < grid.size and beta[i] * beta[i + 1] < 0:
            lo, hi = float(grid[i]), float(grid[i + 1])
            root = bisect(f, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
            result.roots.append(CriticalPoint(root, (lo, hi), f(root)))
    for point in result.roots:
        if abs(point.beta) >= 1e-6:
            raise ArithmeticError(f"bisection stalled at d={point.d} with beta={point.beta}")
    return result


# ---------------------------------------------------------------------------
# anomaly parameters


@dataclass
class AnomalyFit:
    eta: float
    delta: float
    report: FitReport


_ETA_SEEDS = (1.0, 2.0)
_DELTA_SEEDS = (0.9, 0.99, 0.995, 0.999, 1.0)


def fit_anomaly_params(dataset: Sequence, sys_template: CoupledSystem, axis: str = "delta_phi") -> AnomalyFit:
    """Fit ``eta`` and ``delta`` to a phase or field sweep.

    ``dataset`` holds ``(label, Spectrum)`` pairs where the label is the
    phase-shifter setting (rad) for ``axis="delta_phi"`` or the field
    detuning (MHz) for ``axis="field_detuning"``. Every other parameter comes
    from ``sys_template``. ``eta`` is seeded on {1, 2} and ``delta`` on a
    coarse grid, then both are refined together with ``delta`` in [0, 1].

    Raises
    ------
    IdentifiabilityError
        Fewer than two distinct labels, a phase sweep spanning less than
        pi/2 (half a conventional period), or an objective flat in ``eta``.
    """
    if axis not in ("delta_phi", "field_detuning"):
        raise ValueError(f"unknown axis {axis!r}")
    labels = sorted({float(label) for label, _ in dataset})
    if len(labels) < 2:
        raise IdentifiabilityError("anomaly fit needs spectra at two or more settings")
    if axis == "delta_phi" and labels[-1] - labels[0] < math.pi / 2:
        raise IdentifiabilityError(
            f"phase coverage {labels[-1] - labels[0]:.3g} rad is below half a period (pi/2); "
            "eta cannot be identified"
        )
    prepared = []
    for label, spectrum in dataset:
        sys = (sys_template.with_delta_phi(label) if axis == "delta_phi"
               else sys_template.with_field_detuning(label))
        prepared.append((sys, spectrum))

    def residual(p):
        eta, delta = p
        out = []
        for sys, spectrum in prepared:
            model = coupled_s21(spectrum.grid, sys.with_anomaly(eta, min(max(delta, 0.0), 1.0)))
            if spectrum.has_phase:
                out.append(_stack(model - spectrum.in_convention(PHYSICS)))
            else:
                out.append(np.abs(model) - spectrum.magnitude)
        return np.concatenate(out)

    best = min(((eta, delta) for eta in _ETA_SEEDS for delta in _DELTA_SEEDS),
               key=lambda p: float(np.sum(residual(p) ** 2)))
    eta0, delta0 = best
    bounds = ([max(0.5, eta0 - 0.25), 0.0], [eta0 + 0.25, 1.0])
    x0 = [eta0, min(delta0, 1.0 - 1e-12)]
    p, _, report = _solve(residual, x0, ["eta", "delta"], bounds=bounds, x_scale=[1e-2, 1e-3])

    r0 = residual(p)
    h = 1e-6
    d_eta = (residual([p[0] + h, p[1]]) - r0) / h
    if np.linalg.norm(d_eta) <= 1e-9 * max(np.linalg.norm(r0), 1.0):
        raise IdentifiabilityError("objective is flat in eta; the data carry no phase information")
    return AnomalyFit(float(p[0]), float(p[1]), report)
