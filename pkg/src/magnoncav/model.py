"""Domain types and forward formulas.

Conventions
-----------
* Resonance frequencies (``f_c``, magnon frequency, spectrum grids) are in GHz.
* Damping and extrinsic rates are half-width rates in MHz.
* Complex mode frequencies (``omega - i * damping``) are in MHz, real part
  included, so that real and imaginary parts share a unit.
* The model is written with the ``exp(-i omega t)`` time dependence, in which
  a damped mode sits at ``omega - i * rate``. A vector network analyser
  reports the complex conjugate (``exp(+j omega t)``). :class:`Spectrum`
  records which convention its values use; group delay is always reported
  as ``-d(phase)/d(omega)`` of the analyser-convention phase.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

MHZ_PER_GHZ = 1.0e3

PHYSICS = "physics"
ENGINEERING = "engineering"
_CONVENTIONS = (PHYSICS, ENGINEERING)
_PROVENANCES = ("synthetic", "measured")

# largest phase step between samples before the grid counts as undersampled
# (about 20 samples per full linewidth)
_MAX_PHASE_STEP = 0.1


class DomainError(ValueError):
    """A parameter lies outside the physical domain of an operation."""


class SingularityError(ArithmeticError):
    """The transmission is evaluated exactly at a pole of the model."""


class SingularCooperativityError(ArithmeticError):
    """Cooperativity diverges because a damping rate is exactly zero."""


class UndersampledWarning(UserWarning):
    """The frequency grid resolves a resonance with too few samples."""


def _finite(name, value):
    value = float(value)
    if not math.isfinite(value):
        raise DomainError(f"{name} must be finite, got {value!r}")
    return value


def _nonnegative(name, value):
    value = _finite(name, value)
    if value < 0:
        raise DomainError(f"{name} must be >= 0, got {value!r}")
    return value


def effective_damping(intrinsic: float, kappa_L: float, kappa_R: float) -> float:
    """Net damping of a mode loaded by left- and right-going channels.

    ``intrinsic + kappa_L / 2 - kappa_R / 2``; applies to the cavity (beta)
    and the magnon (alpha) alike. The result may take either sign.
    """
    intrinsic = _nonnegative("intrinsic damping", intrinsic)
    return intrinsic + _finite("kappa_L", kappa_L) / 2 - _finite("kappa_R", kappa_R) / 2


@dataclass(frozen=True)
class CavityMode:
    """Bare cavity resonance.

    Attributes
    ----------
    f_c : float
        Resonance frequency (GHz).
    beta0 : float
        Intrinsic damping (MHz).
    kappa_cL, kappa_cR : float
        Extrinsic rates to the left- and right-going channels (MHz).
    """

    f_c: float
    beta0: float
    kappa_cL: float
    kappa_cR: float

    def __post_init__(self):
        _finite("f_c", self.f_c)
        for name in ("beta0", "kappa_cL", "kappa_cR"):
            _nonnegative(name, getattr(self, name))

    @property
    def beta(self) -> float:
        """Effective damping; negative when over coupled, zero at critical coupling."""
        return effective_damping(self.beta0, self.kappa_cL, self.kappa_cR)

    @property
    def kappa_c(self) -> float:
        return (self.kappa_cL + self.kappa_cR) / 2

    @property
    def loaded_damping(self) -> float:
        """Total damping ``beta0 + kappa_c``; half the loaded transmission linewidth."""
        return self.beta0 + self.kappa_c

    @property
    def linewidth(self) -> float:
        """Loaded full linewidth (MHz)."""
        return 2 * self.loaded_damping

    @property
    def complex_frequency(self) -> complex:
        """``omega_c - i beta`` in MHz."""
        return complex(self.f_c * MHZ_PER_GHZ, -self.beta)


@dataclass(frozen=True)
class MagnonMode:
    """Field-tuned magnon resonance.

    Attributes
    ----------
    gamma_e : float
        Gyromagnetic ratio as linear frequency per field (GHz/T).
    mu0_HA : float
        Anisotropy field (mT).
    mu0_H : float
        Bias field (mT).
    alpha0 : float
        Intrinsic damping (MHz).
    kappa_mL, kappa_mR : float
        Extrinsic rates to the left- and right-going channels (MHz).
    """

    gamma_e: float
    mu0_HA: float
    mu0_H: float
    alpha0: float
    kappa_mL: float
    kappa_mR: float

    def __post_init__(self):
        for name in ("gamma_e", "mu0_HA", "mu0_H"):
            _finite(name, getattr(self, name))
        for name in ("alpha0", "kappa_mL", "kappa_mR"):
            _nonnegative(name, getattr(self, name))

    @property
    def frequency(self) -> float:
        return magnon_frequency(self)

    @property
    def alpha(self) -> float:
        return effective_damping(self.alpha0, self.kappa_mL, self.kappa_mR)

    @property
    def kappa_m(self) -> float:
        return (self.kappa_mL + self.kappa_mR) / 2

    @property
    def complex_frequency(self) -> complex:
        """``omega_m - i alpha`` in MHz."""
        return complex(self.frequency * MHZ_PER_GHZ, -self.alpha)

    def bias_for(self, f_m: float) -> float:
        """Bias field (mT) that puts the magnon at ``f_m`` (GHz)."""
        if not f_m > 0:
            raise DomainError(f"magnon frequency must be positive, got {f_m!r} GHz")
        if self.gamma_e == 0:
            raise DomainError("gamma_e is zero; the magnon cannot be tuned")
        return f_m / self.gamma_e * 1e3 - self.mu0_HA

    def tuned_to(self, f_m: float) -> "MagnonMode":
        return replace(self, mu0_H=self.bias_for(f_m))


def magnon_frequency(magnon: MagnonMode) -> float:
    """Magnon resonance ``gamma_e * mu0 (H + H_A)`` in GHz."""
    field_mT = magnon.mu0_H + magnon.mu0_HA
    if not field_mT > 0:
        raise DomainError(
            f"effective field mu0_H + mu0_HA = {field_mT!r} mT must be positive "
            f"(mu0_H={magnon.mu0_H!r}, mu0_HA={magnon.mu0_HA!r})"
        )
    f_m = magnon.gamma_e * field_mT * 1e-3
    if not f_m > 0:
        raise DomainError(f"gamma_e={magnon.gamma_e!r} gives non-positive frequency {f_m!r} GHz")
    return f_m


@dataclass(frozen=True)
class PhaseLink:
    """Travelling-photon channel between the two resonators.

    ``length_L`` in m, ``wavelength`` (guided) in mm, ``delta_phi`` in rad.
    """

    length_L: float
    wavelength: float
    delta_phi: float = 0.0

    def __post_init__(self):
        _nonnegative("length_L", self.length_L)
        _finite("delta_phi", self.delta_phi)
        if not _finite("wavelength", self.wavelength) > 0:
            raise DomainError(f"wavelength must be positive, got {self.wavelength!r} mm")

    @property
    def propagation_phase(self) -> float:
        return 2 * math.pi * self.length_L * 1e3 / self.wavelength

    @property
    def phi(self) -> float:
        return total_phase(self)


def total_phase(link: PhaseLink) -> float:
    """Unreduced travelling phase ``2 pi L / lambda + delta_phi`` (rad)."""
    if not link.wavelength > 0:
        raise DomainError(f"wavelength must be positive, got {link.wavelength!r} mm")
    return link.propagation_phase + link.delta_phi


@dataclass(frozen=True)
class AnomalyParams:
    """Phase-period divisor ``eta`` and magnon drive/readout attenuation ``delta``.

    ``eta=1, delta=1`` is the conventional photon-mediated coupling model.
    """

    eta: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        if not _finite("eta", self.eta) > 0:
            raise DomainError(f"eta must be positive, got {self.eta!r}")
        delta = _finite("delta", self.delta)
        if not 0 <= delta <= 1:
            raise DomainError(f"delta must lie in [0, 1], got {delta!r}")


@dataclass(frozen=True)
class CoupledSystem:
    cavity: CavityMode
    magnon: MagnonMode
    link: PhaseLink
    anomaly: AnomalyParams = field(default_factory=AnomalyParams)

    @property
    def phi(self) -> float:
        return total_phase(self.link)

    @property
    def phase_factor(self) -> complex:
        """``exp(i Phi / eta)``."""
        return complex(np.exp(1j * self.phi / self.anomaly.eta))

    @property
    def K(self) -> float:
        c, m = self.cavity, self.magnon
        return math.sqrt(c.kappa_cR * m.kappa_mR * c.kappa_cL * m.kappa_mL)

    @property
    def G0_squared(self) -> complex:
        # -kR_c kR_m (1 - delta)(e^{2i Phi/eta} sqrt(kL_c kL_m / (kR_c kR_m)) - delta),
        # multiplied through so that vanishing right-going rates stay finite
        delta = self.anomaly.delta
        right = self.cavity.kappa_cR * self.magnon.kappa_mR
        return complex(-(1 - delta) * (self.phase_factor**2 * self.K - delta * right))

    def with_delta_phi(self, delta_phi: float) -> "CoupledSystem":
        return replace(self, link=replace(self.link, delta_phi=delta_phi))

    def with_anomaly(self, eta: float, delta: float) -> "CoupledSystem":
        return replace(self, anomaly=AnomalyParams(eta, delta))

    def with_field_detuning(self, delta_m: float) -> "CoupledSystem":
        """Retune the magnon to ``f_c + delta_m`` (``delta_m`` in MHz)."""
        f_m = self.cavity.f_c + delta_m / MHZ_PER_GHZ
        return replace(self, magnon=self.magnon.tuned_to(f_m))

    def at_resonance(self) -> "CoupledSystem":
        return self.with_field_detuning(0.0)


@dataclass(frozen=True)
class ComplexModePair:
    """Two complex mode frequencies (MHz), ``plus`` the higher-frequency one."""

    plus: complex
    minus: complex
    degenerate: bool = False

    def __post_init__(self):
        if (self.plus.real, self.plus.imag) < (self.minus.real, self.minus.imag):
            raise ValueError("mode_plus must not sort below mode_minus; use ComplexModePair.ordered")

    @classmethod
    def ordered(cls, a: complex, b: complex, degenerate: bool = False) -> "ComplexModePair":
        a, b = complex(a), complex(b)
        if (a.real, a.imag) >= (b.real, b.imag):
            return cls(a, b, degenerate)
        return cls(b, a, degenerate)

    @property
    def frequencies(self) -> tuple[float, float]:
        """``(omega_plus, omega_minus)`` in GHz."""
        return self.plus.real / MHZ_PER_GHZ, self.minus.real / MHZ_PER_GHZ

    @property
    def dampings(self) -> tuple[float, float]:
        """``(delta_plus, delta_minus)`` in MHz."""
        return -self.plus.imag, -self.minus.imag

    @property
    def splitting(self) -> complex:
        return self.plus - self.minus


@dataclass(frozen=True)
class CouplingResult:
    """Complex coupling ``G = J + i Gamma`` (MHz) on the branch ``J >= 0``."""

    G: complex

    def __post_init__(self):
        G = complex(self.G)
        J, Gamma = G.real, G.imag
        if J < 0 or (J == 0 and Gamma < 0):
            J, Gamma = -J, -Gamma
        # normalise signed zeros
        object.__setattr__(self, "G", complex(J + 0.0, Gamma + 0.0))

    @property
    def J(self) -> float:
        return self.G.real

    @property
    def Gamma(self) -> float:
        return self.G.imag

    @property
    def magnitude(self) -> float:
        return abs(self.G)


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Sampled complex S21.

    Parameters
    ----------
    grid : array_like
        Strictly increasing frequencies (GHz).
    values : array_like
        Complex S21 per sample.
    provenance : {"synthetic", "measured"}
    noise_sigma : float, optional
        Standard deviation of each of the real and imaginary noise parts.
    convention : {"physics", "engineering"}
        Time convention of ``values`` (see module docstring).
    has_phase : bool
        False for amplitude-only data; ``values`` then hold ``|S21|``.
    """

    grid: np.ndarray
    values: np.ndarray
    provenance: str = "synthetic"
    noise_sigma: Optional[float] = None
    convention: str = PHYSICS
    has_phase: bool = True

    def __post_init__(self):
        grid = np.array(self.grid, dtype=float).ravel()
        values = np.array(self.values, dtype=complex).ravel()
        if grid.size < 2:
            raise ValueError("a spectrum needs at least 2 samples")
        if grid.size != values.size:
            raise ValueError(f"grid has {grid.size} samples but values has {values.size}")
        if not np.all(np.isfinite(grid)):
            raise ValueError("grid contains non-finite frequencies")
        if not np.all(np.diff(grid) > 0):
            raise ValueError("grid must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValueError("values contain non-finite entries")
        if self.provenance not in _PROVENANCES:
            raise ValueError(f"provenance must be one of {_PROVENANCES}, got {self.provenance!r}")
        if self.convention not in _CONVENTIONS:
            raise ValueError(f"convention must be one of {_CONVENTIONS}, got {self.convention!r}")
        if self.noise_sigma is not None and not self.noise_sigma >= 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma!r}")
        grid.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.grid.size

    def in_convention(self, convention: str) -> np.ndarray:
        """Values expressed in the requested time convention."""
        if convention not in _CONVENTIONS:
            raise ValueError(f"unknown convention {convention!r}")
        if convention == self.convention or not self.has_phase:
            return self.values
        return np.conj(self.values)

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)


def _detuning(f, f_ref):
    return (np.asarray(f, dtype=float) - f_ref) * MHZ_PER_GHZ


def _scalar_or_array(result, f):
    return complex(result) if np.ndim(f) == 0 else result


def bare_cavity_s21(f, cavity: CavityMode):
    """Transmission past a single cavity, ``(x + i beta) / (x + i (beta0 + kappa_c))``.

    ``x`` is the detuning ``f - f_c`` in MHz. Accepts a scalar or an array of
    frequencies (GHz). All-zero rates give exactly 1 everywhere.
    """
    x = _detuning(f, cavity.f_c)
    loaded = cavity.loaded_damping
    if loaded == 0:
        return _scalar_or_array(np.ones_like(x, dtype=complex), f)
    beta = cavity.beta
    with np.errstate(all="ignore"):
        s21 = (x + 1j * beta) / (x + 1j * loaded)
    # real division on resonance stays exact for subnormal rates
    s21 = np.where(x == 0, beta / loaded + 0j, s21)
    return _scalar_or_array(s21, f)


def bare_cavity_group_delay(f, cavity: CavityMode):
    """Closed-form group delay (ns) of :func:`bare_cavity_s21`.

    NaN where the transmission vanishes (``f = f_c`` at critical coupling).
    """
    x = _detuning(f, cavity.f_c)
    beta, loaded = cavity.beta, cavity.loaded_damping
    with np.errstate(divide="ignore", invalid="ignore"):
        zero_term = np.where(x**2 + beta**2 > 0, beta / (x**2 + beta**2), np.nan)
        pole_term = loaded / (x**2 + loaded**2) if loaded > 0 else 0.0
    # d(phase)/d(omega) in rad/MHz, 1/(2 pi MHz) = 1e3 / (2 pi) ns
    tau = (pole_term - zero_term) * 1e3 / (2 * math.pi)
    return float(tau) if np.ndim(f) == 0 else tau


def bare_modes(sys: CoupledSystem) -> tuple[complex, complex]:
    """Half-loaded complex frequencies ``(omega_c - i beta, omega_m - i alpha)`` in MHz."""
    return sys.cavity.complex_frequency, sys.magnon.complex_frequency


def coupled_s21(f, sys: CoupledSystem):
    """Transmission of the travelling-photon-coupled cavity and magnon.

    Numerator ``[x - wm + i (1 - delta^2) kappa_mR] (x - wc) - G0^2`` over
    denominator ``(x - wm + i kappa_mR)(x - wc + i kappa_cR) + K exp(2 i Phi / eta)``,
    with ``wc = omega_c - i beta`` and ``wm = omega_m - i alpha``.

    Raises
    ------
    SingularityError
        If a frequency hits a real pole (only possible without dissipation).
    """
    c, m = sys.cavity, sys.magnon
    delta = sys.anomaly.delta
    x = _detuning(f, c.f_c)
    wc = complex(0.0, -c.beta)
    wm = complex((magnon_frequency(m) - c.f_c) * MHZ_PER_GHZ, -m.alpha)
    numerator = (x - wm + 1j * (1 - delta**2) * m.kappa_mR) * (x - wc) - sys.G0_squared
    denominator = (x - wm + 1j * m.kappa_mR) * (x - wc + 1j * c.kappa_cR) + sys.K * sys.phase_factor**2
    if np.any(denominator == 0):
        raise SingularityError("frequency coincides with a real pole of the transmission")
    return _scalar_or_array(numerator / denominator, f)


def drift_matrix(sys: CoupledSystem) -> np.ndarray:
    """2x2 dynamical matrix of the coupled-mode equations (MHz).

    Diagonal entries carry the full loading ``beta0 + kappa_c`` and
    ``alpha0 + kappa_m``; the off-diagonals are the photon-mediated terms.
    ``delta`` never enters here.
    """
    c, m = sys.cavity, sys.magnon
    e = sys.phase_factor
    return np.array(
        [
            [c.f_c * MHZ_PER_GHZ - 1j * (c.beta0 + c.kappa_c), -1j * e * math.sqrt(c.kappa_cR * m.kappa_mR)],
            [-1j * e * math.sqrt(c.kappa_cL * m.kappa_mL), magnon_frequency(m) * MHZ_PER_GHZ - 1j * (m.alpha0 + m.kappa_m)],
        ],
        dtype=complex,
    )


def drive_vector(sys: CoupledSystem) -> np.ndarray:
    """Input coupling of ``s_+1`` into (cavity, magnon)."""
    return np.array(
        [sys.phase_factor * math.sqrt(sys.cavity.kappa_cR), sys.anomaly.delta * math.sqrt(sys.magnon.kappa_mR)],
        dtype=complex,
    )


def readout_vector(sys: CoupledSystem) -> np.ndarray:
    """Output coupling from (cavity, magnon) into ``s_-2``."""
    return np.array(
        [np.conj(sys.phase_factor) * math.sqrt(sys.cavity.kappa_cR), sys.anomaly.delta * math.sqrt(sys.magnon.kappa_mR)],
        dtype=complex,
    )


def _quadratic_pair(mean, half_disc_sq, scale):
    root = np.sqrt(complex(half_disc_sq))
    degenerate = abs(half_disc_sq) <= 1e-12 * max(scale, 1.0) ** 2
    return ComplexModePair.ordered(mean + root, mean - root, degenerate)


def denominator_poles(sys: CoupledSystem) -> ComplexModePair:
    """Roots of the transmission denominator (hybridised normal modes), MHz.

    These coincide with the eigenvalues of :func:`drift_matrix`. A double
    root (exceptional point) is returned as an equal pair with
    ``degenerate=True``.
    """
    c, m = sys.cavity, sys.magnon
    ref = c.f_c * MHZ_PER_GHZ
    a = complex((magnon_frequency(m) - c.f_c) * MHZ_PER_GHZ, -(m.alpha + m.kappa_mR))
    b = complex(0.0, -(c.beta + c.kappa_cR))
    mean = (a + b) / 2
    half_disc_sq = ((a - b) / 2) ** 2 - sys.K * sys.phase_factor**2
    pair = _quadratic_pair(mean, half_disc_sq, abs(a - b) + math.sqrt(sys.K))
    return ComplexModePair.ordered(pair.plus + ref, pair.minus + ref, pair.degenerate)


def numerator_zeros(sys: CoupledSystem) -> ComplexModePair:
    """Transmission zeros (MHz): the dips of ``|S21|`` and resonances of ``1/|S21|``.

    Unlike the poles these depend on ``delta``.
    """
    c, m = sys.cavity, sys.magnon
    ref = c.f_c * MHZ_PER_GHZ
    eps = (1 - sys.anomaly.delta**2) * m.kappa_mR
    a = complex((magnon_frequency(m) - c.f_c) * MHZ_PER_GHZ, -m.alpha - eps)
    b = complex(0.0, -c.beta)
    G0_sq = sys.G0_squared
    mean = (a + b) / 2
    half_disc_sq = ((a - b) / 2) ** 2 + G0_sq
    pair = _quadratic_pair(mean, half_disc_sq, abs(a - b) + math.sqrt(abs(G0_sq)))
    return ComplexModePair.ordered(pair.plus + ref, pair.minus + ref, pair.degenerate)


def coupling_from_modes(pair: ComplexModePair, omega_c_tilde: complex, omega_m_tilde: complex) -> CouplingResult:
    """Complex coupling from hybridised and uncoupled complex frequencies.

    ``G = sqrt((w+ - w-)^2 - (wc - wm)^2)`` on the branch ``J >= 0``
    (``Gamma >= 0`` when ``J == 0``).
    """
    G_sq = (pair.plus - pair.minus) ** 2 - (complex(omega_c_tilde) - complex(omega_m_tilde)) ** 2
    return CouplingResult(complex(np.sqrt(complex(G_sq))))


def coupling_from_drift(sys: CoupledSystem) -> CouplingResult:
    """Coupling read off the eigenvalues of :func:`drift_matrix`.

    The uncoupled references are the matrix diagonal, so the result is
    ``2 sqrt(M_cm M_mc)`` on the ``J >= 0`` branch.
    """
    M = drift_matrix(sys)
    ref = M[0, 0].real
    eig = np.linalg.eigvals(M - ref * np.eye(2))
    pair = ComplexModePair.ordered(eig[0], eig[1])
    return coupling_from_modes(pair, M[0, 0] - ref, M[1, 1] - ref)


def cooperativity(G: Union[CouplingResult, complex, float], alpha: float, beta: float) -> float:
    """``|G|^2 / |alpha beta|``; raises at exactly zero damping."""
    alpha, beta = float(alpha), float(beta)
    if alpha == 0 or beta == 0:
        raise SingularCooperativityError(
            f"cooperativity diverges for alpha={alpha!r}, beta={beta!r} (critical coupling)"
        )
    g = G.magnitude if isinstance(G, CouplingResult) else abs(complex(G))
    return g**2 / abs(alpha * beta)


@dataclass(frozen=True, eq=False)
class GroupDelay:
    """Group delay samples (ns); ``singular`` marks samples whose phase is undefined."""

    grid: np.ndarray
    tau: np.ndarray
    singular: np.ndarray
    max_phase_step: float = 0.0

    @property
    def n_singular(self) -> int:
        return int(np.count_nonzero(self.singular))

    @property
    def undersampled(self) -> bool:
        return self.max_phase_step > _MAX_PHASE_STEP


def _uniform(grid):
    steps = np.diff(grid)
    return np.allclose(steps, steps[0], rtol=1e-6, atol=0.0)


def _derivative(y, x):
    """First derivative; fourth-order stencils on uniform grids of >= 5 points."""
    n = y.size
    if n < 5 or not _uniform(x):
        return np.gradient(y, x, edge_order=2 if n >= 3 else 1)
    h = (x[-1] - x[0]) / (n - 1)
    d = np.empty_like(y)
    d[2:-2] = (y[:-4] - 8 * y[1:-3] + 8 * y[3:-1] - y[4:]) / (12 * h)
    d[0] = (-25 * y[0] + 48 * y[1] - 36 * y[2] + 16 * y[3] - 3 * y[4]) / (12 * h)
    d[1] = (-3 * y[0] - 10 * y[1] + 18 * y[2] - 6 * y[3] + y[4]) / (12 * h)
    d[-1] = (25 * y[-1] - 48 * y[-2] + 36 * y[-3] - 16 * y[-4] + 3 * y[-5]) / (12 * h)
    d[-2] = (3 * y[-1] + 10 * y[-2] - 18 * y[-3] + 6 * y[-4] - y[-5]) / (12 * h)
    return d


def group_delay(spectrum: Spectrum, zero_tol: float = 1e-14, warn: bool = True) -> GroupDelay:
    """Group delay ``-d(phase)/d(omega)`` in ns, analyser phase convention.

    The phase is unwrapped cumulatively (jumps larger than pi are folded).
    Samples with ``|S21| <= zero_tol`` have no phase; they and every sample
    whose stencil touches them are flagged in ``singular`` and set to NaN.
    Emits :class:`UndersampledWarning` (unless ``warn`` is False) when
    consecutive samples differ in phase by more than 0.1 rad; the largest
    step is kept in ``max_phase_step`` either way.
    """
    if len(spectrum) < 3:
        raise ValueError("group delay needs at least 3 samples")
    if not spectrum.has_phase:
        raise ValueError("group delay needs phase data")
    values = spectrum.in_convention(ENGINEERING)
    zero = np.abs(values) <= zero_tol
    phase = np.unwrap(np.angle(np.where(zero, 1.0, values)))
    steps = np.abs(np.diff(phase))
    clean = ~(zero[:-1] | zero[1:])
    max_step = float(steps[clean].max()) if np.any(clean) else 0.0
    if warn and max_step > _MAX_PHASE_STEP:
        warnings.warn(
            "frequency grid undersamples a resonance (phase step "
            f"{max_step:.3g} rad); group delay may be inaccurate",
            UndersampledWarning,
            stacklevel=2,
        )
    omega = 2 * math.pi * spectrum.grid  # rad/ns
    tau = -_derivative(phase, omega)
    reach = 2 if spectrum.grid.size >= 5 and _uniform(spectrum.grid) else 1
    singular = zero.copy()
    for k in range(1, reach + 1):
        singular[:-k] |= zero[k:]
        singular[k:] |= zero[:-k]
    if reach == 2:
        # one-sided edge stencils span five samples
        if zero[:5].any():
            singular[:2] = True
        if zero[-5:].any():
            singular[-2:] = True
    tau = np.where(singular, np.nan, tau)
    return GroupDelay(spectrum.grid, tau, singular, max_step)
