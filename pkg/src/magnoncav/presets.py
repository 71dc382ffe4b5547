"""Reference parameter sets for the dielectric-cavity / YIG-sphere experiment."""

import math

import numpy as np

from magnoncav.model import AnomalyParams, CavityMode, CoupledSystem, MagnonMode, PhaseLink

GAMMA_E = 22.4  # GHz/T
MU0_HA = -7.1  # mT
ALPHA0 = 0.8  # MHz
KAPPA_ML = 8.0  # MHz
KAPPA_MR = 7.0  # MHz
BETA0 = 17.0  # MHz

WAVELENGTH = 32.7  # mm, at 6.2 GHz
# 64 wavelengths (about 2.09 m): Phi_L = 128 pi, a multiple of 4 pi, so
# delta_phi alone sets exp(i Phi / eta) for eta in {1, 2}
CABLE_LENGTH = 64 * WAVELENGTH * 1e-3  # m

CAVITY_NEAR_CC = CavityMode(f_c=6.181, beta0=BETA0, kappa_cL=332.4, kappa_cR=370.0)
CAVITY_AWAY = CavityMode(f_c=6.203, beta0=BETA0, kappa_cL=37.0, kappa_cR=37.0)

ANOMALOUS = AnomalyParams(eta=2.0, delta=0.996)
CONVENTIONAL = AnomalyParams(eta=1.0, delta=1.0)


def reference_magnon(f_m: float = 6.181) -> MagnonMode:
    """YIG magnon with the calibrated damping, biased to resonate at ``f_m`` (GHz)."""
    probe = MagnonMode(GAMMA_E, MU0_HA, 0.0, ALPHA0, KAPPA_ML, KAPPA_MR)
    return probe.tuned_to(f_m)


def reference_system(cavity: CavityMode = CAVITY_NEAR_CC, anomaly: AnomalyParams = ANOMALOUS,
                 delta_phi: float = math.pi) -> CoupledSystem:
    """Cavity plus magnon at ``f_m = f_c``, linked through the reference cable."""
    link = PhaseLink(CABLE_LENGTH, WAVELENGTH, delta_phi)
    return CoupledSystem(cavity, reference_magnon(cavity.f_c), link, anomaly)


def synthetic_calibration_rows(roots=(4.90, 5.80), d=None, curvature=20.0, f_c=6.19):
    """Spacing table whose effective damping has roots at ``roots`` (mm).

    ``beta(d) = curvature * (d - r1)(d - r2)``, negative between the roots.
    ``kappa_cR`` decays smoothly with spacing and ``kappa_cL`` is set so the
    effective damping follows the quadratic exactly at every row.
    """
    if d is None:
        d = np.round(np.arange(4.0, 7.0001, 0.1), 10)
    d = np.asarray(d, dtype=float)
    r1, r2 = roots
    beta = curvature * (d - r1) * (d - r2)
    kappa_R = 200.0 * np.exp(-(d - 4.0) / 1.5) + 40.0
    kappa_L = kappa_R + 2 * (beta - BETA0)
    return [
        (float(di), f_c, float(kl), float(kr), BETA0)
        for di, kl, kr in zip(d, kappa_L, kappa_R)
    ]
