"""Coupled-mode model of a magnon and a cavity photon mode linked by travelling photons.

Forward transmission spectra and group delay, plus the inverse pipeline
(lineshape fits, damping and coupling extraction, critical-coupling search)
and sweep engines for spacing, phase and field experiments.

Units are fixed throughout: resonance frequencies in GHz, rates and complex
mode frequencies in MHz, spacings in mm, fields in mT, phases in rad and
group delays in ns. All frequencies are linear (omega / 2 pi) values.
"""

from magnoncav.model import (
    AnomalyParams,
    CavityMode,
    ComplexModePair,
    CoupledSystem,
    CouplingResult,
    DomainError,
    GroupDelay,
    MagnonMode,
    PhaseLink,
    SingularCooperativityError,
    SingularityError,
    Spectrum,
    bare_cavity_group_delay,
    bare_cavity_s21,
    bare_modes,
    cooperativity,
    coupled_s21,
    coupling_from_drift,
    coupling_from_modes,
    denominator_poles,
    drift_matrix,
    drive_vector,
    effective_damping,
    group_delay,
    magnon_frequency,
    numerator_zeros,
    readout_vector,
    total_phase,
)

__version__ = "0.1.0"

__all__ = [
    "AnomalyParams",
    "CavityMode",
    "ComplexModePair",
    "CoupledSystem",
    "CouplingResult",
    "DomainError",
    "GroupDelay",
    "MagnonMode",
    "PhaseLink",
    "SingularCooperativityError",
    "SingularityError",
    "Spectrum",
    "bare_cavity_group_delay",
    "bare_cavity_s21",
    "bare_modes",
    "cooperativity",
    "coupled_s21",
    "coupling_from_drift",
    "coupling_from_modes",
    "denominator_poles",
    "drift_matrix",
    "drive_vector",
    "effective_damping",
    "group_delay",
    "magnon_frequency",
    "numerator_zeros",
    "readout_vector",
    "total_phase",
]
