import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magnoncav import model as mc
from magnoncav import presets
from magnoncav.model import (
    AnomalyParams,
    CavityMode,
    ComplexModePair,
    CoupledSystem,
    CouplingResult,
    MagnonMode,
    PhaseLink,
    Spectrum,
)
from oracles import eom_s21, local_minima, phase_derivative_oracle

rates = st.floats(0.0, 500.0, allow_nan=False)
positive_rates = st.floats(0.05, 500.0, allow_nan=False)


def system(cavity=presets.CAVITY_NEAR_CC, eta=2.0, delta=0.996, delta_phi=math.pi, kappa_m=(8.0, 7.0),
           alpha0=0.8, f_m=None):
    magnon = MagnonMode(22.4, -7.1, 0.0, alpha0, *kappa_m).tuned_to(f_m or cavity.f_c)
    link = PhaseLink(presets.CABLE_LENGTH, presets.WAVELENGTH, delta_phi)
    return CoupledSystem(cavity, magnon, link, AnomalyParams(eta, delta))


class TestMagnonFrequency:
    def test_table_value(self):
        magnon = MagnonMode(22.4, -7.1, 283.0, 0.8, 8, 7)
        assert mc.magnon_frequency(magnon) == pytest.approx(6.181, abs=1e-3)

    def test_inversion_matches_field_scan(self):
        magnon = MagnonMode(22.4, -7.1, 0.0, 0.8, 8, 7)
        analytic = magnon.bias_for(6.181)
        assert analytic == pytest.approx(6.181 / 22.4 * 1e3 + 7.1, rel=1e-12)
        fields = np.arange(250.0, 320.0, 1e-4)
        freqs = 22.4 * (fields - 7.1) * 1e-3
        scanned = fields[np.argmin(np.abs(freqs - 6.181))]
        assert scanned == pytest.approx(analytic, abs=2e-4)
        assert mc.magnon_frequency(magnon.tuned_to(6.181)) == pytest.approx(6.181, rel=1e-12)

    def test_zero_field_is_domain_error(self):
        with pytest.raises(mc.DomainError, match="mu0_H"):
            mc.magnon_frequency(MagnonMode(22.4, 0.0, 0.0, 0.8, 8, 7))

    def test_unit_slope(self):
        magnon = MagnonMode(22.4, -7.1, 7.1 + 1e3 / 22.4, 0.8, 8, 7)
        assert mc.magnon_frequency(magnon) == pytest.approx(1.0, rel=1e-12)


class TestEffectiveDamping:
    @pytest.mark.parametrize(
        "args, expected",
        [((17, 332.4, 370.0), -1.8), ((0.8, 8, 7), 1.3), ((17, 37, 37), 17.0)],
    )
    def test_reference_values(self, args, expected):
        assert mc.effective_damping(*args) == pytest.approx(expected, abs=1e-12)

    @given(rates)
    def test_symmetric_channels_cancel(self, k):
        assert mc.effective_damping(0.0, k, k) == 0.0

    def test_rejects_bad_input(self):
        with pytest.raises(mc.DomainError):
            mc.effective_damping(-1.0, 1, 1)
        with pytest.raises(mc.DomainError):
            mc.effective_damping(1.0, math.nan, 1)

    def test_cavity_and_magnon_share_rule(self):
        assert presets.CAVITY_NEAR_CC.beta == pytest.approx(-1.8, abs=1e-12)
        assert presets.reference_magnon().alpha == pytest.approx(1.3, abs=1e-12)


class TestBareCavity:
    def test_on_resonance_away(self):
        s = mc.bare_cavity_s21(6.203, presets.CAVITY_AWAY)
        assert s.imag == pytest.approx(0.0, abs=1e-15)
        assert s.real == pytest.approx(17 / 54, rel=1e-12)

    def test_critical_coupling_zero(self):
        cav = CavityMode(6.2, 17.0, 20.0, 54.0)
        assert cav.beta == 0.0
        assert mc.bare_cavity_s21(6.2, cav) == 0

    def test_far_off_resonance_transparent(self):
        s = mc.bare_cavity_s21(np.array([-1e6, 1e6]), presets.CAVITY_NEAR_CC)
        np.testing.assert_allclose(s, 1.0, atol=1e-3)

    def test_all_zero_rates(self):
        cav = CavityMode(6.2, 0.0, 0.0, 0.0)
        assert mc.bare_cavity_s21(6.2, cav) == 1.0
        np.testing.assert_array_equal(mc.bare_cavity_s21(np.array([6.1, 6.3]), cav), 1.0)

    @given(rates, rates, rates, st.floats(-2000.0, 2000.0))
    def test_passive(self, beta0, kl, kr, detuning):
        cav = CavityMode(6.2, beta0, kl, kr)
        assert abs(mc.bare_cavity_s21(6.2 + detuning * 1e-3, cav)) <= 1 + 1e-12

    def test_inverse_magnitude_is_lorentzian(self):
        # 1/|S21|^2 - 1 is exactly a Lorentzian of HWHM |beta|
        cav = presets.CAVITY_AWAY
        x = np.linspace(-100, 100, 401)
        s = mc.bare_cavity_s21(cav.f_c + x * 1e-3, cav)
        lorentz = (cav.loaded_damping**2 - cav.beta**2) / (x**2 + cav.beta**2)
        np.testing.assert_allclose(1 / np.abs(s) ** 2 - 1, lorentz, rtol=1e-10)


class TestCoupledS21:
    @settings(max_examples=60)
    @given(positive_rates, rates, rates, st.floats(0, 5), rates, rates,
           st.floats(0.5, 3.0), st.floats(0.0, 1.0), st.floats(-50, 50), st.floats(-7, 7),
           st.floats(-400, 400))
    def test_matches_equations_of_motion(self, beta0, kcl, kcr, alpha0, kml, kmr, eta, delta, dm, dphi, x):
        cav = CavityMode(6.2, beta0, kcl, kcr)
        sys = system(cav, eta, delta, dphi, (kml, kmr), alpha0, f_m=6.2 + dm * 1e-3)
        f = 6.2 + x * 1e-3
        assert mc.coupled_s21(f, sys) == pytest.approx(eom_s21(f, sys)[0], rel=1e-9, abs=1e-12)

    def test_delta_one_kills_anomalous_terms(self, near_cc_system):
        sys = near_cc_system.with_anomaly(2.0, 1.0)
        assert sys.G0_squared == 0
        wc, wm = mc.bare_modes(sys)
        x = np.linspace(6.17, 6.19, 11)
        w = x * 1e3
        expected = (w - wm) * (w - wc) / (
            (w - wm + 1j * sys.magnon.kappa_mR) * (w - wc + 1j * sys.cavity.kappa_cR) + sys.K * sys.phase_factor**2)
        np.testing.assert_allclose(mc.coupled_s21(x, sys), expected, rtol=1e-9)

    def test_decoupled_magnon_reduces_to_bare_cavity(self):
        sys = system(presets.CAVITY_AWAY, 1.0, 1.0, kappa_m=(0.0, 0.0))
        f = np.linspace(6.1, 6.3, 201)
        np.testing.assert_allclose(mc.coupled_s21(f, sys), mc.bare_cavity_s21(f, presets.CAVITY_AWAY),
                                   rtol=1e-12, atol=1e-12)

    def test_anomalous_splitting_vs_conventional(self, near_cc_system):
        f_c = near_cc_system.cavity.f_c
        anomalous = local_minima(lambda x: abs(mc.coupled_s21(f_c + x * 1e-3, near_cc_system)), -20, 20)
        assert len(anomalous) == 2
        conventional_sys = near_cc_system.with_anomaly(1.0, 1.0)
        conventional = local_minima(lambda x: abs(mc.coupled_s21(f_c + x * 1e-3, conventional_sys)), -20, 20)
        assert len(conventional) == 1
        # the minima sit near the real parts of the transmission zeros
        zeros = mc.numerator_zeros(near_cc_system)
        np.testing.assert_allclose(np.sort(anomalous), np.sort([zeros.minus.real - f_c * 1e3,
                                                                zeros.plus.real - f_c * 1e3]), atol=0.05)

    def test_singular_without_dissipation(self):
        cav = CavityMode(6.2, 0.0, 0.0, 0.0)
        sys = system(cav, 1.0, 1.0, kappa_m=(0.0, 0.0), alpha0=0.0)
        with pytest.raises(mc.SingularityError):
            mc.coupled_s21(6.2, sys)

    def test_scalar_and_array_agree(self, near_cc_system):
        f = np.array([6.17, 6.181, 6.19])
        arr = mc.coupled_s21(f, near_cc_system)
        assert isinstance(mc.coupled_s21(6.17, near_cc_system), complex)
        assert [mc.coupled_s21(fi, near_cc_system) for fi in f] == pytest.approx(list(arr), rel=1e-14)

    def test_thread_safe(self, near_cc_system):
        f = np.linspace(6.16, 6.2, 501)
        expected = mc.coupled_s21(f, near_cc_system)
        results = [None] * 8

        def work(k):
            results[k] = mc.coupled_s21(f, near_cc_system)

        threads = [threading.Thread(target=work, args=(k,)) for k in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for r in results:
            np.testing.assert_array_equal(r, expected)


class TestDriftMatrix:
    def test_uncoupled(self):
        sys = system(CavityMode(6.2, 17.0, 0.0, 0.0), kappa_m=(0.0, 0.0))
        M = mc.drift_matrix(sys)
        np.testing.assert_allclose(M, np.diag([6200 - 17j, 6200 - 0.8j]), rtol=1e-14)

    def test_symmetric_rates_equal_offdiagonals(self):
        sys = system(presets.CAVITY_AWAY, kappa_m=(7.5, 7.5))
        M = mc.drift_matrix(sys)
        assert M[0, 1] == M[1, 0]

    def test_phase_shift_flips_offdiagonals(self):
        sys = system(eta=2.0, delta_phi=0.3)
        shifted = sys.with_delta_phi(0.3 + 2 * math.pi)  # Phi/eta advances by pi
        M, Ms = mc.drift_matrix(sys), mc.drift_matrix(shifted)
        np.testing.assert_allclose(Ms[0, 1], -M[0, 1], rtol=1e-12)
        np.testing.assert_allclose(Ms[1, 0], -M[1, 0], rtol=1e-12)
        np.testing.assert_array_equal(np.diag(Ms), np.diag(M))

    def test_delta_enters_only_drive_and_readout(self):
        a = system(delta=1.0)
        b = system(delta=0.5)
        np.testing.assert_array_equal(mc.drift_matrix(a), mc.drift_matrix(b))
        assert mc.denominator_poles(a) == mc.denominator_poles(b)
        assert mc.drive_vector(b)[1] == pytest.approx(0.5 * mc.drive_vector(a)[1])
        assert mc.readout_vector(b)[1] == pytest.approx(0.5 * mc.readout_vector(a)[1])
        assert mc.numerator_zeros(a) != mc.numerator_zeros(b)


class TestPoles:
    def test_no_coupling_roots_exact(self):
        sys = system(kappa_m=(0.0, 7.0), f_m=6.19)
        assert sys.K == 0
        pair = mc.denominator_poles(sys)
        wc, wm = mc.bare_modes(sys)
        expected = {wc - 1j * sys.cavity.kappa_cR, wm - 1j * sys.magnon.kappa_mR}
        got = {pair.plus, pair.minus}
        for e in expected:
            assert min(abs(e - g) for g in got) < 1e-9

    @pytest.mark.parametrize("detuning", [2000.0, 5000.0, 20000.0])
    def test_far_detuned_perturbative(self, detuning):
        sys = system(presets.CAVITY_AWAY, f_m=presets.CAVITY_AWAY.f_c + detuning * 1e-3)
        wc, wm = mc.bare_modes(sys)
        a = wm - 1j * sys.magnon.kappa_mR
        b = wc - 1j * sys.cavity.kappa_cR
        Ke = sys.K * sys.phase_factor**2
        approx = {a - Ke / (a - b), b + Ke / (a - b)}
        pair = mc.denominator_poles(sys)
        bound = 5 * sys.K**2 / abs(a - b) ** 3
        for g in (pair.plus, pair.minus):
            assert min(abs(g - e) for e in approx) < bound
        # leading correction is O(K / detuning)
        assert min(abs(pair.plus - a), abs(pair.plus - b)) < 2 * sys.K / abs(a - b)

    def test_poles_are_drift_eigenvalues(self, near_cc_system):
        for dphi in np.linspace(0, 2 * math.pi, 9):
            sys = near_cc_system.with_delta_phi(dphi)
            pair = mc.denominator_poles(sys)
            eig = np.linalg.eigvals(mc.drift_matrix(sys))
            for root in (pair.plus, pair.minus):
                assert np.min(np.abs(eig - root)) < 1e-9

    def test_resonant_splitting_resolvable(self, near_cc_system):
        zeros = mc.numerator_zeros(near_cc_system)
        split = zeros.plus.real - zeros.minus.real
        assert split > max(zeros.dampings, key=abs)

    def test_exceptional_point_flag(self):
        # symmetric lossless-intrinsic modes at f_m = f_c with exp(2i Phi) = -1:
        # the discriminant -(km - kc)^2 / 4 + kc km vanishes for km = kc (3 + 2 sqrt 2)
        kc = 2.0
        km = kc * (3 + 2 * math.sqrt(2))
        cav = CavityMode(6.2, 0.0, kc, kc)
        magnon = MagnonMode(22.4, -7.1, 0.0, 0.0, km, km).tuned_to(6.2)
        sys = CoupledSystem(cav, magnon, PhaseLink(0.0, 32.7, math.pi / 2))
        pair = mc.denominator_poles(sys)
        assert pair.degenerate
        assert pair.plus == pytest.approx(pair.minus, abs=1e-5)
        assert not mc.denominator_poles(sys.with_delta_phi(0.0)).degenerate


class TestCoupling:
    def test_symmetric_real_splitting(self):
        w = complex(6200, -3)
        pair = ComplexModePair.ordered(w + 2.5, w - 2.5)
        result = mc.coupling_from_modes(pair, w, w)
        assert result.G == pytest.approx(5.0)
        assert result.Gamma == 0

    def test_uncoupled(self):
        wc, wm = complex(6200, -3), complex(6195, -1)
        result = mc.coupling_from_modes(ComplexModePair.ordered(wc, wm), wc, wm)
        assert result.G == 0

    @settings(max_examples=100)
    @given(*[st.floats(-10, 10)] * 8)
    def test_eigenvalue_identity(self, g1r, g1i, g2r, g2i, dcr, dci, dmr, dmi):
        g1, g2 = complex(g1r, g1i), complex(g2r, g2i)
        wc, wm = complex(6200 + dcr, -abs(dci)), complex(6200 + dmr, -abs(dmi))
        eig = np.linalg.eigvals(np.array([[wc, g1], [g2, wm]]))
        result = mc.coupling_from_modes(ComplexModePair.ordered(*eig), wc, wm)
        scale = max(1.0, abs(wc - wm), 4 * abs(g1 * g2))
        assert result.G**2 == pytest.approx(4 * g1 * g2, abs=1e-8 * scale**2)
        assert result.J > 0 or (result.J == 0 and result.Gamma >= 0)

    def test_branch_rule(self):
        assert CouplingResult(-3 + 4j).G == 3 - 4j
        assert CouplingResult(complex(0.0, -2.0)).G == 2j
        assert CouplingResult(complex(-0.0, 2.0)).J == 0.0
        assert math.copysign(1, CouplingResult(complex(-0.0, 2.0)).J) == 1


class TestCooperativity:
    def test_reference_value(self):
        assert mc.cooperativity(CouplingResult(4.18), 1.3, -1.8) == pytest.approx(7.5, abs=0.1)

    def test_zero_coupling(self):
        assert mc.cooperativity(CouplingResult(0), 1.3, -1.8) == 0

    def test_critical_coupling_is_singular(self):
        with pytest.raises(mc.SingularCooperativityError):
            mc.cooperativity(CouplingResult(4.18), 1.3, 0.0)


class TestTotalPhase:
    def test_two_metre_cable(self):
        phi = mc.total_phase(PhaseLink(2.1, 32.7, 0.0))
        assert phi / math.pi == pytest.approx(128.44, abs=0.01)
        assert phi > 128 * math.pi

    def test_zero_length(self):
        assert mc.total_phase(PhaseLink(0.0, 32.7, 1.25)) == 1.25

    def test_one_wavelength(self):
        assert mc.total_phase(PhaseLink(0.0327, 32.7)) == pytest.approx(2 * math.pi, rel=1e-14)

    def test_bad_wavelength(self):
        with pytest.raises(mc.DomainError):
            PhaseLink(1.0, 0.0)


class TestGroupDelay:
    def test_constant_spectrum(self):
        spec = Spectrum(np.linspace(6, 6.4, 50), np.full(50, 0.3 - 0.4j))
        np.testing.assert_allclose(mc.group_delay(spec).tau, 0.0, atol=1e-12)

    @pytest.mark.parametrize("cavity", [presets.CAVITY_AWAY, presets.CAVITY_NEAR_CC])
    def test_matches_closed_form(self, cavity):
        width = abs(cavity.beta)
        f = cavity.f_c + np.linspace(-10 * width, 10 * width, 2001) * 1e-3
        spec = Spectrum(f, mc.bare_cavity_s21(f, cavity))
        tau = mc.group_delay(spec).tau
        np.testing.assert_allclose(tau, mc.bare_cavity_group_delay(f, cavity), rtol=1e-6)
        for k in (0, 700, 1000, 1500, 2000):
            assert tau[k] == pytest.approx(phase_derivative_oracle(f[k], cavity), rel=1e-6)

    def test_sign_under_coupled(self):
        cav = presets.CAVITY_AWAY
        f = cav.f_c + np.linspace(-50, 50, 1001) * 1e-3
        gd = mc.group_delay(Spectrum(f, mc.bare_cavity_s21(f, cav)))
        assert gd.tau[500] < 0

    def test_halving_beta_doubles_delay(self):
        # fixed total loading; beta moved through the channel asymmetry
        def cav(beta):
            total = 370.0 + 332.4
            kl = total / 2 + (beta - 17.0)
            return CavityMode(6.181, 17.0, kl, total - kl)

        taus = []
        for beta in (-1.8, -0.9):
            c = cav(beta)
            assert c.beta == pytest.approx(beta)
            f = c.f_c + np.linspace(-20 * abs(beta), 20 * abs(beta), 4001) * 1e-3
            taus.append(mc.group_delay(Spectrum(f, mc.bare_cavity_s21(f, c))).tau[2000])
        assert taus[1] / taus[0] == pytest.approx(2.0, rel=0.01)

    def test_zero_sample_flagged_not_fatal(self):
        cav = CavityMode(6.2, 17.0, 20.0, 54.0)  # critical coupling
        f = np.linspace(6.19, 6.21, 201)
        gd = mc.group_delay(Spectrum(f, mc.bare_cavity_s21(f, cav)))
        assert gd.singular[100]
        assert 1 <= gd.n_singular <= 5
        assert np.all(np.isfinite(gd.tau[~gd.singular]))
        assert np.all(np.isnan(gd.tau[gd.singular]))

    def test_undersampled_warns(self):
        cav = presets.CAVITY_NEAR_CC
        f = np.linspace(6.0, 6.4, 41)
        with pytest.warns(mc.UndersampledWarning):
            mc.group_delay(Spectrum(f, mc.bare_cavity_s21(f, cav)))

    def test_convention_of_input(self):
        cav = presets.CAVITY_AWAY
        f = cav.f_c + np.linspace(-50, 50, 501) * 1e-3
        s = mc.bare_cavity_s21(f, cav)
        phys = mc.group_delay(Spectrum(f, s, convention="physics")).tau
        eng = mc.group_delay(Spectrum(f, np.conj(s), convention="engineering")).tau
        np.testing.assert_allclose(phys, eng, rtol=1e-12)

    def test_nonuniform_grid(self):
        cav = presets.CAVITY_AWAY
        x = np.sort(np.concatenate([np.linspace(-100, 100, 1500), np.linspace(-3, 3, 200) + 0.0123]))
        f = cav.f_c + np.unique(x) * 1e-3
        tau = mc.group_delay(Spectrum(f, mc.bare_cavity_s21(f, cav))).tau
        np.testing.assert_allclose(tau, mc.bare_cavity_group_delay(f, cav), rtol=1e-2)


class TestPhaseProperties:
    @pytest.mark.parametrize("eta, quarter", [(1.0, math.pi / 2), (2.0, math.pi)])
    def test_real_to_imaginary_transition(self, eta, quarter):
        base = system(eta=eta, delta=1.0)
        real = mc.coupling_from_drift(base.with_delta_phi(quarter))
        imag = mc.coupling_from_drift(base.with_delta_phi(0.0))
        assert abs(real.Gamma) < 1e-9 * real.magnitude
        assert abs(imag.J) < 1e-9 * imag.magnitude

    def test_eta2_sinusoidal_in_half_phase(self):
        base = system(eta=2.0, delta=1.0)
        phis = np.linspace(0, 2 * math.pi, 41)
        G = np.array([mc.coupling_from_drift(base.with_delta_phi(p)).G for p in phis])
        amplitude = 2 * math.sqrt(base.K)
        np.testing.assert_allclose(np.abs(G.real), amplitude * np.abs(np.sin(phis / 2)), atol=1e-9 * amplitude)
        np.testing.assert_allclose(np.abs(G.imag), amplitude * np.abs(np.cos(phis / 2)), atol=1e-9 * amplitude)

    @pytest.mark.parametrize("cavity", [presets.CAVITY_AWAY, CavityMode(6.2, 17.0, 351.2, 351.2)])
    def test_conventional_zeros_are_bare_modes(self, cavity):
        sys = system(cavity, 1.0, 1.0, kappa_m=(7.5, 7.5))
        for dphi in np.linspace(0, math.pi, 7):
            zeros = mc.numerator_zeros(sys.with_delta_phi(dphi))
            wc, wm = mc.bare_modes(sys)
            assert {round(abs(zeros.plus - w), 9) for w in (wc, wm)} & {0.0}
            assert {round(abs(zeros.minus - w), 9) for w in (wc, wm)} & {0.0}

    def test_eta_one_periodic_in_pi(self):
        a = system(eta=1.0, delta=0.9, delta_phi=0.4)
        b = a.with_delta_phi(0.4 + math.pi)
        f = np.linspace(6.16, 6.2, 101)
        np.testing.assert_allclose(mc.coupled_s21(f, a), mc.coupled_s21(f, b), rtol=1e-9)


class TestSpectrum:
    def test_validation(self):
        with pytest.raises(ValueError):
            Spectrum([1.0, 1.0], [1, 1])
        with pytest.raises(ValueError):
            Spectrum([1.0, 2.0], [1, np.nan])
        with pytest.raises(ValueError):
            Spectrum([1.0, 2.0, 3.0], [1, 1])
        with pytest.raises(ValueError):
            Spectrum([1.0, 2.0], [1, 1], provenance="guess")

    def test_immutable(self):
        spec = Spectrum([1.0, 2.0], [1, 1])
        with pytest.raises(ValueError):
            spec.values[0] = 3
