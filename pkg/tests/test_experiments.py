import math

import numpy as np
import pytest

from oracles import axial_frequencies
from spinsim import DomainError, FieldVector, MwDrive, RateParams, ZfsParams
from spinsim.experiments import (
    LINE_SLOPES, ModelParams, PulseSequence, Segment, SweepSpec, angle_scan, cw_sweep, exact_lines, fan_scan,
    find_peaks, fitted_intercepts, ground_state, laser_steady_state, overlay_lines, pulsed_transient,
    ridge_slopes, track_ridges, zero_field_intercepts,
)
from spinsim.photodynamics import GS, odmr_contrast, slowest_rate
from spinsim.spin import GAMMA_E, doublet_frequency

FWHM = MwDrive().linewidth_fwhm
FIG1F = ModelParams(zfs=ZfsParams(850, 0))


# --- sweeps ---------------------------------------------------------------

def test_sweep_spec_validation():
    assert len(SweepSpec(100, 200, 2).frequencies()) == 51
    assert SweepSpec.with_points(0, 10, 11).f_step == 1.0
    for bad in ((200, 100, 1), (0, 1, 0), (0, math.inf, 1), (0, 1e7, 1)):
        with pytest.raises(DomainError):
            SweepSpec(*bad)


def test_fig1f_peaks():
    spec = cw_sweep(FIG1F, FieldVector.axial(66), SweepSpec(500, 4000, 1))
    peaks = [p.frequency for p in find_peaks(spec.frequencies, spec.contrast)]
    for target in (999.65, 1849.65, 2699.65):
        assert min(abs(p - target) for p in peaks) <= FWHM, target


def test_undriven_spectrum_is_flat_zero():
    model = ModelParams(mw=MwDrive(drive_rate=0))
    spec = cw_sweep(model, FieldVector.axial(66), SweepSpec(100, 4500, 10))
    assert np.all(spec.contrast == 0)


def test_sweep_matches_single_contrast_bit_exactly():
    model = ModelParams()
    fld = FieldVector.axial(66)
    spec = cw_sweep(model, fld, SweepSpec(1000, 3000, 97))
    for f, c in zip(spec.frequencies[::3], spec.contrast[::3]):
        single = odmr_contrast(model.zfs, model.pair, model.rates, fld, model.mw.at(f))
        assert single == c


def test_low_field_contrast_collapse():
    model = ModelParams()
    full = SweepSpec(100, 4500, 2)
    zero = np.abs(cw_sweep(model, FieldVector(), full).contrast).max()
    high = np.abs(cw_sweep(model, FieldVector.axial(66), full).contrast).max()
    assert zero < 0.05 * high


def test_doublet_contrast_shrinks_toward_zero_field():
    model = ModelParams()
    values = []
    for b in np.arange(66.0, 4.9, -1.0):
        fld = FieldVector.axial(b)
        c = model.rate_model(fld).contrast([doublet_frequency(fld)], model.mw, ("rms",))[0]
        values.append(abs(c))
    assert np.all(np.diff(values) < 0)


# --- fan map --------------------------------------------------------------

def test_fan_single_row_equals_cw_sweep():
    model = ModelParams()
    spec = SweepSpec(100, 4500, 20)
    fan = fan_scan(model, [66.0], spec)
    np.testing.assert_array_equal(fan.contrast[0], cw_sweep(model, FieldVector.axial(66), spec).contrast)


def test_fan_validation():
    with pytest.raises(DomainError):
        fan_scan(ModelParams(), [], SweepSpec(100, 200, 10))
    with pytest.raises(DomainError):
        fan_scan(ModelParams(), [10, 5], SweepSpec(100, 200, 10))


def test_fan_independent_of_thread_count(monkeypatch):
    spec = SweepSpec(100, 4500, 50)
    b = np.arange(12, 60, 8.0)
    monkeypatch.setenv("SPINSIM_THREADS", "1")
    serial = fan_scan(ModelParams(), b, spec).contrast
    monkeypatch.setenv("SPINSIM_THREADS", "3")
    threaded = fan_scan(ModelParams(), b, spec).contrast
    np.testing.assert_array_equal(serial, threaded)


def test_fan_ridge_slopes():
    model = ModelParams()
    fan = fan_scan(model, np.arange(12, 161, 4.0), SweepSpec(10, 9010, 6))
    slopes = ridge_slopes(track_ridges(fan, model.zfs, FWHM))
    for label, k in LINE_SLOPES.items():
        assert slopes[label] == pytest.approx(k * GAMMA_E, rel=5e-3), label


def test_doublet_peak_at_12mt():
    model = ModelParams()
    fan = fan_scan(model, [12.0], SweepSpec(200, 500, 0.5))
    peaks = find_peaks(fan.frequencies, fan.contrast[0])
    assert doublet_frequency(FieldVector.axial(12)) == pytest.approx(336.3, abs=1e-9)
    assert min(abs(p.frequency - 336.3) for p in peaks) <= FWHM


def test_no_doublet_ridge_without_charge_transfer():
    model = ModelParams(rates=RateParams(k_ct=0))
    fan = fan_scan(model, np.arange(12, 161, 16.0), SweepSpec(10, 9010, 6))
    ridges = track_ridges(fan, model.zfs, FWHM)
    assert np.all(np.isnan(ridges.positions["DOUBLET"]))
    assert np.abs(fan.contrast).max() < 1e-9


def test_exact_lines_signs():
    lines = exact_lines(ZfsParams(950, 200), FieldVector.axial(100))
    assert lines["T_MINUS"][1] == -1.0  # the -1 level has crossed below 0
    assert lines["T_PLUS"][1] == 1.0
    assert lines["DQT"][0] == pytest.approx(axial_frequencies(950, 200, 2, 100)["DQT"], abs=1e-9)


# --- overlay lines --------------------------------------------------------

def test_zero_field_intercepts():
    z = zero_field_intercepts(ZfsParams(950, 200))
    assert z == pytest.approx({"T_MINUS": 750, "T_PLUS": 1150, "DQT": 400, "DOUBLET": 0}, abs=1e-9)
    assert zero_field_intercepts(ZfsParams(950, 200), "e")["DQT"] == 200
    with pytest.raises(DomainError):
        zero_field_intercepts(ZfsParams(950, 200), "other")


def test_overlay_slopes():
    b = np.arange(12, 161, 4.0)
    lines = overlay_lines(ZfsParams(950, 200), b)
    for label, k in LINE_SLOPES.items():
        assert np.polyfit(b, lines[label], 1)[0] == pytest.approx(k * GAMMA_E, rel=1e-12)


def overlay_deviation(zfs, label, b):
    lines = overlay_lines(zfs, b)
    exact = np.array([l[0] * l[1] for l in (exact_lines(zfs, FieldVector.axial(v))[label] for v in b)])
    return np.abs(lines[label] - exact).max()


@pytest.mark.parametrize("label", ["T_MINUS", "T_PLUS", "DOUBLET"])
@pytest.mark.parametrize("e", [0.0, 100.0, 200.0, 950 / 4])
def test_overlay_within_half_linewidth(label, e):
    b = np.arange(30, 161, 2.0)
    assert overlay_deviation(ZfsParams(950, e), label, b) <= FWHM / 2


@pytest.mark.xfail(strict=True, reason="2 sqrt(E^2 + (gamma B)^2) strays more than FWHM/2 from any line of slope 2 gamma once E > ~180 MHz")
def test_overlay_dqt_within_half_linewidth():
    b = np.arange(30, 161, 2.0)
    assert overlay_deviation(ZfsParams(950, 200), "DQT", b) <= FWHM / 2


def test_fitted_intercepts_use_linear_regime():
    zfs = ZfsParams(950, 0)
    f0 = fitted_intercepts(zfs, np.arange(12, 161, 4.0))
    # E = 0: exact lines are already linear
    assert f0["T_PLUS"] == pytest.approx(950, abs=1e-6)
    assert f0["T_MINUS"] == pytest.approx(950, abs=1e-6)
    assert f0["DQT"] == pytest.approx(0, abs=1e-6)


def test_fan_line_rows_header():
    fan = fan_scan(ModelParams(), [20.0, 40.0], SweepSpec(100, 200, 50))
    rows = list(fan.line_rows())
    assert rows[0] == ("b_mt", "label", "frequency_mhz")
    assert len(rows) == 1 + 2 * len(LINE_SLOPES)


# --- angle dependence -----------------------------------------------------

def test_angle_scan_doublet_isotropic():
    scan = angle_scan(ZfsParams(950, 200), 66, np.arange(0, 91, 5.0))
    d = scan.frequency("DOUBLET")
    assert np.ptp(d) <= 1e-9 * d[0]


def test_angle_scan_axial_closed_form():
    scan = angle_scan(ZfsParams(950, 200), 66, [0.0])
    assert scan.frequency("T_PLUS")[0] == pytest.approx(950 + math.hypot(200, 1849.65), abs=1e-6)


@pytest.mark.parametrize("e", [0.0, 200.0])
def test_t_plus_branch_higher_on_axis(e):
    zfs = ZfsParams(950, e)
    for b in (5, 10, 40, 66, 120, 160):
        t = angle_scan(zfs, b, [0.0, 90.0], labeling="branch").frequency("T_PLUS")
        assert t[0] > t[1], b


def test_t_plus_ordering_reverses_below_level_crossing():
    # between ~14 mT and the axial crossing at sqrt(D^2 - E^2) / gamma the
    # in-plane upper line sits above the axial one
    t = angle_scan(ZfsParams(950, 200), 30, [0.0, 90.0], labeling="branch").frequency("T_PLUS")
    assert t[0] < t[1]


def test_branch_labels_continuous_through_rotation():
    scan = angle_scan(ZfsParams(950, 200), 66, np.arange(0, 90.1, 0.5), labeling="branch")
    for label in ("T_MINUS", "T_PLUS", "DQT"):
        assert np.abs(np.diff(scan.frequency(label))).max() < 20, label


def test_character_labels_jump_off_axis():
    # past ~45 deg the |0>-like state is the lowest level, so the name moves lines
    scan = angle_scan(ZfsParams(950, 200), 66, [40.0, 50.0])
    assert scan.frequency("T_PLUS")[1] - scan.frequency("T_PLUS")[0] > 1000


def test_labelings_agree_on_axis():
    for b in (5.0, 30.0, 66.0, 160.0):
        a = angle_scan(ZfsParams(950, 200), b, [0.0]).transition_frequencies[0].as_dict()
        c = angle_scan(ZfsParams(950, 200), b, [0.0], labeling="branch").transition_frequencies[0].as_dict()
        assert a == pytest.approx(c, abs=1e-9)


def test_angle_corrections():
    scan = angle_scan(ZfsParams(950, 200), 66, [0.0, 45.0], corrections=[1.0, 0.9])
    assert scan.frequency("DOUBLET")[1] == pytest.approx(0.9 * 1849.65, abs=1e-9)
    with pytest.raises(DomainError):
        angle_scan(ZfsParams(950, 200), 66, [0.0], corrections=[0.0])
    with pytest.raises(DomainError):
        angle_scan(ZfsParams(950, 200), 66, [0.0, 10.0], corrections=[1.0])


# --- pulsed ---------------------------------------------------------------

B66 = FieldVector.axial(66)


def test_all_off_decays_to_ground():
    model = ModelParams()
    p0 = laser_steady_state(model, B66)
    trace = pulsed_transient(model, PulseSequence([Segment(False, False, 200.0)]), 1.0, B66, p0=p0)
    assert trace.pl[0] > 0
    assert trace.pl[-1] < 1e-9 * trace.pl[0]
    assert trace.populations[-1, GS] == pytest.approx(1.0, abs=1e-9)


def test_laser_step_overshoots_then_settles():
    model = ModelParams()
    gen = model.rate_model(B66).generator()
    settle = 5.0 / slowest_rate(gen)
    trace = pulsed_transient(model, PulseSequence([Segment(True, False, 3 * settle)]), 0.005, B66)
    p_ss = model.rates.k_rad * laser_steady_state(model, B66)[1]
    assert trace.pl.max() > 1.2 * p_ss
    late = trace.times >= settle
    assert np.abs(trace.pl[late] - p_ss).max() <= 0.01 * p_ss


def test_pulse_semigroup():
    model = ModelParams(mw=MwDrive(frequency=1849.65))
    a = PulseSequence([Segment(True, False, 1.0), Segment(True, True, 0.5)])
    b = PulseSequence([Segment(False, True, 0.75), Segment(True, False, 1.25)])
    whole = pulsed_transient(model, a + b, 0.05, B66)
    first = pulsed_transient(model, a, 0.05, B66)
    second = pulsed_transient(model, b, 0.05, B66, p0=first.populations[-1])
    np.testing.assert_allclose(whole.populations[-1], second.populations[-1], atol=1e-9)
    np.testing.assert_allclose(whole.times[-1], (a + b).duration)


def test_pulse_sequence_validation():
    with pytest.raises(DomainError):
        PulseSequence([])
    with pytest.raises(DomainError):
        Segment(True, True, 0.0)
    with pytest.raises(DomainError):
        pulsed_transient(ModelParams(), PulseSequence([Segment(True, False, 1)]), 0.0, B66)


def test_ground_state_vector():
    p = ground_state()
    assert p.sum() == 1 and p[GS] == 1
