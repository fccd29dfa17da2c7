import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import expm_evolve, null_vector
from spinsim import DomainError, FieldVector, ModelError, MwDrive, PairModel, RateParams, ZfsParams
from spinsim.photodynamics import (
    ES, GS, LMS, MAX_STEP_FACTOR, RMS, AmplifierTable, GeneratorMatrix, RateModel, assemble_generator,
    background_for_dip, evolve, g2, odmr_contrast, pl_rate, propagator, slowest_rate, steady_state, step_count,
)
from spinsim.spin import doublet_frequency

ZFS = ZfsParams(950, 200)
PAIR = PairModel()
B66 = FieldVector.axial(66)


def default_gen(mw=None, rates=None, field=B66):
    return assemble_generator(ZFS, PAIR, rates or RateParams(), field, mw)


def random_rates(rng):
    k_rec_t = rng.uniform(0.01, 5)
    return RateParams(
        k_pump=rng.uniform(0.1, 50), k_rad=rng.uniform(10, 300),
        k_isc=tuple(rng.uniform(0, 20, 3)), k_ct=rng.uniform(0.1, 20),
        k_rec_s=k_rec_t + rng.uniform(0.1, 50), k_rec_t=k_rec_t, k_lms_gs=rng.uniform(0.01, 1),
        k_mix=rng.uniform(0, 100), mix_fwhm_mhz=rng.uniform(10, 500),
    )


# --- rate parameters ------------------------------------------------------

def test_rate_validation():
    with pytest.raises(DomainError, match="k_ct"):
        RateParams(k_ct=-1)
    with pytest.raises(DomainError, match="singlet recombination"):
        RateParams(k_rec_s=0.1, k_rec_t=0.5)
    with pytest.raises(DomainError):
        RateParams(k_isc=(1, 2))
    with pytest.raises(DomainError):
        MwDrive(linewidth_fwhm=0)


# --- generator ------------------------------------------------------------

def test_generator_structure_on_random_draws():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        rates = random_rates(rng)
        fld = FieldVector(*rng.uniform(-150, 150, 3))
        mw = MwDrive(frequency=rng.uniform(0, 4000), drive_rate=rng.uniform(0, 20))
        m = RateModel(ZFS, PAIR, rates, fld).generator(mw).matrix
        np.testing.assert_allclose(m.sum(axis=0), 0, atol=1e-9 * np.abs(m).max())
        off = m - np.diag(np.diag(m))
        assert off.min() >= 0


def test_negative_off_diagonal_rejected():
    m = np.zeros((2, 2))
    m[0, 1], m[1, 1] = -1.0, 1.0
    with pytest.raises(ModelError, match="negative rate"):
        GeneratorMatrix(m)


def test_no_mixing_without_microwaves():
    m = default_gen(rates=RateParams(k_mix=0)).matrix
    lms = np.ix_(LMS, LMS)
    rms = np.ix_(RMS, RMS)
    assert np.count_nonzero(m[lms] - np.diag(np.diag(m[lms]))) == 0
    assert np.count_nonzero(m[rms] - np.diag(np.diag(m[rms]))) == 0
    # with drive on, the LMS block picks up mixing terms
    driven = default_gen(MwDrive(frequency=2810.43)).matrix
    assert np.count_nonzero(driven[lms] - np.diag(np.diag(driven[lms]))) > 0


def test_zero_isc_isolates_optical_cycle():
    rates = RateParams(k_isc=(0, 0, 0))
    m = default_gen(rates=rates).matrix
    # nothing reaches the metastable block from the optical cycle
    assert np.all(m[np.ix_(LMS + RMS, (GS, ES))] == 0)
    p = steady_state(GeneratorMatrix(m))
    assert p[list(LMS + RMS)].sum() == 0


# --- steady state ---------------------------------------------------------

def test_two_level_closed_form():
    rates = RateParams(k_pump=7, k_rad=90, k_isc=(0, 0, 0))
    p = steady_state(default_gen(rates=rates))
    assert p[ES] == pytest.approx(7 / 97, rel=1e-12)
    assert pl_rate(p, rates) == pytest.approx(90 * 7 / 97, rel=1e-12)


def test_dark_model_relaxes_to_ground():
    p = steady_state(default_gen(rates=RateParams(k_pump=0)))
    assert p[GS] == pytest.approx(1.0, abs=1e-12)
    assert pl_rate(p, RateParams()) == 0.0
    with pytest.raises(ModelError, match="dark"):
        odmr_contrast(ZFS, PAIR, RateParams(k_pump=0), B66, MwDrive(frequency=1849.65))


def test_disconnected_classes_rejected():
    # two absorbing states
    m = np.zeros((3, 3))
    m[0, 2] = m[1, 2] = 1.0
    m[2, 2] = -2.0
    with pytest.raises(ModelError, match="not unique"):
        steady_state(GeneratorMatrix(m))


def test_steady_state_matches_null_space_and_long_time():
    gen = default_gen(MwDrive(frequency=doublet_frequency(B66)))
    p = steady_state(gen)
    np.testing.assert_allclose(p, null_vector(gen.matrix), atol=1e-12)
    t_long = 1e4 / slowest_rate(gen)
    np.testing.assert_allclose(expm_evolve(gen.matrix, np.eye(9)[GS], t_long), p, atol=1e-8)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert p.min() >= 0


def test_pl_monotone_in_pump():
    pls = []
    for k in np.linspace(0.1, 200, 40):
        rates = RateParams(k_pump=float(k))
        pls.append(pl_rate(steady_state(default_gen(rates=rates)), rates))
    assert np.all(np.diff(pls) >= 0)


def test_pl_rate_zero_without_excited_population():
    p = np.zeros(9)
    p[GS] = 1
    assert pl_rate(p, RateParams()) == 0.0


# --- contrast -------------------------------------------------------------

def test_contrast_far_detuned_and_undriven():
    assert abs(odmr_contrast(ZFS, PAIR, RateParams(), B66, MwDrive(frequency=2e5))) < 1e-6
    assert odmr_contrast(ZFS, PAIR, RateParams(), B66, MwDrive(frequency=1849.65, drive_rate=0)) == 0.0


def test_contrast_at_doublet_nonzero():
    c = odmr_contrast(ZFS, PAIR, RateParams(), B66, MwDrive(frequency=doublet_frequency(B66)))
    assert abs(c) > 0.1


def test_no_charge_transfer_no_doublet():
    rates = RateParams(k_ct=0)
    c = odmr_contrast(ZFS, PAIR, rates, B66, MwDrive(frequency=doublet_frequency(B66)))
    assert abs(c) < 1e-9


def test_amplifier_table_scales_drive():
    table = AmplifierTable((0.0, 5000.0), (0.0, 2.0))
    assert table(2500.0) == pytest.approx(1.0)
    f = doublet_frequency(B66)
    plain = odmr_contrast(ZFS, PAIR, RateParams(), B66, MwDrive(frequency=f, drive_rate=5 * table(f)))
    scaled = odmr_contrast(ZFS, PAIR, RateParams(), B66, MwDrive(frequency=f, drive_rate=5, amplifier=table))
    assert scaled == pytest.approx(plain, rel=1e-12)
    with pytest.raises(DomainError):
        AmplifierTable((1.0, 1.0), (1.0, 1.0))


# --- time evolution -------------------------------------------------------

def test_evolve_zero_time_is_identity():
    p0 = np.full(9, 1 / 9)
    np.testing.assert_array_equal(evolve(default_gen(), p0, 0.0), p0)


def test_propagator_matches_expm():
    gen = default_gen(MwDrive(frequency=1849.65))
    p0 = np.eye(9)[GS]
    for t in (0.003, 0.1, 1.7, 25.0):
        np.testing.assert_allclose(evolve(gen, p0, t), expm_evolve(gen.matrix, p0, t), atol=1e-6)


def test_step_bound():
    m = default_gen().matrix
    t = 3.0
    assert t / step_count(m, t) <= MAX_STEP_FACTOR / np.abs(np.diag(m)).max() + 1e-15


def test_negative_time_rejected():
    with pytest.raises(DomainError):
        propagator(default_gen(), -1.0)


def test_evolve_rejects_unnormalized_start():
    with pytest.raises(DomainError):
        evolve(default_gen(), np.zeros(9), 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 50.0))
def test_probability_conserved(seed, t):
    rng = np.random.default_rng(seed)
    gen = RateModel(ZFS, PAIR, random_rates(rng), FieldVector.axial(rng.uniform(0, 150))).generator(
        MwDrive(frequency=rng.uniform(0, 4000)))
    p0 = rng.dirichlet(np.ones(9))
    p = evolve(gen, p0, t)
    assert abs(p.sum() - 1) < 1e-9
    assert p.min() >= 0


def test_long_time_evolution_reaches_steady_state():
    gen = default_gen()
    p = evolve(gen, np.eye(9)[GS], 20.0 / slowest_rate(gen))
    np.testing.assert_allclose(p, steady_state(gen), atol=1e-6)


# --- photon statistics ----------------------------------------------------

def test_g2_limits_and_bunching():
    tau = np.concatenate([[0.0], np.geomspace(1e-3, 1e3, 60)])
    g = g2(ZFS, PAIR, RateParams(), B66, tau)
    assert g[0] == 0.0
    assert g[-1] == pytest.approx(1.0, abs=1e-6)
    assert g.max() > 1.0


def test_g2_background_knob():
    b = background_for_dip(0.1)
    g = g2(ZFS, PAIR, RateParams(), B66, [0.0, 1e3], background=b)
    assert g[0] == pytest.approx(0.1, abs=1e-12)
    assert g[1] == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(DomainError):
        background_for_dip(1.0)
