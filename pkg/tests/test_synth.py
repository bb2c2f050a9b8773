import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import signal

from lzsa.dsp import spectrogram
from lzsa.errors import ConfigurationError, DomainError
from lzsa.model import BlochTrajectory, Frame, SweepConfig, Tone, hz, integrate
from lzsa.synth import (
    HARDWARE_PHASE_DEG,
    DecayModel,
    GainDistortion,
    NoiseModel,
    distortion_correction,
    preroll,
    preroll_segments,
    quantize16,
    synthesize_faraday,
    synthesize_reference,
)

TWO_PI = 2 * math.pi
RATE = 5e6


@pytest.fixture(scope="module")
def short():
    # 20 ms keeps the 5 MS/s records small
    return SweepConfig.from_hz(603.5e3, 7e3, 7.4e3, 0.02)


def constant_traj(sweep, state):
    t = np.arange(0.0, sweep.duration + 1e-12, 8e-6)
    return BlochTrajectory(Frame.R1, t, np.tile(np.asarray(state, float), (t.size, 1)))


def test_eigenstate_gives_pure_carrier(short):
    x = synthesize_faraday(constant_traj(short, (0, 0, 1)), short)
    assert x.rate == RATE and x.t0 == 0.0
    np.testing.assert_allclose(x.samples, np.cos(short.carrier * x.times), atol=1e-9)


def test_transverse_gives_quadrature(short):
    # a fixed frame-1R transverse vector turns at Omega_c in the interpolation
    # frame, so spline error of the 8 us grid shows up here (physical
    # precession is frozen there and interpolates exactly)
    x = synthesize_faraday(constant_traj(short, (0, 1, 0)), short)
    np.testing.assert_allclose(x.samples, np.sin(short.carrier * x.times), atol=1e-3)


def test_model_trajectory_is_interpolated_faithfully(short):
    traj = integrate(short, [Tone(hz(50.0), hz(7.2e3), 1.0)], init=(1, 0, 0))
    x = synthesize_faraday(traj, short)
    # on the trajectory's own grid the record is exact
    k = np.round(traj.times * RATE).astype(int)
    wt = short.carrier * traj.times
    expect = traj.fz * np.cos(wt) + traj.fy * np.sin(wt)
    np.testing.assert_allclose(x.samples[k], expect, atol=1e-9)


def test_rabi_flopping_sidebands():
    # nearly constant control splitting: carrier suppressed, sidebands at w_c +- Omega_c
    sweep = SweepConfig.from_hz(603.5e3, 10e3, 10.0001e3, 0.05)
    traj = integrate(sweep, init=(1, 0, 0))
    x = synthesize_faraday(traj, sweep)
    f, p = signal.periodogram(x.samples, fs=x.rate, window="hann")
    sel = (f > 590e3) & (f < 620e3)
    f, p = f[sel], p[sel]
    peaks = np.sort(f[np.argsort(p)[-2:]])
    np.testing.assert_allclose(peaks, [593.5e3, 613.5e3], atol=2 * (f[1] - f[0]))
    assert np.interp(603.5e3, f, p) < 1e-6 * p.max()


def test_decay_envelope(short):
    decay = DecayModel(1.3)
    x = synthesize_faraday(constant_traj(short, (0, 0, 1)), short, decay=decay)
    env = np.abs(signal.hilbert(x.samples))
    inner = slice(5000, -5000)
    np.testing.assert_allclose(env[inner], decay(x.times[inner]), rtol=5e-3)


def test_spectral_placement():
    sweep = SweepConfig.from_hz(603.5e3, 7e3, 13e3, 0.1)
    traj = integrate(sweep, init=(1, 0, 0))
    x = synthesize_faraday(traj, sweep)
    t, f, db = spectrogram(x, window=2e-3, band=(585e3, 622e3))
    df = f[1] - f[0]
    upper = f >= 603.5e3
    for i in range(2, t.size - 2):
        omega = sweep.rabi(t[i]) / TWO_PI
        fu = f[upper][np.argmax(db[upper, i])]
        fl = f[~upper][np.argmax(db[~upper, i])]
        assert abs(fu - (603.5e3 + omega)) <= df
        assert abs(fl - (603.5e3 - omega)) <= df


def test_rate_guard(short):
    with pytest.raises(ConfigurationError):
        synthesize_faraday(constant_traj(short, (0, 0, 1)), short, rate=1e6)
    with pytest.raises(ConfigurationError):
        synthesize_reference(short, rate=1e6)


def test_wrong_frame_or_short_trajectory(short):
    traj = constant_traj(short, (0, 0, 1))
    with pytest.raises(DomainError):
        synthesize_faraday(BlochTrajectory(Frame.S2, traj.times, traj.states), short)
    with pytest.raises(DomainError):
        synthesize_faraday(BlochTrajectory(Frame.R1, traj.times[:100], traj.states[:100]), short)


def test_noise_statistics_and_determinism(short):
    traj = constant_traj(short, (0, 0, 1))
    clean = synthesize_faraday(traj, short)
    noise = NoiseModel(0.42, seed=7)
    a = synthesize_faraday(traj, short, noise=noise)
    b = synthesize_faraday(traj, short, noise=NoiseModel(0.42, seed=7))
    c = synthesize_faraday(traj, short, noise=NoiseModel(0.42, seed=8))
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)
    assert np.std(a.samples - clean.samples) == pytest.approx(noise.total_rms, rel=0.01)


def test_noise_model_defaults():
    n = NoiseModel(0.3)
    assert n.electronic_rms == pytest.approx(0.3 / math.sqrt(10))
    assert NoiseModel.off().is_off
    with pytest.raises(DomainError):
        NoiseModel(-0.1)
    with pytest.raises(DomainError):
        NoiseModel(0.1, -0.1)


def test_decay_model_invariants():
    d = DecayModel()
    assert d.lifetime == 1.3 and d(0.0) == 1.0
    assert d(0.3) == pytest.approx(0.794, abs=1e-3)
    assert np.all(np.diff(d(np.linspace(0, 1, 100))) < 0)
    assert DecayModel.none()(10.0) == 1.0
    with pytest.raises(DomainError):
        DecayModel(0.0)
    with pytest.raises(DomainError):
        DecayModel(1.0, envelope=lambda t: 1.0 + 0.1 * t)
    with pytest.raises(DomainError):
        DecayModel(1.0, envelope=lambda t: 0.5 + 0 * t)
    lin = DecayModel(1.0, envelope=lambda t: 1.0 - 0.05 * t)
    assert lin(2.0) == pytest.approx(0.9)


def test_reference_linear_ramp_and_phase(short):
    ref = synthesize_reference(short)
    a = signal.hilbert(ref.samples)
    inner = slice(5000, -5000)
    t = ref.times[inner]
    np.testing.assert_allclose(np.abs(a[inner]), short.rabi(t) / short.rabi_stop, atol=2e-3)
    dphi = np.angle(a[inner] * np.exp(-1j * short.carrier * t))
    np.testing.assert_allclose(dphi, -math.radians(HARDWARE_PHASE_DEG), atol=2e-3)
    assert HARDWARE_PHASE_DEG == 65.0


def test_reference_distortion_is_quadratic(short):
    g = GainDistortion((0.05,))
    ref = synthesize_reference(short, g, hw_phase_deg=0.0)
    x = short.rabi(ref.times) / short.rabi_stop
    np.testing.assert_allclose(ref.samples, (x + 0.05 * x**2) * np.cos(short.carrier * ref.times), atol=1e-12)


def test_distortion_correction_matches_gain():
    sweep = SweepConfig.from_hz(603.5e3, 7e3, 13e3, 0.3)
    g = GainDistortion((0.02, -0.01))
    corr = distortion_correction(sweep, g)
    t = np.linspace(0, 0.3, 301)
    x = sweep.rabi(t) / sweep.rabi_stop
    np.testing.assert_allclose(corr(t), sweep.rabi_stop * (0.02 * x**2 - 0.01 * x**3), rtol=1e-9, atol=1e-9)
    assert distortion_correction(sweep, GainDistortion()).is_zero
    assert distortion_correction(sweep, None).is_zero


@given(st.lists(st.floats(-0.05, 0.05, allow_nan=False), max_size=3), st.floats(0, 1))
def test_gain_distortion_identity_part(cs, x):
    g = GainDistortion(cs)
    assert g(x) == pytest.approx(x + sum(c * x ** (k + 2) for k, c in enumerate(cs)), abs=1e-12)
    assert g(0.0) == 0.0


def test_preroll_segments():
    pre = preroll(NoiseModel(0.42, seed=3))
    # last sample one period before the sweep starts
    assert pre.t_end + 1 / pre.rate == pytest.approx(0.0, abs=1e-12)
    e, s = preroll_segments(pre)
    assert e.size == 50_000 and s.size == 25_000
    ratio = np.std(s) / np.std(e)
    assert ratio == pytest.approx(math.sqrt(10), rel=0.03)
    assert not np.any(preroll(NoiseModel.off()).samples)


@settings(max_examples=50)
@given(arrays(float, 64, elements=st.floats(-3, 3)), st.floats(0.5, 2.0))
def test_quantize16(x, fs):
    q = quantize16(x, fs)
    lsb = fs / 32768
    inside = (x >= -fs) & (x < fs - lsb)
    assert np.all(np.abs(q[inside] - x[inside]) <= lsb / 2 + 1e-15)
    assert np.all(q >= -fs) and np.all(q <= fs)
    assert np.allclose(q / lsb, np.round(q / lsb))


def test_quantized_record(short):
    traj = constant_traj(short, (0, 0, 1))
    x = synthesize_faraday(traj, short, quantize=True)
    assert np.max(np.abs(x.samples - np.cos(short.carrier * x.times))) <= 2.0 / 32768
