"""Offline demodulation of the Faraday record to spin projections.

Chain (all filters linear-phase FIR, applied centred so outputs stay aligned
with the input time axis)::

    faraday --bandpass--> x
    reference --analytic, unit modulus, phase correction--> c = exp(i w_c t)
    x * c --LP 22 kHz--> decimate to 200 kS/s --> fy = 2 Im,  fz = 2 LP1.5k[Re]
    envelope = SavGol(sqrt(fz^2 + fy^2 + H[fy]^2)),  normalize
    fy * exp(i theta) --LP 1.5 kHz--> fy2S = 2 Re,  fx2S = -2 Im
    azimuth atan2(fy2S, fx2S) --smoothing spline--> dOmega = -d(azimuth)/dt

The last sign follows from the +Omega_c z convention: transverse spin in
frame-1R turns as ``exp(-i theta)``, so an unmodelled Rabi excess winds the
frame-2S azimuth backwards.
"""
from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, signal
from scipy.fft import next_fast_len
from scipy.interpolate import UnivariateSpline

from .errors import DegenerateReferenceError, DomainError, InsufficientDataError, LossOfSignalError
from .model import TWO_PI, RabiCorrection, SweepConfig, transition_width
from .timeseries import TimeSeries

#: Output rate of the first demodulation stage (samples/s).
DEMOD_RATE = 200e3

#: Reference phase correction (degrees).
PHASE_CORRECTION_DEG = 65.0

#: Samples discarded at each end of an FFT Hilbert transform.
HILBERT_GUARD = 1024


# -- filters -----------------------------------------------------------------

@dataclass(frozen=True)
class FilterSpec:
    """Linear-phase Kaiser-windowed-sinc FIR.

    Parameters
    ----------
    kind : {"lowpass", "bandpass"}
    cutoff : float or (float, float)
        -3 dB frequency (Hz), or band edges for a bandpass.
    transition : float
        Transition width (Hz) to full stopband attenuation.
    attenuation : float
        Stopband attenuation (dB).
    """

    kind: str
    cutoff: float | tuple[float, float]
    transition: float
    attenuation: float = 80.0

    def __post_init__(self):
        if self.kind not in ("lowpass", "bandpass"):
            raise DomainError(f"unknown filter kind {self.kind!r}")
        if self.kind == "bandpass":
            lo, hi = self.cutoff
            if not 0 < lo < hi:
                raise DomainError("bandpass needs 0 < low < high")
        elif not self.cutoff > 0:
            raise DomainError("cutoff must be positive")
        if not self.transition > 0:
            raise DomainError("transition width must be positive")

    @classmethod
    def lowpass(cls, cutoff, transition=None, attenuation=80.0) -> "FilterSpec":
        return cls("lowpass", float(cutoff), float(transition or cutoff * 2 / 3), attenuation)

    @classmethod
    def bandpass(cls, low, high, transition, attenuation=80.0) -> "FilterSpec":
        return cls("bandpass", (float(low), float(high)), float(transition), attenuation)

    def taps(self, rate: float) -> np.ndarray:
        return _design(self, float(rate))

    def half_length(self, rate: float) -> int:
        return (self.taps(rate).size - 1) // 2

    def response(self, freqs, rate: float) -> np.ndarray:
        """Zero-phase amplitude response at ``freqs`` (Hz)."""
        return _amplitude(self.taps(rate), np.asarray(freqs, dtype=float), rate)

    def apply(self, x: TimeSeries) -> TimeSeries:
        """Filter without delay; the valid interval shrinks by the half length."""
        h = self.taps(x.rate)
        half = (h.size - 1) // 2
        if x.samples.size <= h.size:
            raise DomainError("record shorter than the filter")
        y = signal.oaconvolve(x.samples, h, mode="same")
        lo, hi = x.valid
        return TimeSeries(x.rate, x.t0, y, x.label, (lo + half / x.rate, hi - half / x.rate))


def _amplitude(h, f, rate):
    n = np.arange(h.size) - (h.size - 1) / 2
    return np.cos(np.outer(TWO_PI * f / rate, n)) @ h


@functools.lru_cache(maxsize=64)
def _design(spec: FilterSpec, rate: float) -> np.ndarray:
    nyq = rate / 2
    edges = np.atleast_1d(spec.cutoff).astype(float)
    if np.any(edges >= nyq):
        raise DomainError(f"cutoff {spec.cutoff} not below Nyquist {nyq}")
    numtaps, beta = signal.kaiserord(spec.attenuation, spec.transition / nyq)
    numtaps |= 1
    win = ("kaiser", beta)

    if spec.kind == "lowpass":
        def make(fc):
            return signal.firwin(numtaps, fc, window=win, fs=rate)
        target = edges[0]
        # windowed sinc is -6 dB at its design edge; move the edge out to -3 dB
        shift = optimize.brentq(
            lambda d: _amplitude(make(target + d), np.array([target]), rate)[0] - 1 / math.sqrt(2),
            0.0, min(spec.transition, nyq - target - 1e-9 * nyq),
        )
        return make(target + shift)

    lo, hi = edges

    def make(d):
        return signal.firwin(numtaps, [lo - d, hi + d], window=win, pass_zero=False, fs=rate)

    shift = optimize.brentq(
        lambda d: _amplitude(make(d), np.array([hi]), rate)[0] - 1 / math.sqrt(2),
        0.0, min(spec.transition, lo * 0.999, nyq - hi - 1e-9 * nyq),
    )
    return make(shift)


#: Defaults of the paper pipeline.
LP_Z = FilterSpec.lowpass(1.5e3, 1.0e3)
LP_Y = FilterSpec.lowpass(22e3, 10e3)


def default_bandpass(sweep: SweepConfig, transition: float = 5e3) -> FilterSpec:
    """Band about the carrier of half-width 1.5 Omega_f, beyond both sidebands."""
    fc = sweep.carrier / TWO_PI
    half = 1.5 * sweep.rabi_stop / TWO_PI
    return FilterSpec.bandpass(fc - half, fc + half, transition)


def bandpass(x: TimeSeries, spec: FilterSpec) -> TimeSeries:
    if spec.kind != "bandpass":
        raise DomainError("bandpass() needs a bandpass FilterSpec")
    return spec.apply(x)


# -- analytic signal and reference -------------------------------------------

def analytic_signal(x: TimeSeries, guard: int = HILBERT_GUARD) -> TimeSeries:
    """``x + i H[x]`` by FFT; ``guard`` samples at each end are marked invalid."""
    if x.is_complex:
        raise DomainError("analytic_signal expects a real record")
    n = x.samples.size
    if n < 1024:
        raise DomainError("analytic_signal needs at least 1024 samples")
    z = signal.hilbert(x.samples, N=next_fast_len(n))[:n]
    lo, hi = x.valid
    return TimeSeries(x.rate, x.t0, z, x.label, (lo + guard / x.rate, hi - guard / x.rate))


def condition_reference(ref: TimeSeries, phase_correction: float = PHASE_CORRECTION_DEG) -> TimeSeries:
    """Unit-modulus complex carrier ``exp(i w_c t)`` from the reference channel.

    ``phase_correction`` is in degrees.
    """
    z = analytic_signal(ref)
    mod = np.abs(z.samples)
    inner = z.valid_mask()
    peak = mod[inner].max() if inner.any() else 0.0
    if peak == 0.0 or mod[inner].min() < 1e-6 * peak:
        raise DegenerateReferenceError("reference envelope vanishes")
    mod = np.where(mod > 0, mod, peak)
    c = z.samples / mod * np.exp(1j * math.radians(phase_correction))
    return z.with_samples(c, label="carrier")


# -- first demodulation ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DemodOutput:
    fz: TimeSeries
    fy: TimeSeries
    envelope: TimeSeries | None = None
    normalized: bool = False

    @property
    def valid(self):
        return self.fz.valid


def _decimation(rate, out_rate):
    q = rate / out_rate
    if abs(q - round(q)) > 1e-9 or round(q) < 1:
        raise DomainError(f"input rate {rate} is not an integer multiple of {out_rate}")
    return int(round(q))


def _aligned(a: TimeSeries, b: TimeSeries):
    if a.rate != b.rate:
        raise DomainError("channel rates differ")
    if len(a) != len(b) or abs(a.t0 - b.t0) > 0.5 / a.rate:
        raise DomainError("channels are not time aligned")


def demod_first(
    faraday: TimeSeries,
    carrier: TimeSeries,
    lp_z: FilterSpec = LP_Z,
    lp_y: FilterSpec = LP_Y,
    out_rate: float = DEMOD_RATE,
) -> DemodOutput:
    """Complex demodulation to unnormalized ``fz1R``, ``fy1R`` at ``out_rate``.

    The 22 kHz stage runs at the input rate and doubles as the anti-alias
    filter of the decimation; ``fz`` then receives the 1.5 kHz stage at the
    output rate. Their cascade differs from a lone 1.5 kHz filter by less than
    1e-3 in the ``fz`` passband.
    """
    _aligned(faraday, carrier)
    q = _decimation(faraday.rate, out_rate)
    valid = (max(faraday.valid[0], carrier.valid[0]), min(faraday.valid[1], carrier.valid[1]))
    mixed = TimeSeries(faraday.rate, faraday.t0, faraday.samples * carrier.samples, "mixed", valid)
    y = lp_y.apply(mixed)
    base = TimeSeries(out_rate, y.t0, y.samples[::q], "baseband", y.valid)
    fy = base.with_samples(2.0 * base.samples.imag, label="fy1R")
    fz = lp_z.apply(base.with_samples(2.0 * base.samples.real, label="fz1R"))
    fy = replace(fy, valid=fz.valid)
    return DemodOutput(fz, fy)


# -- normalization -----------------------------------------------------------

def _savgol_window(rate, window):
    n = int(round(window * rate)) | 1
    return max(n, 5)


def normalize_bloch(d: DemodOutput, window: float = 25e-3, order: int = 3, floor: float = 0.05) -> DemodOutput:
    """Divide out the atom-number envelope.

    ``envelope = SavGol(sqrt(fz^2 + fy^2 + H[fy]^2))`` with ``H[fy]`` standing
    in for the unobserved ``fx1R``. If the envelope falls below ``floor`` of
    its initial value the valid interval is truncated there with a warning.
    """
    fz, fy = d.fz, d.fy
    mask = fz.valid_mask()
    idx = np.flatnonzero(mask)
    if idx.size < 1024:
        raise InsufficientDataError("too few valid samples to normalize")
    a, b = idx[0], idx[-1] + 1
    seg_y = fy.samples[a:b]
    hx = signal.hilbert(seg_y, N=next_fast_len(seg_y.size))[: seg_y.size].imag
    raw = np.sqrt(fz.samples[a:b] ** 2 + seg_y**2 + hx**2)
    n = min(_savgol_window(fz.rate, window), (raw.size - 1) | 1 if raw.size % 2 == 0 else raw.size)
    smooth = signal.savgol_filter(raw, n, order, mode="interp")

    env = np.empty_like(fz.samples)
    env[a:b] = smooth
    env[:a] = smooth[0]
    env[b:] = smooth[-1]

    valid = fz.valid
    low = np.flatnonzero(smooth < floor * smooth[0])
    if low.size:
        cut = fz.t0 + (a + low[0] - 1) / fz.rate
        if low[0] < 0.1 * smooth.size:
            raise LossOfSignalError(f"spin envelope below {floor:.0%} of initial at t={cut:.4f} s")
        warnings.warn(f"spin envelope below {floor:.0%} of initial; truncating at t={cut:.4f} s", RuntimeWarning)
        valid = (valid[0], cut)
        env[a + low[0] :] = smooth[low[0] - 1]

    envelope = TimeSeries(fz.rate, fz.t0, env, "envelope", valid)
    return DemodOutput(
        replace(fz, samples=fz.samples / env, valid=valid),
        replace(fy, samples=fy.samples / env, valid=valid),
        envelope,
        True,
    )


def fx_estimate(fy: TimeSeries) -> TimeSeries:
    """Hilbert-derived ``fx1R`` estimate (transverse partner of ``fy1R``)."""
    mask = fy.valid_mask()
    idx = np.flatnonzero(mask)
    seg = fy.samples[idx[0] : idx[-1] + 1]
    out = np.zeros_like(fy.samples)
    out[idx[0] : idx[-1] + 1] = signal.hilbert(seg, N=next_fast_len(seg.size))[: seg.size].imag
    return fy.with_samples(out, label="fx1R")


# -- second demodulation -----------------------------------------------------

def demod_second(
    fy1R: TimeSeries,
    sweep: SweepConfig,
    corr: RabiCorrection | None = None,
    lp: FilterSpec = LP_Z,
) -> tuple[TimeSeries, TimeSeries]:
    """Frame-2S transverse projections from ``fy1R``.

    ``fy1R = fy2S cos(theta) - fx2S sin(theta)``, so the 1.5 kHz lowpass of
    ``fy1R exp(i theta)`` is ``(fy2S - i fx2S) / 2``.
    """
    corr = corr or RabiCorrection.zero()
    t = fy1R.times
    theta = sweep.rabi_phase(t) + corr.phase(t)
    z = lp.apply(fy1R.with_samples(fy1R.samples * np.exp(1j * theta)))
    fx2 = z.with_samples(-2.0 * z.samples.imag, label="fx2S")
    fy2 = z.with_samples(2.0 * z.samples.real, label="fy2S")
    return fx2, fy2


def azimuth(fx2S: TimeSeries, fy2S: TimeSeries, threshold: float = 0.05, relative: float = 0.25) -> TimeSeries:
    """Unwrapped ``atan2(fy2S, fx2S)``; samples with small transverse length are NaN.

    A sample is kept if its transverse length is at least ``threshold`` and
    at least ``relative`` times the median length of the samples passing
    ``threshold``. The second test drops the small off-resonant forced
    response ahead of a transition from an eigenstate, whose azimuth winds
    at the instantaneous detuning rather than with the control error.
    """
    mag = np.hypot(fx2S.samples, fy2S.samples)
    ok = (mag >= threshold) & fx2S.valid_mask()
    if ok.any():
        ok &= mag >= relative * np.median(mag[ok])
    phi = np.full(mag.shape, np.nan)
    raw = np.arctan2(fy2S.samples[ok], fx2S.samples[ok])
    phi[ok] = np.unwrap(raw)
    return fx2S.with_samples(phi, label="azimuth")


# -- transitions and Rabi error ----------------------------------------------

def block_average(x: TimeSeries, rate: float) -> tuple[np.ndarray, np.ndarray]:
    """Times and means of consecutive blocks of the valid interval at ~``rate``."""
    m = x.valid_mask()
    t = x.times[m]
    y = x.samples[m]
    q = max(1, int(round(x.rate / rate)))
    nb = y.size // q
    if nb == 0:
        raise InsufficientDataError("valid interval shorter than one block")
    return t[: nb * q].reshape(nb, q).mean(axis=1), y[: nb * q].reshape(nb, q).mean(axis=1)


def piecewise_constant_fit(y: np.ndarray, k: int, min_size: int = 3) -> np.ndarray:
    """Least-squares optimal change points of a ``k+1``-segment constant fit.

    Dynamic programming over prefix sums; returns the ``k`` start indices of
    segments 2..k+1.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    if n < (k + 1) * min_size:
        raise InsufficientDataError("series too short for the requested segments")
    c1 = np.r_[0.0, np.cumsum(y)]
    c2 = np.r_[0.0, np.cumsum(y * y)]

    def sse(i, j):  # segment [i, j)
        m = j - i
        s = c1[j] - c1[i]
        return c2[j] - c2[i] - s * s / m

    inf = np.inf
    cost = np.full((k + 1, n + 1), inf)
    arg = np.zeros((k + 1, n + 1), dtype=int)
    for j in range(min_size, n + 1):
        cost[0, j] = sse(0, j)
    idx = np.arange(n + 1)
    for s in range(1, k + 1):
        for j in range((s + 1) * min_size, n + 1):
            i = idx[s * min_size : j - min_size + 1]
            seg = c2[j] - c2[i] - (c1[j] - c1[i]) ** 2 / (j - i)
            tot = cost[s - 1, i] + seg
            b = int(np.argmin(tot))
            cost[s, j] = tot[b]
            arg[s, j] = i[b]
    cps = []
    j = n
    for s in range(k, 0, -1):
        j = arg[s, j]
        cps.append(j)
    return np.array(cps[::-1])


def detect_transitions(fz: TimeSeries, sweep: SweepConfig, count: int = 1, rate: float = 2e3) -> np.ndarray:
    """Times of ``count`` Landau-Zener transitions in ``fz``, earliest first.

    ``fz`` is averaged down to ``rate`` and fitted with the least-squares
    optimal piecewise-constant function with ``count`` change points; a
    transition is placed midway between the blocks that straddle each
    change point. A least-squares step fit is insensitive to the ringing
    that follows a weak transition, which misleads slope-based detectors.
    """
    tb, yb = block_average(fz, rate)
    cps = piecewise_constant_fit(yb, int(count))
    return 0.5 * (tb[cps - 1] + tb[cps])


def transition_mask(times, sweep: SweepConfig, widths: float = 5.0) -> list[tuple[float, float]]:
    """Intervals ``t_k -/+ widths * transition_width / 2`` to exclude from the spline."""
    half = 0.5 * widths * transition_width(sweep)
    return [(float(t) - half, float(t) + half) for t in np.atleast_1d(times)]


def _in_intervals(t, intervals):
    out = np.zeros(t.shape, dtype=bool)
    for lo, hi in intervals:
        out |= (t >= lo) & (t <= hi)
    return out


def _remove_steps(t, phi, keep, intervals, span):
    """Subtract the azimuth jump across each masked interval.

    Each side is fitted with a line over ``span`` seconds next to the
    interval; the difference at the interval centre is the step.
    """
    phi = phi.copy()
    for lo, hi in sorted(intervals):
        left = keep & (t < lo) & (t >= lo - span)
        right = keep & (t > hi) & (t <= hi + span)
        if left.sum() < 8 or right.sum() < 8:
            continue
        mid = 0.5 * (lo + hi)
        pl = np.polyfit(t[left] - mid, phi[left], 1)
        pr = np.polyfit(t[right] - mid, phi[right], 1)
        phi[t > hi] -= pr[1] - pl[1]
    return phi


def _drop_short_runs(keep: np.ndarray, min_len: int) -> np.ndarray:
    """Clear runs of ``True`` shorter than ``min_len`` samples.

    Fragments squeezed between a mask and a signal dropout carry a slope
    the spline would extrapolate over the whole gap.
    """
    k = np.r_[False, keep, False].astype(np.int8)
    d = np.diff(k)
    starts, stops = np.flatnonzero(d == 1), np.flatnonzero(d == -1)
    out = keep.copy()
    for a, b in zip(starts, stops):
        if b - a < min_len:
            out[a:b] = False
    return out


@dataclass(frozen=True, eq=False)
class RabiErrorFit:
    correction: RabiCorrection
    spline: UnivariateSpline
    mask: list = field(default_factory=list)


def rabi_error_correction(
    phi: TimeSeries,
    duration: float,
    smoothness: float = 200.0,
    mask=(),
    remove_steps: bool = True,
    step_span: float = 10e-3,
    spacing: float = 1e-3,
) -> RabiCorrection:
    """Rabi-frequency error from the unexplained winding of the frame-2S azimuth.

    A cubic smoothing spline (FITPACK convention: ``smoothness`` bounds the
    residual sum of squares) is fitted to the unmasked azimuth, and
    ``dOmega = -d phi_fit / dt`` is resampled onto a ``spacing`` grid over
    ``[0, duration]``.
    """
    return rabi_error_fit(phi, duration, smoothness, mask, remove_steps, step_span, spacing).correction


def rabi_error_fit(phi, duration, smoothness=200.0, mask=(), remove_steps=True, step_span=10e-3, spacing=1e-3):
    t = phi.times
    valid = phi.valid_mask()
    masked = _in_intervals(t, mask)
    if (masked & valid).sum() > 0.5 * valid.sum():
        raise InsufficientDataError("transition mask covers more than half of the record")
    keep = _drop_short_runs(valid & ~masked & np.isfinite(phi.samples), int(step_span * phi.rate))
    if keep.sum() < 16:
        raise InsufficientDataError("too few unmasked azimuth samples")
    y = phi.samples
    if remove_steps and len(mask):
        y = _remove_steps(t, y, keep, mask, step_span)
    spl = UnivariateSpline(t[keep], y[keep], k=3, s=smoothness)
    d = spl.derivative()
    lo, hi = t[keep][0], t[keep][-1]

    def err(tt):
        # hold the end slopes flat outside the fitted span
        return -d(np.clip(tt, lo, hi))

    corr = RabiCorrection.from_function(err, duration, spacing)
    return RabiErrorFit(corr, spl, list(mask))


# -- spectrogram -------------------------------------------------------------

def spectrogram(x: TimeSeries, window: float = 3e-3, band: tuple[float, float] | None = None):
    """Power spectral density triples (time, frequency, power in dB).

    ``window`` is the segment duration (s); ``band`` restricts frequencies (Hz).
    """
    nper = int(round(window * x.rate))
    f, tt, sxx = signal.spectrogram(x.samples, fs=x.rate, nperseg=nper, noverlap=nper // 2, window="hann")
    if band is not None:
        sel = (f >= band[0]) & (f <= band[1])
        f, sxx = f[sel], sxx[sel]
    db = 10 * np.log10(np.maximum(sxx, 1e-300))
    return x.t0 + tt, f, db


# -- whole chain -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PipelineResult:
    """All intermediate products of :func:`process`."""

    raw: DemodOutput
    demod: DemodOutput
    fx2S: TimeSeries
    fy2S: TimeSeries
    azimuth: TimeSeries
    correction: RabiCorrection
    transitions: np.ndarray
    mask: list
    fx2S_corrected: TimeSeries
    fy2S_corrected: TimeSeries
    fz2S: TimeSeries
    notes: tuple = ()

    @property
    def fz(self) -> TimeSeries:
        return self.demod.fz

    @property
    def fy(self) -> TimeSeries:
        return self.demod.fy


def process(
    faraday: TimeSeries,
    reference: TimeSeries,
    sweep: SweepConfig,
    phase_correction: float = PHASE_CORRECTION_DEG,
    rabi_correction: bool = True,
    smoothness: float = 200.0,
    tones: int = 1,
    mask_widths: float = 5.0,
    savgol_window: float = 25e-3,
) -> PipelineResult:
    """Raw channels to normalized frame-1R projections and the Rabi correction."""
    x = bandpass(faraday, default_bandpass(sweep))
    carrier = condition_reference(reference, phase_correction)
    raw = demod_first(x, carrier)
    d = normalize_bloch(raw, window=savgol_window)
    fx2, fy2 = demod_second(d.fy, sweep)
    phi = azimuth(fx2, fy2)
    trans = detect_transitions(d.fz, sweep, tones)
    mask = transition_mask(trans, sweep, mask_widths)
    notes = []
    corr = RabiCorrection.zero()
    if rabi_correction:
        fitted = rabi_error_correction(phi, sweep.duration, smoothness, mask)
        try:
            fitted.check(sweep)
            corr = fitted
        except DomainError:
            # strong tones keep the spin dressed between transitions, so the
            # azimuth winding is not control error; refuse rather than inject it
            msg = (f"fitted Rabi correction peaks at {fitted.max_abs(sweep.duration):.4g} rad/s, "
                   "beyond 10% of the initial Rabi frequency; using no correction")
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            notes.append(msg)
    if corr.is_zero:
        cfx, cfy = fx2, fy2
    else:
        cfx, cfy = demod_second(d.fy, sweep, corr)
    fz2 = replace(d.fz, label="fz2S", valid=cfx.valid)
    return PipelineResult(raw, d, fx2, fy2, phi, corr, trans, mask, cfx, cfy, fz2, tuple(notes))
