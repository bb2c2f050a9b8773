"""Laboratory-frame measurement records.

The Faraday channel carries the frame-1R projections as a quadrature
amplitude modulated carrier,

    V(t) = A(t) [fz(t) cos(w_c t) + fy(t) sin(w_c t)] + n(t),

where ``A`` is the atom-number envelope and ``n`` white Gaussian noise. The
reference channel is a copy of the rf drive, ``g(x) cos(w_c t - phi_hw)``
with ``x = Omega_c(t) / Omega_f``. A gain nonlinearity ``g`` of the drive
chain shifts the Rabi frequency the atoms actually see, which is how sweep
nonlinearity enters a simulated experiment (see :func:`distortion_correction`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.polynomial import Polynomial
from scipy.interpolate import CubicSpline

from .errors import ConfigurationError, DomainError
from .model import Frame, BlochTrajectory, RabiCorrection, SweepConfig, to_frame_2s
from .timeseries import TimeSeries

#: Digitizer rate of both channels (samples/s).
DIGITIZER_RATE = 5e6

#: Hardware phase of the reference channel relative to the drive (degrees).
HARDWARE_PHASE_DEG = 65.0

#: Preroll segments: probe off (electronic noise), then probe on without atoms.
PREROLL_ELECTRONIC = 10e-3
PREROLL_SHOT = 5e-3

# independent RNG streams per channel
_STREAM_FARADAY = 0
_STREAM_PREROLL = 1


@dataclass(frozen=True)
class NoiseModel:
    """Additive white Gaussian noise on the Faraday channel.

    Parameters
    ----------
    shot_rms : float
        Per-sample RMS of photon shot noise, in units of the full spin signal.
    electronic_rms : float, optional
        Per-sample RMS of detector noise. Defaults to 10 dB below shot noise.
    seed : int
    """

    shot_rms: float = 0.0
    electronic_rms: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.electronic_rms is None:
            object.__setattr__(self, "electronic_rms", self.shot_rms / math.sqrt(10.0))
        if not (self.shot_rms >= 0 and self.electronic_rms >= 0):
            raise DomainError("noise RMS values must be nonnegative")

    @classmethod
    def off(cls) -> "NoiseModel":
        return cls(0.0, 0.0)

    @property
    def total_rms(self) -> float:
        return math.hypot(self.shot_rms, self.electronic_rms)

    @property
    def is_off(self) -> bool:
        return self.total_rms == 0.0

    def rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng([int(self.seed), stream])


@dataclass(frozen=True)
class DecayModel:
    """Atom-number envelope ``A(t)``, exponential unless ``envelope`` is given."""

    lifetime: float = 1.3
    envelope: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if not self.lifetime > 0:
            raise DomainError("lifetime must be positive")
        if self.envelope is not None:
            t = np.linspace(0.0, 10.0 * min(self.lifetime, 1.0), 1001)
            a = np.asarray(self.envelope(t), dtype=float)
            if abs(a[0] - 1.0) > 1e-12 or np.any(np.diff(a) > 0) or np.any(a <= 0) or np.any(a > 1):
                raise DomainError("envelope must start at 1 and be nonincreasing in (0, 1]")

    @classmethod
    def none(cls) -> "DecayModel":
        return cls(lifetime=math.inf)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.envelope is not None:
            return np.asarray(self.envelope(t), dtype=float)
        return np.exp(-t / self.lifetime)


class GainDistortion:
    """Drive-chain gain ``g(x) = x + sum_k c_k x^k`` on the normalized amplitude.

    ``coefficients`` are ``(c_2, c_3, ...)``; the identity is ``()``.
    """

    def __init__(self, coefficients=()):
        coefficients = tuple(float(c) for c in coefficients)
        self.coefficients = coefficients
        self._poly = Polynomial((0.0, 1.0) + coefficients)

    @property
    def is_identity(self) -> bool:
        return not any(self.coefficients)

    def __call__(self, x):
        return self._poly(np.asarray(x, dtype=float))

    def __repr__(self):
        return f"GainDistortion({self.coefficients})"


def distortion_correction(sweep: SweepConfig, distortion: GainDistortion | None) -> RabiCorrection:
    """Rabi-frequency error ``Omega_f (g(x) - x)`` produced by a gain nonlinearity.

    The Rabi frequency is proportional to drive amplitude; the sweep is
    commanded linearly in ``x = Omega_c / Omega_f`` and distorted by ``g``.
    """
    if distortion is None or distortion.is_identity:
        return RabiCorrection.zero()

    def err(t):
        x = sweep.rabi(t) / sweep.rabi_stop
        return sweep.rabi_stop * (distortion(x) - x)

    corr = RabiCorrection.from_function(err, sweep.duration)
    corr.check(sweep)
    return corr


def _check_rate(rate: float, sweep: SweepConfig):
    # carrier plus the outermost sideband, four samples per cycle
    need = 4.0 * (sweep.carrier + sweep.rabi_stop) / (2.0 * math.pi)
    if not rate >= need:
        raise ConfigurationError(f"rate {rate:g} S/s below the {need:g} S/s guard for this carrier")


def _grid(duration: float, rate: float) -> np.ndarray:
    n = int(round(duration * rate))
    return np.arange(n + 1) / rate


def quantize16(x: np.ndarray, full_scale: float) -> np.ndarray:
    """Round to a signed 16-bit converter spanning ``[-full_scale, full_scale]``."""
    lsb = full_scale / 32768.0
    return np.clip(np.round(x / lsb), -32768, 32767) * lsb


def synthesize_faraday(
    traj: BlochTrajectory,
    sweep: SweepConfig,
    decay: DecayModel | None = None,
    noise: NoiseModel | None = None,
    rate: float = DIGITIZER_RATE,
    quantize: bool = False,
    full_scale: float = 2.0,
) -> TimeSeries:
    """Faraday polarimeter record from a frame-1R trajectory.

    The trajectory is rotated into the frame co-rotating with the nominal
    sweep, where it varies only on the signal time scale, spline-interpolated
    onto the digitizer grid there, and rotated back analytically. This avoids
    interpolating the ``Omega_c`` oscillation of ``fy`` directly.
    """
    if traj.frame is not Frame.R1:
        raise DomainError("synthesize_faraday expects a frame-1R trajectory")
    _check_rate(rate, sweep)
    if traj.times[0] > 1e-12 or traj.times[-1] < sweep.duration - 1e-9:
        raise DomainError("trajectory does not span the sweep")
    decay = decay or DecayModel.none()
    noise = noise or NoiseModel.off()

    slow = to_frame_2s(traj, sweep)
    t = _grid(sweep.duration, rate)
    spline = CubicSpline(slow.times, slow.states, axis=0)
    s2 = spline(t)
    theta = sweep.rabi_phase(t)
    c, s = np.cos(theta), np.sin(theta)
    fy = -s * s2[:, 0] + c * s2[:, 1]
    fz = s2[:, 2]
    wt = sweep.carrier * t
    v = decay(t) * (fz * np.cos(wt) + fy * np.sin(wt))
    if not noise.is_off:
        v += noise.total_rms * noise.rng(_STREAM_FARADAY).standard_normal(t.size)
    if quantize:
        v = quantize16(v, full_scale)
    return TimeSeries(rate, 0.0, v, label="faraday")


def synthesize_reference(
    sweep: SweepConfig,
    distortion: GainDistortion | None = None,
    rate: float = DIGITIZER_RATE,
    hw_phase_deg: float = HARDWARE_PHASE_DEG,
    quantize: bool = False,
    full_scale: float = 2.0,
) -> TimeSeries:
    """Reference copy of the rf drive, ``g(Omega_c/Omega_f) cos(w_c t - phi_hw)``."""
    _check_rate(rate, sweep)
    distortion = distortion or GainDistortion()
    t = _grid(sweep.duration, rate)
    amp = distortion(sweep.rabi(t) / sweep.rabi_stop)
    v = amp * np.cos(sweep.carrier * t - math.radians(hw_phase_deg))
    if quantize:
        v = quantize16(v, full_scale)
    return TimeSeries(rate, 0.0, v, label="reference")


def preroll(noise: NoiseModel, rate: float = DIGITIZER_RATE) -> TimeSeries:
    """Noise-only preamble recorded before the sweep.

    10 ms with the probe off (electronic noise) followed by 5 ms with the probe
    on and no atoms (shot noise). Ends at ``t = 0``.
    """
    n1 = int(round(PREROLL_ELECTRONIC * rate))
    n2 = int(round(PREROLL_SHOT * rate))
    rng = noise.rng(_STREAM_PREROLL)
    z = rng.standard_normal(n1 + n2)
    z[:n1] *= noise.electronic_rms
    z[n1:] *= noise.shot_rms
    return TimeSeries(rate, -(n1 + n2) / rate, z, label="preroll")


def preroll_segments(pre: TimeSeries) -> tuple[np.ndarray, np.ndarray]:
    """Split a preroll record into its electronic and shot-noise segments."""
    n1 = int(round(PREROLL_ELECTRONIC * pre.rate))
    return pre.samples[:n1], pre.samples[n1:]
