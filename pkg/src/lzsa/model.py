"""Swept-qubit Bloch dynamics in the dressed (frame-1R) picture.

The Rabi vector in frame-1R is

    Omega(t) = (2 * sum_j A_j cos(w_j t + p_j), 0, Omega_c(t)),
    Omega_c(t) = Omega_i + lam * t + dOmega(t),

and the Bloch vector obeys ``dF/dt = F x Omega``. The z component is taken
with a positive sign throughout the package; the longitudinal dynamics are
unchanged by the opposite choice up to relabelling the transverse axes.

All frequencies are angular (rad/s). Conversion to Hz happens only at I/O
boundaries.

The solver removes the large, known z-rotation analytically: it integrates
``G = R_z(theta) F`` with ``theta = int_0^t Omega_c``, which obeys
``dG/dt = G x u(t) (cos theta, sin theta, 0)``, and rotates back. Nothing is
dropped from the equations of motion; the rotation only keeps the fixed-step
Runge-Kutta error independent of the (large) control splitting.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numba as nb
import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ConfigurationError, DomainError, PreconditionError

TWO_PI = 2.0 * math.pi

#: Reference fixed step of the forward solver (s).
REFERENCE_STEP = 8e-6


def hz(f):
    """Ordinary frequency (Hz) to angular frequency (rad/s)."""
    return TWO_PI * np.asarray(f, dtype=float) if np.ndim(f) else TWO_PI * float(f)


def to_hz(w):
    """Angular frequency (rad/s) to ordinary frequency (Hz)."""
    return np.asarray(w, dtype=float) / TWO_PI if np.ndim(w) else float(w) / TWO_PI


@dataclass(frozen=True)
class SweepConfig:
    """Linear Rabi-frequency sweep of the dressing field.

    Parameters
    ----------
    carrier : float
        Angular frequency of the rf carrier (rad/s).
    rabi_start, rabi_stop : float
        Initial and final control Rabi frequency (rad/s).
    duration : float
        Sweep duration (s).
    larmor : float, optional
        Angular Larmor frequency (rad/s). Documentation only: the drive is
        taken to be exactly resonant. Defaults to ``carrier``.
    """

    carrier: float
    rabi_start: float
    rabi_stop: float
    duration: float
    larmor: float | None = None

    def __post_init__(self):
        if self.larmor is None:
            object.__setattr__(self, "larmor", float(self.carrier))
        if not self.duration > 0:
            raise ConfigurationError("sweep duration must be positive")
        if not self.rabi_stop > self.rabi_start > 0:
            raise ConfigurationError("need rabi_stop > rabi_start > 0")
        if not self.carrier > self.rabi_stop:
            raise ConfigurationError("carrier must lie above the final Rabi frequency")

    @classmethod
    def from_hz(cls, carrier, rabi_start, rabi_stop, duration, larmor=None) -> "SweepConfig":
        return cls(
            hz(carrier), hz(rabi_start), hz(rabi_stop), float(duration),
            None if larmor is None else hz(larmor),
        )

    @property
    def rate(self) -> float:
        """Sweep rate lambda (rad/s^2)."""
        return (self.rabi_stop - self.rabi_start) / self.duration

    @property
    def span(self) -> float:
        return self.rabi_stop - self.rabi_start

    def rabi(self, t):
        """Nominal control Rabi frequency at time ``t``."""
        return self.rabi_start + self.rate * np.asarray(t, dtype=float)

    def rabi_phase(self, t):
        """Nominal accumulated Rabi phase ``Omega_i t + lam t^2 / 2``."""
        t = np.asarray(t, dtype=float)
        return (self.rabi_start + 0.5 * self.rate * t) * t


_PHASE_GRID = 2.0**-32


def wrap_phase(phase: float) -> float:
    """Reduce ``phase`` to [0, 2 pi) on a 2**-32 rad grid.

    Snapping makes ``p`` and ``p + 2 pi`` map to the same float despite the
    rounding of the addition, so physically equal tones integrate
    bit-identically.
    """
    p = math.fmod(float(phase), TWO_PI)
    if p < 0.0:
        p += TWO_PI
    p = round(p / _PHASE_GRID) * _PHASE_GRID
    # the grid does not divide 2 pi; the point nearest 2 pi is identified with 0
    return 0.0 if p > TWO_PI - 0.5 * _PHASE_GRID else p


@dataclass(frozen=True)
class Tone:
    """One sinusoidal signal component, coupling with Rabi amplitude ``amplitude``."""

    amplitude: float
    frequency: float
    phase: float = 0.0

    def __post_init__(self):
        if not self.amplitude >= 0:
            raise DomainError("tone amplitude must be nonnegative")
        object.__setattr__(self, "phase", wrap_phase(self.phase))

    @classmethod
    def from_hz(cls, amplitude, frequency, phase=0.0) -> "Tone":
        return cls(hz(amplitude), hz(frequency), float(phase))


class Frame(enum.Enum):
    R1 = "frame-1R"
    S2 = "frame-2S"


@dataclass(frozen=True, eq=False)
class BlochTrajectory:
    """Spin projections ``states[k] = (fx, fy, fz)`` at ``times[k]``."""

    frame: Frame
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        if states.shape != (times.size, 3):
            raise DomainError("states must have shape (len(times), 3)")
        if times.size > 1:
            d = np.diff(times)
            if np.any(d <= 0) or np.ptp(d) > 1e-9 * max(d[0], 1e-300) + 1e-15:
                raise DomainError("times must be strictly increasing and uniform")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    @property
    def step(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def fx(self):
        return self.states[:, 0]

    @property
    def fy(self):
        return self.states[:, 1]

    @property
    def fz(self):
        return self.states[:, 2]

    def norm(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=1)


class RabiCorrection:
    """Slowly varying correction ``dOmega(t)`` to the linear Rabi sweep (rad/s).

    Stored as a cubic spline through samples on a coarse grid (1 ms by
    default) and extrapolated linearly outside it. ``phase(t)`` is the exact
    integral of the spline from 0.
    """

    def __init__(self, times=None, values=None):
        if times is None:
            self._spline = None
            self._span = (0.0, 0.0)
            return
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if times.ndim != 1 or times.shape != values.shape or times.size < 2:
            raise DomainError("correction needs matching 1-D knot arrays of length >= 2")
        if times.size < 4:
            # cubic spline needs 4 knots; a linear interpolant is exact here
            tt = np.linspace(times[0], times[-1], 4)
            values = np.interp(tt, times, values)
            times = tt
        self._spline = CubicSpline(times, values, bc_type="natural", extrapolate=False)
        self._integral = self._spline.antiderivative()
        self._span = (float(times[0]), float(times[-1]))
        self._end_slopes = (float(self._spline(times[0], 1)), float(self._spline(times[-1], 1)))
        self._end_values = (float(values[0]), float(values[-1]))

    @classmethod
    def zero(cls) -> "RabiCorrection":
        return cls()

    @classmethod
    def from_function(cls, func, duration: float, spacing: float = 1e-3) -> "RabiCorrection":
        n = max(int(math.ceil(duration / spacing)), 3)
        t = np.linspace(0.0, duration, n + 1)
        return cls(t, func(t))

    @classmethod
    def constant(cls, offset: float, duration: float) -> "RabiCorrection":
        return cls.from_function(lambda t: np.full_like(t, offset), duration)

    @property
    def is_zero(self) -> bool:
        return self._spline is None

    @property
    def knots(self):
        if self._spline is None:
            return np.zeros(0), np.zeros(0)
        return self._spline.x.copy(), self._spline(self._spline.x)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self._spline is None:
            return np.zeros_like(t)
        lo, hi = self._span
        out = self._spline(np.clip(t, lo, hi))
        out = np.where(t < lo, self._end_values[0] + self._end_slopes[0] * (t - lo), out)
        out = np.where(t > hi, self._end_values[1] + self._end_slopes[1] * (t - hi), out)
        return out

    def phase(self, t):
        """``int_0^t dOmega(tau) dtau`` (rad)."""
        t = np.asarray(t, dtype=float)
        if self._spline is None:
            return np.zeros_like(t)
        lo, hi = self._span

        def prim(x):
            # antiderivative with linear extrapolation outside [lo, hi]
            xc = np.clip(x, lo, hi)
            p = self._integral(xc)
            below = x - lo
            above = x - hi
            p = np.where(
                x < lo,
                self._end_values[0] * below + 0.5 * self._end_slopes[0] * below**2,
                p,
            )
            p = np.where(
                x > hi,
                self._integral(hi) + self._end_values[1] * above + 0.5 * self._end_slopes[1] * above**2,
                p,
            )
            return p

        return prim(t) - prim(np.zeros(1))[0]

    def max_abs(self, duration: float) -> float:
        if self._spline is None:
            return 0.0
        return float(np.max(np.abs(self(np.linspace(0.0, duration, 2001)))))

    def check(self, sweep: SweepConfig):
        if self.max_abs(sweep.duration) >= 0.1 * sweep.rabi_start:
            raise DomainError("Rabi correction exceeds 10% of the initial Rabi frequency")


def _as_tones(tones) -> tuple[Tone, ...]:
    if tones is None:
        return ()
    if isinstance(tones, Tone):
        return (tones,)
    return tuple(tones)


def signal_drive(t, tones) -> np.ndarray:
    """Transverse Rabi component ``2 sum_j A_j cos(w_j t + p_j)``."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    for tone in _as_tones(tones):
        if tone.amplitude:
            out += 2.0 * tone.amplitude * np.cos(tone.frequency * t + tone.phase)
    return out


def rabi_vector(t: float, sweep: SweepConfig, tones=(), corr: RabiCorrection | None = None) -> np.ndarray:
    """Frame-1R Rabi vector at time ``t`` (rad/s)."""
    if not 0.0 <= t <= sweep.duration:
        raise DomainError(f"t={t} outside [0, {sweep.duration}]")
    corr = corr or RabiCorrection.zero()
    x = float(signal_drive(np.array([t]), tones)[0])
    z = float(sweep.rabi(t) + corr(np.array([t]))[0])
    return np.array([x, 0.0, z])


def bloch_rhs(f, omega) -> np.ndarray:
    """``dF/dt = F x Omega``."""
    fx, fy, fz = f
    wx, wy, wz = omega
    return np.array([wz * fy - wy * fz, -wz * fx + wx * fz, wy * fx - wx * fy])


_RESYNC = 256


@nb.njit(cache=True, nogil=True, fastmath=False)
def _evolve(n_out, sub, h, w0, lam, amps, freqs, phases, cx, cc, cend, g0, fz_only):
    """Fixed-step RK4 in the frame rotating at ``w0 t + lam t^2 / 2``.

    Rotating-frame Rabi vector: ``(u cos th, u sin th, dOmega(t))``. Phases
    advance by multiplicative recurrences, re-synchronised every ``_RESYNC``
    half steps. ``cx``/``cc`` are cubic-spline breakpoints and coefficients of
    the Rabi correction (empty for none); ``cend`` holds the end values and
    slopes used for linear extrapolation. Output every ``sub`` steps.
    """
    half = 0.5 * h
    ntones = amps.size
    ncorr = cx.size
    chr_ = math.cos(lam * half * half)
    chi = math.sin(lam * half * half)
    sr = np.empty(ntones)
    si = np.empty(ntones)
    mr = np.empty(ntones)
    mi = np.empty(ntones)
    a2x = np.empty(ntones)
    for m in range(ntones):
        mr[m] = math.cos(freqs[m] * half)
        mi[m] = math.sin(freqs[m] * half)
        a2x[m] = 2.0 * amps[m]
    ncol = 1 if fz_only else 3
    out = np.empty((n_out + 1, ncol))
    gx = g0[0]
    gy = g0[1]
    gz = g0[2]
    if fz_only:
        out[0, 0] = gz
    else:
        out[0, 0] = gx
        out[0, 1] = gy
        out[0, 2] = gz
    zr = 1.0
    zi = 0.0
    rr = 1.0
    ri = 0.0
    seg = 0
    # drive samples at t_k (index 0), t_k + h/2 (1) and t_k + h (2)
    ax0 = ay0 = az0 = 0.0
    ax1 = ay1 = az1 = 0.0
    ax2 = ay2 = az2 = 0.0
    j = 0
    nsteps = n_out * sub
    for k in range(nsteps + 1):
        for slot in range(2):
            if k == 0 and slot == 1:
                break
            if j % _RESYNC == 0:
                t = j * half
                th = (w0 + 0.5 * lam * t) * t
                d = w0 * half + lam * (t * half + 0.5 * half * half)
                zr = math.cos(th)
                zi = math.sin(th)
                rr = math.cos(d)
                ri = math.sin(d)
                for m in range(ntones):
                    sr[m] = math.cos(freqs[m] * t + phases[m])
                    si[m] = math.sin(freqs[m] * t + phases[m])
            u = 0.0
            for m in range(ntones):
                u += a2x[m] * sr[m]
            c = 0.0
            if ncorr > 0:
                t = j * half
                if t <= cx[0]:
                    c = cend[0] + cend[1] * (t - cx[0])
                elif t >= cx[ncorr - 1]:
                    c = cend[2] + cend[3] * (t - cx[ncorr - 1])
                else:
                    while seg < ncorr - 2 and t >= cx[seg + 1]:
                        seg += 1
                    x = t - cx[seg]
                    c = ((cc[0, seg] * x + cc[1, seg]) * x + cc[2, seg]) * x + cc[3, seg]
            if k == 0 or slot == 1:
                ax2 = u * zr
                ay2 = u * zi
                az2 = c
            else:
                ax1 = u * zr
                ay1 = u * zi
                az1 = c
            # advance all phases by one half step
            tmp = zr * rr - zi * ri
            zi = zr * ri + zi * rr
            zr = tmp
            tmp = rr * chr_ - ri * chi
            ri = rr * chi + ri * chr_
            rr = tmp
            for m in range(ntones):
                tmp = sr[m] * mr[m] - si[m] * mi[m]
                si[m] = sr[m] * mi[m] + si[m] * mr[m]
                sr[m] = tmp
            j += 1
        if k == 0:
            ax0 = ax2
            ay0 = ay2
            az0 = az2
            continue
        # dG/dt = G x (ax, ay, az), step from t_{k-1} to t_k
        k1x = gy * az0 - gz * ay0
        k1y = gz * ax0 - gx * az0
        k1z = gx * ay0 - gy * ax0
        x = gx + half * k1x
        y = gy + half * k1y
        z = gz + half * k1z
        k2x = y * az1 - z * ay1
        k2y = z * ax1 - x * az1
        k2z = x * ay1 - y * ax1
        x = gx + half * k2x
        y = gy + half * k2y
        z = gz + half * k2z
        k3x = y * az1 - z * ay1
        k3y = z * ax1 - x * az1
        k3z = x * ay1 - y * ax1
        x = gx + h * k3x
        y = gy + h * k3y
        z = gz + h * k3z
        k4x = y * az2 - z * ay2
        k4y = z * ax2 - x * az2
        k4z = x * ay2 - y * ax2
        gx += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        gy += h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
        gz += h / 6.0 * (k1z + 2.0 * k2z + 2.0 * k3z + k4z)
        ax0 = ax2
        ay0 = ay2
        az0 = az2
        if k % sub == 0:
            i = k // sub
            if fz_only:
                out[i, 0] = gz
            else:
                out[i, 0] = gx
                out[i, 1] = gy
                out[i, 2] = gz
    return out


def _validated_init(init) -> np.ndarray:
    g0 = np.asarray(init, dtype=float).reshape(3)
    if abs(np.linalg.norm(g0) - 1.0) > 1e-9:
        raise PreconditionError(f"initial Bloch vector must be unit length, |init|={np.linalg.norm(g0)}")
    return g0


def _grid(duration: float, step: float) -> int:
    n = int(round(duration / step))
    if n < 1 or abs(n * step - duration) > 1e-6 * step:
        raise ConfigurationError(f"duration {duration} is not a whole number of steps {step}")
    return n


#: Internal RK4 substeps are chosen so that (substep x fastest drive
#: oscillation in the rotating frame) stays below this many radians.
SUBSTEP_PHASE = 0.15


def check_step(step: float, rabi_max: float, tones, substeps: int = 1) -> None:
    """Raise if ``step`` cannot be used as the output grid of the solver.

    The rotating-frame Rabi vector, of magnitude at most ``2 sum A_j``, must
    turn less than 0.1 rad per internal RK4 substep, and the drive
    oscillation in that frame, at most ``rabi_max + max w_j``, must stay
    below pi rad per step (Nyquist on the output grid).
    """
    tones = _as_tones(tones)
    if not step > 0:
        raise ConfigurationError("step must be positive")
    drive = 2.0 * sum(t.amplitude for t in tones)
    if step / substeps * drive >= 0.1:
        raise ConfigurationError(
            f"substep {step / substeps:g} too large for signal amplitude ({step / substeps * drive:.3f} rad/substep)"
        )
    fastest = rabi_max + max((abs(t.frequency) for t in tones), default=0.0)
    if step * fastest >= math.pi:
        raise ConfigurationError(
            f"step {step} too large for final Rabi frequency ({step * fastest:.3f} rad/step)"
        )


def substeps_for(step: float, rabi_max: float, tones) -> int:
    tones = _as_tones(tones)
    if not any(t.amplitude for t in tones):
        return 1
    fastest = rabi_max + max(abs(t.frequency) for t in tones)
    return max(1, int(math.ceil(step * fastest / SUBSTEP_PHASE)))


def _correction_arrays(corr: RabiCorrection):
    if corr.is_zero:
        return np.zeros(0), np.zeros((4, 0)), np.zeros(4)
    sp = corr._spline
    cend = np.array([corr._end_values[0], corr._end_slopes[0], corr._end_values[1], corr._end_slopes[1]])
    return np.ascontiguousarray(sp.x), np.ascontiguousarray(sp.c), cend


def _propagate(w0, lam, corr, rabi_max, duration, tones, init, step, fz_only=False, substeps=None):
    tones = _as_tones(tones)
    g0 = _validated_init(init)
    sub = substeps or substeps_for(step, rabi_max, tones)
    check_step(step, rabi_max, tones, sub)
    n = _grid(duration, step)
    t = np.arange(n + 1) * step
    if not any(tone.amplitude for tone in tones) and corr.is_zero:
        g = np.tile(g0, (n + 1, 1))
        return t, (g[:, 2:] if fz_only else g)
    amps = np.array([tone.amplitude for tone in tones], dtype=float)
    freqs = np.array([tone.frequency for tone in tones], dtype=float)
    phases = np.array([tone.phase for tone in tones], dtype=float)
    cx, cc, cend = _correction_arrays(corr)
    g = _evolve(n, sub, step / sub, float(w0), float(lam), amps, freqs, phases, cx, cc, cend, g0, fz_only)
    return t, g


def _rotate(theta, g, inverse=False):
    # (x' + i y') = exp(+-i theta) (x + i y)
    c = np.cos(theta)
    s = -np.sin(theta) if inverse else np.sin(theta)
    out = np.empty_like(g)
    out[:, 0] = c * g[:, 0] - s * g[:, 1]
    out[:, 1] = s * g[:, 0] + c * g[:, 1]
    out[:, 2] = g[:, 2]
    return out


def integrate(
    sweep: SweepConfig,
    tones=(),
    corr: RabiCorrection | None = None,
    init: Sequence[float] = (0.0, 0.0, 1.0),
    step: float = REFERENCE_STEP,
    substeps: int | None = None,
) -> BlochTrajectory:
    """Solve the frame-1R Bloch equations over the sweep on a uniform grid.

    Classic fourth-order Runge-Kutta in the frame co-rotating with the
    nominal sweep, mapped back to frame-1R on the output grid of spacing
    ``step``. Internal substeps keep the sampled drive oscillation resolved.
    """
    corr = corr or RabiCorrection.zero()
    corr.check(sweep)
    t, g = _propagate(
        sweep.rabi_start, sweep.rate, corr, sweep.rabi_stop + corr.max_abs(sweep.duration),
        sweep.duration, tones, init, step, substeps=substeps,
    )
    return BlochTrajectory(Frame.R1, t, _rotate(sweep.rabi_phase(t), g, inverse=True))


def integrate_fz(
    sweep, tones=(), corr=None, init=(0.0, 0.0, 1.0), step=REFERENCE_STEP, substeps=None
) -> np.ndarray:
    """Longitudinal projection only, on the same grid as :func:`integrate`.

    ``fz`` is unchanged by rotations about z, so the map back is skipped.
    """
    corr = corr or RabiCorrection.zero()
    _, g = _propagate(
        sweep.rabi_start, sweep.rate, corr, sweep.rabi_stop + corr.max_abs(sweep.duration),
        sweep.duration, tones, init, step, fz_only=True, substeps=substeps,
    )
    return g[:, 0].copy()


def integrate_static(
    rabi: float,
    duration: float,
    tones=(),
    init: Sequence[float] = (0.0, 0.0, 1.0),
    step: float = REFERENCE_STEP,
    offset: float = 0.0,
) -> BlochTrajectory:
    """Frame-1R evolution under a constant control Rabi frequency ``rabi + offset``."""
    w = rabi + offset
    t, g = _propagate(w, 0.0, RabiCorrection.zero(), abs(w), duration, tones, init, step)
    return BlochTrajectory(Frame.R1, t, _rotate(w * t, g, inverse=True))


def to_frame_2s(traj: BlochTrajectory, sweep: SweepConfig, corr: RabiCorrection | None = None) -> BlochTrajectory:
    """Rotate a frame-1R trajectory into the frame co-rotating with the sweep.

    With ``theta(t) = Omega_i t + lam t^2/2 + int dOmega``:
    ``fx2S = cos(theta) fx - sin(theta) fy``, ``fy2S = sin(theta) fx + cos(theta) fy``.
    Free precession about ``+Omega_c z`` is frozen by this map.
    """
    if traj.frame is not Frame.R1:
        raise DomainError("to_frame_2s expects a frame-1R trajectory")
    corr = corr or RabiCorrection.zero()
    theta = sweep.rabi_phase(traj.times) + corr.phase(traj.times)
    return BlochTrajectory(Frame.S2, traj.times, _rotate(theta, traj.states))


def lz_transition_probability(coupling: float, rate: float) -> float:
    """Asymptotic Landau-Zener transfer ``1 - exp(-pi A^2 / (2 lam))``."""
    if not rate > 0:
        raise DomainError("sweep rate must be positive")
    return -math.expm1(-math.pi * coupling**2 / (2.0 * rate))


def resonance_time(frequency: float, sweep: SweepConfig) -> float:
    """Time at which the nominal control splitting equals ``frequency``."""
    tol = 1e-12 * sweep.rabi_stop
    if not sweep.rabi_start - tol <= frequency <= sweep.rabi_stop + tol:
        raise DomainError("signal frequency outside the sweep span")
    return (frequency - sweep.rabi_start) / sweep.rate


def rbw(sweep: SweepConfig) -> float:
    """Resolution bandwidth ``sqrt(lam / pi) / 2`` with lam in rad/s^2.

    The numeral is read in Hz, following the analyzer's quoted convention.
    """
    return math.sqrt(sweep.rate / math.pi) / 2.0


def adiabaticity_threshold(sweep: SweepConfig) -> float:
    """``sqrt(lam)`` in rad/s: coupling scale separating weak and adiabatic crossings."""
    return math.sqrt(sweep.rate)


def transition_width(sweep: SweepConfig) -> float:
    """Weak-signal transition full width in time, ``sqrt(lam/pi) / lam`` (s)."""
    return math.sqrt(sweep.rate / math.pi) / sweep.rate
