"""Retrieval of tone parameters from the frame-1R longitudinal record.

The unknowns are ``(A_j, w_j, p_j)`` for each tone plus the initial
longitudinal projection ``fz0``; the initial transverse remainder is put on
``+x`` in frame-1R. The cost is the l2 norm of the difference between the
measured ``fz1R`` and the forward model, the latter passed through the same
1.5 kHz lowpass as the data so that ringing the data cannot contain does not
enter the residual.

A generational adaptive differential evolution (jDE control-parameter
adaptation, DE/rand/1/bin, donors drawn from a ring neighbourhood of the
target) finds the basin; BFGS on the sum of squares with central finite
differences refines it.
"""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import interpolate, optimize, signal

from .dsp import LP_Z, FilterSpec, azimuth, block_average, demod_second, piecewise_constant_fit
from .errors import CalibrationError, DomainError, InsufficientDataError
from .model import (
    REFERENCE_STEP,
    TWO_PI,
    RabiCorrection,
    SweepConfig,
    Tone,
    hz,
    integrate,
    integrate_fz,
    rbw,
    to_hz,
    wrap_phase,
)
from .timeseries import TimeSeries

#: Rabi amplitude per field: 2 pi * 22.87 Hz corresponds to 3.272 nT.
GAMMA = TWO_PI * 22.87 / 3.272e-9

#: Phase advanced by the fastest drive term per RK4 substep in the cost model.
COST_SUBSTEP_PHASE = 0.4


def amplitude_to_field(amplitude: float, gamma: float = GAMMA) -> float:
    """Signal field (T) from its Rabi amplitude (rad/s)."""
    if not gamma > 0:
        raise DomainError("gamma must be positive")
    return amplitude / gamma


def field_to_amplitude(b: float, gamma: float = GAMMA) -> float:
    if not gamma > 0:
        raise DomainError("gamma must be positive")
    return b * gamma


# -- parameters and bounds ---------------------------------------------------

@dataclass(frozen=True)
class ParameterVector:
    """Tones plus initial longitudinal projection."""

    tones: tuple[Tone, ...]
    fz0: float

    def __post_init__(self):
        object.__setattr__(self, "tones", tuple(self.tones))
        if not self.tones:
            raise DomainError("at least one tone is required")
        if not -1.0 <= self.fz0 <= 1.0:
            raise DomainError(f"fz0={self.fz0} outside [-1, 1]")

    @property
    def n(self) -> int:
        return len(self.tones)

    @property
    def init(self) -> tuple[float, float, float]:
        return (math.sqrt(max(0.0, 1.0 - self.fz0**2)), 0.0, self.fz0)

    def to_array(self, phase: bool = True) -> np.ndarray:
        out = []
        for t in self.tones:
            out += [t.amplitude, t.frequency] + ([t.phase] if phase else [])
        return np.array(out + [self.fz0])

    @classmethod
    def from_array(cls, x, n: int, phase: bool = True, fixed_phases=None) -> "ParameterVector":
        x = np.asarray(x, dtype=float)
        k = 3 if phase else 2
        if x.size != k * n + 1:
            raise DomainError(f"expected {k * n + 1} parameters, got {x.size}")
        tones = []
        for j in range(n):
            a, w = x[k * j], x[k * j + 1]
            if not (np.isfinite(a) and np.isfinite(w)) or a < 0:
                raise DomainError(f"tone {j}: amplitude {a} / frequency {w} not representable")
            p = x[k * j + 2] if phase else (fixed_phases[j] if fixed_phases is not None else 0.0)
            tones.append(Tone(float(a), float(w), float(p)))
        return cls(tuple(tones), float(x[-1]))

    @staticmethod
    def names(n: int, phase: bool = True) -> list[str]:
        out = []
        for j in range(n):
            out += [f"amplitude_{j}", f"frequency_{j}"] + ([f"phase_{j}"] if phase else [])
        return out + ["fz0"]


@dataclass(frozen=True)
class SearchBounds:
    """Closed intervals for each tone's amplitude, frequency and phase, and fz0."""

    amplitude: tuple[tuple[float, float], ...]
    frequency: tuple[tuple[float, float], ...]
    phase: tuple[tuple[float, float], ...]
    fz0: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        for name in ("amplitude", "frequency", "phase"):
            object.__setattr__(self, name, tuple((float(a), float(b)) for a, b in getattr(self, name)))
        n = len(self.amplitude)
        if not (len(self.frequency) == len(self.phase) == n and n > 0):
            raise DomainError("bounds for every tone are required")
        for lo, hi in self.amplitude + self.frequency + self.phase + (tuple(self.fz0),):
            if not lo <= hi:
                raise DomainError(f"empty interval [{lo}, {hi}]")
        if any(lo < 0 for lo, _ in self.amplitude):
            raise DomainError("amplitude bounds must be nonnegative")
        if any(lo < 0 or hi > TWO_PI + 1e-12 for lo, hi in self.phase):
            raise DomainError("phase bounds must lie in [0, 2 pi]")
        if not -1.0 <= self.fz0[0] <= self.fz0[1] <= 1.0:
            raise DomainError("fz0 bounds must lie in [-1, 1]")

    @property
    def n(self) -> int:
        return len(self.amplitude)

    @classmethod
    def default(cls, sweep: SweepConfig, n: int = 1, amplitude=(hz(5.0), hz(300.0))) -> "SearchBounds":
        """Lax bounds: every tone anywhere in the span."""
        return cls(
            (tuple(amplitude),) * n,
            ((sweep.rabi_start, sweep.rabi_stop),) * n,
            ((0.0, TWO_PI),) * n,
        )

    @classmethod
    def contiguous(cls, sweep: SweepConfig, edges, amplitude=(hz(5.0), hz(300.0))) -> "SearchBounds":
        """Adjacent frequency windows ``[edges[j], edges[j+1]]``."""
        edges = np.asarray(edges, dtype=float)
        if np.any(np.diff(edges) <= 0):
            raise DomainError("window edges must increase")
        n = edges.size - 1
        return cls(
            (tuple(amplitude),) * n,
            tuple((edges[j], edges[j + 1]) for j in range(n)),
            ((0.0, TWO_PI),) * n,
        )

    def check_sweep(self, sweep: SweepConfig):
        tol = 1e-9 * sweep.rabi_stop
        for lo, hi in self.frequency:
            if lo < sweep.rabi_start - tol or hi > sweep.rabi_stop + tol:
                raise DomainError("frequency bounds must lie within the sweep span")

    def arrays(self, phase: bool = True) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = [], []
        for j in range(self.n):
            lo += [self.amplitude[j][0], self.frequency[j][0]]
            hi += [self.amplitude[j][1], self.frequency[j][1]]
            if phase:
                lo.append(self.phase[j][0])
                hi.append(self.phase[j][1])
        return np.array(lo + [self.fz0[0]]), np.array(hi + [self.fz0[1]])


# -- cost --------------------------------------------------------------------

class CostFunction:
    """l2 residual between measured ``fz1R`` and the filtered forward model.

    Parameters
    ----------
    data_fz : TimeSeries
        Normalized ``fz1R``; only its valid interval is used.
    sweep : SweepConfig
    corr : RabiCorrection, optional
    n_tones : int
    phase : bool
        Include the tone phases as parameters. With ``phase=False`` they are
        held at ``fixed_phases`` (default 0).
    stride : int
        Evaluate on every ``stride``-th data sample; the default 8 at 200 kS/s
        gives a 40 us grid shared with the 8 us solver grid.
    matched_filter : FilterSpec or None
        Lowpass applied to the model; ``None`` compares raw model ``fz``.
    """

    def __init__(
        self,
        data_fz: TimeSeries,
        sweep: SweepConfig,
        corr: RabiCorrection | None = None,
        n_tones: int = 1,
        phase: bool = True,
        stride: int = 8,
        matched_filter: FilterSpec | None = LP_Z,
        step: float = REFERENCE_STEP,
        substep_phase: float = COST_SUBSTEP_PHASE,
        fixed_phases=None,
    ):
        self.sweep = sweep
        self.corr = corr or RabiCorrection.zero()
        self.corr.check(sweep)
        self.n = int(n_tones)
        self.phase = bool(phase)
        self.fixed_phases = fixed_phases
        self.step = float(step)
        self.substep_phase = float(substep_phase)
        self.filter = matched_filter
        n_model = int(round(sweep.duration / step))
        self._model_times = np.arange(n_model + 1) * step

        half = matched_filter.half_length(1.0 / step) * step if matched_filter is not None else 0.0
        lo = max(data_fz.valid[0], half)
        hi = min(data_fz.valid[1], sweep.duration - half)
        t = data_fz.times
        idx = np.arange(0, t.size, int(stride))
        idx = idx[(t[idx] >= lo - 1e-12) & (t[idx] <= hi + 1e-12)]
        # keep data samples that fall on the solver grid
        k = t[idx] / step
        on = np.abs(k - np.round(k)) < 1e-6
        idx, k = idx[on], np.round(k[on]).astype(int)
        if idx.size < 10 * (3 * self.n + 1):
            raise InsufficientDataError("too few evaluation points")
        self.data_index = idx
        self.model_index = k
        self.times = t[idx]
        self.data = data_fz.samples[idx].astype(float)
        self.evaluations = 0

    @property
    def dim(self) -> int:
        return (3 if self.phase else 2) * self.n + 1

    def params(self, x) -> ParameterVector:
        return ParameterVector.from_array(x, self.n, self.phase, self.fixed_phases)

    def _substeps(self, tones):
        fastest = self.sweep.rabi_stop + self.corr.max_abs(self.sweep.duration) + max(t.frequency for t in tones)
        return max(1, int(math.ceil(self.step * fastest / self.substep_phase)))

    def model(self, p: ParameterVector) -> np.ndarray:
        """Filtered model ``fz`` on the evaluation grid."""
        fz = integrate_fz(
            self.sweep, p.tones, self.corr, p.init, self.step, substeps=self._substeps(p.tones)
        )
        self.evaluations += 1
        if self.filter is not None:
            fz = signal.oaconvolve(fz, self.filter.taps(1.0 / self.step), mode="same")
        return fz[self.model_index]

    def residual(self, x) -> np.ndarray:
        return self.model(self.params(x)) - self.data

    def __call__(self, x) -> float:
        return float(np.linalg.norm(self.residual(x)))

    def noise_floor(self, before: float | None = None, degree: int = 3) -> float:
        """Cost expected from noise alone.

        The per-point noise is estimated on the segment before ``before``
        (default: 10 transition widths before the first steep excursion) as
        the scatter about a low-order polynomial.
        """
        if before is None:
            before = self.times[0] + 0.25 * (self.times[-1] - self.times[0])
        sel = self.times < before
        if sel.sum() < 4 * (degree + 1):
            sel = np.arange(self.times.size) < max(4 * (degree + 1), self.times.size // 4)
        t, y = self.times[sel], self.data[sel]
        c = np.polynomial.polynomial.polyfit(t - t.mean(), y, degree)
        r = y - np.polynomial.polynomial.polyval(t - t.mean(), c)
        sigma = r.std(ddof=degree + 1)
        return float(sigma * math.sqrt(self.data.size))


# -- differential evolution --------------------------------------------------

@dataclass(frozen=True)
class DEConfig:
    """Global-stage settings.

    ``window`` is the number of generations over which the best cost must
    improve by at least ``epsilon``; ``epsilon=None`` uses 1% of the noise
    floor cost.
    """

    population: int | None = None
    radius: int | None = None
    f_init: float = 0.5
    cr_init: float = 0.9
    tau_f: float = 0.1
    tau_cr: float = 0.1
    f_range: tuple[float, float] = (0.1, 1.0)
    window: int = 150
    epsilon: float | None = None
    max_steps: int = 10_000
    seed: int = 0
    workers: int = 1

    def population_size(self, dim: int) -> int:
        return self.population or max(20, 5 * dim)

    def ring_radius(self, npop: int) -> int:
        return self.radius or max(3, npop // 4)


@dataclass
class GlobalResult:
    x: np.ndarray
    cost: float
    generations: int
    evaluations: int
    converged: bool
    reason: str
    history: list = field(default_factory=list)


def _evaluate(cost, xs, pool):
    if pool is None:
        return np.array([cost(x) for x in xs])
    return np.array(list(pool.map(cost, xs)))


def global_search(cost: CostFunction, bounds: SearchBounds, cfg: DEConfig = DEConfig(), epsilon=None) -> GlobalResult:
    """Adaptive DE/rand/1/bin with ring-neighbourhood donors.

    Each individual carries its own ``F`` and ``CR``, resampled with
    probability ``tau`` before producing a trial (jDE). The three donors for
    target ``i`` are drawn from indices within ``radius`` of ``i`` on a ring,
    which keeps subpopulations exploring separate basins longer than
    panmictic sampling. Trials are evaluated as a batch per generation, in
    index order, so results do not depend on ``workers``.
    """
    lo, hi = bounds.arrays(cost.phase)
    dim = lo.size
    if dim != cost.dim:
        raise DomainError("bounds and cost disagree on dimension")
    rng = np.random.default_rng(cfg.seed)
    npop = cfg.population_size(dim)
    radius = min(cfg.ring_radius(npop), (npop - 1) // 2)
    span = hi - lo
    free = span > 0
    eps = cfg.epsilon if cfg.epsilon is not None else epsilon
    if eps is None:
        eps = max(0.01 * cost.noise_floor(), 1e-9 * float(np.linalg.norm(cost.data)))

    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        pop = lo + rng.random((npop, dim)) * span
        fit = _evaluate(cost, pop, pool)
        fs = np.full(npop, cfg.f_init)
        crs = np.full(npop, cfg.cr_init)
        offsets = np.array([d for d in range(-radius, radius + 1) if d != 0])
        best = int(np.argmin(fit))
        history = [float(fit[best])]
        gen = 0
        reason = "max_steps"
        converged = False
        if not free.any():
            return GlobalResult(pop[best], float(fit[best]), 0, npop, True, "bounds collapsed", history)
        while gen < cfg.max_steps:
            gen += 1
            new_f = np.where(rng.random(npop) < cfg.tau_f, cfg.f_range[0] + rng.random(npop) * (cfg.f_range[1] - cfg.f_range[0]), fs)
            new_cr = np.where(rng.random(npop) < cfg.tau_cr, rng.random(npop), crs)
            trials = np.empty_like(pop)
            for i in range(npop):
                r = (i + rng.choice(offsets, 3, replace=False)) % npop
                mutant = pop[r[0]] + new_f[i] * (pop[r[1]] - pop[r[2]])
                cross = rng.random(dim) < new_cr[i]
                cross[rng.integers(dim)] = True
                trial = np.where(cross, mutant, pop[i])
                # bounce back into the box halfway between the violated edge and the parent
                low = trial < lo
                high = trial > hi
                trial[low] = lo[low] + rng.random(low.sum()) * (pop[i][low] - lo[low])
                trial[high] = hi[high] - rng.random(high.sum()) * (hi[high] - pop[i][high])
                trials[i] = trial
            tfit = _evaluate(cost, trials, pool)
            better = tfit <= fit
            pop[better] = trials[better]
            fit[better] = tfit[better]
            fs[better] = new_f[better]
            crs[better] = new_cr[better]
            best = int(np.argmin(fit))
            history.append(float(fit[best]))
            if gen >= cfg.window and history[-cfg.window - 1] - history[-1] < eps:
                reason = f"improvement < {eps:.3g} over {cfg.window} generations"
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return GlobalResult(pop[best].copy(), float(fit[best]), gen, cost.evaluations, converged, reason, history)


# -- local refinement --------------------------------------------------------

@dataclass
class EstimationResult:
    """Retrieved parameters with their covariance and provenance."""

    params: ParameterVector
    covariance: np.ndarray
    sigmas: np.ndarray
    cost: float
    global_steps: int
    local_steps: int
    wall_time: float
    converged: bool
    stop_reason: str
    phase_included: bool = True
    covariance_reliable: bool = True
    merges: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return ParameterVector.names(self.params.n, self.phase_included)

    def sigma(self, name: str) -> float:
        return float(self.sigmas[self.names.index(name)])

    def to_dict(self, gamma: float = GAMMA, truth: ParameterVector | None = None) -> dict:
        tones = []
        for j, t in enumerate(self.params.tones):
            sa = self.sigma(f"amplitude_{j}") if f"amplitude_{j}" in self.names else float("nan")
            sw = self.sigma(f"frequency_{j}") if f"frequency_{j}" in self.names else float("nan")
            sp = self.sigma(f"phase_{j}") if self.phase_included else float("nan")
            tones.append({
                "amplitude_rad_s": t.amplitude, "amplitude_sigma_rad_s": sa,
                "amplitude_hz": to_hz(t.amplitude), "amplitude_sigma_hz": to_hz(sa),
                "field_nt": amplitude_to_field(t.amplitude, gamma) * 1e9,
                "field_sigma_nt": amplitude_to_field(sa, gamma) * 1e9,
                "frequency_rad_s": t.frequency, "frequency_sigma_rad_s": sw,
                "frequency_hz": to_hz(t.frequency), "frequency_sigma_hz": to_hz(sw),
                "phase_rad": t.phase if self.phase_included else None, "phase_sigma_rad": sp,
            })
        out = {
            "tones": tones,
            "fz0": self.params.fz0,
            "fz0_sigma": self.sigma("fz0"),
            "parameter_names": self.names,
            "covariance": self.covariance.tolist(),
            "cost": self.cost,
            "global_steps": self.global_steps,
            "local_steps": self.local_steps,
            "wall_time_s": self.wall_time,
            "converged": self.converged,
            "stop_reason": self.stop_reason,
            "phase_included": self.phase_included,
            "covariance_reliable": self.covariance_reliable,
            "merges": self.merges,
            "provenance": self.provenance,
        }
        if truth is not None:
            out["truth_comparison"] = truth_table(self, truth, gamma)
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(**kw), indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o))


def phase_error(a: float, b: float) -> float:
    """Signed difference ``a - b`` wrapped to (-pi, pi]."""
    return math.remainder(a - b, TWO_PI)


def truth_table(result: EstimationResult, truth: ParameterVector, gamma: float = GAMMA) -> list[dict]:
    """Truth-vs-retrieved rows, tones matched by frequency order."""
    rows = []
    got = sorted(result.params.tones, key=lambda t: t.frequency)
    ref = sorted(truth.tones, key=lambda t: t.frequency)
    for j, (g, r) in enumerate(zip(got, ref)):
        rows.append({
            "tone": j,
            "frequency_error_hz": to_hz(g.frequency - r.frequency),
            "amplitude_error_hz": to_hz(g.amplitude - r.amplitude),
            "field_error_nt": amplitude_to_field(g.amplitude - r.amplitude, gamma) * 1e9,
            "phase_error_rad": phase_error(g.phase, r.phase) if result.phase_included else None,
        })
    rows.append({"fz0_error": result.params.fz0 - truth.fz0})
    return rows


def _scales(cost: CostFunction) -> np.ndarray:
    s = []
    for _ in range(cost.n):
        s += [1.0, 1.0] + ([0.1] if cost.phase else [])
    return np.array(s + [0.1])


def _to_internal(x, n, phase):
    """Replace fz0 by beta = arccos(fz0) so the refine is unconstrained."""
    y = np.array(x, dtype=float)
    y[-1] = math.acos(min(1.0, max(-1.0, y[-1])))
    return y


def _to_external(y, n, phase):
    """Inverse of ``_to_internal``.

    The refine is unconstrained, so an amplitude may step below zero; a tone
    of amplitude ``-a`` is the tone ``a`` advanced by pi in phase. Without a
    phase parameter only ``|a|`` is kept, which is exact for eigenstate
    initialization where the phase is unobservable.
    """
    x = np.array(y, dtype=float)
    x[-1] = math.cos(x[-1])
    k = 3 if phase else 2
    for j in range(n):
        if x[k * j] < 0:
            x[k * j] = -x[k * j]
            if phase:
                x[k * j + 2] += math.pi
    return x


def fd_steps(y, rel: float = 1e-6, floors=None, magnitudes=None) -> np.ndarray:
    """Central-difference steps: ``rel * |y|`` with absolute floors.

    ``magnitudes`` overrides ``|y|`` where finite.
    """
    y = np.asarray(y, dtype=float)
    if floors is None:
        floors = np.full(y.size, 1e-6)
    mag = np.abs(y)
    if magnitudes is not None:
        mag = np.where(np.isfinite(magnitudes), magnitudes, mag)
    return np.maximum(rel * mag, floors)


def _magnitudes(cost: CostFunction) -> np.ndarray:
    # A tone frequency sits ~1e4 resolution widths from zero, so a step
    # relative to |w| would span a sizeable fraction of the w-phase valley;
    # frequency steps are taken relative to the sweep resolution instead.
    m = []
    for _ in range(cost.n):
        m += [np.nan, TWO_PI * rbw(cost.sweep)] + ([np.nan] if cost.phase else [])
    return np.array(m + [np.nan])


def _floors(cost: CostFunction) -> np.ndarray:
    f = []
    for _ in range(cost.n):
        f += [1e-4, 1e-5] + ([1e-6] if cost.phase else [])
    return np.array(f + [1e-6])


class _Objective:
    """Sum of squares in internal coordinates with cached residuals."""

    def __init__(self, cost: CostFunction, rel=1e-6):
        self.cost = cost
        self.rel = rel
        self.floors = _floors(cost)
        self.magnitudes = _magnitudes(cost)
        self.cache = {}

    def residual(self, y):
        key = tuple(np.asarray(y, dtype=float))
        r = self.cache.get(key)
        if r is None:
            r = self.cost.residual(_to_external(y, self.cost.n, self.cost.phase))
            if len(self.cache) > 4096:
                self.cache.clear()
            self.cache[key] = r
        return r

    def value(self, y):
        r = self.residual(y)
        return float(r @ r)

    def steps(self, y):
        return fd_steps(y, self.rel, self.floors, self.magnitudes)

    def gradient(self, y):
        y = np.asarray(y, dtype=float)
        h = self.steps(y)
        g = np.empty(y.size)
        for i in range(y.size):
            e = np.zeros(y.size)
            e[i] = h[i]
            g[i] = (self.value(y + e) - self.value(y - e)) / (2 * h[i])
        return g

    def gradient_richardson(self, y):
        """Fourth-order extrapolation from central differences at h and 2h."""
        y = np.asarray(y, dtype=float)
        h = self.steps(y)
        g = np.empty(y.size)
        for i in range(y.size):
            e = np.zeros(y.size)
            e[i] = h[i]
            d1 = (self.value(y + e) - self.value(y - e)) / (2 * h[i])
            d2 = (self.value(y + 2 * e) - self.value(y - 2 * e)) / (4 * h[i])
            g[i] = (4 * d1 - d2) / 3
        return g

    def jacobian(self, y, rel=1e-5):
        y = np.asarray(y, dtype=float)
        h = fd_steps(y, rel, 10 * self.floors, self.magnitudes)
        cols = []
        for i in range(y.size):
            e = np.zeros(y.size)
            e[i] = h[i]
            cols.append((self.residual(y + e) - self.residual(y - e)) / (2 * h[i]))
        return np.column_stack(cols)


def long_run_factor(r: np.ndarray, lags: int | None = None) -> float:
    """Newey-West ratio of long-run to marginal variance of a residual series."""
    r = np.asarray(r, dtype=float) - np.mean(r)
    n = r.size
    if lags is None:
        lags = int(math.floor(4 * (n / 100.0) ** (2 / 9)))
        # residuals of a lowpassed record are correlated over many grid points
        lags = max(lags, 32)
    lags = min(lags, n - 1)
    g0 = r @ r / n
    if g0 == 0:
        return 1.0
    s = g0
    for k in range(1, lags + 1):
        s += 2 * (1 - k / (lags + 1)) * (r[k:] @ r[:-k]) / n
    return float(max(s / g0, 1.0))


def _covariance(obj: _Objective, y, dof_params: int):
    """Gauss-Newton covariance ``s^2 kappa (J^T J)^-1`` in external coordinates."""
    r = obj.residual(y)
    jy = obj.jacobian(y)
    # chain rule for fz0 = cos(beta)
    dz = -math.sin(y[-1])
    reliable = True
    jx = jy.copy()
    if abs(dz) > 1e-8:
        jx[:, -1] = jy[:, -1] / dz
    else:
        reliable = False
    n = r.size
    s2 = float(r @ r) / max(n - dof_params, 1)
    kappa = long_run_factor(r)
    jtj = jx.T @ jx
    try:
        cov = np.linalg.inv(jtj) * s2 * kappa
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(jtj) * s2 * kappa
        reliable = False
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    if w.min() < -1e-12 * max(1.0, abs(w.max())):
        reliable = False
    w = np.clip(w, 0.0, None)
    cov = (v * w) @ v.T
    if not np.all(np.isfinite(cov)) or np.linalg.cond(jtj) > 1e14:
        reliable = False
    return cov, kappa, s2, reliable


@dataclass(frozen=True)
class LocalConfig:
    rel_step: float = 1e-6
    gtol: float = 2e-3
    max_steps: int | None = None  # default max(200, 40 * dim)


def local_refine(
    start: ParameterVector | np.ndarray,
    cost: CostFunction,
    bounds: SearchBounds | None = None,
    cfg: LocalConfig = LocalConfig(),
) -> EstimationResult:
    """BFGS on the sum of squared residuals from ``start``.

    Coordinates are scaled so that a unit step is a typical uncertainty, and
    ``fz0`` is replaced by its polar angle. The covariance is the
    Gauss-Newton inverse Hessian scaled by the residual variance and a
    Newey-West factor for the correlation of lowpassed residuals.
    """
    t0 = time.perf_counter()
    x0 = start.to_array(cost.phase) if isinstance(start, ParameterVector) else np.asarray(start, dtype=float)
    obj = _Objective(cost, cfg.rel_step)
    y0 = _to_internal(x0, cost.n, cost.phase)
    e0 = cost.evaluations
    # Gauss-Newton preconditioning: unit steps are comparable in every
    # coordinate and the first quasi-Newton step is a Gauss-Newton step
    j0 = obj.jacobian(y0)
    d = np.sqrt(np.einsum("ij,ij->j", j0, j0))
    scale = np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), _scales(cost))
    h0 = 2.0 * (j0 * scale).T @ (j0 * scale)
    options = {"maxiter": cfg.max_steps or max(200, 40 * y0.size)}
    w, v = np.linalg.eigh(0.5 * (h0 + h0.T))
    if w.min() > 1e-10 * w.max():
        hinv = (v / w) @ v.T
        options["hess_inv0"] = 0.5 * (hinv + hinv.T)

    def f(z):
        return obj.value(y0 + z * scale)

    def g(z):
        return obj.gradient(y0 + z * scale) * scale

    s0 = f(np.zeros_like(y0))
    # stop once the remaining Newton step is ~1e-3 of a standard deviation
    options["gtol"] = cfg.gtol * math.sqrt(max(s0, 1e-300) / cost.data.size)
    res = optimize.minimize(f, np.zeros_like(y0), jac=g, method="BFGS", options=options)
    y = y0 + res.x * scale
    gnorm = float(np.max(np.abs(res.jac))) if res.jac is not None else math.inf
    converged = bool(res.success) or (res.status == 2 and gnorm < 1e3 * options["gtol"])
    reason = str(res.message)
    x = _to_external(y, cost.n, cost.phase)
    if cost.phase:
        for j in range(cost.n):
            x[3 * j + 2] = wrap_phase(x[3 * j + 2])
    y = _to_internal(x, cost.n, cost.phase)
    cov, kappa, s2, reliable = _covariance(obj, y, x.size)

    if bounds is not None:
        lo, hi = bounds.arrays(cost.phase)
        width = np.where(hi > lo, hi - lo, 1.0)
        out = (x < lo - 0.01 * width) | (x > hi + 0.01 * width)
        if cost.phase:
            for j in range(cost.n):
                out[3 * j + 2] = False
        if out.any():
            x = np.clip(x, lo, hi)
            converged = False
            reason += "; refined point left bounds and was clamped"
    params = cost.params(x)
    r = cost.residual(params.to_array(cost.phase))
    return EstimationResult(
        params=params,
        covariance=cov,
        sigmas=np.sqrt(np.diag(cov)),
        cost=float(np.linalg.norm(r)),
        global_steps=0,
        local_steps=int(res.nit),
        wall_time=time.perf_counter() - t0,
        converged=converged,
        stop_reason=reason,
        phase_included=cost.phase,
        covariance_reliable=reliable,
        provenance={
            "local": {
                "start": x0.tolist(), "iterations": int(res.nit), "evaluations": cost.evaluations - e0,
                "message": str(res.message), "residual_variance": s2, "long_run_factor": kappa,
                "initial_sum_squares": s0, "final_sum_squares": float(res.fun),
            }
        },
    )


def gradient_check(cost: CostFunction, x, rel: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Central and Richardson-extrapolated gradients of the sum of squares at ``x``.

    Both are in internal coordinates (``fz0`` as its polar angle).
    """
    obj = _Objective(cost, rel)
    y = _to_internal(np.asarray(x, dtype=float), cost.n, cost.phase)
    return obj.gradient(y), obj.gradient_richardson(y)


# -- multi-tone helpers ------------------------------------------------------

def auto_bounds(data_fz: TimeSeries, sweep: SweepConfig, n: int, amplitude=(hz(5.0), hz(300.0)), rate: float = 2e3) -> SearchBounds:
    """Contiguous frequency windows from a piecewise-constant fit to ``fz1R``.

    The record is averaged down to ``rate``; each of the ``n`` change points
    marks a resonance time, mapped to a frequency through the nominal sweep.
    Window edges sit halfway between neighbouring estimates.
    """
    tb, yb = block_average(data_fz, rate)
    cps = piecewise_constant_fit(yb, n)
    tc = 0.5 * (tb[cps - 1] + tb[cps])
    freqs = np.clip(sweep.rabi(tc), sweep.rabi_start, sweep.rabi_stop)
    edges = np.r_[sweep.rabi_start, 0.5 * (freqs[1:] + freqs[:-1]), sweep.rabi_stop]
    return SearchBounds.contiguous(sweep, edges, amplitude)


def merge_degenerate(params: ParameterVector, resolution: float) -> tuple[ParameterVector, list]:
    """Merge tones whose frequencies agree within ``resolution`` (rad/s).

    Coincident tones add as phasors; the merged tone takes the
    amplitude-weighted frequency.
    """
    tones = sorted(params.tones, key=lambda t: t.frequency)
    groups = [[tones[0]]]
    for t in tones[1:]:
        if t.frequency - groups[-1][-1].frequency < resolution:
            groups[-1].append(t)
        else:
            groups.append([t])
    out, merges = [], []
    for g in groups:
        if len(g) == 1:
            out.append(g[0])
            continue
        z = sum(t.amplitude * np.exp(1j * t.phase) for t in g)
        w = sum(t.amplitude for t in g)
        freq = sum(t.amplitude * t.frequency for t in g) / w if w > 0 else g[0].frequency
        merged = Tone(float(abs(z)), float(freq), float(np.angle(z)))
        out.append(merged)
        merges.append({
            "frequencies_hz": [to_hz(t.frequency) for t in g],
            "amplitudes_hz": [to_hz(t.amplitude) for t in g],
            "merged_frequency_hz": to_hz(freq),
            "merged_amplitude_hz": to_hz(merged.amplitude),
        })
    return ParameterVector(tuple(out), params.fz0), merges


# -- full estimate -----------------------------------------------------------

@dataclass(frozen=True)
class EstimateConfig:
    de: DEConfig = DEConfig()
    local: LocalConfig = LocalConfig()
    phase: bool = True
    stride: int = 8
    matched_filter: bool = True
    merge: bool = True


def estimate(
    data_fz: TimeSeries,
    sweep: SweepConfig,
    corr: RabiCorrection | None = None,
    bounds: SearchBounds | None = None,
    cfg: EstimateConfig = EstimateConfig(),
    n_tones: int | None = None,
) -> EstimationResult:
    """Global search followed by local refinement."""
    t0 = time.perf_counter()
    if bounds is None:
        bounds = SearchBounds.default(sweep, n_tones or 1)
    bounds.check_sweep(sweep)
    cost = CostFunction(
        data_fz, sweep, corr, bounds.n, cfg.phase, cfg.stride, LP_Z if cfg.matched_filter else None
    )
    g = global_search(cost, bounds, cfg.de)
    res = local_refine(g.x, cost, bounds, cfg.local)
    merges = []
    if cfg.merge and bounds.n > 1:
        merged, merges = merge_degenerate(res.params, TWO_PI * rbw(sweep))
        if merges:
            res.provenance["unmerged"] = res.params.to_array(cfg.phase).tolist()
            res.params = merged
    res.global_steps = g.generations
    res.converged = res.converged and g.converged
    res.stop_reason = f"global: {g.reason}; local: {res.stop_reason}"
    res.merges = merges
    res.wall_time = time.perf_counter() - t0
    res.provenance["global"] = {
        "generations": g.generations, "evaluations": g.evaluations, "best_cost": g.cost,
        "converged": g.converged, "reason": g.reason, "best": g.x.tolist(),
        "history": g.history[:: max(1, len(g.history) // 200)],
        "seed": cfg.de.seed,
    }
    return res


# -- Rabi correction consistent with the fitted model ------------------------

def model_fy(params: ParameterVector, sweep: SweepConfig, corr: RabiCorrection | None, rate: float) -> TimeSeries:
    """Model ``fy1R`` sampled at ``rate`` over the sweep."""
    traj = integrate(sweep, params.tones, corr, params.init, step=1.0 / rate)
    return TimeSeries(rate, 0.0, traj.fy, "model fy1R")


def consistent_correction(
    params: ParameterVector,
    data_fy: TimeSeries,
    sweep: SweepConfig,
    corr: RabiCorrection | None = None,
    knot_spacing: float = 50e-3,
    mask_widths: float = 5.0,
) -> RabiCorrection:
    """Rabi error from the azimuth the fitted model does not explain.

    The data and model ``fy1R`` go through the same frame-2S demodulation;
    the spline is fitted to the difference of their azimuths, so the signal's
    own light shift and transition phase are not mistaken for control error.
    ``corr`` is the correction used in the model; the result replaces it.
    """
    from .dsp import transition_mask

    corr = corr or RabiCorrection.zero()
    mfy = model_fy(params, sweep, corr, data_fy.rate)
    mfy = mfy.crop(data_fy.t0, data_fy.t_end)
    if len(mfy) != len(data_fy):
        raise DomainError("data grid does not match the sweep grid")
    mfy = TimeSeries(mfy.rate, data_fy.t0, mfy.samples, mfy.label, data_fy.valid)
    dfx, dfy = demod_second(data_fy, sweep)
    mfx, mfy2 = demod_second(mfy, sweep)
    a_d = azimuth(dfx, dfy)
    a_m = azimuth(mfx, mfy2)
    diff = a_d.samples - a_m.samples
    diff = np.where(np.isfinite(diff), diff, np.nan)
    ok = np.isfinite(diff)
    # remove a whole-turn offset between the two unwrapped azimuths
    if ok.any():
        diff -= TWO_PI * np.round(np.nanmedian(diff[ok][:100]) / TWO_PI)
    phi = a_d.with_samples(diff, label="azimuth residual")
    # a resonance-time mismatch between model and data leaves a local phase
    # kink that trades off against w_s, so transitions stay masked
    t_res = [(t.frequency - sweep.rabi_start) / sweep.rate for t in params.tones]
    mask = transition_mask([t for t in t_res if 0 < t < sweep.duration], sweep, mask_widths)
    resid = _rate_from_phase(phi, mask, knot_spacing)
    t = np.linspace(0.0, sweep.duration, int(round(sweep.duration / 1e-3)) + 1)
    return RabiCorrection(t, corr(t) + resid(t))


def _rate_from_phase(phi: TimeSeries, mask, knot_spacing: float):
    """``-d phi/dt`` from a least-squares cubic spline with fixed knot spacing.

    Unlike a residual-bounded smoothing spline, the fit keeps the same
    resolution whether the residual is noisy or clean, so the iteration can
    remove any correction it has itself introduced.
    """
    from .dsp import _drop_short_runs, _in_intervals, _remove_steps

    t = phi.times
    keep = phi.valid_mask() & ~_in_intervals(t, mask) & np.isfinite(phi.samples)
    keep = _drop_short_runs(keep, int(10e-3 * phi.rate))
    if keep.sum() < 16:
        raise InsufficientDataError("too few unmasked azimuth samples")
    y = _remove_steps(t, phi.samples, keep, mask, 10e-3) if len(mask) else phi.samples
    tk, yk = t[keep], y[keep]
    knots = np.arange(tk[0] + knot_spacing, tk[-1] - 0.5 * knot_spacing, knot_spacing)
    # drop knots whose span holds no data (inside masked gaps)
    counts = np.histogram(tk, np.r_[tk[0], knots, tk[-1]])[0]
    while knots.size and counts.min() < 8:
        i = int(np.argmin(counts))
        knots = np.delete(knots, min(i, knots.size - 1))
        counts = np.histogram(tk, np.r_[tk[0], knots, tk[-1]])[0]
    spl = interpolate.LSQUnivariateSpline(tk, yk, knots, k=3)
    d = spl.derivative()
    lo, hi = tk[0], tk[-1]
    return lambda tt: -d(np.clip(tt, lo, hi))


# -- unswept Rabi calibration ------------------------------------------------

@dataclass(frozen=True)
class RabiCalibration:
    total: float
    detuning: float
    resonant: float
    lower: float
    upper: float
    center: float


#: Sign relating the sub-sideband imbalance to the detuning ``Omega_c - w_s``.
SUBSIDEBAND_SIGN = 1.0


def _damped_sine(t, a, b, tau, w, p):
    return a + b * np.exp(-t / tau) * np.cos(w * t + p)


def fit_damped_sinusoid(x: TimeSeries, guess: float) -> tuple[float, float]:
    """Angular frequency of ``a + b exp(-t/tau) cos(w t + p)`` and its sigma."""
    m = x.valid_mask()
    t = x.times[m] - x.times[m][0]
    y = x.samples[m]
    a0 = y.mean()
    b0 = 0.5 * (y.max() - y.min())
    best = None
    for p0 in np.linspace(0, TWO_PI, 4, endpoint=False):
        try:
            popt, pcov = optimize.curve_fit(
                _damped_sine, t, y, p0=(a0, b0, 10 * t[-1], guess, p0), maxfev=20000
            )
        except RuntimeError:
            continue
        r = np.sum((_damped_sine(t, *popt) - y) ** 2)
        if best is None or r < best[0]:
            best = (r, popt, pcov)
    if best is None:
        raise CalibrationError("damped sinusoid fit failed")
    _, popt, pcov = best
    return abs(float(popt[3])), float(math.sqrt(abs(pcov[3, 3])))


def _spectrum(x: TimeSeries) -> tuple[np.ndarray, np.ndarray]:
    """Hann-windowed magnitude spectrum, zero-padded 8x, against angular frequency."""
    m = x.valid_mask()
    y = x.samples[m] - x.samples[m].mean()
    nfft = next_pow2(8 * y.size)
    spec = np.abs(np.fft.rfft(y * np.hanning(y.size), nfft))
    return np.fft.rfftfreq(nfft, 1.0 / x.rate) * TWO_PI, spec


def _dominant_frequency(x: TimeSeries, lo: float, hi: float) -> float:
    f, spec = _spectrum(x)
    sel = (f >= lo) & (f <= hi)
    return float(f[sel][np.argmax(spec[sel])])


def next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def rabi_calibrate(fy1R: TimeSeries, rabi: float, fz1R: TimeSeries | None = None, total: float | None = None) -> RabiCalibration:
    """Signal amplitude from an unswept Rabi record at control frequency ``rabi``.

    Starting from a dressed eigenstate, the spin precesses at the total Rabi
    frequency ``Omega_sR`` about the effective axis ``(Omega_s, 0, Delta)``
    in the frame of the tone, so ``fy1R`` carries lines at ``w_s`` and
    ``w_s +- Omega_sR`` with sub-sideband amplitudes in the ratio
    ``(1 + d) : (1 - d)``, ``d = Delta / Omega_sR``, ``Delta = Omega_c - w_s``.

    ``Omega_sR`` comes from a damped sinusoid fit to ``fz1R`` when given,
    otherwise from the spacing of the two sub-sidebands, taken as the
    dominant lines on either side of ``rabi``; that requires the
    near-resonance condition ``|Delta| < Omega_sR / 3``, beyond which the
    central line outgrows the weaker sub-sideband.
    """
    f, spec = _spectrum(fy1R)
    df = f[1] - f[0]
    if total is None and fz1R is not None:
        guess = _dominant_frequency(fz1R, 0.0, 0.5 * rabi)
        total, _ = fit_damped_sinusoid(fz1R, guess)
    if total is None:
        # keep clear of the sub-sideband leakage across rabi
        gap = 4 * df
        up = _dominant_frequency(fy1R, rabi + gap, 1.5 * rabi)
        low = _dominant_frequency(fy1R, 0.5 * rabi, rabi - gap)
        total = 0.5 * (up - low)
        center = 0.5 * (up + low)
    else:
        # line pair 2 Omega_sR apart with the most power, centre within Omega_sR / 2 of rabi
        cs = np.arange(rabi - 0.5 * total, rabi + 0.5 * total + df, df)
        power = np.interp(cs - total, f, spec) + np.interp(cs + total, f, spec)
        center = float(cs[np.argmax(power)])
    if not total > 0:
        raise CalibrationError("no sub-sideband pair found")
    lower = float(np.interp(center - total, f, spec))
    upper = float(np.interp(center + total, f, spec))
    d = SUBSIDEBAND_SIGN * (upper - lower) / (upper + lower)
    detuning = d * total
    return RabiCalibration(total, detuning, resonant_rabi(total, detuning), lower, upper, center)


def resonant_rabi(total: float, detuning: float) -> float:
    """``sqrt(Omega_sR^2 - Delta_s^2)``."""
    if detuning**2 > total**2:
        raise CalibrationError("detuning exceeds total Rabi frequency")
    return math.sqrt(total**2 - detuning**2)


def refine_with_correction(
    result: EstimationResult,
    data_fz: TimeSeries,
    data_fy: TimeSeries,
    sweep: SweepConfig,
    corr: RabiCorrection | None = None,
    iterations: int = 2,
    cfg: EstimateConfig = EstimateConfig(),
    knot_spacing: float = 50e-3,
) -> tuple[EstimationResult, RabiCorrection]:
    """Alternate model-consistent Rabi correction and local refinement.

    Starting from ``result`` (fitted with ``corr``), the correction is
    re-derived from the azimuth residual against the fitted model and the
    parameters are refined under it, ``iterations`` times.
    """
    if iterations < 1:
        return result, corr or RabiCorrection.zero()
    corr = corr or RabiCorrection.zero()
    params = result.params
    history = []
    for _ in range(iterations):
        corr = consistent_correction(params, data_fy, sweep, corr, knot_spacing)
        corr.check(sweep)
        fixed = [t.phase for t in params.tones]
        cost = CostFunction(
            data_fz, sweep, corr, params.n, result.phase_included, cfg.stride,
            LP_Z if cfg.matched_filter else None, fixed_phases=None if result.phase_included else fixed,
        )
        new = local_refine(params, cost, None, cfg.local)
        history.append({"max_abs_correction": corr.max_abs(sweep.duration), "cost": new.cost,
                        "params": new.params.to_array(result.phase_included).tolist()})
        params = new.params
    new.global_steps = result.global_steps
    new.local_steps += result.local_steps
    new.converged = new.converged and result.converged
    new.stop_reason = result.stop_reason + f"; {iterations} correction iteration(s): {new.stop_reason}"
    new.merges = result.merges
    new.wall_time += result.wall_time
    new.provenance = dict(result.provenance, correction_iterations=history, final_local=new.provenance["local"])
    return new, corr
