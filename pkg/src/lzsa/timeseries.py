"""Uniformly sampled records passed between synthesis, DSP and estimation."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """A uniformly sampled real or complex record.

    Parameters
    ----------
    rate : float
        Sample rate in samples/s.
    t0 : float
        Time of the first sample in seconds.
    samples : numpy.ndarray
        One-dimensional float64 or complex128 array.
    label : str
        Free-text description.
    valid : tuple of float, optional
        ``(start, stop)`` time interval free of filter transients. Defaults to
        the whole record.
    """

    rate: float
    t0: float
    samples: np.ndarray
    label: str = ""
    valid: tuple[float, float] | None = field(default=None)

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1 or samples.size == 0:
            raise DomainError("samples must be a nonempty 1-D array")
        if not self.rate > 0:
            raise DomainError(f"rate must be positive, got {self.rate}")
        if np.iscomplexobj(samples):
            samples = samples.astype(np.complex128, copy=False)
        else:
            samples = samples.astype(np.float64, copy=False)
        object.__setattr__(self, "samples", samples)
        if self.valid is None:
            object.__setattr__(self, "valid", (self.t0, self.t_end))
        else:
            lo, hi = self.valid
            object.__setattr__(self, "valid", (max(float(lo), self.t0), min(float(hi), self.t_end)))

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.samples)

    @property
    def dt(self) -> float:
        return 1.0 / self.rate

    def __len__(self) -> int:
        return self.samples.size

    @property
    def t_end(self) -> float:
        """Time of the last sample."""
        return self.t0 + (self.samples.size - 1) / self.rate

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.samples.size) / self.rate

    def valid_mask(self) -> np.ndarray:
        t = self.times
        tol = 1e-9 / self.rate
        return (t >= self.valid[0] - tol) & (t <= self.valid[1] + tol)

    def with_samples(self, samples, label=None, valid=None) -> "TimeSeries":
        """Copy with new samples on the same time grid."""
        return replace(
            self,
            samples=np.asarray(samples),
            label=self.label if label is None else label,
            valid=self.valid if valid is None else valid,
        )

    def narrowed(self, start: float, stop: float) -> "TimeSeries":
        """Copy whose valid interval is intersected with ``[start, stop]``."""
        lo = max(self.valid[0], start)
        hi = min(self.valid[1], stop)
        if hi < lo:
            raise DomainError("empty valid interval")
        return replace(self, valid=(lo, hi))

    def crop(self, start: float, stop: float) -> "TimeSeries":
        """Sub-record containing samples with ``start <= t <= stop``."""
        t = self.times
        tol = 1e-9 / self.rate
        idx = np.flatnonzero((t >= start - tol) & (t <= stop + tol))
        if idx.size == 0:
            raise DomainError("crop interval contains no samples")
        return TimeSeries(
            self.rate, float(t[idx[0]]), self.samples[idx[0] : idx[-1] + 1], self.label, self.valid
        )
