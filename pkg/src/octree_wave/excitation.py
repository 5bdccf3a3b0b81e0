"""Load amplitude signals, their spectra and wave-based mesh sizing.

Three pulse shapes are supported: a Ricker wavelet centred at ``t1``, a
triangular impact pulse rising over ``t1`` and falling over the next ``t1``,
and a Hann-windowed sine burst of ``cycles`` periods lasting ``t1``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.integrate
import scipy.optimize

logger = logging.getLogger(__name__)

SIGNAL_KINDS = ("ricker", "triangle", "sine_burst")

SPECTRUM_RTOL = 1e-9
# Upper frequency limit for spectral areas, in multiples of the reference frequency.
UPPER_LIMIT_FACTOR = 50.0
_QUAD_LIMIT = 1000


class ExcitationError(ValueError):
    """Raised for invalid signals or failed spectral integration."""


@dataclass(frozen=True)
class Signal:
    kind: str
    t1: float
    amplitude: float = 1.0
    cycles: int = 1

    def __post_init__(self) -> None:
        if self.kind not in SIGNAL_KINDS:
            raise ExcitationError(f"unknown signal kind {self.kind!r}; expected one of {SIGNAL_KINDS}")
        if not self.t1 > 0:
            raise ExcitationError(f"{self.kind}: t1 must be positive, got {self.t1}")
        if self.kind == "sine_burst" and self.cycles < 1:
            raise ExcitationError(f"sine_burst needs at least one cycle, got {self.cycles}")

    @property
    def support_end(self) -> float:
        """Time after which the signal is identically zero (inf for Ricker)."""

        if self.kind == "triangle":
            return 2.0 * self.t1
        if self.kind == "sine_burst":
            return self.t1
        return math.inf

    def __call__(self, t: float | np.ndarray) -> float | np.ndarray:
        return signal_eval(self, t)


def signal_eval(signal: Signal, t: float | np.ndarray) -> float | np.ndarray:
    """Amplitude of ``signal`` at time(s) ``t``."""

    times = np.asarray(t, dtype=float)
    t1 = signal.t1
    if signal.kind == "ricker":
        x = (times - t1) / (t1 / 5.0)
        values = (1.0 - x**2) * np.exp(-0.5 * x**2)
    elif signal.kind == "triangle":
        inside = (times >= 0.0) & (times <= 2.0 * t1)
        values = np.where(inside, 1.0 - np.abs(times / t1 - 1.0), 0.0)
    else:
        inside = (times >= 0.0) & (times <= t1)
        burst = np.sin(2.0 * np.pi * signal.cycles * times / t1) * np.sin(np.pi * times / t1) ** 2
        values = np.where(inside, burst, 0.0)
    values = signal.amplitude * values
    if np.ndim(t) == 0:
        return float(values)
    return values


def central_frequency(signal: Signal) -> float:
    """Reference frequency f_m of a signal.

    Ricker: the spectral peak. Sine burst: the carrier frequency. Triangle: the
    first zero of its spectrum.
    """

    if signal.kind == "ricker":
        return 5.0 / (math.sqrt(2.0) * math.pi * signal.t1)
    if signal.kind == "sine_burst":
        return signal.cycles / signal.t1
    return 1.0 / signal.t1


def _burst_transform(signal: Signal, frequency: float) -> float:
    t1 = signal.t1

    def envelope(t: float) -> float:
        return math.sin(2.0 * math.pi * signal.cycles * t / t1) * math.sin(math.pi * t / t1) ** 2

    if frequency == 0.0:
        real = _checked_quad(envelope, 0.0, t1, "sine_burst transform")
        return abs(real) / t1
    omega = 2.0 * math.pi * frequency
    real = _checked_quad(envelope, 0.0, t1, "sine_burst transform", weight="cos", wvar=omega)
    imag = _checked_quad(envelope, 0.0, t1, "sine_burst transform", weight="sin", wvar=omega)
    return math.hypot(real, imag) / t1


def spectrum(signal: Signal, frequency: float | np.ndarray) -> float | np.ndarray:
    """Normalized amplitude spectrum A(f) (shape only; independent of P0)."""

    f = np.asarray(frequency, dtype=float)
    if np.any(f < 0):
        raise ExcitationError("spectrum is evaluated for f >= 0 only")
    if signal.kind == "ricker":
        x = f / central_frequency(signal)
        values = (2.0 / math.sqrt(math.pi)) * x**2 * np.exp(-(x**2))
    elif signal.kind == "triangle":
        values = np.sinc(f * signal.t1) ** 2
    else:
        values = np.vectorize(lambda v: _burst_transform(signal, float(v)), otypes=[float])(f)
    if np.ndim(frequency) == 0:
        return float(values)
    return values


def _checked_quad(
    func: Callable[[float], float],
    lower: float,
    upper: float,
    what: str,
    **kwargs: object,
) -> float:
    result = scipy.integrate.quad(
        func, lower, upper, epsabs=0.0, epsrel=SPECTRUM_RTOL, limit=_QUAD_LIMIT, full_output=1, **kwargs
    )
    value, abserr = result[0], result[1]
    if len(result) == 4 and abserr > 1e-6 * max(abs(value), 1e-300):
        raise ExcitationError(f"{what}: integration on [{lower:g}, {upper:g}] did not converge ({result[3]})")
    return float(value)


def _spectral_area(signal: Signal, upper: float) -> float:
    if upper <= 0.0:
        return 0.0
    return _checked_quad(lambda f: spectrum(signal, f), 0.0, upper, f"{signal.kind} spectrum")


def critical_frequency(signal: Signal, energy_fraction: float = 0.95) -> float:
    """Smallest f1 whose cumulative spectral area reaches ``energy_fraction`` of the total."""

    if not 0.0 < energy_fraction < 1.0:
        raise ExcitationError(f"energy fraction must lie in (0, 1), got {energy_fraction}")
    upper = UPPER_LIMIT_FACTOR * central_frequency(signal)
    target = energy_fraction * _spectral_area(signal, upper)
    f1 = scipy.optimize.brentq(
        lambda f: _spectral_area(signal, f) - target,
        0.0,
        upper,
        xtol=1e-12 * upper,
        rtol=1e-10,
    )
    logger.debug(f"{signal.kind} (t1={signal.t1:g}): f1={f1:.6g} Hz at {energy_fraction:.0%} of the spectrum")
    return float(f1)


def spectral_peak(signal: Signal) -> float:
    """Frequency of the spectral maximum found numerically."""

    f_m = central_frequency(signal)
    result = scipy.optimize.minimize_scalar(
        lambda f: -spectrum(signal, f), bounds=(0.0, 3.0 * f_m), method="bounded", options={"xatol": 1e-10 * f_m}
    )
    return float(result.x)


@dataclass(frozen=True)
class WaveProperties:
    v_p: float
    v_s: float
    l_p: float
    l_s: float
    f1: float
    f_m: float | None = None


def wave_speeds(youngs_modulus: float, poisson_ratio: float, density: float) -> tuple[float, float]:
    if poisson_ratio == 0.5:
        raise ExcitationError("nu = 0.5 (incompressible) makes the dilatational wave speed singular")
    if youngs_modulus <= 0 or density <= 0 or not -1.0 < poisson_ratio < 0.5:
        raise ExcitationError(f"inadmissible material E={youngs_modulus}, nu={poisson_ratio}, rho={density}")
    nu = poisson_ratio
    v_p = math.sqrt(youngs_modulus * (1.0 - nu) / (density * (1.0 + nu) * (1.0 - 2.0 * nu)))
    v_s = math.sqrt(youngs_modulus / (2.0 * density * (1.0 + nu)))
    return v_p, v_s


def wave_properties(
    youngs_modulus: float,
    poisson_ratio: float,
    density: float,
    f1: float,
    f_m: float | None = None,
) -> WaveProperties:
    """Bulk wave speeds and the shortest wavelengths excited up to ``f1``."""

    if not f1 > 0:
        raise ExcitationError(f"critical frequency must be positive, got {f1}")
    v_p, v_s = wave_speeds(youngs_modulus, poisson_ratio, density)
    return WaveProperties(v_p=v_p, v_s=v_s, l_p=v_p / f1, l_s=v_s / f1, f1=f1, f_m=f_m)


def recommended_element_size(props: WaveProperties, nodes_per_wavelength: float = 30.0) -> float:
    """Largest advisable linear element size for the given resolution."""

    if nodes_per_wavelength < 2:
        raise ExcitationError(f"need at least 2 nodes per wavelength, got {nodes_per_wavelength}")
    return min(props.l_p, props.l_s) / (nodes_per_wavelength - 1.0)


def sample_signal(signal: Signal, duration: float | None = None, samples: int = 501) -> tuple[np.ndarray, np.ndarray]:
    if duration is None:
        duration = 2.0 * signal.t1
    times = np.linspace(0.0, duration, samples)
    return times, np.asarray(signal_eval(signal, times))


def sample_spectrum(
    signal: Signal, max_frequency: float | None = None, samples: int = 501
) -> tuple[np.ndarray, np.ndarray]:
    if max_frequency is None:
        max_frequency = 4.0 * central_frequency(signal)
    frequencies = np.linspace(0.0, max_frequency, samples)
    return frequencies, np.asarray(spectrum(signal, frequencies))


__all__ = [
    "ExcitationError",
    "SIGNAL_KINDS",
    "Signal",
    "WaveProperties",
    "central_frequency",
    "critical_frequency",
    "recommended_element_size",
    "sample_signal",
    "sample_spectrum",
    "signal_eval",
    "spectral_peak",
    "spectrum",
    "wave_properties",
    "wave_speeds",
]
