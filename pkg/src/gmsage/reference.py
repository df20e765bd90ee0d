"""Stage one: path extraction on a single (reference) SISO channel.

Successive cancellation in the delay domain: pick the strongest residual
peak, refine it, fit its amplitude by least squares, subtract, repeat until
the peak falls below a multiple of the estimated noise floor. After every
new detection all delays found so far are re-optimised jointly (amplitudes
by linear least squares, delays by nonlinear least squares) so that leakage
from imperfect subtraction does not spawn ghost peaks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, minimize_scalar

from .channel import RfConfig, frequency_grid

LN2 = np.log(2.0)


class EmptyChannelError(RuntimeError):
    """No path rises above the detection threshold."""


@dataclass
class ReferencePathList:
    delays: np.ndarray
    amplitudes: np.ndarray
    noise_floor: float
    residual: np.ndarray = field(repr=False, default=None)

    @property
    def count(self) -> int:
        return len(self.delays)

    @property
    def entries(self) -> list:
        return list(zip(self.delays.tolist(), self.amplitudes.tolist()))


def delay_profile(siso, rf: RfConfig, oversample: int = 1):
    """Delay-domain response of one channel, normalised so noise keeps its per-entry variance.

    Returns ``(delays, response)``; ``|response|**2`` is the PDP.
    """
    y = np.asarray(siso, dtype=complex)
    p = len(y)
    k = p * int(oversample)
    h = np.fft.ifft(y, n=k) * (k / np.sqrt(p))
    delays = np.arange(k) / (k * rf.sub_bandwidth)
    return delays, h


def matched_filter(siso, tau: float, freqs: np.ndarray) -> complex:
    return complex(np.exp(2j * np.pi * freqs * tau) @ siso)


def noise_floor(siso, rf: RfConfig) -> float:
    """Median-based estimate of the per-entry noise variance."""
    _, h = delay_profile(siso, rf, 1)
    return float(np.median(np.abs(h) ** 2) / LN2)


def _interpolate_peak(power: np.ndarray, k: int) -> float:
    """Fractional index of a peak by a parabola through three samples."""
    n = len(power)
    left, mid, right = power[(k - 1) % n], power[k], power[(k + 1) % n]
    denom = left - 2.0 * mid + right
    if denom >= 0:
        return float(k)
    shift = 0.5 * (left - right) / denom
    return k + float(np.clip(shift, -0.5, 0.5))


def _refine(siso_part, tau0, freqs, half_width):
    p = len(freqs)

    def cost(t):
        return -abs(np.exp(2j * np.pi * freqs * t) @ siso_part) ** 2 / p

    res = minimize_scalar(cost, bounds=(tau0 - half_width, tau0 + half_width),
                          method="bounded", options={"xatol": half_width * 1e-7})
    tau = float(res.x) if res.fun <= cost(tau0) else float(tau0)
    amp = matched_filter(siso_part, tau, freqs) / p
    return tau, amp


def _joint_refine(y, taus, freqs, bin_width, max_shift=0.75):
    """Variable-projection refinement of all delays at once."""
    x0 = np.asarray(taus) / bin_width

    def basis(x):
        return np.exp(-2j * np.pi * np.outer(freqs, x * bin_width))

    def fun(x):
        s = basis(x)
        amp, *_ = np.linalg.lstsq(s, y, rcond=None)
        r = y - s @ amp
        return np.concatenate([r.real, r.imag])

    res = least_squares(fun, x0, bounds=(x0 - max_shift, x0 + max_shift),
                        x_scale=1.0, xtol=1e-12, ftol=1e-15, gtol=1e-15, max_nfev=200)
    x = res.x if res.cost <= 0.5 * np.sum(fun(x0) ** 2) else x0
    s = basis(x)
    amp, *_ = np.linalg.lstsq(s, y, rcond=None)
    return list(x * bin_width), list(amp), y - s @ amp


def estimate_reference_channel(siso, rf: RfConfig, detection_factor_db: float = 12.0,
                               oversample: int = 8, joint_refine: bool = True,
                               max_paths: int | None = None,
                               min_relative_power: float = 1e-8) -> ReferencePathList:
    """Extract delays and complex amplitudes of the paths in one SISO channel.

    Args:
        siso: complex frequency response, length P.
        rf: sounding configuration (supplies the frequency grid).
        detection_factor_db: a peak is accepted while its power exceeds the
            estimated noise floor by this many dB.
        oversample: zero-padding factor for peak picking.
        joint_refine: re-optimise all delays jointly after each detection.
        max_paths: hard cap on the number of paths (default P // 2).
        min_relative_power: stop once peaks fall this far below the first
            one; keeps noiseless inputs from chasing round-off.

    Raises:
        EmptyChannelError: when not a single peak passes the threshold.
    """
    y = np.asarray(siso, dtype=complex)
    p = len(y)
    if p < 2:
        raise ValueError("reference-channel extraction needs P >= 2")
    freqs = frequency_grid(rf)
    bin_width = rf.delay_bin
    period = 1.0 / rf.sub_bandwidth
    factor = 10.0 ** (detection_factor_db / 10.0)
    max_paths = max_paths or p // 2

    taus: list = []
    amps: list = []
    residual = y.copy()
    first_peak = None
    while len(taus) < max_paths:
        delays, h = delay_profile(residual, rf, oversample)
        power = np.abs(h) ** 2
        k = int(np.argmax(power))
        peak = float(power[k])
        floor = noise_floor(residual, rf)
        if not np.isfinite(peak) or peak <= 0.0:
            break
        if first_peak is None:
            first_peak = peak
        if peak < factor * floor or peak < min_relative_power * first_peak:
            break
        tau = _interpolate_peak(power, k) * period / len(power)
        tau, amp = _refine(residual, tau, freqs, bin_width / oversample)
        residual = residual - amp * np.exp(-2j * np.pi * freqs * tau)
        taus.append(tau)
        amps.append(amp)
        if joint_refine:
            taus, amps, residual = _joint_refine(y, taus, freqs, bin_width)

    if not taus:
        raise EmptyChannelError("no delay peak above the detection threshold")
    taus_arr = np.mod(np.asarray(taus), period)
    order = np.argsort(taus_arr)
    return ReferencePathList(
        delays=taus_arr[order],
        amplitudes=np.asarray(amps, dtype=complex)[order],
        noise_floor=noise_floor(residual, rf),
        residual=residual,
    )
