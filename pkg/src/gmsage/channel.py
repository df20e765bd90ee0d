"""Parametric multi-bounce MIMO-FDM channel synthesis.

The channel of one path over Tx element ``m``, Rx element ``n`` and
sub-band ``p`` is::

    z[m, n, p] = alpha * gamma[m, n] * d_alpha[m, n] * exp(-2j*pi*f[p]*tau[m, n])

Tensors are indexed ``(m, n, p)`` with zero-based indices internally.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import (
    SPEED_OF_LIGHT,
    Scene,
    one_bounce_points,
    path_blockage_mask,
    polyline_lengths,
    two_bounce_points,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RfConfig:
    carrier_frequency: float = 30e9
    sub_bandwidth: float = 10e6
    sub_band_count: int = 101
    snr_db: float = 20.0
    bandwidth: float = 1e9
    # False: f_p = (p-1) f_s, True: f_p = p f_s (1-based p).
    literal_index: bool = False

    def __post_init__(self):
        if int(self.sub_band_count) < 1:
            raise ValueError("sub_band_count must be >= 1")
        object.__setattr__(self, "sub_band_count", int(self.sub_band_count))
        if not self.sub_bandwidth > 0:
            raise ValueError("sub_bandwidth must be > 0")
        span = (self.sub_band_count - 1) * self.sub_bandwidth
        if span > self.bandwidth * (1 + 1e-9):
            raise ValueError(f"sub-band span {span:g} Hz exceeds bandwidth {self.bandwidth:g} Hz")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency

    @property
    def delay_bin(self) -> float:
        """Delay-domain resolution cell 1/(P f_s) in seconds."""
        return 1.0 / (self.sub_band_count * self.sub_bandwidth)


def frequency_grid(rf: RfConfig) -> np.ndarray:
    first = 1 if rf.literal_index else 0
    return (np.arange(rf.sub_band_count) + first) * rf.sub_bandwidth


def steering_vector(delays, rf: RfConfig) -> np.ndarray:
    """Delay steering vector, shape ``delays.shape + (P,)``."""
    tau = np.asarray(delays, dtype=float)
    f = frequency_grid(rf)
    return np.exp(-2j * np.pi * tau[..., None] * f)


@dataclass
class PropagationPath:
    """One simulated multipath component.

    ``channel_scatterers`` holds the per-channel specular points with shape
    ``(M, N, K, 2)``; ``scatterers_ref`` is the ``(K, 2)`` slice of the
    reference channel.
    """

    bounce_order: int
    walls: tuple
    scatterers_ref: np.ndarray
    reference_amplitude: complex
    blockage_mask: np.ndarray
    sns_attenuation: np.ndarray
    delays: np.ndarray
    channel_scatterers: Optional[np.ndarray] = None
    traced: Optional[np.ndarray] = None

    def __post_init__(self):
        shape = np.shape(self.delays)
        self.blockage_mask = np.asarray(self.blockage_mask, dtype=np.uint8)
        self.sns_attenuation = np.asarray(self.sns_attenuation, dtype=complex)
        if self.blockage_mask.shape != shape or self.sns_attenuation.shape != shape:
            raise ValueError(
                f"mask {self.blockage_mask.shape}, attenuation {self.sns_attenuation.shape} "
                f"and delays {shape} must share one (M, N) shape"
            )
        if not set(np.unique(self.blockage_mask)) <= {0, 1}:
            raise ValueError("blockage mask entries must be 0 or 1")

    @property
    def label(self) -> str:
        return "->".join(self.walls) if self.walls else "los"

    @property
    def lengths(self) -> np.ndarray:
        return self.delays * SPEED_OF_LIGHT


@dataclass
class ChannelTensor:
    values: np.ndarray
    sub_bandwidth: float
    snr_db: float = float("inf")
    literal_index: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 3:
            raise ValueError(f"channel tensor must be 3-D (M, N, P), got {self.values.shape}")

    @property
    def dims(self) -> tuple:
        return self.values.shape

    def __add__(self, other: "ChannelTensor") -> "ChannelTensor":
        return replace(self, values=self.values + other.values, meta=dict(self.meta))


def _empty_tensor(shape, rf: RfConfig) -> ChannelTensor:
    m, n = shape
    return ChannelTensor(np.zeros((m, n, rf.sub_band_count), complex), rf.sub_bandwidth,
                         literal_index=rf.literal_index)


def synthesize_path(path: PropagationPath, rf: RfConfig) -> ChannelTensor:
    gain = path.reference_amplitude * path.blockage_mask * path.sns_attenuation
    values = gain[..., None] * steering_vector(path.delays, rf)
    # exact zeros on blocked channels, whatever the steering vector holds
    values[path.blockage_mask == 0] = 0.0
    return ChannelTensor(values, rf.sub_bandwidth, literal_index=rf.literal_index)


def synthesize_channel(paths: Sequence[PropagationPath], rf: RfConfig, shape=None) -> ChannelTensor:
    """Sum of the per-path tensors; an empty list gives a zero tensor of ``shape``."""
    paths = list(paths)
    if not paths:
        if shape is None:
            raise ValueError("shape is required to synthesize an empty path list")
        return _empty_tensor(shape, rf)
    shapes = {p.delays.shape for p in paths}
    if len(shapes) != 1:
        raise ValueError(f"paths disagree on channel dimensions: {sorted(shapes)}")
    total = synthesize_path(paths[0], rf)
    for p in paths[1:]:
        total.values += synthesize_path(p, rf).values
    return total


def add_noise(tensor: ChannelTensor, snr_db: float, seed: int,
              reference_power: Optional[float] = None) -> ChannelTensor:
    """Add circularly-symmetric white Gaussian noise at the requested SNR.

    The per-entry noise variance is ``reference_power / 10**(snr_db/10)``.
    Without an explicit ``reference_power`` the mean power of the non-zero
    (unblocked) entries is used; an all-zero tensor falls back to unit power
    and records ``noise_reference = "unit-fallback"`` in ``meta``.
    """
    meta = dict(tensor.meta)
    if np.isinf(snr_db) and snr_db > 0:
        return replace(tensor, values=tensor.values.copy(), snr_db=float("inf"), meta=meta)
    if not np.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite or +inf, got {snr_db}")
    if reference_power is None:
        power = np.abs(tensor.values) ** 2
        live = power > 0
        if np.any(live):
            reference_power = float(power[live].mean())
            meta["noise_reference"] = "unblocked-mean"
        else:
            reference_power = 1.0
            meta["noise_reference"] = "unit-fallback"
            log.warning("all-zero tensor: noise variance defined from unit reference power")
    else:
        meta["noise_reference"] = "explicit"
    variance = reference_power / 10.0 ** (snr_db / 10.0)
    rng = np.random.default_rng(seed)
    shape = tensor.values.shape
    noise = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.sqrt(variance / 2.0)
    meta["noise_variance"] = variance
    meta["seed"] = int(seed)
    return replace(tensor, values=tensor.values + noise, snr_db=float(snr_db), meta=meta)


def path_reference_power(paths: Sequence[PropagationPath]) -> float:
    """Mean signal power per entry counted over each path's unblocked channels."""
    total = 0.0
    for p in paths:
        live = p.blockage_mask == 1
        if np.any(live):
            total += float(np.mean(np.abs(p.reference_amplitude * p.sns_attenuation[live]) ** 2))
    return total


# --- SNS attenuation profiles -------------------------------------------------

SnsProfile = Callable[[PropagationPath], np.ndarray]


def identity_profile(path: PropagationPath) -> np.ndarray:
    return np.ones(path.delays.shape, dtype=complex)


def free_space_profile(path: PropagationPath, reference=(0, 0)) -> np.ndarray:
    """Spherical spreading relative to the reference channel, d_ref / d."""
    d = path.lengths
    return (d[reference] / d).astype(complex)


def linear_taper_profile(start: float = 1.0, stop: float = 0.5) -> SnsProfile:
    """Gain varying linearly along the Rx index from ``start`` to ``stop``."""

    def profile(path: PropagationPath) -> np.ndarray:
        m, n = path.delays.shape
        ramp = np.linspace(start, stop, n) if n > 1 else np.array([start])
        return np.broadcast_to(ramp, (m, n)).astype(complex)

    return profile


SNS_PROFILES = {
    "identity": identity_profile,
    "free_space": free_space_profile,
}


def apply_sns_profile(path: PropagationPath, profile: SnsProfile) -> PropagationPath:
    att = np.asarray(profile(path), dtype=complex)
    if att.shape != path.delays.shape:
        raise ValueError(f"profile returned shape {att.shape}, expected {path.delays.shape}")
    if not np.all(np.isfinite(att)):
        raise ValueError("profile produced non-finite attenuation")
    return replace(path, sns_attenuation=att)


# --- image-method scene tracing -------------------------------------------------


def trace_scene_paths(scene: Scene, include_los: bool = True,
                      amplitude: str = "free_space",
                      reference=(0, 0)) -> list:
    """Trace LOS, every one-bounce and every ordered two-bounce path.

    A path is kept when the specular solution exists for at least one
    channel. Channels without a valid specular point are masked out (and
    given the delay through the reference-channel scatterers so that delays
    stay finite).
    """
    tx = scene.tx.positions[:, None, :]
    rx = scene.rx.positions[None, :, :]
    m, n = len(scene.tx.positions), len(scene.rx.positions)
    candidates = []
    if include_los:
        candidates.append(((), np.zeros((m, n, 0, 2)), np.ones((m, n), bool)))
    for wall in scene.walls:
        pts, valid = one_bounce_points(tx, rx, wall)
        candidates.append(((wall.label,), pts[:, :, None, :], valid))
    for w1, w2 in itertools.permutations(scene.walls, 2):
        s1, s2, valid = two_bounce_points(tx, rx, w1, w2)
        candidates.append(((w1.label, w2.label), np.stack([s1, s2], axis=2), valid))

    paths = []
    for walls, scat, valid in candidates:
        if not np.any(valid):
            continue
        if not valid[reference]:
            log.info("path %s has no specular point for the reference channel; skipped",
                     "->".join(walls) or "los")
            continue
        ref_scat = scat[reference]
        lengths = polyline_lengths(tx, [scat[:, :, k] for k in range(scat.shape[2])], rx)
        fallback = polyline_lengths(tx, list(ref_scat), rx)
        lengths = np.where(valid, lengths, fallback)
        mask = path_blockage_mask(scene, scat, valid)
        d_ref = float(lengths[reference])
        if amplitude == "free_space":
            alpha = complex(1.0 / d_ref)
        elif amplitude == "unit":
            alpha = 1.0 + 0.0j
        else:
            raise ValueError(f"unknown amplitude model {amplitude!r}")
        paths.append(PropagationPath(
            bounce_order=len(walls),
            walls=walls,
            scatterers_ref=np.array(ref_scat, dtype=float),
            reference_amplitude=alpha,
            blockage_mask=mask,
            sns_attenuation=np.ones((m, n), complex),
            delays=lengths / SPEED_OF_LIGHT,
            channel_scatterers=scat,
            traced=valid,
        ))
    paths.sort(key=lambda p: p.delays[reference])
    return paths
