"""Stage two: coordinate-domain SAGE over the whole MIMO-FDM tensor.

Every path found on the reference channel is refined in turn. Its hidden
data (own reconstruction plus a share of the global residual) is matched
against wall-constrained scatterer candidates whose reference-channel delay
agrees with the stage-one delay. Per-channel complex gains are fitted in
closed form, so partial blockage shows up as noise-level gains instead of
biasing the coordinate search.
"""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .channel import RfConfig, frequency_grid, steering_vector
from .geometry import SPEED_OF_LIGHT, Scene
from .reference import ReferencePathList, estimate_reference_channel

log = logging.getLogger(__name__)

LOS = "los"
ONE_BOUNCE = "one-bounce"
TWO_BOUNCE = "two-bounce"
HIGH_BOUNCE = "high-bounce"
BOUNCE_ORDER = {LOS: 0, ONE_BOUNCE: 1, TWO_BOUNCE: 2, HIGH_BOUNCE: 3}


class InfeasiblePathError(RuntimeError):
    """Neither bounce hypothesis produced a candidate for a path."""


@dataclass
class EstimatorOptions:
    grid1: float = 0.1
    grid2: float = 0.2
    delay_tolerance_bins: float = 0.5
    convergence_tol: float = 1e-3
    max_iters: int = 20
    detection_factor_db: float = 12.0
    threshold_factor: float = 9.0
    beta: object = "uniform"
    refine: bool = False
    reference_channel: tuple = (0, 0)
    los_hypothesis: bool = True
    high_bounce_factor: float = 3.0

    def __post_init__(self):
        if self.grid1 <= 0 or self.grid2 <= 0:
            raise ValueError("grid steps must be positive")
        if self.threshold_factor <= 0:
            raise ValueError("threshold_factor must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        self.reference_channel = tuple(int(i) for i in self.reference_channel)


@dataclass
class PathEstimate:
    bounce_class: str
    scatterers: np.ndarray
    walls: tuple
    reference_delay: float
    delays: np.ndarray
    equivalent_amplitude: np.ndarray
    blockage_estimate: np.ndarray
    objective_value: float
    reference_amplitude: complex = 0j

    @property
    def bounce_order(self) -> int:
        return BOUNCE_ORDER[self.bounce_class]

    def synthesize(self, rf: RfConfig) -> np.ndarray:
        return self.equivalent_amplitude[..., None] * steering_vector(self.delays, rf)


@dataclass
class SearchDictionary:
    """Wall-constrained scatterer candidates.

    ``points`` has shape ``(C, K, 2)`` and ``wall_index`` shape ``(C, K)``
    (indices into ``scene.walls``). ``node_id`` identifies the last
    scatterer of each candidate so candidates sharing it can share work.
    """

    bounce: int
    points: np.ndarray
    wall_index: np.ndarray
    node_id: np.ndarray
    grid_step: float

    def __len__(self) -> int:
        return len(self.points)

    @property
    def empty(self) -> bool:
        return len(self.points) == 0


@dataclass
class SageState:
    iteration: int
    estimates: list
    residual: np.ndarray
    objective_trace: list
    noise_variance: float
    beta: np.ndarray
    reference: Optional[ReferencePathList] = None
    components: list = field(default_factory=list, repr=False)
    converged: bool = False
    runtime: float = 0.0


# --- geometry of candidates ------------------------------------------------------


def candidate_legs(points: np.ndarray, tx: np.ndarray, rx: np.ndarray):
    """Split per-channel candidate delays into Tx-side and Rx-side parts.

    For a chain of scatterers the path length through fixed scatterers is
    ``|s_1 - tx_m| + sum |s_{k+1} - s_k| + |s_K - rx_n|`` so the delay tensor
    is ``a[c, m] + b[c, n]``.
    """
    pts = np.asarray(points, dtype=float)
    a = np.linalg.norm(pts[:, None, 0, :] - tx[None, :, :], axis=-1)
    for k in range(pts.shape[1] - 1):
        a = a + np.linalg.norm(pts[:, k + 1] - pts[:, k], axis=-1)[:, None]
    b = np.linalg.norm(pts[:, None, -1, :] - rx[None, :, :], axis=-1)
    return a / SPEED_OF_LIGHT, b / SPEED_OF_LIGHT


def candidate_delays(points, scene: Scene) -> np.ndarray:
    """Per-channel delays ``(C, M, N)`` through fixed scatterer chains."""
    a, b = candidate_legs(points, scene.tx.positions, scene.rx.positions)
    return a[:, :, None] + b[:, None, :]


def los_delays(scene: Scene) -> np.ndarray:
    tx = scene.tx.positions[:, None, :]
    rx = scene.rx.positions[None, :, :]
    return np.linalg.norm(tx - rx, axis=-1) / SPEED_OF_LIGHT


def build_dictionary(bounce: int, tau_ref: float, scene: Scene, grid_step: float,
                     delay_tolerance: float, reference=(0, 0)) -> SearchDictionary:
    """Wall grid candidates whose reference-channel delay matches ``tau_ref``."""
    if bounce not in (1, 2):
        raise ValueError("bounce must be 1 or 2")
    tx = scene.tx.positions[reference[0]]
    rx = scene.rx.positions[reference[1]]
    grids = [w.grid(grid_step) for w in scene.walls]
    offsets = np.cumsum([0] + [len(g) for g in grids])
    pts, walls, nodes = [], [], []
    if bounce == 1:
        for i, g in enumerate(grids):
            d = np.linalg.norm(g - tx, axis=1) + np.linalg.norm(g - rx, axis=1)
            keep = np.abs(d / SPEED_OF_LIGHT - tau_ref) <= delay_tolerance
            pts.append(g[keep][:, None, :])
            walls.append(np.full((keep.sum(), 1), i))
            nodes.append(offsets[i] + np.flatnonzero(keep))
    else:
        for i, j in itertools.permutations(range(len(grids)), 2):
            g1, g2 = grids[i], grids[j]
            d = (np.linalg.norm(g1 - tx, axis=1)[:, None]
                 + np.linalg.norm(g1[:, None, :] - g2[None, :, :], axis=-1)
                 + np.linalg.norm(g2 - rx, axis=1)[None, :])
            # a shared corner point is a one-bounce path, not a pair
            distinct = np.linalg.norm(g1[:, None, :] - g2[None, :, :], axis=-1) > 1e-9
            ii, jj = np.nonzero((np.abs(d / SPEED_OF_LIGHT - tau_ref) <= delay_tolerance) & distinct)
            pts.append(np.stack([g1[ii], g2[jj]], axis=1))
            walls.append(np.stack([np.full(len(ii), i), np.full(len(ii), j)], axis=1))
            nodes.append(offsets[j] + jj)
    if pts:
        points = np.concatenate(pts).reshape(-1, bounce, 2)
        wall_index = np.concatenate(walls).reshape(-1, bounce).astype(int)
        node_id = np.concatenate(nodes).astype(int)
    else:
        points = np.zeros((0, bounce, 2))
        wall_index = np.zeros((0, bounce), int)
        node_id = np.zeros(0, int)
    return SearchDictionary(bounce, points, wall_index, node_id, grid_step)


# --- scoring ---------------------------------------------------------------------------


def _matched_outputs(hidden: np.ndarray, a: np.ndarray, b: np.ndarray, node_id: np.ndarray,
                     freqs: np.ndarray) -> np.ndarray:
    """``S[c, m, n] = sum_p exp(2j pi f_p (a[c,m] + b[c,n])) hidden[m, n, p]``."""
    c_count, m = a.shape
    n = b.shape[1]
    out = np.empty((c_count, m, n), dtype=complex)
    for node in np.unique(node_id):
        sel = np.flatnonzero(node_id == node)
        rx_phase = np.exp(2j * np.pi * b[sel[0]][:, None] * freqs)  # (N, P)
        weighted = hidden * rx_phase[None, :, :]
        tx_phase = np.exp(2j * np.pi * a[sel][:, :, None] * freqs)  # (c, M, P)
        # batched over m: (N, P) @ (P, c)
        s = np.matmul(weighted, tx_phase.transpose(1, 2, 0))  # (M, N, c)
        out[sel] = s.transpose(2, 0, 1)
    return out


def estimate_equivalent_amplitude(hidden, delays, rf: RfConfig) -> np.ndarray:
    """Per-channel least-squares gain for a unit-modulus delay regressor."""
    hidden = np.asarray(hidden)
    steer = steering_vector(delays, rf)
    return np.sum(np.conj(steer) * hidden, axis=-1) / rf.sub_band_count


def detect_blockage(amplitudes, noise_variance: float, sub_bands: int,
                    threshold_factor: float = 9.0) -> np.ndarray:
    """1 where ``|amp|^2`` clears ``threshold_factor`` times the LS noise floor."""
    if threshold_factor <= 0:
        raise ValueError("threshold_factor must be positive")
    floor = threshold_factor * noise_variance / sub_bands
    return (np.abs(amplitudes) ** 2 >= floor).astype(np.uint8)


def _local_refinement(best_points: np.ndarray, best_walls: np.ndarray, scene: Scene, step: float):
    """Candidates on a step/5 lattice within one coarse step of the arg-min."""
    fine = step / 5.0
    offsets = np.arange(-5, 6) * fine
    per_node = []
    for pt, wi in zip(best_points, best_walls):
        wall = scene.walls[wi]
        u0 = (pt - wall.start) @ wall.direction
        u = np.clip(u0 + offsets, 0.0, wall.length)
        per_node.append(np.unique(np.round(u, 12)))
    combos = np.array(list(itertools.product(*per_node)))
    pts = np.stack([scene.walls[wi].start + combos[:, k, None] * scene.walls[wi].direction
                    for k, wi in enumerate(best_walls)], axis=1)
    walls = np.tile(best_walls, (len(combos), 1))
    _, node = np.unique(combos[:, -1], return_inverse=True)
    return pts, walls, node


def m_step(hidden: np.ndarray, dictionary: SearchDictionary, scene: Scene, rf: RfConfig,
           beta: float, noise_variance: float, refine: bool = False,
           reference_delay: float = 0.0) -> PathEstimate:
    """Best dictionary candidate for the hidden data of one path."""
    if dictionary.empty:
        raise ValueError("m_step needs a non-empty dictionary")
    freqs = frequency_grid(rf)
    p = rf.sub_band_count
    energy = float(np.vdot(hidden, hidden).real)
    tx, rx = scene.tx.positions, scene.rx.positions
    scale = beta * noise_variance if beta * noise_variance > 0 else 1.0

    def score(points, node_id):
        a, b = candidate_legs(points, tx, rx)
        s = _matched_outputs(hidden, a, b, node_id, freqs)
        explained = np.sum(np.abs(s) ** 2, axis=(1, 2)) / p
        return (energy - explained) / scale, s, a, b

    obj, s, a, b = score(dictionary.points, dictionary.node_id)
    best = int(np.argmin(obj))
    points, walls = dictionary.points[best], dictionary.wall_index[best]
    best_obj, best_s, best_a, best_b = obj[best], s[best], a[best], b[best]
    if refine:
        r_pts, r_walls, r_node = _local_refinement(points, walls, scene, dictionary.grid_step)
        r_obj, r_s, r_a, r_b = score(r_pts, r_node)
        k = int(np.argmin(r_obj))
        if r_obj[k] < best_obj:
            points, walls = r_pts[k], r_walls[k]
            best_obj, best_s, best_a, best_b = r_obj[k], r_s[k], r_a[k], r_b[k]
    m, n = best_s.shape
    return PathEstimate(
        bounce_class=ONE_BOUNCE if dictionary.bounce == 1 else TWO_BOUNCE,
        scatterers=np.array(points, dtype=float),
        walls=tuple(scene.walls[i].label for i in walls),
        reference_delay=reference_delay,
        delays=best_a[:, None] + best_b[None, :],
        equivalent_amplitude=best_s / p,
        blockage_estimate=np.ones((m, n), np.uint8),
        objective_value=float(best_obj),
    )


def los_step(hidden, scene: Scene, rf: RfConfig, beta: float, noise_variance: float,
             reference_delay: float = 0.0) -> PathEstimate:
    """Zero-bounce hypothesis: delays fixed by the array geometry."""
    delays = los_delays(scene)
    amp = estimate_equivalent_amplitude(hidden, delays, rf)
    energy = float(np.vdot(hidden, hidden).real)
    explained = float(np.sum(np.abs(amp) ** 2)) * rf.sub_band_count
    scale = beta * noise_variance if beta * noise_variance > 0 else 1.0
    return PathEstimate(LOS, np.zeros((0, 2)), (), reference_delay, delays, amp,
                        np.ones(delays.shape, np.uint8), (energy - explained) / scale)


def classify_bounce(one_b: Optional[PathEstimate], two_b: Optional[PathEstimate] = None,
                    los: Optional[PathEstimate] = None) -> PathEstimate:
    """Smallest objective wins; ties go to the lower bounce order."""
    options = [h for h in (los, one_b, two_b) if h is not None]
    if not options:
        raise InfeasiblePathError("no bounce hypothesis available")
    return min(options, key=lambda h: (h.objective_value, h.bounce_order))


def e_step(state: SageState, l: int, y: np.ndarray) -> np.ndarray:
    """Hidden data of path ``l``: its reconstruction plus a beta share of the residual."""
    total = np.zeros_like(y)
    for z in state.components:
        total += z
    return state.components[l] + state.beta[l] * (y - total)


def make_beta(policy, count: int) -> np.ndarray:
    """Residual shares of the hidden data, normalised to sum(beta^2) = 1."""
    if isinstance(policy, str):
        if policy == "uniform":
            return np.full(count, 1.0 / np.sqrt(count))
        if policy == "unit":
            # every path sees the whole residual; only valid for a single path
            if count != 1:
                raise ValueError("beta policy 'unit' breaks sum(beta^2)=1 for more than one path")
            return np.ones(1)
        raise ValueError(f"unknown beta policy {policy!r}")
    beta = np.asarray(policy, dtype=float)
    if beta.shape != (count,):
        raise ValueError(f"need {count} beta weights, got {beta.shape}")
    return beta / np.linalg.norm(beta)


def _high_bounce_estimate(hidden, tau_ref, reference, rf, shape) -> PathEstimate:
    delays = np.full(shape, tau_ref)
    amp = np.zeros(shape, complex)
    amp[reference] = estimate_equivalent_amplitude(hidden[reference], tau_ref, rf)
    return PathEstimate(HIGH_BOUNCE, np.zeros((0, 2)), (), tau_ref, delays, amp,
                        np.ones(shape, np.uint8), float("nan"))


def _objective(r: np.ndarray) -> float:
    return float(np.vdot(r, r).real)


def run_gm_sage(y, scene: Scene, rf: RfConfig, opts: Optional[EstimatorOptions] = None,
                reference: Optional[ReferencePathList] = None) -> SageState:
    """Two-stage estimation on a channel tensor of shape ``(M, N, P)``."""
    opts = opts or EstimatorOptions()
    t0 = time.perf_counter()
    y = np.asarray(getattr(y, "values", y), dtype=complex)
    m, n = len(scene.tx.positions), len(scene.rx.positions)
    if y.shape != (m, n, rf.sub_band_count):
        raise ValueError(f"tensor dims {y.shape} do not match scene/rf {(m, n, rf.sub_band_count)}")
    ref = opts.reference_channel
    if reference is None:
        reference = estimate_reference_channel(y[ref], rf, opts.detection_factor_db)
    count = reference.count
    beta = make_beta(opts.beta, count)
    tol = opts.delay_tolerance_bins * rf.delay_bin
    tau_los = float(los_delays(scene)[ref])

    # keeps objective normalisation finite on noiseless input
    variance_floor = 1e-24 * max(_objective(y) / y.size, np.finfo(float).tiny)
    state = SageState(
        iteration=0,
        estimates=[None] * count,
        residual=y.copy(),
        objective_trace=[_objective(y)],
        noise_variance=max(reference.noise_floor, variance_floor),
        beta=beta,
        reference=reference,
        components=[np.zeros_like(y) for _ in range(count)],
    )
    order = np.argsort(-np.abs(reference.amplitudes), kind="stable")
    dictionaries = {}
    for l in range(count):
        tau = float(reference.delays[l])
        dictionaries[l] = (
            build_dictionary(1, tau, scene, opts.grid1, tol, ref),
            build_dictionary(2, tau, scene, opts.grid2, tol, ref),
            opts.los_hypothesis and abs(tau - tau_los) <= tol,
        )

    for it in range(1, opts.max_iters + 1):
        state.iteration = it
        for l in order:
            l = int(l)
            hidden = state.components[l] + beta[l] * state.residual
            one_dict, two_dict, los_ok = dictionaries[l]
            tau = float(reference.delays[l])
            hyps = {}
            if los_ok:
                hyps["los"] = los_step(hidden, scene, rf, beta[l], state.noise_variance, tau)
            if not one_dict.empty:
                hyps["one"] = m_step(hidden, one_dict, scene, rf, beta[l], state.noise_variance,
                                     opts.refine, tau)
            if not two_dict.empty:
                hyps["two"] = m_step(hidden, two_dict, scene, rf, beta[l], state.noise_variance,
                                     opts.refine, tau)
            if hyps:
                cand = classify_bounce(hyps.get("one"), hyps.get("two"), hyps.get("los"))
                explained = (float(np.vdot(hidden, hidden).real)
                             - cand.objective_value * beta[l] * state.noise_variance)
                noise_only = opts.high_bounce_factor * m * n * beta[l] ** 2 * state.noise_variance
                if cand.bounce_class != LOS and explained <= noise_only:
                    cand = _high_bounce_estimate(hidden, tau, ref, rf, (m, n))
            else:
                cand = _high_bounce_estimate(hidden, tau, ref, rf, (m, n))
            cand.reference_amplitude = complex(reference.amplitudes[l])

            current = _objective(state.residual)
            z_new = cand.synthesize(rf)
            r_new = state.residual + state.components[l] - z_new
            if _objective(r_new) > current and state.estimates[l] is not None:
                # generalised-EM safeguard: keep the previous geometry, refit its gains
                prev = state.estimates[l]
                prev.equivalent_amplitude = estimate_equivalent_amplitude(hidden, prev.delays, rf)
                if prev.bounce_class == HIGH_BOUNCE:
                    keep = np.zeros((m, n), bool)
                    keep[ref] = True
                    prev.equivalent_amplitude = np.where(keep, prev.equivalent_amplitude, 0)
                cand = prev
                z_new = cand.synthesize(rf)
                r_new = state.residual + state.components[l] - z_new
            state.residual = r_new
            state.components[l] = z_new
            cand.blockage_estimate = detect_blockage(cand.equivalent_amplitude, state.noise_variance,
                                                     rf.sub_band_count, opts.threshold_factor)
            state.estimates[l] = cand

        obj = _objective(state.residual)
        prev_obj = state.objective_trace[-1]
        state.objective_trace.append(obj)
        state.noise_variance = max(_residual_noise(state, m, n, rf.sub_band_count), variance_floor)
        rel = (prev_obj - obj) / prev_obj if prev_obj > 0 else 0.0
        log.info("sweep %d: objective %.6g (relative decrease %.3g)", it, obj, rel)
        if rel < opts.convergence_tol:
            state.converged = True
            break

    for est in state.estimates:
        est.blockage_estimate = detect_blockage(est.equivalent_amplitude, state.noise_variance,
                                                rf.sub_band_count, opts.threshold_factor)
        if est.bounce_class == HIGH_BOUNCE:
            flag = est.blockage_estimate[ref]
            est.blockage_estimate = np.ones((m, n), np.uint8)
            est.blockage_estimate[ref] = flag
    state.runtime = time.perf_counter() - t0
    return state


def _residual_noise(state: SageState, m: int, n: int, p: int) -> float:
    dof = sum(1 if e.bounce_class == HIGH_BOUNCE else m * n for e in state.estimates)
    free = max(m * n * p - dof, 1)
    return _objective(state.residual) / free


def global_objective(y, estimates: Sequence[PathEstimate], rf: RfConfig) -> float:
    r = np.array(y, dtype=complex, copy=True)
    for e in estimates:
        r -= e.synthesize(rf)
    return _objective(r)
