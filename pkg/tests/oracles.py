"""Independent reference implementations used as test oracles.

Nothing here imports the estimator; delays, candidate sets and least-squares
fits are recomputed from first principles.
"""

import itertools

import numpy as np

C = 299_792_458.0


def wall_points(start, end, step):
    start, end = np.asarray(start, float), np.asarray(end, float)
    length = np.linalg.norm(end - start)
    count = int(np.floor(length / step + 1e-9)) + 1
    t = np.arange(count) * step / length
    return start + t[:, None] * (end - start)


def all_hypotheses(walls, step1, step2):
    """Every one-bounce grid point and every ordered two-wall grid pair.

    Pairs whose two points coincide (a shared corner) are left out.

    ``walls`` is a list of (start, end) tuples. Returns a list of ``(K, 2)``
    arrays.
    """
    grids1 = [wall_points(a, b, step1) for a, b in walls]
    grids2 = [wall_points(a, b, step2) for a, b in walls]
    hyps = [g[i:i + 1].copy() for g in grids1 for i in range(len(g))]
    for i, j in itertools.permutations(range(len(walls)), 2):
        for p in grids2[i]:
            for q in grids2[j]:
                if np.linalg.norm(p - q) > 1e-9:
                    hyps.append(np.array([p, q]))
    return hyps


def chain_delays(points, tx, rx):
    """Per-channel delay (M, N) through a fixed chain of scatterers."""
    out = np.zeros((len(tx), len(rx)))
    for m, t in enumerate(tx):
        for n, r in enumerate(rx):
            route = [t, *points, r]
            out[m, n] = sum(np.linalg.norm(np.subtract(route[k + 1], route[k]))
                            for k in range(len(route) - 1)) / C
    return out


def steering(delays, freqs):
    return np.exp(-2j * np.pi * delays[..., None] * freqs)


def joint_residual(y, bases):
    """Residual energy of the per-channel joint LS fit of several delay regressors."""
    m_count, n_count, _ = y.shape
    total = 0.0
    for m in range(m_count):
        for n in range(n_count):
            a = np.stack([b[m, n] for b in bases], axis=1)
            coef, *_ = np.linalg.lstsq(a, y[m, n], rcond=None)
            r = y[m, n] - a @ coef
            total += float(np.vdot(r, r).real)
    return total


def exhaustive_joint_search(y, hyps, tx, rx, freqs, count):
    """Arg-min over all unordered ``count``-subsets of hypotheses.

    Returns ``(indices, objective)``; the joint objective is the residual
    energy after a per-channel LS fit of all paths' amplitudes together.
    """
    bases = [steering(chain_delays(h, tx, rx), freqs) for h in hyps]
    if count == 1:
        scores = [joint_residual(y, [b]) for b in bases]
        k = int(np.argmin(scores))
        return (k,), scores[k]
    # two paths: closed form per channel with a 2x2 Gram matrix
    s = np.stack(bases)  # (H, M, N, P)
    p = s.shape[-1]
    energy = np.sum(np.abs(y) ** 2)
    b = np.einsum("hmnp,mnp->hmn", s.conj(), y)
    g = np.einsum("hmnp,kmnp->hkmn", s.conj(), s)
    best, best_pair = np.inf, None
    for i in range(len(hyps) - 1):
        g12 = g[i, i + 1:]  # (H', M, N)
        b1 = b[i][None]
        b2 = b[i + 1:]
        det = p * p - np.abs(g12) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            # explained energy b^H G^{-1} b for G = [[p, g12], [conj(g12), p]]
            quad = (p * (np.abs(b1) ** 2 + np.abs(b2) ** 2)
                    - 2 * np.real(np.conj(b1) * g12 * b2)) / det
        quad = np.where(det > 1e-9 * p * p, quad, np.abs(b1) ** 2 / p)
        score = energy - quad.sum(axis=(1, 2))
        j = int(np.argmin(score))
        if score[j] < best:
            best, best_pair = float(score[j]), (i, i + 1 + j)
    return best_pair, best
