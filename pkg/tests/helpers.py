"""Shared test oracles."""

import numpy as np


def rel_err(a, f):
    return abs(a - f) / max(abs(a), abs(f), 1e-6)


def fd_max_rel_error(loss, arr, analytic, n_coords=200, h=1e-5, seed=0):
    """Largest relative error between ``analytic`` and central differences of ``loss``.

    ``loss`` is a zero-argument callable reading ``arr``, which is perturbed
    in place at up to ``n_coords`` random coordinates.
    """
    flat = arr.reshape(-1)
    grad = np.asarray(analytic).reshape(-1)
    idx = np.random.default_rng(seed).permutation(flat.size)[:n_coords]
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = loss()
        flat[i] = orig - h
        fm = loss()
        flat[i] = orig
        worst = max(worst, rel_err(grad[i], (fp - fm) / (2 * h)))
    return worst


def brute_force_rates(mated, nonmated, thresholds):
    """Per-threshold recount with explicit loops."""
    fmr, fnmr = [], []
    for t in thresholds:
        fmr.append(sum(1 for d in nonmated if d < t) / len(nonmated))
        fnmr.append(sum(1 for d in mated if d >= t) / len(mated))
    return np.array(fmr), np.array(fnmr)


def brute_force_eer(mated, nonmated, thresholds):
    """EER by scanning the sweep for the first crossing, interpolating linearly."""
    fmr, fnmr = brute_force_rates(mated, nonmated, thresholds)
    for i in range(len(thresholds)):
        if fmr[i] >= fnmr[i]:
            if fmr[i] == fnmr[i] or i == 0:
                return fmr[i]
            d0, d1 = fnmr[i - 1] - fmr[i - 1], fnmr[i] - fmr[i]
            a = d0 / (d0 - d1)
            return fmr[i - 1] + a * (fmr[i] - fmr[i - 1])
    raise AssertionError("no crossing")


def brute_force_fnmr(mated, nonmated, thresholds, target):
    fmr, fnmr = brute_force_rates(mated, nonmated, thresholds)
    best = None
    for t, a, b in zip(thresholds, fmr, fnmr):
        if a <= target and (best is None or t > best[0]):
            best = (t, b)
    return best[1]
