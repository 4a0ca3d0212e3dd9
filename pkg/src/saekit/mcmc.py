"""Small MCMC utilities: univariate slice sampling and split R-hat."""
from __future__ import annotations

import math

import numpy as np


def slice_sample(x0, logf, rng, w=1.0, max_steps=32, lower=-math.inf, upper=math.inf, logf0=None):
    """One univariate slice-sampling update with stepping out and shrinkage.

    Parameters
    ----------
    x0 : float
        Current state.
    logf : callable
        Log density up to a constant.
    rng : numpy.random.Generator
    w : float
        Initial bracket width.
    max_steps : int
        Limit on stepping-out expansions (``m`` in Neal's notation).
    lower, upper : float
        Hard support bounds.

    Returns
    -------
    (x, logf(x))
    """
    f0 = logf(x0) if logf0 is None else logf0
    log_y = f0 + math.log(rng.random())
    left = x0 - w * rng.random()
    right = left + w
    j = int(max_steps * rng.random())
    k = max_steps - 1 - j
    left = max(left, lower)
    right = min(right, upper)
    while j > 0 and left > lower and logf(left) > log_y:
        left = max(left - w, lower)
        j -= 1
    while k > 0 and right < upper and logf(right) > log_y:
        right = min(right + w, upper)
        k -= 1
    while True:
        x = left + (right - left) * rng.random()
        fx = logf(x)
        if fx > log_y:
            return x, fx
        if x < x0:
            left = x
        else:
            right = x
        if right - left < 1e-14 * (1.0 + abs(x0)):
            return x0, f0


def split_rhat(chains: np.ndarray) -> np.ndarray:
    """Split R-hat of draws shaped ``(n_chains, n_iter, ...)``.

    Each chain is halved, then the classic between/within variance ratio is
    computed over the ``2 * n_chains`` half-chains. Constant parameters give 1.
    """
    x = np.asarray(chains, dtype=float)
    n = x.shape[1] // 2
    if n < 2:
        raise ValueError("need at least 4 draws per chain for split R-hat")
    halves = np.concatenate([x[:, :n], x[:, -n:]], axis=0)
    chain_means = halves.mean(axis=1)
    chain_vars = halves.var(axis=1, ddof=1)
    B = n * chain_means.var(axis=0, ddof=1)
    Wv = chain_vars.mean(axis=0)
    var_plus = (n - 1) / n * Wv + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / Wv)
    return np.where(Wv > 0, r, 1.0)
