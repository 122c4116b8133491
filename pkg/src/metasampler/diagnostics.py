"""Chain convergence diagnostics: ESS, split-chain R-hat and update norms."""
from __future__ import annotations

import numpy as np
from scipy import stats

from .errors import ContractError

RHAT_THRESHOLD = 1.1
ESS_REPORT_SCALE = 1e5


def _autocorr(x):
    """Biased autocorrelation of every column of ``x`` (S, d) via FFT."""
    s = x.shape[0]
    xc = x - x.mean(axis=0)
    n_fft = 1 << (2 * s - 1).bit_length()
    f = np.fft.rfft(xc, n=n_fft, axis=0)
    acov = np.fft.irfft(f * np.conj(f), n=n_fft, axis=0)[:s] / s
    with np.errstate(invalid="ignore", divide="ignore"):
        return acov / acov[0]


def ess_many(traces):
    """Effective sample size of each column, with Geyer's initial positive sequence.

    Autocorrelations are summed in adjacent pairs ``rho_2m + rho_2m+1`` up to
    the first non-positive pair.  Returns ``(ess, degenerate)``; constant
    columns get ``ess = S`` and ``degenerate = True``.  ESS is capped at S.
    """
    traces = np.asarray(traces, dtype=float)
    if traces.ndim == 1:
        traces = traces[:, None]
    s, d = traces.shape
    if s < 10:
        raise ContractError(f"ESS needs at least 10 draws, got {s}")
    degenerate = np.ptp(traces, axis=0) == 0
    rho = _autocorr(traces)
    n_pairs = s // 2
    pairs = rho[:2 * n_pairs:2] + rho[1:2 * n_pairs:2]  # (n_pairs, d)
    out = np.full(d, float(s))
    for j in np.flatnonzero(~degenerate):
        g = pairs[:, j]
        stop = np.flatnonzero(g <= 0)
        m = stop[0] if stop.size else n_pairs
        tau = -1.0 + 2.0 * g[:m].sum()
        out[j] = s / tau if tau > 0 else s
    return np.minimum(out, s), degenerate


def ess(trace):
    values, _ = ess_many(np.asarray(trace, dtype=float).reshape(-1, 1))
    return float(values[0])


def coordinate_subset(layout, max_coords=1024):
    """Deterministic per-layer stratified subset of coordinate indices.

    Each layer gets a share proportional to its size (at least one index),
    spread evenly across the layer.
    """
    total = layout.size
    if total <= max_coords:
        return np.arange(total)
    picks = []
    for e in layout.entries:
        share = max(1, int(round(max_coords * e.size / total)))
        share = min(share, e.size)
        picks.append(e.offset + np.unique(np.linspace(0, e.size - 1, share).round().astype(int)))
    return np.concatenate(picks)


def ess_per_second(sample_set, coords=None, report_scale=False):
    """Median ESS over ``coords`` divided by seconds per thinning interval.

    ``report_scale`` divides the result by 1e5 for reporting.
    """
    seconds = sample_set.wall_clock_per_interval
    if seconds is None or not seconds > 0:
        raise ContractError("sample set carries no wall-clock timing")
    snaps = np.asarray(sample_set.snapshots, dtype=float)
    if coords is not None:
        snaps = snaps[:, np.asarray(coords)]
    values, _ = ess_many(snaps)
    rate = float(np.median(values)) / seconds
    return rate / ESS_REPORT_SCALE if report_scale else rate


def _rank_normalize(x):
    s = x.shape[0]
    ranks = stats.rankdata(x, axis=0)
    return stats.norm.ppf((ranks - 0.375) / (s + 0.25))


def chain_split_rhat(chain, kappa=2, rank_normalize=False):
    """Split a single chain into ``kappa`` contiguous pieces and compute R-hat.

    ``chain`` is (S, d).  Leading draws are dropped so the pieces have equal
    length.  Uses the classical between/within variance ratio; entries with
    zero within-chain variance are NaN (degenerate).
    """
    x = np.asarray(chain, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    s = x.shape[0]
    if kappa < 2 or s < 2 * kappa:
        raise ContractError(f"need kappa >= 2 and at least {2 * kappa} draws, got {s}")
    n = s // kappa
    x = x[s - n * kappa:]
    if rank_normalize:
        x = _rank_normalize(x)
    pieces = x.reshape(kappa, n, -1)
    means = pieces.mean(axis=1)
    within = pieces.var(axis=1, ddof=1).mean(axis=0)
    between = n * means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * within + between / n
    with np.errstate(invalid="ignore", divide="ignore"):
        rhat = np.sqrt(var_plus / within)
    rhat[within <= 0] = np.nan
    return rhat


def rhat_summary(rhats, layout=None, coords=None, threshold=RHAT_THRESHOLD):
    """Fraction of parameters with R-hat below ``threshold``.

    Degenerate (NaN) entries are left out of every fraction and counted
    separately.  With a ``layout`` the result also carries a per-layer
    breakdown; ``coords`` maps entries of ``rhats`` to parameter indices.
    """
    rhats = np.asarray(rhats, dtype=float)
    if rhats.size == 0:
        raise ContractError("empty R-hat vector")
    valid = ~np.isnan(rhats)

    def frac(mask):
        m = mask & valid
        return float(np.mean(rhats[m] < threshold)) if m.any() else None

    out = {"proportion": frac(np.ones_like(valid)), "degenerate": int((~valid).sum()),
           "threshold": threshold}
    if layout is not None:
        idx = np.arange(rhats.size) if coords is None else np.asarray(coords)
        per_layer = {}
        for e in layout.entries:
            mask = (idx >= e.offset) & (idx < e.offset + e.size)
            if mask.any():
                per_layer[e.name] = frac(mask)
        out["per_layer"] = per_layer
    return out


def update_norm_trace(thetas, step_size=None, nll_fn=None):
    """Squared norms of successive updates ``||theta_{t+1} - theta_t||^2``.

    With ``step_size`` the implied squared norm of the learned position
    update, ``||delta||^2 / eps^2``, is included; with ``nll_fn`` the training
    NLL of every state after the first.
    """
    thetas = np.asarray(thetas, dtype=float)
    diffs = np.diff(thetas, axis=0)
    out = {"delta_sq": np.einsum("ij,ij->i", diffs, diffs)}
    if step_size is not None:
        out["beta_sq"] = out["delta_sq"] / step_size ** 2
    if nll_fn is not None:
        out["nll"] = np.array([nll_fn(t) for t in thetas[1:]])
    return out
