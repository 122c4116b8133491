"""Scaled-down end-to-end studies: held-out comparison, mixture exploration, sine gap."""
from __future__ import annotations

import warnings
from dataclasses import replace

import numpy as np

from .metatrain import bma_from_logp, member_log_likelihoods, prepare_rollout
from .model import DataBatch, EnergyModel, init_params
from .samplers import GaussianNoise, SamplerConfig, run_chain
from .targets import GaussianMixture1D
from .tasks import batch_iterator

BASELINE_GRID = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2)


def heldout_nll(task, cfg, seed, kind="l2e", meta=None, step_size=None):
    """BMA NLL on the task's full validation split after one rollout.

    The rollout matches meta-training (same steps, burn-in, thinning and
    momentum decay); ``step_size`` overrides the config for baselines.
    A diverged chain scores ``inf``.
    """
    model, batches, theta0, _ = prepare_rollout(task, seed, cfg)
    eps = cfg.step_size if step_size is None else step_size
    sc = replace(cfg, step_size=eps).sampler_config()
    samples = run_chain(kind, model, sc, cfg.inner_steps, cfg.burnin_steps, cfg.thin, cfg.samples, seed,
                        batches=batches, theta0=theta0, meta=meta, noise=GaussianNoise(seed, 7))
    if samples.diverged:
        return float("inf")
    val = DataBatch(task.val.inputs, task.val.labels, task.val.n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return bma_from_logp(member_log_likelihoods(samples, model, val))[0]


def tune_baseline(tasks, cfg, seeds, grid=BASELINE_GRID, kind="sghmc"):
    """Step size from ``grid`` with the lowest mean held-out NLL over ``tasks``."""
    scores = {}
    for eps in grid:
        vals = [heldout_nll(t, cfg, s, kind, step_size=eps) for t, s in zip(tasks, seeds)]
        scores[eps] = float(np.mean(vals))
    best = min(scores, key=lambda e: (scores[e], e))
    return best, scores


def mixture_chain(target, kind, step_size, steps, seed, meta=None, momentum_decay=0.05, thin=1):
    """A single chain on a closed-form target; returns the post-burn-in draws."""
    cfg = SamplerConfig(step_size, momentum_decay=momentum_decay)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 11)))
    theta0 = target.init(rng)
    burnin = steps // 5
    k = (steps - burnin) // thin
    s = run_chain(kind, target, cfg, steps, burnin, thin, k, seed, theta0=theta0, meta=meta)
    return s.snapshots[:, 0], s.diverged


def basin_fractions(target, draws):
    counts = np.bincount(target.basin(draws), minlength=len(target.means))
    return counts / max(1, len(draws))


def in_mode_fractions(target, draws, radius=1.5):
    """Share of draws within ``radius`` of each mode centre.

    Unlike basin fractions this does not credit draws far out in the tails.
    """
    draws = np.asarray(draws, dtype=float).reshape(-1)
    return np.array([np.mean(np.abs(draws - m) < radius) for m in target.means])


def sine_predictive_std(samples, model, grid):
    """Std over snapshots of the network output at each ``grid`` point."""
    x = np.asarray(grid, dtype=float).reshape(-1, 1)
    outs = np.stack([model.forward(theta, x).reshape(-1) for theta in samples.snapshots])
    return outs.std(axis=0)


def sine_gap_ratio(samples, model, gap, dense_regions, num=200):
    """Mean predictive std inside ``gap`` divided by the mean over ``dense_regions``."""
    gap_std = sine_predictive_std(samples, model, np.linspace(gap[0], gap[1], num)[1:-1]).mean()
    dense = np.concatenate([sine_predictive_std(samples, model, np.linspace(a, b, num))
                            for a, b in dense_regions])
    return float(gap_std / dense.mean()), float(gap_std), float(dense.mean())


def sine_chain(train, arch, kind, cfg, total, burnin, thin, k, seed, meta=None, batch_size=32,
               prior_precision=5e-4):
    model = EnergyModel(arch, prior_precision)
    batches = batch_iterator(train, batch_size, seed)
    theta0 = init_params(arch, seed).values
    return model, run_chain(kind, model, cfg, total, burnin, thin, k, seed, batches=batches,
                            theta0=theta0, meta=meta)


__all__ = ["BASELINE_GRID", "heldout_nll", "tune_baseline", "mixture_chain", "basin_fractions", "in_mode_fractions",
           "sine_predictive_std", "sine_gap_ratio", "sine_chain", "GaussianMixture1D"]
