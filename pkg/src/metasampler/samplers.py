"""Transition kernels and the chain driver.

All kernels share the same energy interface: ``model.grad(theta, batch)``
returns the stochastic gradient of the (tempered) energy.  Every kernel
integrates momentum first and then moves ``theta`` with the *new* momentum.
Noise is i.i.d. per coordinate and comes from the chain's noise stream, which
tests replace with :class:`ZeroNoise` for deterministic checks.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ChainDivergence, ConfigurationError, ContractError
from .metamodel import (FeatureBank, NORM_GUARD, build_features, eval_alpha_beta,
                        kinetic_mean, update_emas)

SAMPLER_KINDS = ("sgld", "sghmc", "psgld", "csgmcmc", "l2e", "kinetic_l2e")
LEARNED_KINDS = ("l2e", "kinetic_l2e")


# -- noise streams ----------------------------------------------------------


class GaussianNoise:
    """Standard normal draws from the substream ``(seed, chain_id)``.

    With ``record=True`` every draw is appended to ``transcript`` so two
    rollouts can be checked for common random numbers.
    """

    def __init__(self, seed, chain_id=0, record=False):
        self.rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chain_id,)))
        self.transcript = [] if record else None

    def normal(self, shape):
        z = self.rng.standard_normal(shape)
        if self.transcript is not None:
            self.transcript.append(z.copy())
        return z


class ZeroNoise:
    transcript = None

    def normal(self, shape):
        return np.zeros(shape)


# -- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "constant"  # constant | cosine_decay | cyclical
    base: float = 1e-3
    total_steps: int = 1
    num_cycles: int = 1
    exploration_ratio: float = 0.8

    def __post_init__(self):
        if self.kind not in ("constant", "cosine_decay", "cyclical"):
            raise ConfigurationError(f"unknown schedule {self.kind!r}")
        if not self.base > 0 or self.total_steps < 1:
            raise ConfigurationError("schedule needs base > 0 and total_steps >= 1")
        if self.kind == "cyclical":
            if self.num_cycles < 1:
                raise ConfigurationError("cyclical schedule needs at least one cycle")
            if not 0 < self.exploration_ratio < 1:
                raise ConfigurationError("exploration_ratio must lie in (0, 1)")

    @property
    def cycle_length(self):
        return math.ceil(self.total_steps / self.num_cycles)


def cyclical_step_size(t, schedule):
    """Cosine step size restarted every cycle, and the phase of step ``t``.

    Steps in the first ``exploration_ratio`` of a cycle are 'explore' steps
    (noise-free, never collected); the rest are 'sample' steps.
    """
    if not 0 <= t < schedule.total_steps:
        raise ContractError(f"t={t} outside [0, {schedule.total_steps})")
    length = schedule.cycle_length
    pos = t % length
    eps = schedule.base / 2 * (math.cos(math.pi * pos / length) + 1)
    phase = "explore" if pos / length < schedule.exploration_ratio else "sample"
    return eps, phase


def step_size_at(t, schedule):
    if schedule.kind == "constant":
        return schedule.base, "sample"
    if schedule.kind == "cosine_decay":
        if not 0 <= t < schedule.total_steps:
            raise ContractError(f"t={t} outside [0, {schedule.total_steps})")
        return schedule.base / 2 * (math.cos(math.pi * t / schedule.total_steps) + 1), "sample"
    return cyclical_step_size(t, schedule)


@dataclass(frozen=True)
class SamplerConfig:
    """Hyperparameters shared by all kernels.

    Friction is given either directly (``friction``) or as a per-step
    ``momentum_decay``, mapped to ``friction = momentum_decay / step_size``
    so the momentum is damped by that factor each step (for unit mass).
    """

    step_size: float
    friction: float | None = None
    momentum_decay: float | None = None
    mass: float = 1.0
    psgld_alpha: float = 0.99
    psgld_lambda: float = 1e-5
    temperature: float = 1.0
    schedule: ScheduleSpec | None = None

    def __post_init__(self):
        if not self.step_size > 0:
            raise ConfigurationError("step size must be positive")
        if self.friction is not None and self.momentum_decay is not None:
            raise ConfigurationError("give either friction or momentum_decay, not both")
        if self.friction is not None and self.friction < 0:
            raise ConfigurationError("friction must be non-negative")
        if not self.mass > 0:
            raise ConfigurationError("mass must be positive")
        if not 0 < self.psgld_alpha < 1 or not self.psgld_lambda > 0:
            raise ConfigurationError("pSGLD needs alpha in (0, 1) and lambda > 0")
        if not self.temperature >= 0:
            raise ConfigurationError("temperature must be non-negative")

    @property
    def resolved_friction(self):
        if self.friction is not None:
            return self.friction
        decay = 0.05 if self.momentum_decay is None else self.momentum_decay
        return decay / self.step_size


# -- state ------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerState:
    theta: np.ndarray
    momentum: np.ndarray
    step: int = 0
    bank: FeatureBank | None = None
    precond: np.ndarray | None = None
    noise: object = field(default_factory=ZeroNoise, compare=False, repr=False)


def init_state(theta, noise, momentum_scale=1.0, with_bank=False):
    theta = np.array(theta, dtype=float)
    r = momentum_scale * noise.normal(theta.shape)
    bank = FeatureBank.zeros(theta.shape[-1]) if with_bank else None
    return SamplerState(theta, r, 0, bank, None, noise)


def _finite(step, what, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ChainDivergence(step, what)


def _grad(state, model, batch):
    g = model.grad(state.theta, batch)
    _finite(state.step + 1, "gradient", g)
    return g


# -- kernels ----------------------------------------------------------------


def sgld_step(state, model, batch, eps, temperature=1.0):
    g = _grad(state, model, batch)
    xi = state.noise.normal(state.theta.shape)
    theta = state.theta - eps * g + math.sqrt(2 * eps * temperature) * xi
    _finite(state.step + 1, "theta", theta)
    return replace(state, theta=theta, step=state.step + 1)


def sghmc_step(state, model, batch, eps, friction, mass=1.0, temperature=1.0):
    minv = 1.0 / mass
    g = _grad(state, model, batch)
    xi = state.noise.normal(state.theta.shape)
    scale = math.sqrt(2 * friction * eps * temperature)
    r = state.momentum - eps * g - eps * friction * minv * state.momentum + scale * xi
    theta = state.theta + eps * minv * r
    _finite(state.step + 1, "state", r, theta)
    return replace(state, theta=theta, momentum=r, step=state.step + 1)


def _dataset_size(batch):
    return getattr(batch, "dataset_size_n", 1)


def psgld_step(state, model, batch, eps, alpha=0.99, lam=1e-5, temperature=1.0):
    """RMSprop-preconditioned Langevin step; the Gamma correction is omitted."""
    g = _grad(state, model, batch)
    gn = g / _dataset_size(batch)
    v = np.zeros_like(g) if state.precond is None else state.precond
    v = alpha * v + (1 - alpha) * gn * gn
    precond = 1.0 / (lam + np.sqrt(v))
    xi = state.noise.normal(state.theta.shape)
    theta = state.theta - eps * precond * g + np.sqrt(2 * precond * eps * temperature) * xi
    _finite(state.step + 1, "theta", theta)
    return replace(state, theta=theta, precond=v, step=state.step + 1)


def _replace_momentum_column(features, r, normalization):
    out = features.copy()
    if normalization == "rms":
        rms = math.sqrt(float(np.mean(r * r)))
        out[:, 2] = r / rms if rms > NORM_GUARD else r
    else:
        out[:, 2] = r
    return out


def l2e_step(state, model, batch, eps, friction, meta, temperature=1.0):
    """Learned-kinetic-energy step.

    ``alpha`` and ``beta`` are first evaluated at ``(theta_t, r_t)``; ``beta``
    is re-evaluated at ``(theta_t, r_{t+1})`` for the position update.  The
    gradient EMAs are updated once, before either evaluation.
    """
    step = state.step + 1
    g = _grad(state, model, batch)
    bank = update_emas(state.bank, g)
    features = build_features(state.theta, state.momentum, g, bank, meta.normalization)
    alpha, beta = eval_alpha_beta(meta, features)
    _finite(step, "alpha head", alpha)
    _finite(step, "beta head", beta)
    xi = state.noise.normal(state.theta.shape)
    scale = math.sqrt(2 * friction * eps * temperature)
    r = state.momentum - eps * (g + alpha + friction * beta) + scale * xi
    _finite(step, "momentum", r)
    _, beta_new = eval_alpha_beta(meta, _replace_momentum_column(features, r, meta.normalization))
    _finite(step, "beta head", beta_new)
    theta = state.theta + eps * beta_new
    _finite(step, "theta", theta)
    return replace(state, theta=theta, momentum=r, bank=bank, step=step)


def kinetic_l2e_step(state, model, batch, eps, friction, meta, temperature=1.0):
    """Step for a Gaussian momentum whose mean ``f(theta)`` is learned."""
    step = state.step + 1
    g = _grad(state, model, batch)
    bank = update_emas(state.bank, g)
    f, fdf = kinetic_mean(meta, state.theta, g, bank)
    _finite(step, "kinetic mean head", f, fdf)
    xi = state.noise.normal(state.theta.shape)
    scale = math.sqrt(2 * friction * eps * temperature)
    r = state.momentum - eps * g - eps * fdf - eps * friction * (state.momentum - f) + scale * xi
    theta = state.theta + eps * (r - f)
    _finite(step, "state", r, theta)
    return replace(state, theta=theta, momentum=r, bank=bank, step=step)


# -- chains -----------------------------------------------------------------


@dataclass
class SampleSet:
    snapshots: np.ndarray  # (K, d)
    steps: list
    burnin: int
    thin: int
    wall_clock_per_interval: float | None = None
    layout: object = None
    diverged: bool = False
    divergence_step: int | None = None
    metadata: dict = field(default_factory=dict)
    delta_sq: np.ndarray | None = None

    @property
    def K(self):
        return len(self.snapshots)

    def __len__(self):
        return len(self.snapshots)


def collection_steps(kind, config, total_steps, burnin, thin):
    """Steps at which snapshots are eligible: ``i > burnin`` and ``i % thin == 0``."""
    steps = []
    for i in range(thin, total_steps + 1, thin):
        if i <= burnin:
            continue
        if kind == "csgmcmc" and step_size_at(i - 1, _schedule(config, total_steps))[1] != "sample":
            continue
        steps.append(i)
    return steps


def _schedule(config, total_steps):
    if config.schedule is not None:
        return config.schedule
    return ScheduleSpec("constant", config.step_size, total_steps)


def _advance(kind, state, model, batch, eps, phase, friction, config, meta, T):
    if kind == "sgld":
        return sgld_step(state, model, batch, eps, T)
    if kind == "sghmc":
        return sghmc_step(state, model, batch, eps, friction, config.mass, T)
    if kind == "csgmcmc":
        return sghmc_step(state, model, batch, eps, friction, config.mass, 0.0 if phase == "explore" else T)
    if kind == "psgld":
        return psgld_step(state, model, batch, eps, config.psgld_alpha, config.psgld_lambda, T)
    if kind == "l2e":
        return l2e_step(state, model, batch, eps, friction, meta, T)
    return kinetic_l2e_step(state, model, batch, eps, friction, meta, T)


def run_chain(kind, model, config, total_steps, burnin, thin, num_samples, seed, *,
              batches=None, theta0=None, meta=None, chain_id=0, noise=None, trace=False):
    """Run one chain and collect ``num_samples`` snapshots.

    Snapshots are taken at step ``i`` (1-based) when ``i > burnin`` and
    ``i % thin == 0``; the chain stops after the last one.  The initial
    momentum is ``N(0, I)`` (``N(0, mass)`` for the hand-designed momentum
    kernels).  A divergence ends the chain early and the partial set is
    returned with ``diverged`` set.
    """
    if kind not in SAMPLER_KINDS:
        raise ConfigurationError(f"unknown sampler {kind!r}")
    if thin < 1 or burnin < 0 or num_samples < 1:
        raise ConfigurationError("need thin >= 1, burnin >= 0, num_samples >= 1")
    if burnin + num_samples * thin > total_steps:
        raise ConfigurationError("burnin + num_samples * thin exceeds total_steps")
    slots = collection_steps(kind, config, total_steps, burnin, thin)
    if len(slots) < num_samples:
        raise ConfigurationError(f"only {len(slots)} collection slots for {num_samples} samples")
    if kind in LEARNED_KINDS and meta is None:
        raise ConfigurationError(f"{kind} needs meta-parameters")
    wanted = set(slots[:num_samples])
    last = slots[num_samples - 1]

    if theta0 is None:
        from .model import init_params
        theta0 = init_params(model.arch, seed).values
    noise = GaussianNoise(seed, chain_id) if noise is None else noise
    momentum_scale = math.sqrt(config.mass) if kind in ("sghmc", "csgmcmc") else 1.0
    state = init_state(theta0, noise, momentum_scale, with_bank=kind in LEARNED_KINDS)
    if kind in ("sgld", "psgld"):
        state = replace(state, momentum=np.zeros_like(state.theta))
    schedule = _schedule(config, total_steps)
    friction = config.resolved_friction
    T = config.temperature

    snapshots, steps, durations, deltas = [], [], [], []
    diverged, div_step = False, None
    t_mark = time.perf_counter()
    for i in range(1, last + 1):
        batch = next(batches) if batches is not None else None
        eps, phase = step_size_at(i - 1, schedule)
        prev = state.theta
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                state = _advance(kind, state, model, batch, eps, phase, friction, config, meta, T)
        except ChainDivergence as exc:
            diverged, div_step = True, exc.step
            break
        if trace:
            diff = state.theta - prev
            with np.errstate(over="ignore", invalid="ignore"):
                deltas.append(float(diff @ diff))
        if i % thin == 0:
            now = time.perf_counter()
            durations.append(now - t_mark)
            t_mark = now
        if i in wanted:
            snapshots.append(state.theta.copy())
            steps.append(i)

    d = np.asarray(theta0).shape[-1]
    return SampleSet(
        snapshots=np.array(snapshots).reshape(len(snapshots), d) if snapshots else np.zeros((0, d)),
        steps=steps,
        burnin=burnin,
        thin=thin,
        wall_clock_per_interval=float(np.mean(durations)) if durations else None,
        layout=getattr(model, "layout", None),
        diverged=diverged,
        divergence_step=div_step,
        metadata={"sampler": kind, "seed": seed, "chain_id": chain_id},
        delta_sq=np.array(deltas) if trace else None,
    )
