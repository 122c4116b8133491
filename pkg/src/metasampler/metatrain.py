"""Meta-objectives, inner-loop rollouts and the evolution-strategies outer loop."""
from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigurationError, ContractError, MetaTrainingDiverged
from .metamodel import MetaParams
from .model import DataBatch, EnergyModel, init_params
from .samplers import GaussianNoise, SamplerConfig, run_chain
from .targets import TargetTask
from .tasks import batch_iterator

LOG_FLOOR = math.log(1e-300)
ADAM_EPS = 1e-8


# -- meta-objectives --------------------------------------------------------


def _snapshots(samples):
    snaps = samples.snapshots if hasattr(samples, "snapshots") else np.asarray(samples, dtype=float)
    if len(snaps) < 1:
        raise ContractError("meta-loss needs at least one snapshot")
    return snaps


def member_log_likelihoods(samples, model, val_batch):
    """Per-member, per-point ``log p(y | x, theta_k)``, shape (K, N)."""
    snaps = _snapshots(samples)
    if len(val_batch.labels) == 0:
        raise ContractError("empty validation batch")
    return np.stack([model.log_likelihood(theta, val_batch.inputs, val_batch.labels) for theta in snaps])


def _clamp(logp):
    low = logp < LOG_FLOOR
    if np.any(low):
        warnings.warn("predictive probability clamped at 1e-300", RuntimeWarning, stacklevel=3)
        return np.where(low, LOG_FLOOR, logp), True
    return logp, False


def bma_from_logp(logp):
    """``-mean_n log((1/K) sum_k p_kn)`` from a (K, N) log-probability array."""
    logp = np.asarray(logp, dtype=float)
    mixed, clamped = _clamp(logsumexp(logp, axis=0) - math.log(logp.shape[0]))
    return float(-mixed.mean()), clamped


def ce_from_logp(logp):
    """``-(1/K) sum_k mean_n log p_kn``."""
    logp, clamped = _clamp(np.asarray(logp, dtype=float))
    return float(-logp.mean()), clamped


def bma_meta_loss(samples, model, val_batch):
    return bma_from_logp(member_log_likelihoods(samples, model, val_batch))[0]


def ce_meta_loss(samples, model, val_batch):
    return ce_from_logp(member_log_likelihoods(samples, model, val_batch))[0]


# -- configuration and state ------------------------------------------------


@dataclass(frozen=True)
class ESConfig:
    """Outer-loop and rollout settings.

    ``burnin`` defaults to ``inner_steps - samples * thin`` so the snapshots
    come from the end of the rollout.
    """

    sigma: float = 0.01
    pairs: int = 1
    inner_steps: int = 1500
    thin: int = 50
    samples: int = 10
    burnin: int | None = None
    val_batch_size: int = 128
    step_size: float = 0.01
    momentum_decay: float = 0.05
    friction: float | None = None
    temperature: float = 1.0
    sampler: str = "l2e"
    penalty_factor: float = 10.0
    clip: float = 1.0
    lr: float = 0.01
    max_consecutive_divergences: int = 5

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigurationError("sigma must be positive")
        if self.pairs < 1 or self.samples < 1 or self.thin < 1:
            raise ConfigurationError("pairs, samples and thin must be >= 1")
        if self.burnin_steps < 0 or self.burnin_steps + self.samples * self.thin > self.inner_steps:
            raise ConfigurationError("burnin + samples * thin must not exceed inner_steps")
        if not self.clip > 0 or not self.lr > 0:
            raise ConfigurationError("clip and lr must be positive")
        if self.sampler not in ("l2e", "kinetic_l2e"):
            raise ConfigurationError(f"meta-training needs a learned sampler, got {self.sampler!r}")

    @property
    def burnin_steps(self):
        return self.inner_steps - self.samples * self.thin if self.burnin is None else self.burnin

    def sampler_config(self):
        if self.friction is not None:
            return SamplerConfig(self.step_size, friction=self.friction, temperature=self.temperature)
        return SamplerConfig(self.step_size, momentum_decay=self.momentum_decay,
                             temperature=self.temperature)


@dataclass(frozen=True)
class OuterState:
    meta: MetaParams
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99

    @classmethod
    def start(cls, meta, lr=0.01):
        if not lr > 0:
            raise ConfigurationError("learning rate must be positive")
        z = np.zeros(MetaParams.SIZE)
        return cls(meta, z, z.copy(), 0, lr)


def adam_step(outer, grad):
    grad = np.asarray(grad, dtype=float)
    if grad.shape != outer.m.shape:
        raise ContractError("gradient shape does not match the meta-parameters")
    t = outer.step + 1
    m = outer.beta1 * outer.m + (1 - outer.beta1) * grad
    v = outer.beta2 * outer.v + (1 - outer.beta2) * grad * grad
    m_hat = m / (1 - outer.beta1 ** t)
    v_hat = v / (1 - outer.beta2 ** t)
    phi = outer.meta.flat() - outer.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return replace(outer, meta=MetaParams.from_flat(phi, outer.meta.normalization), m=m, v=v, step=t)


def clip_global_norm(grad, max_norm):
    if not max_norm > 0:
        raise ContractError("max_norm must be positive")
    grad = np.asarray(grad, dtype=float)
    norm = float(np.linalg.norm(grad))
    return grad * (max_norm / norm) if norm > max_norm else grad


# -- inner loop -------------------------------------------------------------


@dataclass
class Rollout:
    loss: float
    diverged: bool = False
    clamped: bool = False
    samples: object = None
    transcript: list | None = None


def _streams(seed):
    """Independent integer seeds for data order, initialization, noise and validation."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(4)]


def penalty_loss(task, cfg):
    c = getattr(task, "num_classes", 0)
    if c == 0 and hasattr(task, "train"):
        c = task.train.num_classes
    return cfg.penalty_factor * (math.log(c) if c >= 2 else 1.0)


def prepare_rollout(task, seed, cfg):
    """Model, batch stream, initial parameters and validation batch for a rollout."""
    s_batch, s_init, _, s_val = _streams(seed)
    if isinstance(task, TargetTask):
        target = task.target
        theta0 = target.init(np.random.default_rng(s_init))
        y = target.sample(cfg.val_batch_size, np.random.default_rng(s_val))
        return target, None, theta0, DataBatch(np.zeros((len(y), 1)), y, len(y))
    model = EnergyModel(task.arch, task.prior_precision)
    batches = batch_iterator(task.train, task.batch_size, s_batch)
    theta0 = init_params(task.arch, s_init).values
    val = task.val
    idx = np.random.default_rng(s_val).choice(val.n, min(cfg.val_batch_size, val.n), replace=False)
    return model, batches, theta0, DataBatch(val.inputs[idx], val.labels[idx], val.n)


def inner_loop(task, meta, cfg, seed, record=False):
    """Run one learned-sampler rollout and score its snapshots with the BMA loss.

    Everything random is derived from ``seed``, so two rollouts with the same
    seed and different ``meta`` share data order, initialization, noise and
    validation points.  A diverged chain scores ``penalty_loss``.
    """
    model, batches, theta0, val_batch = prepare_rollout(task, seed, cfg)
    noise = GaussianNoise(_streams(seed)[2], 0, record=record)
    samples = run_chain(cfg.sampler, model, cfg.sampler_config(), cfg.inner_steps, cfg.burnin_steps,
                        cfg.thin, cfg.samples, seed, batches=batches, theta0=theta0, meta=meta,
                        noise=noise)
    if samples.diverged:
        return Rollout(penalty_loss(task, cfg), True, False, samples, noise.transcript)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        loss, clamped = bma_from_logp(member_log_likelihoods(samples, model, val_batch))
    if not math.isfinite(loss):
        return Rollout(penalty_loss(task, cfg), True, clamped, samples, noise.transcript)
    return Rollout(loss, False, clamped, samples, noise.transcript)


# -- ES gradient ------------------------------------------------------------


def antithetic_estimate(loss_fn, phi, sigma, num_pairs, rng):
    """Antithetic ES gradient of ``loss_fn`` at ``phi``.

    Returns ``(grad, pairs)`` where ``pairs`` lists ``(L+, L-)`` per pair.
    ``loss_fn(phi, pair_index)`` may return a float or a ``Rollout``; a pair
    whose two rollouts both diverged contributes zero.
    """
    phi = np.asarray(phi, dtype=float)
    grad = np.zeros_like(phi)
    pairs = []
    for i in range(num_pairs):
        eta = sigma * rng.standard_normal(phi.shape)
        plus, minus = loss_fn(phi + eta, i), loss_fn(phi - eta, i)
        pairs.append((plus, minus))
        if _both_diverged(plus, minus):
            continue
        grad += (_value(plus) - _value(minus)) / (2 * sigma ** 2) * eta
    return grad / num_pairs, pairs


def _value(x):
    return x.loss if isinstance(x, Rollout) else float(x)


def _both_diverged(a, b):
    return isinstance(a, Rollout) and isinstance(b, Rollout) and a.diverged and b.diverged


def pair_seed(seed, outer_iter, pair):
    return int(np.random.SeedSequence((seed, outer_iter, pair)).generate_state(1)[0])


def _rollout_job(args):
    task, phi, normalization, cfg, seed = args
    r = inner_loop(task, MetaParams.from_flat(phi, normalization), cfg, seed)
    return Rollout(r.loss, r.diverged, r.clamped)


def es_gradient(meta, task, cfg, seed, outer_iter=0, pool=None):
    """Antithetic ES meta-gradient on one task.

    The ``+eta`` and ``-eta`` rollouts of a pair use the same rollout seed.
    With a process ``pool`` all rollouts of the iteration run concurrently.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, outer_iter, 2**31)))
    phi = meta.flat()
    if pool is None:
        def loss_fn(p, i):
            return inner_loop(task, MetaParams.from_flat(p, meta.normalization), cfg,
                              pair_seed(seed, outer_iter, i))
        return antithetic_estimate(loss_fn, phi, cfg.sigma, cfg.pairs, rng)

    etas = [cfg.sigma * rng.standard_normal(phi.shape) for _ in range(cfg.pairs)]
    jobs = []
    for i, eta in enumerate(etas):
        s = pair_seed(seed, outer_iter, i)
        jobs += [(task, phi + eta, meta.normalization, cfg, s), (task, phi - eta, meta.normalization, cfg, s)]
    results = list(pool.map(_rollout_job, jobs))
    queue = iter(results)

    def replay(p, i):
        return next(queue)
    return antithetic_estimate(replay, phi, cfg.sigma, cfg.pairs, np.random.default_rng(
        np.random.SeedSequence((seed, outer_iter, 2**31))))


# -- outer loop -------------------------------------------------------------


@dataclass
class LossRecord:
    outer_iter: int
    task_id: str
    loss_plus: float
    loss_minus: float
    grad_norm: float
    wall_clock_s: float
    diverged: int = 0

    @property
    def loss(self):
        return 0.5 * (self.loss_plus + self.loss_minus)


LOSS_COLUMNS = ("outer_iter", "task_id", "loss_plus", "loss_minus", "grad_norm", "wall_clock_s")


def write_loss_csv(path, records):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for r in records:
            w.writerow([r.outer_iter, r.task_id, repr(r.loss_plus), repr(r.loss_minus),
                        repr(r.grad_norm), f"{r.wall_clock_s:.6f}"])


@dataclass
class MetaTrainResult:
    meta: MetaParams
    records: list = field(default_factory=list)
    outer: OuterState | None = None


def meta_train(task_dist, cfg, outer_iters, seed, *, init=None, checkpoint_every=0,
               on_checkpoint=None, threads=1, progress=None):
    """Sample a task, estimate the ES gradient, clip it and take an Adam step.

    ``task_dist`` needs a ``sample(rng)`` method.  ``on_checkpoint(iter, meta)``
    is called every ``checkpoint_every`` iterations.  Raises
    :class:`MetaTrainingDiverged` after ``cfg.max_consecutive_divergences``
    iterations in a row whose rollouts all diverged.
    """
    if outer_iters < 0:
        raise ConfigurationError("outer_iters must be non-negative")
    from .metamodel import init_meta_params
    meta = init_meta_params(seed) if init is None else init
    outer = OuterState.start(meta, cfg.lr)
    task_rng = np.random.default_rng(np.random.SeedSequence((seed, 2**32 - 1)))
    records, streak = [], 0
    pool = ProcessPoolExecutor(threads) if threads > 1 else None
    t0 = time.perf_counter()
    try:
        for it in range(outer_iters):
            task = task_dist.sample(task_rng)
            grad, pairs = es_gradient(outer.meta, task, cfg, seed, it, pool)
            all_diverged = all(_both_diverged(p, m) for p, m in pairs)
            streak = streak + 1 if all_diverged else 0
            if streak >= cfg.max_consecutive_divergences:
                raise MetaTrainingDiverged(
                    f"all rollouts diverged for {streak} consecutive iterations (last at {it}); "
                    f"try a smaller step size or sigma")
            norm = float(np.linalg.norm(grad))
            outer = adam_step(outer, clip_global_norm(grad, cfg.clip))
            plus = float(np.mean([_value(p) for p, _ in pairs]))
            minus = float(np.mean([_value(m) for _, m in pairs]))
            n_div = sum(int(getattr(p, "diverged", False)) + int(getattr(m, "diverged", False))
                        for p, m in pairs)
            rec = LossRecord(it, task.task_id, plus, minus, norm, time.perf_counter() - t0, n_div)
            records.append(rec)
            if progress is not None:
                progress(rec)
            if checkpoint_every and on_checkpoint is not None and (it + 1) % checkpoint_every == 0:
                on_checkpoint(it + 1, outer.meta)
    finally:
        if pool is not None:
            pool.shutdown()
    return MetaTrainResult(outer.meta, records, outer)


def smoothed(values, window=10):
    """Trailing moving average; the first entries average what is available."""
    values = np.asarray(values, dtype=float)
    c = np.cumsum(np.insert(values, 0, 0.0))
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)
