"""Per-coordinate features and the two-headed meta-network of the learned sampler.

Every coordinate of the parameter vector is described by a row of nine
features::

    [grad, theta, momentum, ema_0.1, ema_0.5, ema_0.9, ema_0.99, ema_0.999, ema_0.9999]

Each column is rescaled to unit root-mean-square over the coordinates, then a
shared 9 -> 32 ReLU trunk feeds two scalar heads, ``alpha`` and ``beta``.
The same network is applied to every row independently.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError

EMA_DECAYS = (0.1, 0.5, 0.9, 0.99, 0.999, 0.9999)
FEATURE_NAMES = ("grad", "theta", "momentum") + tuple(f"ema_{d}" for d in EMA_DECAYS)
NUM_FEATURES = len(FEATURE_NAMES)
HIDDEN = 32
NORM_GUARD = 1e-12
NORMALIZATIONS = ("rms", "none")

_DECAYS = np.array(EMA_DECAYS)[:, None]


@dataclass(frozen=True)
class FeatureBank:
    """Exponential moving averages of the gradient, one row per decay."""

    ema: np.ndarray
    steps: int = 0

    @classmethod
    def zeros(cls, d):
        return cls(np.zeros((len(EMA_DECAYS), d)))


def update_emas(bank, grad):
    """``m <- rho * m + (1 - rho) * g`` for every decay; no bias correction."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != bank.ema.shape[1:]:
        raise ContractError("gradient and feature bank disagree in dimension")
    return FeatureBank(_DECAYS * bank.ema + (1.0 - _DECAYS) * grad, bank.steps + 1)


def normalize_features(matrix):
    """Scale each column to unit RMS over the rows; all-zero columns stay zero."""
    matrix = np.asarray(matrix, dtype=float)
    rms = np.sqrt(np.mean(matrix * matrix, axis=0))
    return matrix / np.where(rms > NORM_GUARD, rms, 1.0)


def raw_features(theta, r, grad, bank):
    theta, r, grad = (np.asarray(v, dtype=float) for v in (theta, r, grad))
    if not (theta.shape == r.shape == grad.shape == bank.ema.shape[1:]):
        raise ContractError("feature inputs must all have length d")
    f = np.empty((theta.size, NUM_FEATURES))
    f[:, 0] = grad
    f[:, 1] = theta
    f[:, 2] = r
    f[:, 3:] = bank.ema.T
    if not np.all(np.isfinite(f)):
        raise ContractError("non-finite meta-model input")
    return f


def build_features(theta, r, grad, bank, normalization="rms"):
    f = raw_features(theta, r, grad, bank)
    return normalize_features(f) if normalization == "rms" else f


@dataclass(frozen=True)
class MetaParams:
    """Trunk ``w1 (9x32), b1 (32)`` plus heads ``(wa, ba)`` and ``(wb, bb)``.

    ``flat()`` concatenates ``w1`` (row-major), ``b1``, ``wa``, ``ba``,
    ``wb``, ``bb``: 288 + 32 + 32 + 1 + 32 + 1 = 386 numbers.
    """

    w1: np.ndarray
    b1: np.ndarray
    wa: np.ndarray
    ba: np.ndarray
    wb: np.ndarray
    bb: np.ndarray
    normalization: str = field(default="rms")

    SHAPES = (("w1", (NUM_FEATURES, HIDDEN)), ("b1", (HIDDEN,)), ("wa", (HIDDEN,)),
              ("ba", (1,)), ("wb", (HIDDEN,)), ("bb", (1,)))
    SIZE = sum(int(np.prod(s)) for _, s in SHAPES)

    def flat(self):
        return np.concatenate([np.asarray(getattr(self, name), dtype=float).ravel()
                               for name, _ in self.SHAPES])

    @classmethod
    def from_flat(cls, vec, normalization="rms"):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (cls.SIZE,):
            raise ContractError(f"expected {cls.SIZE} meta-parameters, got {vec.shape}")
        parts, offset = {}, 0
        for name, shape in cls.SHAPES:
            size = int(np.prod(shape))
            parts[name] = vec[offset:offset + size].reshape(shape).copy()
            offset += size
        return cls(normalization=normalization, **parts)

    @classmethod
    def zeros(cls, normalization="rms"):
        return cls.from_flat(np.zeros(cls.SIZE), normalization)

    def perturbed(self, delta):
        return MetaParams.from_flat(self.flat() + delta, self.normalization)


def init_meta_params(seed, normalization="rms"):
    """Fan-in scaled Gaussian trunk, zero biases and zero heads.

    Zero heads make both outputs vanish, so an untrained sampler leaves
    ``theta`` fixed and only accumulates momentum noise.
    """
    rng = np.random.default_rng(seed)
    meta = MetaParams.zeros(normalization)
    return replace(meta, w1=rng.normal(0.0, np.sqrt(2.0 / NUM_FEATURES), (NUM_FEATURES, HIDDEN)))


def warm_start_meta_params(seed, normalization="none"):
    """Random trunk whose first two units carry the identity construction.

    The sampler starts as SGHMC, so a perturbation of the alpha head moves
    the chain to first order.  From all-zero heads it does not.
    """
    meta = init_meta_params(seed, normalization)
    ident = identity_meta_params(normalization)
    w1 = meta.w1.copy()
    w1[:, :2] = ident.w1[:, :2]
    return replace(ident, w1=w1)


def _hidden(meta, features):
    return np.maximum(features @ meta.w1 + meta.b1, 0.0)


def eval_alpha_beta(meta, features):
    h = _hidden(meta, features)
    return h @ meta.wa + meta.ba[0], h @ meta.wb + meta.bb[0]


def identity_meta_params(normalization="none"):
    """Weights with ``alpha == 0`` and ``beta == momentum feature``.

    Two hidden units compute ``relu(x)`` and ``relu(-x)`` of the momentum
    column and the beta head takes their difference.
    """
    w1 = np.zeros((NUM_FEATURES, HIDDEN))
    w1[2, 0], w1[2, 1] = 1.0, -1.0
    wb = np.zeros(HIDDEN)
    wb[0], wb[1] = 1.0, -1.0
    meta = MetaParams.zeros(normalization)
    return replace(meta, w1=w1, wb=wb)


def kinetic_mean(meta, theta, grad, bank):
    """Mean ``f(theta)`` of the momentum and ``f * df/dtheta`` per coordinate.

    ``f`` is the beta head fed with the momentum column zeroed.  The
    derivative treats the gradient/EMA features and the column scales as
    constants, so the Jacobian is diagonal and ``f * df/dtheta`` is the
    gradient of ``0.5 * ||f(theta)||^2`` under that convention.
    """
    raw = raw_features(theta, np.zeros_like(theta), grad, bank)
    scale = np.ones(NUM_FEATURES)
    if meta.normalization == "rms":
        rms = np.sqrt(np.mean(raw * raw, axis=0))
        scale = np.where(rms > NORM_GUARD, rms, 1.0)
    pre = (raw / scale) @ meta.w1 + meta.b1
    active = pre > 0
    f = np.where(active, pre, 0.0) @ meta.wb + meta.bb[0]
    dfdtheta = (active * meta.w1[1]) @ meta.wb / scale[1]
    return f, f * dfdtheta
