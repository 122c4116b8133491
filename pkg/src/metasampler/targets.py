"""Closed-form energies used to check the samplers.

They expose the same ``grad(theta, batch)`` / ``value(theta, batch)``
interface as :class:`metasampler.model.EnergyModel`; ``batch`` is ignored.
``theta`` may carry leading batch axes so many chains advance at once.
"""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp


class GaussianTarget:
    """``U(theta) = 0.5 (theta - mean)^T P (theta - mean)`` for precision ``P``."""

    def __init__(self, mean, precision):
        self.mean = np.asarray(mean, dtype=float)
        p = np.asarray(precision, dtype=float)
        self.precision = np.diag(p) if p.ndim == 1 else p
        self.d = self.mean.size

    @classmethod
    def conjugate_mean(cls, data, noise_var=1.0, prior_precision=0.5):
        """Posterior of a Gaussian mean with known noise and prior N(0, 1/(2 lam))."""
        data = np.asarray(data, dtype=float)
        n, d = data.shape
        prec = n / noise_var + 2 * prior_precision
        mean = data.sum(axis=0) / noise_var / prec
        return cls(mean, np.full(d, prec))

    @property
    def covariance(self):
        return np.linalg.inv(self.precision)

    def value(self, theta, batch=None):
        diff = np.asarray(theta) - self.mean
        return 0.5 * np.einsum("...i,ij,...j->...", diff, self.precision, diff)

    def grad(self, theta, batch=None):
        return (np.asarray(theta) - self.mean) @ self.precision.T


class GaussianMixture1D:
    """``U(theta) = -log sum_j w_j N(theta; mu_j, s^2)`` in one dimension.

    For the meta-loss, a member ``theta`` explains a validation value ``y``
    through a Gaussian kernel ``N(y; theta, h^2)``, so averaging members
    gives a kernel density estimate of the target.
    """

    def __init__(self, means=(-3.0, 3.0), std=0.5, weights=None, bandwidth=0.5, init_std=1.0):
        self.means = np.asarray(means, dtype=float)
        self.std = float(std)
        w = np.ones_like(self.means) if weights is None else np.asarray(weights, dtype=float)
        self.weights = w / w.sum()
        self.bandwidth = float(bandwidth)
        self.init_std = float(init_std)
        self.d = 1

    def _log_terms(self, theta):
        z = (np.asarray(theta, dtype=float)[..., None] - self.means) / self.std
        return np.log(self.weights) - 0.5 * z * z

    def value(self, theta, batch=None):
        return -logsumexp(self._log_terms(theta), axis=-1).sum(axis=-1)

    def grad(self, theta, batch=None):
        lt = self._log_terms(theta)
        resp = np.exp(lt - logsumexp(lt, axis=-1, keepdims=True))
        diff = np.asarray(theta, dtype=float)[..., None] - self.means
        return (resp * diff).sum(axis=-1) / self.std ** 2

    def sample(self, n, rng):
        comp = rng.choice(len(self.means), size=n, p=self.weights)
        return self.means[comp] + self.std * rng.standard_normal(n)

    def init(self, rng):
        return self.init_std * rng.standard_normal(1)

    def basin(self, theta):
        """Index of the nearest mode for each value."""
        theta = np.asarray(theta, dtype=float).reshape(-1)
        return np.abs(theta[:, None] - self.means).argmin(axis=1)

    def log_likelihood(self, theta, inputs, labels):
        y = np.asarray(labels, dtype=float).reshape(-1)
        h = self.bandwidth
        return -0.5 * ((y - float(np.asarray(theta).reshape(-1)[0])) / h) ** 2 - np.log(h * np.sqrt(2 * np.pi))


class TargetTask:
    """A meta-training task whose energy is a closed-form target.

    Validation "labels" are fresh draws from the target itself, scored with
    the target's kernel likelihood.
    """

    def __init__(self, target, task_id="target", num_classes=0):
        self.target = target
        self.task_id = task_id
        self.num_classes = num_classes


class MixtureTaskDistribution:
    """Two-mode 1-D mixtures with the mode offset drawn per task."""

    def __init__(self, offsets=(2.5, 3.5), std=0.5, bandwidth=0.5, init_std=1.0):
        self.offsets = tuple(float(o) for o in offsets)
        self.std = std
        self.bandwidth = bandwidth
        self.init_std = init_std

    def sample(self, rng):
        a = float(rng.uniform(*self.offsets))
        target = GaussianMixture1D((-a, a), self.std, bandwidth=self.bandwidth, init_std=self.init_std)
        return TargetTask(target, task_id=f"mixture:{a:.4f}")
