"""Bayesian model averaging and predictive-quality metrics.

``pred`` arguments are (N, C) probability matrices; ``members`` are
(K, N, C) stacks of per-sample predictives.  Argmax ties resolve to the
lowest class index everywhere.
"""
from __future__ import annotations

import warnings

import numpy as np

from .errors import ContractError
from .model import softmax

PROB_FLOOR = 1e-300
KLD_FLOOR = 1e-12


def member_outputs(samples, model, inputs):
    """Raw network outputs for every snapshot, shape (K, N, C)."""
    snaps = samples.snapshots if hasattr(samples, "snapshots") else np.asarray(samples)
    return np.stack([model.forward(theta, inputs) for theta in snaps])


def member_probs(samples, model, inputs):
    return softmax(member_outputs(samples, model, inputs))


def bma_predict(samples, model, inputs):
    """Average of the members' softmax predictives."""
    snaps = samples.snapshots if hasattr(samples, "snapshots") else np.asarray(samples)
    if len(snaps) < 1:
        raise ContractError("BMA needs at least one sample")
    return member_probs(snaps, model, inputs).mean(axis=0)


def bma_curve(members, labels):
    """Accuracy and NLL of the running BMA over the first k members, k = 1..K."""
    running = np.cumsum(members, axis=0) / np.arange(1, len(members) + 1)[:, None, None]
    return [(k + 1, accuracy(p, labels), nll(p, labels)) for k, p in enumerate(running)]


def _check(pred, labels):
    pred = np.asarray(pred, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if pred.ndim != 2 or pred.shape[0] != labels.shape[0]:
        raise ContractError(f"predictions {pred.shape} do not match labels {labels.shape}")
    return pred, labels


def accuracy(pred, labels):
    pred, labels = _check(pred, labels)
    return float(np.mean(pred.argmax(axis=1) == labels))


def true_class_probs(pred, labels):
    pred, labels = _check(pred, labels)
    return pred[np.arange(len(labels)), labels]


def nll(pred, labels):
    p = true_class_probs(pred, labels)
    if np.any(p < PROB_FLOOR):
        warnings.warn("probabilities clamped at 1e-300 in NLL", RuntimeWarning, stacklevel=2)
        p = np.maximum(p, PROB_FLOOR)
    return float(np.mean(-np.log(p)))


def ece(pred, labels, n_bins=15):
    """Expected calibration error with equal-width confidence bins.

    Bin ``b`` holds confidences in ``(b/n_bins, (b+1)/n_bins]``; the first bin
    also takes confidence 0.
    """
    if n_bins < 1:
        raise ContractError("n_bins must be >= 1")
    pred, labels = _check(pred, labels)
    conf = pred.max(axis=1)
    correct = (pred.argmax(axis=1) == labels).astype(float)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    return float(np.abs(acc_sum - conf_sum).sum() / len(labels))


def pairwise_kld(members, labels):
    """Mean over points of ``sum_{i != j} p_i log(p_i / p_j) / (K (K - 1))``.

    ``p_i`` is member ``i``'s probability of the *labelled* class only; this is
    a true-class diversity score rather than a full-distribution KL.
    """
    members = np.asarray(members, dtype=float)
    if members.ndim != 3 or members.shape[0] < 2:
        raise ContractError("pairwise KLD needs a (K >= 2, N, C) stack")
    labels = np.asarray(labels, dtype=int)
    k = members.shape[0]
    p = np.maximum(members[:, np.arange(len(labels)), labels], KLD_FLOOR)  # (K, N)
    logp = np.log(p)
    total = k * (p * logp).sum(axis=0) - p.sum(axis=0) * logp.sum(axis=0)
    return float(np.mean(total / (k * (k - 1))))


def agreement(pred, reference):
    pred = np.asarray(pred, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if pred.shape != reference.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {reference.shape}")
    return float(np.mean(pred.argmax(axis=1) == reference.argmax(axis=1)))


def total_variation(pred, reference):
    pred = np.asarray(pred, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if pred.shape != reference.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {reference.shape}")
    return float(np.mean(0.5 * np.abs(pred - reference).sum(axis=1)))
