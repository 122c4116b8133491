"""Linear-interpolation loss paths and weight cosine similarity between snapshots."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .metrics import accuracy, nll


@dataclass(frozen=True)
class PathSpec:
    theta_a: np.ndarray
    theta_b: np.ndarray
    num_points: int = 21

    def __post_init__(self):
        if self.num_points < 2:
            raise ContractError("a path needs at least two points")
        if np.shape(self.theta_a) != np.shape(self.theta_b):
            raise ContractError("path endpoints have different shapes")

    def grid(self):
        return np.linspace(0.0, 1.0, self.num_points)


def classification_evaluator(model, inputs, labels):
    """``theta -> (NLL, error percent)`` on a fixed labelled set."""
    def evaluate(theta):
        p = model.predict_proba(theta, inputs)
        return nll(p, labels), 100.0 * (1.0 - accuracy(p, labels))
    return evaluate


def linear_path_losses(evaluate, spec):
    """Evaluate ``theta(t) = (1 - t) theta_a + t theta_b`` on a uniform grid.

    ``evaluate(theta)`` returns ``(loss, error_percent)``.  The endpoints are
    passed unmodified so they match direct evaluation bit for bit.
    """
    a = np.asarray(spec.theta_a, dtype=float)
    b = np.asarray(spec.theta_b, dtype=float)
    grid = spec.grid()
    out = []
    for i, t in enumerate(grid):
        if i == 0:
            theta = a
        elif i == len(grid) - 1:
            theta = b
        else:
            theta = (1.0 - t) * a + t * b
        loss, err = evaluate(theta)
        out.append((float(t), float(loss), float(err)))
    return out


def barrier(series):
    """Largest interior loss minus the larger endpoint loss."""
    losses = [loss for _, loss, _ in series]
    if len(losses) < 3:
        return 0.0
    return max(losses[1:-1]) - max(losses[0], losses[-1])


def pairwise_cosine(samples):
    """K x K cosine similarity; returns ``(matrix, zero_norm_flags)``.

    Rows of zero-norm snapshots are zero off the diagonal.
    """
    snaps = samples.snapshots if hasattr(samples, "snapshots") else np.asarray(samples, dtype=float)
    snaps = np.asarray(snaps, dtype=float)
    if snaps.ndim != 2 or len(snaps) < 1:
        raise ContractError("need a (K >= 1, d) stack of snapshots")
    norms = np.linalg.norm(snaps, axis=1)
    zero = norms == 0
    unit = snaps / np.where(zero, 1.0, norms)[:, None]
    c = np.clip(unit @ unit.T, -1.0, 1.0)
    c[zero, :] = 0.0
    c[:, zero] = 0.0
    np.fill_diagonal(c, 1.0)
    return c, zero


PATH_COLUMNS = ("pair_id", "t", "loss", "error_percent")


def write_path_csv(path, paths):
    """``paths`` maps a pair id to a series from :func:`linear_path_losses`."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PATH_COLUMNS)
        for pair_id, series in paths.items():
            for t, loss, err in series:
                w.writerow([pair_id, repr(t), repr(loss), repr(err)])
