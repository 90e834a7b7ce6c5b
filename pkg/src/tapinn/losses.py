"""Training objectives: data MSE, ODE residual, in-batch triplet, Sobolev, composite."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .duffing import DuffingParams
from .errors import LengthMismatchError, NonFiniteError


class DegenerateBatchWarning(UserWarning):
    """A batch had no valid (anchor, positive, negative) triplet."""


@dataclass(frozen=True)
class LossBreakdown:
    data: float
    physics: float
    metric: float
    total: float
    alpha: float
    beta: float


def _shape(x) -> tuple:
    return np.shape(ad.value_of(x))


def data_loss(predictions, targets):
    """Mean squared error between predicted and true displacements."""
    if _shape(predictions) != _shape(targets):
        raise LengthMismatchError(
            f"predictions {_shape(predictions)} vs targets {_shape(targets)}"
        )
    if np.size(ad.value_of(targets)) < 1:
        raise LengthMismatchError("data_loss needs at least one point")
    return ad.mean(ad.power(ad.sub(predictions, targets), 2))


def ode_residual(x, x_dot, x_ddot, t, f0, p: DuffingParams):
    """Pointwise Duffing residual ``x'' + d x' + a x + b x^3 - f0 cos(w t)``."""
    forcing = np.asarray(f0) * np.cos(p.omega * np.asarray(t))
    r = x_ddot + p.delta * x_dot + p.alpha * x + p.beta * ad.power(x, 3)
    return r - forcing


def physics_residual(generator: Callable, z, f0, t_points, p: DuffingParams):
    """Mean squared ODE residual of ``generator(t, z)`` over ``t_points``.

    ``f0`` broadcasts against ``t_points`` (e.g. shape ``(B, 1)`` for ``(B, P)``
    points).  Derivatives come from second-order jets, never from an output head.
    """
    t_points = np.asarray(t_points, dtype=np.float64)
    if t_points.size == 0:
        raise ValueError("physics_residual needs at least one collocation point")
    x, xd, xdd = ad.time_derivatives(generator, z, t_points)
    r = ode_residual(x, xd, xdd, t_points, f0, p)
    loss = ad.mean(ad.power(r, 2))
    if not np.isfinite(ad.value_of(loss)):
        raise NonFiniteError("physics residual is not finite")
    return loss


def triplet_indices(labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All in-batch triplets: same label for anchor/positive (a != p), different for negative."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    a, p = np.nonzero(pos)
    neg = ~same[a]  # (n_pairs, B)
    rows, n = np.nonzero(neg)
    return a[rows], p[rows], n


def pairwise_distances(embeddings):
    """Euclidean distance matrix ``(B, B)`` of row embeddings."""
    shape = _shape(embeddings)
    b, d = shape
    diff = ad.sub(ad.reshape(embeddings, (b, 1, d)), ad.reshape(embeddings, (1, b, d)))
    return ad.sqrt(ad.sum(ad.power(diff, 2), axis=-1))


def triplet_loss(embeddings, f0_labels, margin: float = 0.2):
    """Mean hinge ``max(0, d(a,p) - d(a,n) + margin)`` over every valid triplet.

    Returns 0 and emits :class:`DegenerateBatchWarning` when the batch has no
    valid triplet (fewer than two labels, or no label with two members).
    """
    if margin <= 0:
        raise ValueError("margin must be > 0")
    if len(f0_labels) < 2:
        raise ValueError("triplet loss needs at least two embeddings")
    a, p, n = triplet_indices(f0_labels)
    if a.size == 0:
        warnings.warn("no valid triplet in batch", DegenerateBatchWarning, stacklevel=2)
        return 0.0
    dist = pairwise_distances(embeddings)
    hinge = ad.relu(ad.sub(ad.take(dist, (a, p)), ad.take(dist, (a, n))) + margin)
    return ad.mean(hinge)


def sobolev_loss(model_outputs, targets):
    """``MSE(x_hat, x) + MSE(x_dot_hat, v)``.

    Both arguments are ``(values, derivatives)`` pairs of equally shaped arrays.
    """
    (x_hat, xd_hat), (x, v) = model_outputs, targets
    return ad.add(data_loss(x_hat, x), data_loss(xd_hat, v))


def total_loss(data, physics, metric, alpha: float = 1.0, beta: float = 0.1) -> LossBreakdown:
    parts = [float(ad.value_of(v)) for v in (data, physics, metric)]
    if not all(math.isfinite(v) for v in parts):
        raise NonFiniteError(f"non-finite loss component: {parts}")
    d, ph, m = parts
    return LossBreakdown(d, ph, m, d + alpha * ph + beta * m, alpha, beta)
