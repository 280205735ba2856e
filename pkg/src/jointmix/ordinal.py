"""Ordered stereotype model for the longitudinal ordinal responses.

Category ``l`` of item ``j`` for a subject with group effect ``t`` has
log-odds ``a[l] + phi[l] * (b[j] + t)`` against category 1, with the
identifiability constraints ``a[1] = b[1] = phi[1] = 0`` and the monotone
score normalization ``0 = phi[1] <= ... <= phi[L] = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .data import DataError, PackedData, ResponseSet, _readonly


@dataclass(frozen=True)
class OrdinalParams:
    """Stereotype-model parameters (intercepts, category scores, item effects)."""

    a: np.ndarray
    phi: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = _readonly(self.a, float)
        phi = _readonly(self.phi, float)
        b = _readonly(self.b, float)
        if a.ndim != 1 or phi.ndim != 1 or b.ndim != 1:
            raise ValueError("a, phi and b must be 1-d")
        if a.size != phi.size:
            raise ValueError("a and phi must have the same length (one per level)")
        if a.size < 2:
            raise ValueError("need at least two response levels")
        if b.size < 1:
            raise ValueError("need at least one item")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(phi)) and np.all(np.isfinite(b))):
            raise ValueError("parameters must be finite")
        if a[0] != 0.0 or b[0] != 0.0 or phi[0] != 0.0 or phi[-1] != 1.0:
            raise ValueError("constraints a[1]=0, b[1]=0, phi[1]=0, phi[L]=1 must hold exactly")
        if np.any(np.diff(phi) < 0):
            raise ValueError("phi must be nondecreasing")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "b", b)

    @property
    def n_levels(self) -> int:
        return self.a.size

    @property
    def n_items(self) -> int:
        return self.b.size


def category_probs(item: int, group_effect: float, params: OrdinalParams) -> np.ndarray:
    """Probability of each response level for one item at a given group effect.

    Computed in log space with max subtraction, so large linear predictors do
    not overflow.  The result is a strict probability vector of length L.
    """
    if not 1 <= item <= params.n_items:
        raise IndexError(f"item must be in 1..{params.n_items}, got {item}")
    if not np.isfinite(group_effect):
        raise ValueError(f"group effect must be finite, got {group_effect!r}")
    eta = params.a + params.phi * (params.b[item - 1] + group_effect)
    eta = eta - eta.max()
    p = np.exp(eta)
    return p / p.sum()


def ordinal_loglik(responses: ResponseSet, group_effect: float, params: OrdinalParams) -> float:
    """Log-likelihood of one subject's responses for a single group effect.

    Missing cells are simply absent from ``responses`` and contribute
    nothing; an empty response set gives 0.
    """
    if responses.n_cells == 0:
        return 0.0
    counts = responses.counts(params.n_items, params.n_levels)
    eta, logz = _linear_predictor(params, np.asarray([group_effect]))
    return float(np.sum(counts * eta[0]) - counts.sum(axis=1) @ logz[0])


def ordinal_score(responses: ResponseSet, group_effect: float, params: OrdinalParams) -> np.ndarray:
    """Gradient of :func:`ordinal_loglik` over the free coordinates.

    Layout: ``[a[2..L], b[2..J], phi[2..L-1], group_effect]`` (constrained
    coordinates are excluded).
    """
    L, J = params.n_levels, params.n_items
    counts = responses.counts(J, L)
    eta, logz = _linear_predictor(params, np.asarray([group_effect]))
    probs = np.exp(eta[0] - logz[0][:, None])
    resid = counts - counts.sum(axis=1, keepdims=True) * probs
    x = params.b + group_effect
    d_a = resid.sum(axis=0)[1:]
    d_b = (resid @ params.phi)[1:]
    d_phi = (x[:, None] * resid).sum(axis=0)[1:L - 1]
    d_theta = params.phi @ resid.sum(axis=0)
    return np.concatenate([d_a, d_b, d_phi, [d_theta]])


def _linear_predictor(params: OrdinalParams, theta: np.ndarray):
    """Tables eta[r, j, l] = a[l] + phi[l] (b[j] + theta[r]) and their row log-normalizers."""
    x = params.b[None, :] + theta[:, None]
    eta = params.a[None, None, :] + params.phi[None, None, :] * x[:, :, None]
    logz = logsumexp(eta, axis=2)
    return eta, logz


def loglik_matrix(packed: PackedData, params: OrdinalParams, theta: np.ndarray) -> np.ndarray:
    """Per-subject, per-group ordinal log-likelihoods as an (n, R) matrix."""
    if packed.n_levels != params.n_levels or packed.n_items > params.n_items:
        raise DataError("data dimensions do not match the ordinal parameters")
    eta, logz = _linear_predictor(params, theta)
    eta = eta[:, :packed.n_items]
    logz = logz[:, :packed.n_items]
    n, r = packed.n, theta.size
    flat = packed.counts.reshape(n, -1) @ eta.reshape(r, -1).T
    return flat - packed.cells @ logz.T


def weighted_score_parts(packed: PackedData, params: OrdinalParams, theta: np.ndarray,
                         gamma: np.ndarray):
    """Posterior-weighted per-subject ordinal score blocks.

    Returns ``(d_theta, d_a, d_b, d_phi)`` with shapes ``(n, R-1)``,
    ``(n, L-1)``, ``(n, J-1)`` and ``(n, L-2)``; group weights are treated as
    constants.
    """
    L = params.n_levels
    eta, logz = _linear_predictor(params, theta)
    probs = np.exp(eta - logz[:, :, None])
    resid = packed.counts[:, None, :, :] - packed.cells[:, None, :, None] * probs[None, :, :, :]
    g_resid = gamma[:, :, None, None] * resid
    x = params.b[None, :] + theta[:, None]
    d_theta = np.einsum("nrjl,l->nr", g_resid, params.phi)[:, 1:]
    d_a = g_resid.sum(axis=(1, 2))[:, 1:]
    d_b = np.einsum("nrjl,l->nj", g_resid, params.phi)[:, 1:]
    d_phi = np.einsum("nrjl,rj->nl", g_resid, x)[:, 1:L - 1]
    return d_theta, d_a, d_b, d_phi
